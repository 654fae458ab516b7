use super::discretize::SsmCoeffs;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Affine map `h -> a·h + b`, the element type of the associative scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair {
    pub a: f64,
    pub b: f64,
}

impl Pair {
    pub const IDENTITY: Pair = Pair { a: 1.0, b: 0.0 };
}

/// `later ∘ earlier = (a₂a₁, a₂b₁ + b₂)`.
#[inline(always)]
pub fn combine(later: Pair, earlier: Pair) -> Pair {
    Pair { a: later.a * earlier.a, b: later.a * earlier.b + later.b }
}

/// Literal recurrence over `len` steps of `lanes` independent lanes.
///
/// `a` and `b` are `[len, lanes]`; returns `h` of the same layout with `h_{-1} = 0`.
pub fn linear_scan_sequential(a: &[f64], b: &[f64], lanes: usize, len: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), lanes * len);
    let mut h = vec![0.0; lanes * len];
    for t in 0..len {
        let row = t * lanes;
        for j in 0..lanes {
            let prev = if t == 0 { 0.0 } else { h[row - lanes + j] };
            h[row + j] = a[row + j] * prev + b[row + j];
        }
    }
    h
}

pub fn linear_scan_parallel(a: &[f64], b: &[f64], lanes: usize, len: usize) -> Vec<f64> {
    linear_scan_parallel_with(a, b, lanes, len, combine)
}

/// Up-sweep/down-sweep exclusive scan over a padded power-of-two tree,
/// followed by one combine per element to make it inclusive.
///
/// The combination tree depends only on `len`, so results are reproducible.
/// `op` is taken as a parameter so that a broken operator can be substituted
/// in mutation tests.
pub fn linear_scan_parallel_with<F>(a: &[f64], b: &[f64], lanes: usize, len: usize, op: F) -> Vec<f64>
where
    F: Fn(Pair, Pair) -> Pair + Copy,
{
    debug_assert_eq!(a.len(), lanes * len);
    if len == 0 {
        return Vec::new();
    }
    let padded = len.next_power_of_two();
    let mut ta = vec![1.0; padded * lanes];
    let mut tb = vec![0.0; padded * lanes];
    ta[..len * lanes].copy_from_slice(a);
    tb[..len * lanes].copy_from_slice(b);

    // up-sweep: node r accumulates its left sibling subtree
    let mut half = 1;
    while half < padded {
        let step = half * 2;
        for k in (0..padded).step_by(step) {
            let (l, r) = ((k + half - 1) * lanes, (k + step - 1) * lanes);
            for j in 0..lanes {
                let p = op(Pair { a: ta[r + j], b: tb[r + j] }, Pair { a: ta[l + j], b: tb[l + j] });
                ta[r + j] = p.a;
                tb[r + j] = p.b;
            }
        }
        half = step;
    }

    // down-sweep: convert subtree sums into exclusive prefixes
    let root = (padded - 1) * lanes;
    for j in 0..lanes {
        ta[root + j] = 1.0;
        tb[root + j] = 0.0;
    }
    let mut half = padded / 2;
    while half >= 1 {
        let step = half * 2;
        for k in (0..padded).step_by(step) {
            let (l, r) = ((k + half - 1) * lanes, (k + step - 1) * lanes);
            for j in 0..lanes {
                let left = Pair { a: ta[l + j], b: tb[l + j] };
                let prefix = Pair { a: ta[r + j], b: tb[r + j] };
                let right = op(left, prefix);
                ta[l + j] = prefix.a;
                tb[l + j] = prefix.b;
                ta[r + j] = right.a;
                tb[r + j] = right.b;
            }
        }
        half /= 2;
    }

    let mut h = vec![0.0; len * lanes];
    for i in 0..len * lanes {
        h[i] = op(Pair { a: a[i], b: b[i] }, Pair { a: ta[i], b: tb[i] }).b;
    }
    h
}

fn read_out(coeffs: &SsmCoeffs, h: &[f64], x: &Tensor, d_skip: Option<&Tensor>) -> Result<Tensor> {
    let (l, e, n) = (coeffs.len(), coeffs.channels(), coeffs.state());
    if x.shape() != [l, e] {
        return shape_err(format!("scan input {:?}, coefficients for [{l}, {e}]", x.shape()));
    }
    if let Some(d) = d_skip {
        if d.shape() != [e] {
            return shape_err(format!("skip coefficient {:?}, expected [{e}]", d.shape()));
        }
    }
    let c = coeffs.c.data();
    let mut y = vec![0.0; l * e];
    for t in 0..l {
        for ch in 0..e {
            let hs = &h[(t * e + ch) * n..(t * e + ch + 1) * n];
            let mut acc: f64 = hs.iter().zip(&c[t * n..(t + 1) * n]).map(|(h, c)| h * c).sum();
            if let Some(d) = d_skip {
                acc += d.data()[ch] * x.data()[t * e + ch];
            }
            y[t * e + ch] = acc;
        }
    }
    Tensor::new([l, e], y)
}

/// Reference engine: the recurrence evaluated left to right.
pub fn scan_sequential(coeffs: &SsmCoeffs, x: &Tensor, d_skip: Option<&Tensor>) -> Result<Tensor> {
    let lanes = coeffs.channels() * coeffs.state();
    let h = linear_scan_sequential(coeffs.abar.data(), coeffs.bx.data(), lanes, coeffs.len());
    read_out(coeffs, &h, x, d_skip)
}

pub fn scan_parallel(coeffs: &SsmCoeffs, x: &Tensor, d_skip: Option<&Tensor>) -> Result<Tensor> {
    scan_parallel_with(coeffs, x, d_skip, combine)
}

pub fn scan_parallel_with<F>(coeffs: &SsmCoeffs, x: &Tensor, d_skip: Option<&Tensor>, op: F) -> Result<Tensor>
where
    F: Fn(Pair, Pair) -> Pair + Copy,
{
    let lanes = coeffs.channels() * coeffs.state();
    let h = linear_scan_parallel_with(coeffs.abar.data(), coeffs.bx.data(), lanes, coeffs.len(), op);
    read_out(coeffs, &h, x, d_skip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn coeffs_1d(abar: f64, bx: &[f64], c: f64) -> SsmCoeffs {
        let l = bx.len();
        SsmCoeffs {
            abar: Tensor::full([l, 1, 1], abar),
            bx: Tensor::new([l, 1, 1], bx.to_vec()).unwrap(),
            c: Tensor::full([l, 1], c),
        }
    }

    #[test]
    fn hand_unrolled_recurrence() {
        let k = coeffs_1d(0.5, &[0.5, 0.5, 0.5], 1.0);
        let x = Tensor::new([3, 1], vec![1.0; 3]).unwrap();
        let y = scan_sequential(&k, &x, None).unwrap();
        assert_eq!(y.data(), &[0.5, 0.75, 0.875]);
        let yp = scan_parallel(&k, &x, None).unwrap();
        assert_eq!(yp.data(), &[0.5, 0.75, 0.875]);
    }

    #[test]
    fn memoryless_when_decay_is_zero() {
        let k = coeffs_1d(0.0, &[0.3, -1.0, 2.0, 0.25], 2.0);
        let x = Tensor::zeros([4, 1]);
        let y = scan_sequential(&k, &x, None).unwrap();
        assert_eq!(y.data(), &[0.6, -2.0, 4.0, 0.5]);
    }

    #[test]
    fn zero_input_zero_output() {
        let k = coeffs_1d(0.9, &[0.0; 5], 1.0);
        let x = Tensor::zeros([5, 1]);
        assert!(scan_parallel(&k, &x, None).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_step_is_exact() {
        let k = coeffs_1d(0.7, &[1.25], 3.0);
        let x = Tensor::new([1, 1], vec![2.0]).unwrap();
        let d = Tensor::vector(&[0.5]);
        let y = scan_parallel(&k, &x, Some(&d)).unwrap();
        assert_eq!(y.data(), &[3.0 * 1.25 + 0.5 * 2.0]);
    }

    #[test]
    fn non_power_of_two_lengths_match() {
        let mut rng = SplitMix64::new(3);
        for len in [1usize, 2, 3, 5, 7, 13, 31, 100] {
            let lanes = 3;
            let a: Vec<f64> = (0..len * lanes).map(|_| rng.uniform(0.0, 1.0)).collect();
            let b: Vec<f64> = (0..len * lanes).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let s = linear_scan_sequential(&a, &b, lanes, len);
            let p = linear_scan_parallel(&a, &b, lanes, len);
            for (x, y) in s.iter().zip(&p) {
                assert!((x - y).abs() <= 1e-12, "len {len}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn swapped_operator_breaks_equivalence() {
        let mut rng = SplitMix64::new(5);
        let len = 16;
        let a: Vec<f64> = (0..len).map(|_| rng.uniform(0.1, 0.9)).collect();
        let b: Vec<f64> = (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let s = linear_scan_sequential(&a, &b, 1, len);
        let p = linear_scan_parallel_with(&a, &b, 1, len, |x, y| combine(y, x));
        let err = s.iter().zip(&p).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(err > 1e-3);
    }
}
