use super::{Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Softplus,
    Silu,
    Sigmoid,
    Exp,
    Neg,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) as max(x, 0) + log1p(e^-|x|).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Softplus => softplus(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Neg => -x,
        }
    }

    pub(crate) fn backward(self, x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
        let xs = x.data();
        let ys = y.data();
        Tensor::from_fn(x.shape().to_vec(), |i| {
            let d = match self {
                Unary::Softplus => sigmoid(xs[i]),
                Unary::Silu => {
                    let s = sigmoid(xs[i]);
                    s * (1.0 + xs[i] * (1.0 - s))
                }
                Unary::Sigmoid => ys[i] * (1.0 - ys[i]),
                Unary::Exp => ys[i],
                Unary::Neg => -1.0,
            };
            d * g.data()[i]
        })
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Sum `g` over leading repeats down to a tensor of `n` trailing elements.
pub(crate) fn reduce_to_suffix(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    for chunk in g.data().chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub(crate) fn mul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = b.len();
    let bd = b.data();
    let ga = Tensor::from_fn(a.shape().to_vec(), |i| g.data()[i] * bd[i % n]);
    let mut gb = vec![0.0; n];
    for (i, (gv, av)) in g.data().iter().zip(a.data()).enumerate() {
        gb[i % n] += gv * av;
    }
    Ok((ga, Tensor::new(b.shape().to_vec(), gb)?))
}

pub(crate) fn matmul_backward(x: &Tensor, w: &Tensor, g: &Tensor, want_x: bool, want_w: bool) -> [Option<Tensor>; 2] {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / k.max(1);
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let gx = want_x.then(|| {
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let grow = &gd[r * n..(r + 1) * n];
            let orow = &mut out[r * k..(r + 1) * k];
            for (kk, o) in orow.iter_mut().enumerate() {
                let wrow = &wd[kk * n..(kk + 1) * n];
                *o = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
    });
    let gw = want_w.then(|| {
        let mut out = vec![0.0; k * n];
        for r in 0..rows {
            let xrow = &xd[r * k..(r + 1) * k];
            let grow = &gd[r * n..(r + 1) * n];
            for (kk, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let orow = &mut out[kk * n..(kk + 1) * n];
                for (o, gv) in orow.iter_mut().zip(grow) {
                    *o += xv * gv;
                }
            }
        }
        Tensor::new(vec![k, n], out).expect("shape preserved")
    });
    [gx, gw]
}

impl Tape {
    /// `x[..., k] · w[k, n] -> [..., n]`; the weight is shared across leading dims.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.rank() < 1 {
            return shape_err(format!("matmul {:?} x {:?}", xv.shape(), wv.shape()));
        }
        let (k, n) = (wv.shape()[0], wv.shape()[1]);
        if *xv.shape().last().unwrap() != k {
            return shape_err(format!("matmul inner dims disagree: {:?} x {:?}", xv.shape(), wv.shape()));
        }
        let rows = xv.len() / k.max(1);
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let xrow = &xd[r * k..(r + 1) * k];
            let orow = &mut out[r * n..(r + 1) * n];
            for (kk, &xval) in xrow.iter().enumerate() {
                if xval == 0.0 {
                    continue;
                }
                for (o, wval) in orow.iter_mut().zip(&wd[kk * n..(kk + 1) * n]) {
                    *o += xval * wval;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::MatMul { x, w }, "matmul")
    }

    /// `x · w + bias`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    fn broadcast_pair(&self, a: Var, b: Var, what: &str) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sa, sb) {
            Ok((a, b))
        } else if is_suffix(sb, sa) {
            Ok((b, a))
        } else {
            shape_err(format!("{what}: cannot broadcast {sa:?} with {sb:?}"))
        }
    }

    /// Elementwise sum; the shorter operand broadcasts over leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.len();
        let bd = bv.data();
        let value = Tensor::from_fn(av.shape().to_vec(), |i| av.data()[i] + bd[i % n]);
        self.push(value, Op::Add { a, b }, "add")
    }

    /// Elementwise product; the shorter operand broadcasts over leading dims.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.len();
        let bd = bv.data();
        let value = Tensor::from_fn(av.shape().to_vec(), |i| av.data()[i] * bd[i % n]);
        self.push(value, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c }, "scale")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let value = self.value(x).map(|v| kind.forward(v));
        let what = match kind {
            Unary::Softplus => "softplus",
            Unary::Silu => "silu",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Neg => "neg",
        };
        self.push(value, Op::Unary { x, kind }, what)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }

    /// `Σ_i coeffs[i] * xs[i]` with scalar coefficient nodes.
    pub fn weighted_sum(&mut self, coeffs: &[Var], xs: &[Var]) -> Result<Var> {
        if coeffs.len() != xs.len() || xs.is_empty() {
            return shape_err(format!(
                "weighted_sum needs matching non-empty lists ({} coeffs, {} terms)",
                coeffs.len(),
                xs.len()
            ));
        }
        let shape = self.shape(xs[0]).to_vec();
        let mut acc = vec![0.0; self.value(xs[0]).len()];
        for (c, x) in coeffs.iter().zip(xs) {
            let cv = self.value(*c);
            if cv.len() != 1 {
                return shape_err("weighted_sum coefficient must be scalar");
            }
            let xv = self.value(*x);
            if xv.shape() != shape.as_slice() {
                return shape_err(format!("weighted_sum term {:?} vs {:?}", xv.shape(), shape));
            }
            let c = cv.data()[0];
            if c == 0.0 {
                continue;
            }
            for (a, v) in acc.iter_mut().zip(xv.data()) {
                *a += c * v;
            }
        }
        let value = Tensor::new(shape, acc)?;
        self.push(value, Op::WeightedSum { coeffs: coeffs.to_vec(), xs: xs.to_vec() }, "weighted_sum")
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, "sum")
    }
}
