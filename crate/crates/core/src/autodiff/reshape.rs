//! Data-movement ops. All of them are gathers with scatter-add adjoints.

use std::sync::Arc;

use super::{Op, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::scan_path::ScanPath;
use crate::tensor::{resolve_axis, Tensor};

pub(crate) fn gather_backward(x_shape: &[usize], index: &[usize], g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x_shape.to_vec());
    let od = out.data_mut();
    for (&src, gv) in index.iter().zip(g.data()) {
        od[src] += gv;
    }
    out
}

pub(crate) fn concat_backward(shapes: &[&[usize]], g: &Tensor) -> Vec<Tensor> {
    let widths: Vec<usize> = shapes.iter().map(|s| *s.last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows = g.len() / total.max(1);
    let mut outs: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
    for r in 0..rows {
        let mut off = r * total;
        for (o, &w) in outs.iter_mut().zip(&widths) {
            o.extend_from_slice(&g.data()[off..off + w]);
            off += w;
        }
    }
    outs.into_iter().zip(shapes).map(|(d, s)| Tensor::new(s.to_vec(), d).expect("concat part shape")).collect()
}

pub(crate) fn mean_axis_backward(x_shape: &[usize], g: &Tensor, outer: usize, len: usize, inner: usize) -> Tensor {
    let mut out = vec![0.0; outer * len * inner];
    let scale = 1.0 / len as f64;
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                out[(o * len + l) * inner + i] = g.data()[o * inner + i] * scale;
            }
        }
    }
    Tensor::new(x_shape.to_vec(), out).expect("mean_axis shape")
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tape {
    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return shape_err(format!("gather: {} indices for shape {:?}", index.len(), shape));
        }
        let xd = xv.data();
        let mut out = Vec::with_capacity(n);
        for &i in index.iter() {
            match xd.get(i) {
                Some(v) => out.push(*v),
                None => return shape_err(format!("gather index {i} out of range {}", xd.len())),
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Gather { x, index }, "gather")
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape { x }, "reshape")
    }

    /// Reverse index order along `axis`.
    pub fn flip(&mut self, x: Var, axis: isize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let a = resolve_axis(axis, shape.len())?;
        let len = shape[a];
        let inner: usize = shape[a + 1..].iter().product();
        let outer: usize = shape[..a].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for l in 0..len {
                let src = len - 1 - l;
                let base = (o * len + src) * inner;
                index.extend(base..base + inner);
            }
        }
        self.gather(x, Arc::new(index), shape)
    }

    /// Row `i` of the output is row `order[i]` of `x[..., L, D]`.
    pub fn gather_permute(&mut self, x: Var, order: &ScanPath) -> Result<Var> {
        self.permute_rows(x, order.indices())
    }

    /// Inverse of [`Tape::gather_permute`] for the same path.
    pub fn scatter_permute(&mut self, x: Var, order: &ScanPath) -> Result<Var> {
        let inv = order.inverse();
        self.permute_rows(x, inv.indices())
    }

    fn permute_rows(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return shape_err("gather_permute needs rank >= 2");
        }
        let r = shape.len();
        let (len, d) = (shape[r - 2], shape[r - 1]);
        if order.len() != len {
            return Err(Error::Validation(format!("path of length {} over {} rows", order.len(), len)));
        }
        let batch: usize = shape[..r - 2].iter().product();
        let mut index = Vec::with_capacity(batch * len * d);
        for b in 0..batch {
            for &src in order {
                let base = (b * len + src) * d;
                index.extend(base..base + d);
            }
        }
        self.gather(x, Arc::new(index), shape)
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute_axes(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return shape_err(format!("invalid axis permutation {perm:?} for rank {}", shape.len()));
        }
        let st = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; out_shape.len()];
        for _ in 0..n {
            index.push(counter.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
            for ax in (0..counter.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.gather(x, Arc::new(index), out_shape)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return shape_err("transpose needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute_axes(x, &perm)
    }

    /// Concatenate along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat of nothing");
        };
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return shape_err(format!("concat: {:?} vs leading {:?}", s, lead));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Concat { parts: parts.to_vec() }, "concat")
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: isize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let a = resolve_axis(axis, shape.len())?;
        let len = shape[a];
        if len == 0 {
            return shape_err("mean over empty axis");
        }
        let outer: usize = shape[..a].iter().product();
        let inner: usize = shape[a + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let scale = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = shape.clone();
        out_shape.remove(a);
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::MeanAxis { x, outer, len, inner }, "mean_axis")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let y = t.flip(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 2.0, 1.0]);
        let one = t.constant(Tensor::from_fn([1, 4], |i| i as f64));
        let y = t.flip(one, 0).unwrap();
        assert_eq!(t.value(y), t.value(one));
        assert!(t.flip(x, 1).is_err());
    }

    #[test]
    fn gather_permute_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([4, 2], |i| i as f64));
        let id = ScanPath::identity(4);
        let y = t.gather_permute(x, &id).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let rev = ScanPath::new(vec![3, 2, 1, 0]).unwrap();
        let y = t.gather_permute(x, &rev).unwrap();
        assert_eq!(t.value(y).data(), &[6.0, 7.0, 4.0, 5.0, 2.0, 3.0, 0.0, 1.0]);
        let back = t.scatter_permute(y, &rev).unwrap();
        assert_eq!(t.value(back), t.value(x));
    }

    #[test]
    fn permute_axes_matches_transpose() {
        let mut t = Tape::new();
        let v = Tensor::from_fn([2, 3, 4], |i| i as f64 * 0.5);
        let x = t.constant(v.clone());
        let y = t.transpose_last2(x).unwrap();
        assert_eq!(t.value(y), &v.transpose_last2().unwrap());
        let z = t.permute_axes(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape(z), &[4, 2, 3]);
        assert_eq!(t.value(z).at(&[3, 1, 2]), v.at(&[1, 2, 3]));
        assert!(t.permute_axes(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_mean() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_fn([2, 1], |i| i as f64));
        let b = t.constant(Tensor::from_fn([2, 2], |i| 10.0 + i as f64));
        let c = t.concat_last(&[a, b]).unwrap();
        assert_eq!(t.value(c).data(), &[0.0, 10.0, 11.0, 1.0, 12.0, 13.0]);
        let m = t.mean_axis(c, 0).unwrap();
        assert_eq!(t.value(m).data(), &[0.5, 11.0, 12.0]);
    }
}
