//! Differentiable operations on [`Var`].
//!
//! "Rows" means the tensor viewed as `[rows × last_dim]`.

use std::rc::Rc;

use super::tape::Var;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().unwrap() = last;
    s
}

impl<'t> Var<'t> {
    fn unary(
        &self,
        value: Tensor,
        backward: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Var<'t> {
        self.tape
            .record(value, &[self], move |g, _| vec![Some(backward(g))])
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_shape("add", &self.value, &other.value)?;
        let v = self.value.zip_map(&other.value, |a, b| a + b)?;
        Ok(self
            .tape
            .record(v, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_shape("sub", &self.value, &other.value)?;
        let v = self.value.zip_map(&other.value, |a, b| a - b)?;
        Ok(self.tape.record(v, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        }))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_shape("mul", &self.value, &other.value)?;
        let v = self.value.zip_map(&other.value, |a, b| a * b)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        Ok(self.tape.record(v, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |x, y| x * y).unwrap()),
                needs[1].then(|| g.zip_map(&a, |x, y| x * y).unwrap()),
            ]
        }))
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_shape("div", &self.value, &other.value)?;
        let v = self.value.zip_map(&other.value, |a, b| a / b)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        Ok(self.tape.record(v, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |x, y| x / y).unwrap()),
                needs[1].then(|| {
                    let ab = a.zip_map(&b, |x, y| -x / (y * y)).unwrap();
                    g.zip_map(&ab, |x, y| x * y).unwrap()
                }),
            ]
        }))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(self.value.map(|x| x * s), move |g| g.map(|x| x * s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(self.value.map(|x| x + s), |g| g.clone())
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Var<'t> {
        self.unary(self.value.map(|x| 1.0 - x), |g| g.map(|x| -x))
    }

    pub fn square(&self) -> Var<'t> {
        let a = self.value_rc();
        self.unary(self.value.map(|x| x * x), move |g| {
            g.zip_map(&a, |g, x| 2.0 * g * x).unwrap()
        })
    }

    pub fn relu(&self) -> Var<'t> {
        let a = self.value_rc();
        self.unary(self.value.map(|x| x.max(0.0)), move |g| {
            g.zip_map(&a, |g, x| if x > 0.0 { g } else { 0.0 }).unwrap()
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let y = Rc::new(self.value.map(sigmoid));
        let yc = Rc::clone(&y);
        self.unary((*y).clone(), move |g| {
            g.zip_map(&yc, |g, y| g * y * (1.0 - y)).unwrap()
        })
    }

    pub fn tanh(&self) -> Var<'t> {
        let y = Rc::new(self.value.map(f64::tanh));
        let yc = Rc::clone(&y);
        self.unary((*y).clone(), move |g| {
            g.zip_map(&yc, |g, y| g * (1.0 - y * y)).unwrap()
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let d = self.value.last_dim();
        let mut out = (*self.value).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let y = Rc::new(out);
        let yc = Rc::clone(&y);
        self.unary((*y).clone(), move |g| {
            let mut dx = g.clone();
            for r in 0..dx.rows() {
                let yr = &yc.data()[r * d..(r + 1) * d];
                let gr = &mut dx.data_mut()[r * d..(r + 1) * d];
                let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                for (gv, yv) in gr.iter_mut().zip(yr) {
                    *gv = yv * (*gv - dot);
                }
            }
            dx
        })
    }

    /// `x[.., n] + b[n]`, broadcast over rows.
    pub fn add_row(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let d = self.value.last_dim();
        if b.value.len() != d {
            return Err(Error::shape("add_row", self.shape(), b.shape()));
        }
        let mut v = (*self.value).clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(b.value.data()) {
                *x += y;
            }
        }
        let bshape = b.shape().to_vec();
        Ok(self.tape.record(v, &[self, b], move |g, needs| {
            let db = needs[1].then(|| {
                let mut acc = vec![0.0; d];
                for r in 0..g.rows() {
                    for (a, x) in acc.iter_mut().zip(g.row(r)) {
                        *a += x;
                    }
                }
                Tensor::from_parts(bshape.clone(), acc)
            });
            vec![Some(g.clone()), db]
        }))
    }

    /// `x[.., n] ⊙ b[n]`, broadcast over rows.
    pub fn mul_row(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let d = self.value.last_dim();
        if b.value.len() != d {
            return Err(Error::shape("mul_row", self.shape(), b.shape()));
        }
        let mut v = (*self.value).clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(b.value.data()) {
                *x *= y;
            }
        }
        let (a, bv) = (self.value_rc(), b.value_rc());
        Ok(self.tape.record(v, &[self, b], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    for (x, y) in dx.row_mut(r).iter_mut().zip(bv.data()) {
                        *x *= y;
                    }
                }
                dx
            });
            let db = needs[1].then(|| {
                let mut acc = vec![0.0; d];
                for r in 0..g.rows() {
                    for ((s, gv), av) in acc.iter_mut().zip(g.row(r)).zip(a.row(r)) {
                        *s += gv * av;
                    }
                }
                Tensor::from_parts(bv.shape().to_vec(), acc)
            });
            vec![dx, db]
        }))
    }

    /// Scales row `r` by `c[r]`.
    pub fn mul_col(&self, c: &Var<'t>) -> Result<Var<'t>> {
        let rows = self.value.rows();
        if c.value.len() != rows {
            return Err(Error::shape("mul_col", self.shape(), c.shape()));
        }
        let mut v = (*self.value).clone();
        for r in 0..rows {
            let s = c.value.data()[r];
            for x in v.row_mut(r) {
                *x *= s;
            }
        }
        let (a, cv) = (self.value_rc(), c.value_rc());
        Ok(self.tape.record(v, &[self, c], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = g.clone();
                for r in 0..rows {
                    let s = cv.data()[r];
                    for x in dx.row_mut(r) {
                        *x *= s;
                    }
                }
                dx
            });
            let dc = needs[1].then(|| {
                let d: Vec<f64> = (0..rows)
                    .map(|r| g.row(r).iter().zip(a.row(r)).map(|(g, a)| g * a).sum())
                    .collect();
                Tensor::from_parts(cv.shape().to_vec(), d)
            });
            vec![dx, dc]
        }))
    }

    /// `x[.., k] · w[k × n] → [.., n]`.
    pub fn matmul(&self, w: &Var<'t>) -> Result<Var<'t>> {
        let k = self.value.last_dim();
        if w.value.rank() != 2 || w.shape()[0] != k {
            return Err(Error::shape("matmul", self.shape(), w.shape()));
        }
        let n = w.shape()[1];
        let m = self.value.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value.data(), false, w.value.data(), false, &mut out, 0.0);
        let (x, wv) = (self.value_rc(), w.value_rc());
        let v = Tensor::from_parts(with_last(self.shape(), n), out);
        Ok(self.tape.record(v, &[self, w], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, wv.data(), true, &mut dx, 0.0);
                Tensor::from_parts(x.shape().to_vec(), dx)
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0; k * n];
                gemm(k, m, n, x.data(), true, g.data(), false, &mut dw, 0.0);
                Tensor::from_parts(vec![k, n], dw)
            });
            vec![dx, dw]
        }))
    }

    /// Batched product `[b × m × k] · [b × k × n] → [b × m × n]`.
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (s, o) = (self.shape(), other.shape());
        if s.len() != 3 || o.len() != 3 || s[0] != o[0] || s[2] != o[1] {
            return Err(Error::shape("bmm", s, o));
        }
        let (b, m, k, n) = (s[0], s[1], s[2], o[2]);
        let mut out = vec![0.0; b * m * n];
        for i in 0..b {
            gemm(
                m,
                k,
                n,
                &self.value.data()[i * m * k..(i + 1) * m * k],
                false,
                &other.value.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let (x, y) = (self.value_rc(), other.value_rc());
        Ok(self.tape.record(
            Tensor::from_parts(vec![b, m, n], out),
            &[self, other],
            move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; b * m * k];
                    for i in 0..b {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &y.data()[i * k * n..(i + 1) * k * n],
                            true,
                            &mut dx[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    Tensor::from_parts(vec![b, m, k], dx)
                });
                let dy = needs[1].then(|| {
                    let mut dy = vec![0.0; b * k * n];
                    for i in 0..b {
                        gemm(
                            k,
                            m,
                            n,
                            &x.data()[i * m * k..(i + 1) * m * k],
                            true,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &mut dy[i * k * n..(i + 1) * k * n],
                            0.0,
                        );
                    }
                    Tensor::from_parts(vec![b, k, n], dy)
                });
                vec![dx, dy]
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Var<'t> {
        let s = self.shape();
        assert!(s.len() >= 2, "transpose needs rank ≥ 2");
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out_shape = s.to_vec();
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let v = transpose_batched(&self.value, r, c, out_shape.clone());
        let in_shape = s.to_vec();
        self.unary(v, move |g| transpose_batched(g, c, r, in_shape.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value.reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(self.unary(v, move |g| Tensor::from_parts(orig.clone(), g.data().to_vec())))
    }

    /// Concatenation along the last axis; leading shapes must agree.
    pub fn concat_last(parts: &[&Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().expect("concat of nothing");
        let lead = &first.shape()[..first.shape().len() - 1];
        for p in parts {
            if &p.shape()[..p.shape().len() - 1] != lead {
                return Err(Error::shape("concat_last", first.shape(), p.shape()));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.value.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = first.value.rows();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(p.value.row(r));
            }
        }
        let v = Tensor::from_parts(with_last(first.shape(), total), out);
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Ok(first.tape.record(v, parts, move |g, needs| {
            let mut offs = 0;
            let mut res = Vec::with_capacity(widths.len());
            for (i, &w) in widths.iter().enumerate() {
                res.push(needs[i].then(|| {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row(r)[offs..offs + w]);
                    }
                    Tensor::from_parts(shapes[i].clone(), d)
                }));
                offs += w;
            }
            res
        }))
    }

    /// Concatenation along the first axis; trailing shapes must agree.
    pub fn concat_rows(parts: &[&Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().expect("concat of nothing");
        let tail = &first.shape()[1..];
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.value.len()).collect();
        let mut out = Vec::with_capacity(lens.iter().sum());
        for p in parts {
            out.extend_from_slice(p.value.data());
        }
        let mut shape = first.shape().to_vec();
        shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Ok(first.tape.record(Tensor::from_parts(shape, out), parts, move |g, needs| {
            let mut offs = 0;
            let mut res = Vec::with_capacity(lens.len());
            for (i, &n) in lens.iter().enumerate() {
                res.push(needs[i].then(|| {
                    Tensor::from_parts(shapes[i].clone(), g.data()[offs..offs + n].to_vec())
                }));
                offs += n;
            }
            res
        }))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let d = self.value.last_dim();
        if start + len > d || len == 0 {
            return Err(Error::shape("slice_last", self.shape(), &[start, len]));
        }
        let rows = self.value.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.value.row(r)[start..start + len]);
        }
        let in_shape = self.shape().to_vec();
        Ok(self.unary(
            Tensor::from_parts(with_last(self.shape(), len), out),
            move |g| {
                let mut dx = Tensor::zeros(&in_shape);
                for r in 0..rows {
                    dx.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                }
                dx
            },
        ))
    }

    /// Selects (possibly repeated) slices along the first axis.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let n = self.shape()[0];
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::contract(format!(
                "gather_rows: indices must be non-empty and < {n}"
            )));
        }
        let w = self.value.len() / n;
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&self.value.data()[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        let in_shape = self.shape().to_vec();
        let idx = idx.to_vec();
        Ok(self.unary(Tensor::from_parts(shape, out), move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            for (j, &i) in idx.iter().enumerate() {
                let src = &g.data()[j * w..(j + 1) * w];
                for (a, b) in dx.data_mut()[i * w..(i + 1) * w].iter_mut().zip(src) {
                    *a += b;
                }
            }
            dx
        }))
    }

    /// Layer normalisation over the last axis with affine `gain`, `bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let d = self.value.last_dim();
        if gain.value.len() != d || bias.value.len() != d {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        let rows = self.value.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = self.value.row(r);
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(x) {
                *o = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        for r in 0..rows {
            for j in 0..d {
                out[r * d + j] = out[r * d + j] * gain.value.data()[j] + bias.value.data()[j];
            }
        }
        let xhat = Tensor::from_parts(self.shape().to_vec(), xhat);
        let gv = gain.value_rc();
        let (gshape, bshape) = (gain.shape().to_vec(), bias.shape().to_vec());
        Ok(self.tape.record(
            Tensor::from_parts(self.shape().to_vec(), out),
            &[self, gain, bias],
            move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros(xhat.shape());
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let dxhat: Vec<f64> =
                            gr.iter().zip(gv.data()).map(|(g, w)| g * w).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                    dx
                });
                let dg = needs[1].then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for ((a, gv), xv) in acc.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *a += gv * xv;
                        }
                    }
                    Tensor::from_parts(gshape.clone(), acc)
                });
                let db = needs[2].then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for (a, gv) in acc.iter_mut().zip(g.row(r)) {
                            *a += gv;
                        }
                    }
                    Tensor::from_parts(bshape.clone(), acc)
                });
                vec![dx, dg, db]
            },
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let shape = self.shape().to_vec();
        self.unary(Tensor::scalar(self.value.sum()), move |g| {
            Tensor::full(&shape, g.item())
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over the last axis, `[.., d] → [rows]`.
    pub fn row_mean(&self) -> Var<'t> {
        let d = self.value.last_dim();
        let rows = self.value.rows();
        let out: Vec<f64> = (0..rows)
            .map(|r| self.value.row(r).iter().sum::<f64>() / d as f64)
            .collect();
        let in_shape = self.shape().to_vec();
        self.unary(Tensor::from_parts(vec![rows], out), move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            for r in 0..rows {
                let s = g.data()[r] / d as f64;
                dx.row_mut(r).fill(s);
            }
            dx
        })
    }

    /// Max over the last axis, `[.., d] → [rows]`. Ties route the gradient to
    /// the lowest index.
    pub fn row_max(&self) -> Var<'t> {
        let rows = self.value.rows();
        let arg: Vec<usize> = (0..rows)
            .map(|r| {
                let row = self.value.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        let out: Vec<f64> = (0..rows).map(|r| self.value.row(r)[arg[r]]).collect();
        let in_shape = self.shape().to_vec();
        self.unary(Tensor::from_parts(vec![rows], out), move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            for r in 0..rows {
                dx.row_mut(r)[arg[r]] = g.data()[r];
            }
            dx
        })
    }

    /// Mean over the first axis of a matrix, `[r × c] → [c]`.
    pub fn col_mean(&self) -> Var<'t> {
        let d = self.value.last_dim();
        let rows = self.value.rows();
        let mut acc = vec![0.0; d];
        for r in 0..rows {
            for (a, v) in acc.iter_mut().zip(self.value.row(r)) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= rows as f64;
        }
        let in_shape = self.shape().to_vec();
        self.unary(Tensor::from_parts(vec![d], acc), move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            for r in 0..rows {
                for (o, gv) in dx.row_mut(r).iter_mut().zip(g.data()) {
                    *o = gv / rows as f64;
                }
            }
            dx
        })
    }

    /// Subtracts each row's mean.
    pub fn center_rows(&self) -> Var<'t> {
        let d = self.value.last_dim();
        let mut v = (*self.value).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = row.iter().sum::<f64>() / d as f64;
            for x in row {
                *x -= m;
            }
        }
        self.unary(v, move |g| {
            let mut dx = g.clone();
            for r in 0..dx.rows() {
                let row = dx.row_mut(r);
                let m = row.iter().sum::<f64>() / d as f64;
                for x in row {
                    *x -= m;
                }
            }
            dx
        })
    }

    /// Replaces rows flagged in `mask` with `embed` (a `[d]` vector).
    pub fn mask_rows(&self, mask: &[bool], embed: &Var<'t>) -> Result<Var<'t>> {
        let d = self.value.last_dim();
        let rows = self.value.rows();
        if mask.len() != rows || embed.value.len() != d {
            return Err(Error::shape("mask_rows", self.shape(), embed.shape()));
        }
        let mut v = (*self.value).clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                v.row_mut(r).copy_from_slice(embed.value.data());
            }
        }
        let mask = mask.to_vec();
        let eshape = embed.shape().to_vec();
        Ok(self.tape.record(v, &[self, embed], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = g.clone();
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        dx.row_mut(r).fill(0.0);
                    }
                }
                dx
            });
            let de = needs[1].then(|| {
                let mut acc = vec![0.0; d];
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for (a, gv) in acc.iter_mut().zip(g.row(r)) {
                            *a += gv;
                        }
                    }
                }
                Tensor::from_parts(eshape.clone(), acc)
            });
            vec![dx, de]
        }))
    }

    /// Mean squared difference to a constant target.
    pub fn mse_to(&self, target: &Tensor) -> Result<Var<'t>> {
        same_shape("mse_to", &self.value, target)?;
        let n = target.len() as f64;
        let diff = Rc::new(self.value.zip_map(target, |a, b| a - b)?);
        let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
        let dc = Rc::clone(&diff);
        Ok(self.unary(Tensor::scalar(loss), move |g| {
            let s = 2.0 * g.item() / n;
            dc.map(|d| d * s)
        }))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose_batched(t: &Tensor, r: usize, c: usize, out_shape: Vec<usize>) -> Tensor {
    let b = t.len() / (r * c);
    let src = t.data();
    let mut out = vec![0.0; t.len()];
    for k in 0..b {
        let base = k * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = src[base + i * c + j];
            }
        }
    }
    Tensor::from_parts(out_shape, out)
}
