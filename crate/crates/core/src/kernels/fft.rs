//! Discrete Fourier transforms along the last axis.
//!
//! Any length is supported (rustfft handles non-power-of-two sizes with
//! mixed-radix and Bluestein plans). The differentiable wrappers lay a
//! complex row out as `[re_0 .. re_{d-1}, im_0 .. im_{d-1}]` so everything
//! downstream stays real-valued.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        let (planner, cache) = &mut *p.borrow_mut();
        Arc::clone(cache.entry((len, inverse)).or_insert_with(|| {
            if inverse {
                planner.plan_fft_inverse(len)
            } else {
                planner.plan_fft_forward(len)
            }
        }))
    })
}

/// Unnormalised transform of every row of `buf` (row length `d`) in place.
fn transform_rows(buf: &mut [Complex64], d: usize, inverse: bool) {
    if d == 1 {
        return;
    }
    plan(d, inverse).process(buf);
}

/// Forward DFT of a real tensor along its last axis; returns `(re, im)`.
pub fn fft(x: &Tensor) -> (Tensor, Tensor) {
    let d = x.last_dim();
    let mut buf: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_rows(&mut buf, d, false);
    split(x.shape(), &buf)
}

/// Inverse DFT (normalised by `1/d`) of a complex tensor; returns `(re, im)`.
pub fn ifft(re: &Tensor, im: &Tensor) -> Result<(Tensor, Tensor)> {
    if re.shape() != im.shape() {
        return Err(Error::shape("ifft", re.shape(), im.shape()));
    }
    let d = re.last_dim();
    let mut buf: Vec<Complex64> = re
        .data()
        .iter()
        .zip(im.data())
        .map(|(&a, &b)| Complex64::new(a, b))
        .collect();
    transform_rows(&mut buf, d, true);
    let inv = 1.0 / d as f64;
    for c in &mut buf {
        *c *= inv;
    }
    Ok(split(re.shape(), &buf))
}

fn split(shape: &[usize], buf: &[Complex64]) -> (Tensor, Tensor) {
    (
        Tensor::from_parts(shape.to_vec(), buf.iter().map(|c| c.re).collect()),
        Tensor::from_parts(shape.to_vec(), buf.iter().map(|c| c.im).collect()),
    )
}

/// Rows `[.., 2d]` holding `(re | im)` to complex buffer.
fn packed_to_complex(t: &Tensor, d: usize) -> Vec<Complex64> {
    let rows = t.rows();
    let mut buf = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let row = t.row(r);
        buf.extend((0..d).map(|j| Complex64::new(row[j], row[d + j])));
    }
    buf
}

fn complex_to_packed(buf: &[Complex64], d: usize, shape: Vec<usize>) -> Tensor {
    let rows = buf.len() / d;
    let mut out = Vec::with_capacity(rows * 2 * d);
    for r in 0..rows {
        let row = &buf[r * d..(r + 1) * d];
        out.extend(row.iter().map(|c| c.re));
        out.extend(row.iter().map(|c| c.im));
    }
    Tensor::from_parts(shape, out)
}

impl<'t> Var<'t> {
    /// Real `[.., d]` → packed spectrum `[.., 2d]`.
    pub fn fft_packed(&self) -> Var<'t> {
        let d = self.value.last_dim();
        let mut buf: Vec<Complex64> =
            self.value.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        transform_rows(&mut buf, d, false);
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = 2 * d;
        let v = complex_to_packed(&buf, d, out_shape);
        let in_shape = self.shape().to_vec();
        self.tape.record(v, &[self], move |g, _| {
            // Adjoint of the forward DFT restricted to real inputs.
            let mut b = packed_to_complex(g, d);
            transform_rows(&mut b, d, true);
            vec![Some(Tensor::from_parts(
                in_shape.clone(),
                b.iter().map(|c| c.re).collect(),
            ))]
        })
    }

    /// Packed spectrum `[.., 2d]` → real part of the inverse DFT `[.., d]`.
    pub fn ifft_packed_real(&self) -> Result<Var<'t>> {
        let w = self.value.last_dim();
        if w % 2 != 0 {
            return Err(Error::shape("ifft_packed_real", self.shape(), &[w]));
        }
        let d = w / 2;
        let mut buf = packed_to_complex(&self.value, d);
        transform_rows(&mut buf, d, true);
        let inv = 1.0 / d as f64;
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = d;
        let v = Tensor::from_parts(out_shape, buf.iter().map(|c| c.re * inv).collect());
        let in_shape = self.shape().to_vec();
        Ok(self.tape.record(v, &[self], move |g, _| {
            let mut b: Vec<Complex64> =
                g.data().iter().map(|&v| Complex64::new(v * inv, 0.0)).collect();
            transform_rows(&mut b, d, false);
            vec![Some(complex_to_packed(&b, d, in_shape.clone()))]
        }))
    }
}
