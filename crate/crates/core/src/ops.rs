//! Forward and backward kernels for the structured ops recorded on the tape.

use crate::tensor::{Result, Shape, Tensor3, TensorError};

/// Left zero-padding for a "same" convolution; the right side gets `k / 2`.
pub(crate) fn same_padding(kernel_size: usize) -> usize {
    (kernel_size - 1) / 2
}

/// Range of output steps `t` for which `t + shift` stays inside `0..time`.
#[inline]
fn valid_range(time: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (time as isize - shift).clamp(0, time as isize) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn check_conv(x: Shape, w: Shape, b: Option<Shape>) -> Result<()> {
    if w.channels != x.channels {
        return Err(TensorError::ShapeMismatch { op: "conv1d", left: x, right: w });
    }
    if let Some(b) = b {
        if b != Shape::new(1, w.batch, 1) {
            return Err(TensorError::ShapeMismatch { op: "conv1d bias", left: w, right: b });
        }
    }
    Ok(())
}

/// `y[b,o,t] = bias[o] + Σ_c Σ_j w[o,c,j] · x[b,c,t+j-pad]` with zeros outside the series.
pub(crate) fn conv1d_forward(x: &Tensor3, w: &Tensor3, bias: Option<&Tensor3>) -> Result<Tensor3> {
    check_conv(x.shape(), w.shape(), bias.map(Tensor3::shape))?;
    let (batch, cin, time) = (x.batch(), x.channels(), x.time());
    let (cout, k) = (w.batch(), w.time());
    let pad = same_padding(k) as isize;
    let out_shape = Shape::new(batch, cout, time);
    let mut out = vec![0.0; out_shape.len()];
    let wd = w.data();
    for b in 0..batch {
        for o in 0..cout {
            let dst = &mut out[out_shape.index(b, o, 0)..][..time];
            if let Some(bias) = bias {
                dst.fill(bias.data()[o]);
            }
            for c in 0..cin {
                let src = x.row(b, c);
                for j in 0..k {
                    let wv = wd[(o * cin + c) * k + j];
                    let shift = j as isize - pad;
                    let (lo, hi) = valid_range(time, shift);
                    if lo == hi {
                        continue;
                    }
                    let s0 = (lo as isize + shift) as usize;
                    for (d, s) in dst[lo..hi].iter_mut().zip(&src[s0..s0 + (hi - lo)]) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
    Ok(Tensor3::from_raw(out_shape, out))
}

pub(crate) struct ConvGrads {
    pub dx: Tensor3,
    pub dw: Tensor3,
    pub db: Tensor3,
}

#[allow(clippy::needless_range_loop)]
pub(crate) fn conv1d_backward(x: &Tensor3, w: &Tensor3, dy: &Tensor3) -> ConvGrads {
    let (batch, cin, time) = (x.batch(), x.channels(), x.time());
    let (cout, k) = (w.batch(), w.time());
    let pad = same_padding(k) as isize;
    let mut dx = vec![0.0; x.shape().len()];
    let mut dw = vec![0.0; w.shape().len()];
    let mut db = vec![0.0; cout];
    let wd = w.data();
    for b in 0..batch {
        for o in 0..cout {
            let g = dy.row(b, o);
            db[o] += g.iter().sum::<f64>();
            for c in 0..cin {
                let src = x.row(b, c);
                let dst = &mut dx[x.shape().index(b, c, 0)..][..time];
                for j in 0..k {
                    let wi = (o * cin + c) * k + j;
                    let shift = j as isize - pad;
                    let (lo, hi) = valid_range(time, shift);
                    if lo == hi {
                        continue;
                    }
                    let s0 = (lo as isize + shift) as usize;
                    let n = hi - lo;
                    let mut acc = 0.0;
                    for (gv, s) in g[lo..hi].iter().zip(&src[s0..s0 + n]) {
                        acc += gv * s;
                    }
                    dw[wi] += acc;
                    let wv = wd[wi];
                    for (d, gv) in dst[s0..s0 + n].iter_mut().zip(&g[lo..hi]) {
                        *d += wv * gv;
                    }
                }
            }
        }
    }
    ConvGrads {
        dx: Tensor3::from_raw(x.shape(), dx),
        dw: Tensor3::from_raw(w.shape(), dw),
        db: Tensor3::from_raw(Shape::new(1, cout, 1), db),
    }
}

pub(crate) fn check_dense(x: Shape, w: Shape, b: Option<Shape>) -> Result<()> {
    if x.time != 1 || w.time != 1 || w.channels != x.channels {
        return Err(TensorError::ShapeMismatch { op: "dense", left: x, right: w });
    }
    if let Some(b) = b {
        if b != Shape::new(1, w.batch, 1) {
            return Err(TensorError::ShapeMismatch { op: "dense bias", left: w, right: b });
        }
    }
    Ok(())
}

/// `y[b,o] = bias[o] + Σ_i w[o,i] · x[b,i]` on `B×in×1` feature batches.
pub(crate) fn dense_forward(x: &Tensor3, w: &Tensor3, bias: Option<&Tensor3>) -> Result<Tensor3> {
    check_dense(x.shape(), w.shape(), bias.map(Tensor3::shape))?;
    let (batch, nin, nout) = (x.batch(), x.channels(), w.batch());
    let mut out = Vec::with_capacity(batch * nout);
    for b in 0..batch {
        let xb = &x.data()[b * nin..(b + 1) * nin];
        for o in 0..nout {
            let wo = &w.data()[o * nin..(o + 1) * nin];
            let dot: f64 = wo.iter().zip(xb).map(|(a, b)| a * b).sum();
            out.push(dot + bias.map_or(0.0, |bv| bv.data()[o]));
        }
    }
    Ok(Tensor3::from_raw(Shape::new(batch, nout, 1), out))
}

pub(crate) fn dense_backward(x: &Tensor3, w: &Tensor3, dy: &Tensor3) -> ConvGrads {
    let (batch, nin, nout) = (x.batch(), x.channels(), w.batch());
    let mut dx = vec![0.0; batch * nin];
    let mut dw = vec![0.0; nout * nin];
    let mut db = vec![0.0; nout];
    for b in 0..batch {
        let xb = &x.data()[b * nin..(b + 1) * nin];
        for o in 0..nout {
            let g = dy.data()[b * nout + o];
            db[o] += g;
            let wo = &w.data()[o * nin..(o + 1) * nin];
            for i in 0..nin {
                dw[o * nin + i] += g * xb[i];
                dx[b * nin + i] += g * wo[i];
            }
        }
    }
    ConvGrads {
        dx: Tensor3::from_raw(x.shape(), dx),
        dw: Tensor3::from_raw(w.shape(), dw),
        db: Tensor3::from_raw(Shape::new(1, nout, 1), db),
    }
}

pub(crate) fn avg_pool_forward(x: &Tensor3) -> Tensor3 {
    let s = x.shape();
    let mut out = Vec::with_capacity(s.batch * s.channels);
    for b in 0..s.batch {
        for c in 0..s.channels {
            out.push(x.row(b, c).iter().sum::<f64>() / s.time as f64);
        }
    }
    Tensor3::from_raw(Shape::new(s.batch, s.channels, 1), out)
}
