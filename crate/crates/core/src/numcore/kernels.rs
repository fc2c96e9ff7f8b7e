//! Slice-level dense kernels shared by eager tensor math and the graph.
//!
//! Every output element accumulates over the inner index in ascending order,
//! independent of how many rows are processed together. Stacking utterances
//! into one batch therefore reproduces per-utterance results bit for bit.

use super::Scalar;

/// `out[p x s] = a[p x q] * b[q x s]`; `out` is overwritten.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], out: &mut [S], p: usize, q: usize, s: usize) {
    out.iter_mut().for_each(|v| *v = S::zero());
    for i in 0..p {
        let row = &mut out[i * s..(i + 1) * s];
        for k in 0..q {
            let aik = a[i * q + k];
            let brow = &b[k * s..(k + 1) * s];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[q x s] += a[p x q]^T * g[p x s]`
pub fn matmul_tn_acc<S: Scalar>(a: &[S], g: &[S], out: &mut [S], p: usize, q: usize, s: usize) {
    for i in 0..p {
        let grow = &g[i * s..(i + 1) * s];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == S::zero() {
                continue;
            }
            let orow = &mut out[k * s..(k + 1) * s];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
}

/// `out[p x q] += g[p x s] * b[q x s]^T`
pub fn matmul_nt_acc<S: Scalar>(g: &[S], b: &[S], out: &mut [S], p: usize, q: usize, s: usize) {
    for i in 0..p {
        let grow = &g[i * s..(i + 1) * s];
        for k in 0..q {
            let brow = &b[k * s..(k + 1) * s];
            let mut acc = S::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * q + k] += acc;
        }
    }
}

/// Geometry of a 1-D convolution over frames with edge-replicated padding.
///
/// Input is `[frames x in_ch]`, weight is `[width * in_ch x out_ch]` with row
/// index `tap * in_ch + c`. Output has `ceil(frames / stride)` frames; output
/// frame `t` is centred on input frame `t * stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub frames: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub width: usize,
    pub stride: usize,
}

impl Conv1dGeom {
    pub fn out_frames(&self) -> usize {
        self.frames.div_ceil(self.stride)
    }

    fn source(&self, t: usize, tap: usize) -> usize {
        let pad = (self.width - 1) / 2;
        let pos = (t * self.stride + tap) as isize - pad as isize;
        pos.clamp(0, self.frames as isize - 1) as usize
    }
}

pub fn conv1d<S: Scalar>(geom: Conv1dGeom, x: &[S], w: &[S], bias: &[S], out: &mut [S]) {
    let Conv1dGeom { in_ch, out_ch, width, .. } = geom;
    for t in 0..geom.out_frames() {
        let orow = &mut out[t * out_ch..(t + 1) * out_ch];
        orow.copy_from_slice(bias);
        for tap in 0..width {
            let src = geom.source(t, tap);
            let xrow = &x[src * in_ch..(src + 1) * in_ch];
            for (c, &xv) in xrow.iter().enumerate() {
                let wrow = &w[(tap * in_ch + c) * out_ch..(tap * in_ch + c + 1) * out_ch];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
}

/// Accumulates gradients of a [`conv1d`] into `dx`, `dw` and `db`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<S: Scalar>(
    geom: Conv1dGeom,
    x: &[S],
    w: &[S],
    dout: &[S],
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
    db: Option<&mut [S]>,
) {
    let Conv1dGeom { in_ch, out_ch, width, .. } = geom;
    let tout = geom.out_frames();
    if let Some(db) = db {
        for t in 0..tout {
            for (b, &g) in db.iter_mut().zip(&dout[t * out_ch..(t + 1) * out_ch]) {
                *b += g;
            }
        }
    }
    if let Some(dw) = dw {
        for t in 0..tout {
            let grow = &dout[t * out_ch..(t + 1) * out_ch];
            for tap in 0..width {
                let src = geom.source(t, tap);
                for c in 0..in_ch {
                    let xv = x[src * in_ch + c];
                    let wrow = &mut dw[(tap * in_ch + c) * out_ch..(tap * in_ch + c + 1) * out_ch];
                    for (d, &g) in wrow.iter_mut().zip(grow) {
                        *d += xv * g;
                    }
                }
            }
        }
    }
    if let Some(dx) = dx {
        for t in 0..tout {
            let grow = &dout[t * out_ch..(t + 1) * out_ch];
            for tap in 0..width {
                let src = geom.source(t, tap);
                for c in 0..in_ch {
                    let wrow = &w[(tap * in_ch + c) * out_ch..(tap * in_ch + c + 1) * out_ch];
                    let mut acc = S::zero();
                    for (&wv, &g) in wrow.iter().zip(grow) {
                        acc += wv * g;
                    }
                    dx[src * in_ch + c] += acc;
                }
            }
        }
    }
}
