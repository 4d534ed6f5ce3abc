//! Stride-1 "same" convolution kernels (im2col + GEMM).

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Rows of the unfolded patch matrix.
    pub fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

/// Appends the patch matrix `[ci·kh·kw, n·h·w]` of the batch `x` to `cols`,
/// row by row.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut Vec<T>) {
    let (h, w, hw) = (g.h, g.w, g.hw());
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let zeros = vec![T::zero(); w];
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dy = ky as isize - ph;
                let dx = kx as isize - pw;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(x_lo as isize) as usize;
                for n in 0..g.n {
                    let plane = &x[(n * g.ci + c) * hw..(n * g.ci + c + 1) * hw];
                    for oy in 0..h {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                            cols.extend_from_slice(&zeros);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let s0 = (x_lo as isize + dx) as usize;
                        cols.extend_from_slice(&zeros[..x_lo]);
                        cols.extend_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                        cols.extend_from_slice(&zeros[x_hi..]);
                    }
                }
            }
        }
    }
}

/// Fold columns `off .. off + h·w` of `cols: [ci·kh·kw, ld]` back,
/// accumulating into `dx_n: [ci, h, w]`.
fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx_n: &mut [T], ld: usize, off: usize) {
    let (h, w, hw) = (g.h, g.w, g.hw());
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    for c in 0..g.ci {
        let plane = &mut dx_n[c * hw..(c + 1) * hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ld + off..row * ld + off + hw];
                let dy = ky as isize - ph;
                let dx = kx as isize - pw;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s0 = (x_lo as isize + dx) as usize;
                    for (d, &s) in dst[s0..s0 + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&src[oy * w + x_lo..oy * w + x_hi])
                    {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// `[n, c, hw]` to `[c, n·hw]`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for ci in 0..c {
        for ni in 0..n {
            let s = (ni * c + ci) * hw;
            out.extend_from_slice(&x[s..s + hw]);
        }
    }
    out
}

/// `[c, n·hw]` to `[n, c, hw]`.
fn from_channel_major<T: Scalar>(src: &[T], n: usize, c: usize, hw: usize, dst: &mut [T]) {
    for ci in 0..c {
        for ni in 0..n {
            let d = (ni * c + ci) * hw;
            let s = (ci * n + ni) * hw;
            dst[d..d + hw].copy_from_slice(&src[s..s + hw]);
        }
    }
}

/// Patch matrix `[ci·kh·kw, n·h·w]` of the whole batch. `None` when `x` can
/// serve as it is (a single sample under a pointwise kernel).
fn unfold<T: Scalar>(x: &[T], g: &ConvGeom) -> Option<Vec<T>> {
    let (hw, k) = (g.hw(), g.k());
    if g.is_pointwise() {
        return (g.n > 1).then(|| to_channel_major(x, g.n, g.ci, hw));
    }
    let mut cols = Vec::with_capacity(k * g.n * hw);
    im2col(x, g, &mut cols);
    debug_assert_eq!(cols.len(), k * g.n * hw);
    Some(cols)
}

/// Returns the output `[n, co, h, w]` and the patch matrix when one had to
/// be built (kept for the weight gradient). The whole batch goes through a
/// single GEMM.
pub(crate) fn forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> (Vec<T>, Option<Vec<T>>) {
    let (hw, k) = (g.hw(), g.k());
    let nhw = g.n * hw;
    let cols = unfold(x, g);
    let b_mat = cols.as_deref().unwrap_or(x);
    let mut out = vec![T::zero(); g.n * g.co * hw];
    if g.n == 1 {
        T::gemm(false, false, g.co, nhw, k, weight, b_mat, T::zero(), &mut out);
    } else {
        let mut tmp = vec![T::zero(); g.co * nhw];
        T::gemm(false, false, g.co, nhw, k, weight, b_mat, T::zero(), &mut tmp);
        from_channel_major(&tmp, g.n, g.co, hw, &mut out);
    }
    if let Some(b) = bias {
        for o_n in out.chunks_mut(g.co * hw) {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut o_n[co * hw..(co + 1) * hw] {
                    *v = *v + bv;
                }
            }
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    weight: &[T],
    cols: Option<&[T]>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (hw, k) = (g.hw(), g.k());
    let nhw = g.n * hw;
    let dy_owned = (g.n > 1).then(|| to_channel_major(dy, g.n, g.co, hw));
    let dy_cm = dy_owned.as_deref().unwrap_or(dy);

    let dw = need_dw.then(|| {
        let rebuilt;
        let b_mat = match cols {
            Some(c) => c,
            None => {
                rebuilt = unfold(x, g);
                rebuilt.as_deref().unwrap_or(x)
            }
        };
        let mut dw = vec![T::zero(); g.co * k];
        T::gemm(false, true, g.co, k, nhw, dy_cm, b_mat, T::zero(), &mut dw);
        dw
    });
    let db = need_db.then(|| {
        (0..g.co)
            .map(|co| dy_cm[co * nhw..(co + 1) * nhw].iter().copied().sum::<T>())
            .collect()
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); k * nhw];
        T::gemm(true, false, k, nhw, g.co, weight, dy_cm, T::zero(), &mut dcols);
        if g.is_pointwise() {
            if g.n == 1 {
                return dcols;
            }
            let mut dx = vec![T::zero(); g.n * g.ci * hw];
            from_channel_major(&dcols, g.n, g.ci, hw, &mut dx);
            return dx;
        }
        let mut dx = vec![T::zero(); g.n * g.ci * hw];
        for n in 0..g.n {
            col2im_add(&dcols, g, &mut dx[n * g.ci * hw..(n + 1) * g.ci * hw], nhw, n * hw);
        }
        dx
    });
    ConvGrads { dx, dw, db }
}
