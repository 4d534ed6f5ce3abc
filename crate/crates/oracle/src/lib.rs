//! Direct, unoptimized transcriptions of the cell update rules and metrics,
//! written element by element with plain loops over `f64` slices. Tests compare
//! the real implementations against these.
//!
//! Tensors are flat row-major `[n, c, h, w]` slices. Fused weights follow the
//! block layout documented on the cell parameter structs: output channels
//! `[b·hidden, (b+1)·hidden)` hold gate `b`.

#[derive(Clone, Copy, Debug)]
pub struct Grid {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn len(&self, c: usize) -> usize {
        self.n * c * self.h * self.w
    }

    fn at(&self, c_total: usize, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * c_total + c) * self.h + y) * self.w + x
    }
}

/// A weight tensor `[co_total, ci_total, k, k]`.
#[derive(Clone, Copy, Debug)]
pub struct Weight<'a> {
    pub data: &'a [f64],
    pub co_total: usize,
    pub ci_total: usize,
    pub k: usize,
}

impl Weight<'_> {
    fn get(&self, o: usize, i: usize, dy: usize, dx: usize) -> f64 {
        assert!(o < self.co_total && i < self.ci_total);
        self.data[((o * self.ci_total + i) * self.k + dy) * self.k + dx]
    }
}

/// Zero-padded "same" convolution of `x` (`x_ch` channels) producing output
/// channels `out_start..out_start+out_len` of `w`, reading weight input
/// channels `in_offset..in_offset+x_ch`.
pub fn conv(
    x: &[f64],
    x_ch: usize,
    g: Grid,
    w: Weight,
    out_start: usize,
    out_len: usize,
    in_offset: usize,
) -> Vec<f64> {
    assert_eq!(x.len(), g.len(x_ch));
    let r = (w.k / 2) as isize;
    let mut out = vec![0.0; g.len(out_len)];
    for n in 0..g.n {
        for o in 0..out_len {
            for y in 0..g.h {
                for xx in 0..g.w {
                    let mut acc = 0.0;
                    for c in 0..x_ch {
                        for dy in 0..w.k {
                            for dx in 0..w.k {
                                let sy = y as isize + dy as isize - r;
                                let sx = xx as isize + dx as isize - r;
                                if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                                    continue;
                                }
                                acc += w.get(out_start + o, in_offset + c, dy, dx)
                                    * x[g.at(x_ch, n, c, sy as usize, sx as usize)];
                            }
                        }
                    }
                    out[g.at(out_len, n, o, y, xx)] = acc;
                }
            }
        }
    }
    out
}

/// Convolution of gate block `b` (width `hidden`) of a fused weight.
fn gate(x: &[f64], x_ch: usize, g: Grid, w: Weight, hidden: usize, b: usize) -> Vec<f64> {
    conv(x, x_ch, g, w, b * hidden, hidden, 0)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn bias_at(bias: &[f64], hidden: usize, block: usize, idx: usize, g: Grid) -> f64 {
    let c = (idx / (g.h * g.w)) % hidden;
    bias[block * hidden + c]
}

pub struct ConvLstmWeights<'a> {
    pub w_x: Weight<'a>,
    pub bias: &'a [f64],
    pub w_h: Weight<'a>,
    /// Per-element `[hidden, h, w]` peepholes.
    pub w_ci: &'a [f64],
    pub w_cf: &'a [f64],
    pub w_co: &'a [f64],
}

/// Returns `(h, c)`.
pub fn convlstm(
    x: &[f64],
    x_ch: usize,
    h_prev: &[f64],
    c_prev: &[f64],
    hidden: usize,
    g: Grid,
    p: &ConvLstmWeights,
) -> (Vec<f64>, Vec<f64>) {
    let xs: Vec<_> = (0..4).map(|b| gate(x, x_ch, g, p.w_x, hidden, b)).collect();
    let hs: Vec<_> = (0..4).map(|b| gate(h_prev, hidden, g, p.w_h, hidden, b)).collect();
    let plane = hidden * g.h * g.w;
    let len = g.len(hidden);
    let (mut h, mut c) = (vec![0.0; len], vec![0.0; len]);
    for e in 0..len {
        let pe = e % plane;
        let pre = |b: usize| xs[b][e] + hs[b][e] + bias_at(p.bias, hidden, b, e, g);
        let gg = pre(0).tanh();
        let i = sigmoid(pre(1) + p.w_ci[pe] * c_prev[e]);
        let f = sigmoid(pre(2) + p.w_cf[pe] * c_prev[e]);
        c[e] = f * c_prev[e] + i * gg;
        let o = sigmoid(pre(3) + p.w_co[pe] * c[e]);
        h[e] = o * c[e].tanh();
    }
    (h, c)
}

pub struct MFlowWeights<'a> {
    pub w_x: Option<Weight<'a>>,
    pub w_h: Weight<'a>,
    pub bias: &'a [f64],
    pub w_m: Weight<'a>,
    pub w_mo: Weight<'a>,
}

/// Returns `(h, m)`. `x` is the frame for the bottom layer only.
pub fn mflow(
    x: Option<(&[f64], usize)>,
    h_below: &[f64],
    m_below: &[f64],
    hidden: usize,
    g: Grid,
    p: &MFlowWeights,
) -> (Vec<f64>, Vec<f64>) {
    let len = g.len(hidden);
    let xs: Vec<Vec<f64>> = match (x, p.w_x) {
        (Some((x, x_ch)), Some(w)) => (0..4).map(|b| gate(x, x_ch, g, w, hidden, b)).collect(),
        (None, None) => vec![vec![0.0; len]; 4],
        _ => panic!("input frame and input weights must come together"),
    };
    let hs: Vec<_> = (0..4).map(|b| gate(h_below, hidden, g, p.w_h, hidden, b)).collect();
    let ms: Vec<_> = (0..2).map(|b| gate(m_below, hidden, g, p.w_m, hidden, b)).collect();
    let mut m = vec![0.0; len];
    let mut o_pre = vec![0.0; len];
    for e in 0..len {
        let pre = |b: usize| xs[b][e] + hs[b][e] + bias_at(p.bias, hidden, b, e, g);
        let gg = pre(0).tanh();
        let i = sigmoid(pre(1) + ms[0][e]);
        let f = sigmoid(pre(2) + ms[1][e]);
        m[e] = f * m_below[e] + i * gg;
        o_pre[e] = pre(3);
    }
    let mo = gate(&m, hidden, g, p.w_mo, hidden, 0);
    let h = (0..len).map(|e| sigmoid(o_pre[e] + mo[e]) * m[e].tanh()).collect();
    (h, m)
}

pub struct StLstmWeights<'a> {
    pub w_x: Weight<'a>,
    pub bias: &'a [f64],
    pub w_h: Weight<'a>,
    pub w_m: Weight<'a>,
    /// `[hidden, 2·hidden, k, k]`: input channels `0..hidden` read `C`, the rest read `M`.
    pub w_o: Weight<'a>,
    pub w_fuse: Weight<'a>,
}

pub struct StLstmOut {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub m: Vec<f64>,
    pub inc_c: Vec<f64>,
    pub inc_m: Vec<f64>,
    pub forget_c: Vec<f64>,
    pub forget_m: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn stlstm(
    x: &[f64],
    x_ch: usize,
    h_prev: &[f64],
    c_prev: &[f64],
    m_below: &[f64],
    hidden: usize,
    g: Grid,
    p: &StLstmWeights,
) -> StLstmOut {
    let xs: Vec<_> = (0..7).map(|b| gate(x, x_ch, g, p.w_x, hidden, b)).collect();
    let hs: Vec<_> = (0..4).map(|b| gate(h_prev, hidden, g, p.w_h, hidden, b)).collect();
    let ms: Vec<_> = (0..3).map(|b| gate(m_below, hidden, g, p.w_m, hidden, b)).collect();
    let len = g.len(hidden);
    let mut out = StLstmOut {
        h: vec![0.0; len],
        c: vec![0.0; len],
        m: vec![0.0; len],
        inc_c: vec![0.0; len],
        inc_m: vec![0.0; len],
        forget_c: vec![0.0; len],
        forget_m: vec![0.0; len],
    };
    for e in 0..len {
        let xb = |b: usize| xs[b][e] + bias_at(p.bias, hidden, b, e, g);
        let gg = (xb(0) + hs[0][e]).tanh();
        let i = sigmoid(xb(1) + hs[1][e]);
        let f = sigmoid(xb(2) + hs[2][e]);
        out.inc_c[e] = i * gg;
        out.forget_c[e] = f;
        out.c[e] = f * c_prev[e] + i * gg;

        let g2 = (xb(3) + ms[0][e]).tanh();
        let i2 = sigmoid(xb(4) + ms[1][e]);
        let f2 = sigmoid(xb(5) + ms[2][e]);
        out.inc_m[e] = i2 * g2;
        out.forget_m[e] = f2;
        out.m[e] = f2 * m_below[e] + i2 * g2;
    }
    let co = conv(&out.c, hidden, g, p.w_o, 0, hidden, 0);
    let mo = conv(&out.m, hidden, g, p.w_o, 0, hidden, hidden);
    let fc = conv(&out.c, hidden, g, p.w_fuse, 0, hidden, 0);
    let fm = conv(&out.m, hidden, g, p.w_fuse, 0, hidden, hidden);
    for e in 0..len {
        let o_pre = xs[6][e] + bias_at(p.bias, hidden, 6, e, g) + hs[3][e] + co[e] + mo[e];
        out.h[e] = sigmoid(o_pre) * (fc[e] + fm[e]).tanh();
    }
    out
}

pub struct ActionWeights<'a> {
    /// `[hidden, d_a]`
    pub w_embed: &'a [f64],
    pub b_embed: &'a [f64],
    pub w_hv: Weight<'a>,
    pub w_av: Weight<'a>,
}

/// `action` is `[n, d_a]`.
pub fn action_fuse(
    h_prev: &[f64],
    action: &[f64],
    d_a: usize,
    hidden: usize,
    g: Grid,
    p: &ActionWeights,
) -> Vec<f64> {
    let mut map = vec![0.0; g.len(hidden)];
    for n in 0..g.n {
        for c in 0..hidden {
            let mut v = p.b_embed[c];
            for a in 0..d_a {
                v += p.w_embed[c * d_a + a] * action[n * d_a + a];
            }
            for y in 0..g.h {
                for x in 0..g.w {
                    map[g.at(hidden, n, c, y, x)] = v;
                }
            }
        }
    }
    let hv = conv(h_prev, hidden, g, p.w_hv, 0, hidden, 0);
    let av = conv(&map, hidden, g, p.w_av, 0, hidden, 0);
    hv.iter().zip(&av).map(|(a, b)| a * b).collect()
}

/// Mean SSIM of one `h × w` plane over every fully contained 11×11 window,
/// Gaussian weights σ = 1.5, `C1 = (0.01·range)²`, `C2 = (0.03·range)²`.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> f64 {
    const WIN: usize = 11;
    let sigma = 1.5f64;
    let mut kern = [[0.0f64; WIN]; WIN];
    let mut total = 0.0;
    for (i, row) in kern.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - 5.0;
            let dx = j as f64 - 5.0;
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=(h - WIN) {
        for x0 in 0..=(w - WIN) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let k = kern[i][j] / total;
                    ma += k * a[(y0 + i) * w + x0 + j];
                    mb += k * b[(y0 + i) * w + x0 + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let k = kern[i][j] / total;
                    let da = a[(y0 + i) * w + x0 + j] - ma;
                    let db = b[(y0 + i) * w + x0 + j] - mb;
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}
