//! Raw slice kernels behind the graph operations. Layouts are channel-last.

/// General matrix product `c = a·b + beta·c` on row-major buffers.
/// `ta`/`tb` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents and strides describe exactly the checked buffer lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn in_len(&self) -> usize {
        self.h * self.w * self.cin
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow * self.cout
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let patch = g.patch();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy + ky) as isize - g.pad as isize;
                for kx in 0..g.k {
                    let ix = (ox + kx) as isize - g.pad as isize;
                    let dst = &mut row[(ky * g.k + kx) * g.cin..][..g.cin];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        dst.copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let patch = g.patch();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.k + kx) * g.cin..][..g.cin];
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    for (d, s) in dx[dst..dst + g.cin].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let rows = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.out_len()];
    let mut cols = vec![0.0; rows * g.patch()];
    for s in 0..g.n {
        im2col(&x[s * g.in_len()..][..g.in_len()], g, &mut cols);
        let o = &mut out[s * g.out_len()..][..g.out_len()];
        gemm(rows, g.patch(), g.cout, &cols, false, kernel, false, 0.0, o);
        if let Some(b) = bias {
            for px in o.chunks_exact_mut(g.cout) {
                for (v, bb) in px.iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)` for the requested pieces.
pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let rows = g.oh * g.ow;
    let patch = g.patch();
    let mut dx = want_input.then(|| vec![0.0; g.n * g.in_len()]);
    let mut dk = want_kernel.then(|| vec![0.0; patch * g.cout]);
    let db = want_bias.then(|| {
        let mut db = vec![0.0; g.cout];
        for px in dout.chunks_exact(g.cout) {
            for (d, v) in db.iter_mut().zip(px) {
                *d += v;
            }
        }
        db
    });
    if dx.is_none() && dk.is_none() {
        return (None, None, db);
    }
    let mut cols = vec![0.0; rows * patch];
    for s in 0..g.n {
        let go = &dout[s * g.out_len()..][..g.out_len()];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[s * g.in_len()..][..g.in_len()], g, &mut cols);
            gemm(patch, rows, g.cout, &cols, true, go, false, 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, g.cout, patch, go, false, kernel, true, 0.0, &mut cols);
            col2im_add(&cols, g, &mut dx[s * g.in_len()..][..g.in_len()]);
        }
    }
    (dx, dk, db)
}

/// 2×2 stride-2 max pooling over `[n, h, w, c]`. Returns the pooled values and
/// the flat input index chosen for every output; ties keep the first position
/// in row-major scan order.
pub(crate) fn max_pool2(x: &[f64], n: usize, h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(out.capacity());
    for s in 0..n {
        let base = s * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = usize::MAX;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = base + ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if x[i] > best || bi == usize::MAX {
                                best = x[i];
                                bi = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(bi);
                }
            }
        }
    }
    (out, arg)
}

/// Per-channel statistics over all leading positions of a `[p, c]` buffer.
pub(crate) fn channel_moments(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let p = x.len() / c;
    let mut mean = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= p as f64);
    let mut var = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= p as f64);
    (mean, var)
}

/// Saved activations of one fused LSTM gate evaluation.
#[derive(Debug, Clone)]
pub(crate) struct LstmSaved {
    /// Per position: sigmoid(i), sigmoid(f), tanh(g), sigmoid(o), tanh(c').
    pub acts: Vec<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gate pre-activations `z` (`[p, 4ch]`, gate order i, f, c̃, o) and previous
/// cell `c` (`[p, ch]`, absent means zeros) to output `[p, 2ch]` holding `h'`
/// then `c'` per position.
pub(crate) fn lstm_gates_forward(z: &[f64], c_prev: Option<&[f64]>, ch: usize) -> (Vec<f64>, LstmSaved) {
    let p = z.len() / (4 * ch);
    let mut out = vec![0.0; p * 2 * ch];
    let mut acts = vec![0.0; p * 5 * ch];
    for q in 0..p {
        let zq = &z[q * 4 * ch..][..4 * ch];
        let aq = &mut acts[q * 5 * ch..][..5 * ch];
        let oq = &mut out[q * 2 * ch..][..2 * ch];
        for j in 0..ch {
            let i = sigmoid(zq[j]);
            let f = sigmoid(zq[ch + j]);
            let g = zq[2 * ch + j].tanh();
            let o = sigmoid(zq[3 * ch + j]);
            let cp = c_prev.map_or(0.0, |c| c[q * ch + j]);
            let c_new = f * cp + i * g;
            let tc = c_new.tanh();
            aq[j] = i;
            aq[ch + j] = f;
            aq[2 * ch + j] = g;
            aq[3 * ch + j] = o;
            aq[4 * ch + j] = tc;
            oq[j] = o * tc;
            oq[ch + j] = c_new;
        }
    }
    (out, LstmSaved { acts })
}

/// Returns `(dz, dc_prev)`.
pub(crate) fn lstm_gates_backward(
    saved: &LstmSaved,
    c_prev: Option<&[f64]>,
    dout: &[f64],
    ch: usize,
) -> (Vec<f64>, Vec<f64>) {
    let p = dout.len() / (2 * ch);
    let mut dz = vec![0.0; p * 4 * ch];
    let mut dc = vec![0.0; p * ch];
    for q in 0..p {
        let aq = &saved.acts[q * 5 * ch..][..5 * ch];
        let gq = &dout[q * 2 * ch..][..2 * ch];
        let dq = &mut dz[q * 4 * ch..][..4 * ch];
        for j in 0..ch {
            let (i, f, g, o, tc) = (aq[j], aq[ch + j], aq[2 * ch + j], aq[3 * ch + j], aq[4 * ch + j]);
            let dh = gq[j];
            let dcn = gq[ch + j] + dh * o * (1.0 - tc * tc);
            let cp = c_prev.map_or(0.0, |c| c[q * ch + j]);
            dq[j] = dcn * g * i * (1.0 - i);
            dq[ch + j] = dcn * cp * f * (1.0 - f);
            dq[2 * ch + j] = dcn * i * (1.0 - g * g);
            dq[3 * ch + j] = dh * tc * o * (1.0 - o);
            dc[q * ch + j] = dcn * f;
        }
    }
    (dz, dc)
}
