//! Dense optical flow by local polynomial expansion (Farnebäck), the
//! three-channel (u, v, magnitude) network encoding, and alignment of a
//! high-rate flow stream to low-rate frames.
//!
//! Each frame neighbourhood is approximated as `xᵀAx + bᵀx + c`. For a
//! displacement `d`, `b₂ = b₁ − 2A₁d`, so `d` is recovered by a windowed
//! least-squares solve of `A d = Δb` with
//! `A = (A₁(x) + A₂(x̃))/2` and `Δb = −½(b₂(x̃) − b₁(x)) + A d̃`, where `d̃` is
//! the current estimate and `x̃ = x + d̃`. Estimation runs coarse to fine over
//! an image pyramid.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Internal intensity scale; keeps the solver regulariser negligible for
/// textured content.
const INTENSITY_SCALE: f64 = 255.0;
/// Added to the 2×2 system determinant.
const DET_REG: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    /// Horizontal displacement in pixels, `[H, W]`.
    pub u: Tensor,
    /// Vertical displacement in pixels, `[H, W]`.
    pub v: Tensor,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            u: Tensor::zeros(&[h, w]),
            v: Tensor::zeros(&[h, w]),
        }
    }

    pub fn height(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.u.shape()[1]
    }

    /// Sum of absolute neighbour differences of both components.
    pub fn total_variation(&self) -> f64 {
        let (h, w) = (self.height(), self.width());
        let mut tv = 0.0;
        for t in [&self.u, &self.v] {
            let d = t.data();
            for y in 0..h {
                for x in 0..w {
                    let c = d[y * w + x];
                    if x + 1 < w {
                        tv += (d[y * w + x + 1] - c).abs();
                    }
                    if y + 1 < h {
                        tv += (d[(y + 1) * w + x] - c).abs();
                    }
                }
            }
        }
        tv
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    pub pyramid_scale: f64,
    /// Side of the square averaging window; odd, at least 5.
    pub window: usize,
    pub iterations: usize,
    /// Side of the polynomial-expansion neighbourhood; odd.
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            pyramid_scale: 0.5,
            window: 25,
            iterations: 3,
            poly_n: 7,
            poly_sigma: 1.5,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window < 5 {
            return Err(Error::Config(format!("flow window must be odd and >= 5, got {}", self.window)));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::Config(format!("pyramid scale {} not in (0, 1)", self.pyramid_scale)));
        }
        if self.poly_n % 2 == 0 || self.poly_n < 3 {
            return Err(Error::Config(format!("poly_n must be odd and >= 3, got {}", self.poly_n)));
        }
        if !(self.poly_sigma > 0.0) || self.iterations == 0 {
            return Err(Error::Config("poly_sigma and iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel quadratic model `xᵀAx + bᵀx + c`, with `x` the horizontal and
/// `y` the vertical offset.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyExpansion {
    pub height: usize,
    pub width: usize,
    /// Per pixel: `[c, b_x, b_y, a_xx, a_yy, a_xy]` where `A = [[a_xx, a_xy],
    /// [a_xy, a_yy]]`.
    pub coeffs: Vec<[f64; 6]>,
}

impl PolyExpansion {
    pub fn at(&self, y: usize, x: usize) -> &[f64; 6] {
        &self.coeffs[y * self.width + x]
    }

    /// `(A, b, c)` at a pixel.
    pub fn quadratic(&self, y: usize, x: usize) -> ([[f64; 2]; 2], [f64; 2], f64) {
        let p = self.at(y, x);
        ([[p[3], p[5]], [p[5], p[4]]], [p[1], p[2]], p[0])
    }

    fn sample(&self, y: f64, x: f64) -> [f64; 6] {
        bilinear(self.height, self.width, y, x, |yy, xx| *self.at(yy, xx))
    }
}

fn bilinear<const N: usize>(h: usize, w: usize, y: f64, x: f64, get: impl Fn(usize, usize) -> [f64; N]) -> [f64; N] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let (a, b, c, d) = (get(y0, x0), get(y0, x1), get(y1, x0), get(y1, x1));
    std::array::from_fn(|k| {
        (1.0 - fy) * ((1.0 - fx) * a[k] + fx * b[k]) + fy * ((1.0 - fx) * c[k] + fx * d[k])
    })
}

/// Invert a symmetric positive-definite 6×6 matrix by Gauss–Jordan.
fn invert6(m: [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let mut a = m;
    let mut inv = [[0.0; 6]; 6];
    (0..6).for_each(|i| inv[i][i] = 1.0);
    for col in 0..6 {
        let piv = (col..6)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        inv.swap(col, piv);
        let p = a[col][col];
        for k in 0..6 {
            a[col][k] /= p;
            inv[col][k] /= p;
        }
        for r in 0..6 {
            if r != col {
                let f = a[r][col];
                for k in 0..6 {
                    a[r][k] -= f * a[col][k];
                    inv[r][k] -= f * inv[col][k];
                }
            }
        }
    }
    inv
}

fn check_gray(frame: &Tensor) -> Result<(usize, usize)> {
    match frame.shape() {
        &[h, w] => Ok((h, w)),
        s => Err(Error::dim("optical flow", format!("expected grayscale [H, W], got {s:?}"))),
    }
}

/// Weighted least-squares quadratic fit around every pixel, with Gaussian
/// weights of width `poly_sigma` over a `poly_n × poly_n` neighbourhood and
/// edge replication at the borders.
pub fn polynomial_expansion(frame: &Tensor, poly_n: usize, poly_sigma: f64) -> Result<PolyExpansion> {
    if poly_n % 2 == 0 {
        return Err(Error::Config(format!("poly_n must be odd, got {poly_n}")));
    }
    let (h, w) = check_gray(frame)?;
    let r = (poly_n / 2) as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();
    let basis = |dy: isize, dx: isize| {
        let (x, y) = (dx as f64, dy as f64);
        [1.0, x, y, x * x, y * y, x * y]
    };
    let weight = |dy: isize, dx: isize| (-((dx * dx + dy * dy) as f64) / (2.0 * poly_sigma * poly_sigma)).exp();
    let mut gram = [[0.0; 6]; 6];
    for &(dy, dx) in &offsets {
        let b = basis(dy, dx);
        let wt = weight(dy, dx);
        for i in 0..6 {
            for j in 0..6 {
                gram[i][j] += wt * b[i] * b[j];
            }
        }
    }
    let ginv = invert6(gram);
    // Dual filters: coefficient k = Σ_o dual[o][k] · f(p + o).
    let dual: Vec<[f64; 6]> = offsets
        .iter()
        .map(|&(dy, dx)| {
            let b = basis(dy, dx);
            let wt = weight(dy, dx);
            std::array::from_fn(|k| wt * (0..6).map(|j| ginv[k][j] * b[j]).sum::<f64>())
        })
        .collect();
    let f = frame.data();
    let mut coeffs = vec![[0.0; 6]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 6];
            for (&(dy, dx), d) in offsets.iter().zip(&dual) {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let v = f[yy * w + xx];
                for k in 0..6 {
                    acc[k] += d[k] * v;
                }
            }
            // The xy term enters xᵀAx twice.
            acc[5] *= 0.5;
            coeffs[y * w + x] = acc;
        }
    }
    Ok(PolyExpansion { height: h, width: w, coeffs })
}

/// Separable box average of side `window` with edge replication.
fn box_filter<const N: usize>(data: &[[f64; N]], h: usize, w: usize, window: usize) -> Vec<[f64; N]> {
    let r = (window / 2) as isize;
    let norm = 1.0 / window as f64;
    let mut tmp = vec![[0.0; N]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; N];
            for dx in -r..=r {
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let v = &data[y * w + xx];
                (0..N).for_each(|k| acc[k] += v[k]);
            }
            tmp[y * w + x] = acc.map(|a| a * norm);
        }
    }
    let mut out = vec![[0.0; N]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; N];
            for dy in -r..=r {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let v = &tmp[yy * w + x];
                (0..N).for_each(|k| acc[k] += v[k]);
            }
            out[y * w + x] = acc.map(|a| a * norm);
        }
    }
    out
}

fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / s).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .zip(&k)
                .map(|(d, kv)| kv * img[y * w + (x as isize + d).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .zip(&k)
                .map(|(d, kv)| kv * tmp[(y as isize + d).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
        }
    }
    out
}

/// Pixel-centre-aligned bilinear resize.
fn resize(img: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        for x in 0..nw {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            let fx = (x as f64 + 0.5) * sx - 0.5;
            out.push(bilinear(h, w, fy, fx, |a, b| [img[a * w + b]])[0]);
        }
    }
    out
}

/// Coarse-to-fine dense flow from `prev` to `next` (both grayscale `[H, W]`).
pub fn farneback_flow(prev: &Tensor, next: &Tensor, p: &FlowParams) -> Result<FlowField> {
    p.validate()?;
    let (h, w) = check_gray(prev)?;
    if prev.shape() != next.shape() {
        return Err(Error::dim(
            "farneback_flow",
            format!("prev {:?} vs next {:?}", prev.shape(), next.shape()),
        ));
    }
    let a: Vec<f64> = prev.data().iter().map(|v| v * INTENSITY_SCALE).collect();
    let b: Vec<f64> = next.data().iter().map(|v| v * INTENSITY_SCALE).collect();

    // Pyramid sizes, finest first; stop before levels become degenerate.
    let mut sizes = vec![(h, w)];
    for l in 1..p.pyramid_levels {
        let s = p.pyramid_scale.powi(l as i32);
        let (lh, lw) = (((h as f64) * s).round() as usize, ((w as f64) * s).round() as usize);
        if lh < p.poly_n || lw < p.poly_n {
            break;
        }
        sizes.push((lh, lw));
    }

    let mut flow: Option<(Vec<f64>, Vec<f64>, usize, usize)> = None;
    for (level, &(lh, lw)) in sizes.iter().enumerate().rev() {
        let (la, lb) = if level == 0 {
            (a.clone(), b.clone())
        } else {
            let s = p.pyramid_scale.powi(level as i32);
            let sigma = (1.0 / s - 1.0) * 0.5;
            (
                resize(&gaussian_blur(&a, h, w, sigma), h, w, lh, lw),
                resize(&gaussian_blur(&b, h, w, sigma), h, w, lh, lw),
            )
        };
        let (mut u, mut v) = match flow.take() {
            None => (vec![0.0; lh * lw], vec![0.0; lh * lw]),
            Some((pu, pv, ph, pw)) => {
                let (fy, fx) = (lh as f64 / ph as f64, lw as f64 / pw as f64);
                let u = resize(&pu, ph, pw, lh, lw).into_iter().map(|d| d * fx).collect();
                let v = resize(&pv, ph, pw, lh, lw).into_iter().map(|d| d * fy).collect();
                (u, v)
            }
        };
        let ea = polynomial_expansion(&Tensor::new(&[lh, lw], la)?, p.poly_n, p.poly_sigma)?;
        let eb = polynomial_expansion(&Tensor::new(&[lh, lw], lb)?, p.poly_n, p.poly_sigma)?;
        for _ in 0..p.iterations {
            refine(&ea, &eb, &mut u, &mut v, p.window);
        }
        flow = Some((u, v, lh, lw));
    }
    let (u, v, _, _) = flow.expect("at least one pyramid level");
    Ok(FlowField {
        u: Tensor::new(&[h, w], u)?,
        v: Tensor::new(&[h, w], v)?,
    })
}

/// One displacement update: build per-pixel normal equations around the
/// current estimate, average them over the window, and solve.
fn refine(ea: &PolyExpansion, eb: &PolyExpansion, u: &mut [f64], v: &mut [f64], window: usize) {
    let (h, w) = (ea.height, ea.width);
    // Per pixel: [g_xx, g_xy, g_yy, h_x, h_y] of AᵀA d = AᵀΔb.
    let mut terms = vec![[0.0; 5]; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = (u[i], v[i]);
            let p1 = ea.at(y, x);
            let p2 = eb.sample(y as f64 + dy, x as f64 + dx);
            let axx = 0.5 * (p1[3] + p2[3]);
            let ayy = 0.5 * (p1[4] + p2[4]);
            let axy = 0.5 * (p1[5] + p2[5]);
            let bx = -0.5 * (p2[1] - p1[1]) + axx * dx + axy * dy;
            let by = -0.5 * (p2[2] - p1[2]) + axy * dx + ayy * dy;
            terms[i] = [
                axx * axx + axy * axy,
                axy * (axx + ayy),
                axy * axy + ayy * ayy,
                axx * bx + axy * by,
                axy * bx + ayy * by,
            ];
        }
    }
    let avg = box_filter(&terms, h, w, window);
    for (i, t) in avg.iter().enumerate() {
        let [gxx, gxy, gyy, hx, hy] = *t;
        let idet = 1.0 / (gxx * gyy - gxy * gxy + DET_REG);
        u[i] = (gyy * hx - gxy * hy) * idet;
        v[i] = (gxx * hy - gxy * hx) * idet;
    }
}

/// Luminance `0.299 R + 0.587 G + 0.114 B` of an `[H, W, 3]` frame.
pub fn to_grayscale(rgb: &Tensor) -> Result<Tensor> {
    let &[h, w, 3] = rgb.shape() else {
        return Err(Error::dim("to_grayscale", format!("expected [H, W, 3], got {:?}", rgb.shape())));
    };
    let data = rgb
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    Tensor::new(&[h, w], data)
}

/// Channels `(u, v, √(u²+v²))`, clipped to `±bound` (magnitude to
/// `[0, bound]`) and mapped to `[0, 1]`; zero displacement maps to 0.5 for
/// u and v and to 0 for the magnitude.
pub fn flow_to_three_channel(f: &FlowField, bound: f64) -> Result<Tensor> {
    if !(bound > 0.0) {
        return Err(Error::Config(format!("flow clipping bound must be > 0, got {bound}")));
    }
    let (h, w) = (f.height(), f.width());
    let mut out = Vec::with_capacity(h * w * 3);
    for (&u, &v) in f.u.data().iter().zip(f.v.data()) {
        let mag = (u * u + v * v).sqrt();
        out.push((u.clamp(-bound, bound) + bound) / (2.0 * bound));
        out.push((v.clamp(-bound, bound) + bound) / (2.0 * bound));
        out.push(mag.min(bound) / bound);
    }
    Tensor::new(&[h, w, 3], out)
}

/// Inverse of the u/v channels of [`flow_to_three_channel`].
pub fn three_channel_to_flow(t: &Tensor, bound: f64) -> Result<FlowField> {
    let &[h, w, 3] = t.shape() else {
        return Err(Error::dim("three_channel_to_flow", format!("expected [H, W, 3], got {:?}", t.shape())));
    };
    let (mut u, mut v) = (Vec::with_capacity(h * w), Vec::with_capacity(h * w));
    for p in t.data().chunks_exact(3) {
        u.push(p[0] * 2.0 * bound - bound);
        v.push(p[1] * 2.0 * bound - bound);
    }
    Ok(FlowField {
        u: Tensor::new(&[h, w], u)?,
        v: Tensor::new(&[h, w], v)?,
    })
}

/// For each frame timestamp, the index of the nearest flow timestamp
/// (ties resolve to the earlier one). Both lists must be strictly
/// increasing.
pub fn align_flow_to_frames(flow_times: &[f64], frame_times: &[f64]) -> Result<Vec<usize>> {
    if flow_times.is_empty() {
        return Err(Error::Usage("flow stream has no timestamps".into()));
    }
    for (name, ts) in [("flow", flow_times), ("frame", frame_times)] {
        if ts.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::Usage(format!("{name} timestamps must be strictly increasing")));
        }
    }
    let mut j = 0;
    Ok(frame_times
        .iter()
        .map(|&t| {
            while j + 1 < flow_times.len() && (flow_times[j + 1] - t).abs() < (flow_times[j] - t).abs() {
                j += 1;
            }
            j
        })
        .collect())
}
