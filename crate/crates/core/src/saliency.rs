//! Top-filter class-activation maps over the last recurrent block of the
//! RGB stream, and heatmap overlays.
//!
//! The head is applied per frame, so the gradient of the summed class
//! outputs with respect to the block output at frame `t` equals the gradient
//! of the output at `t` alone; one backward pass serves all frames.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{load_batch, Frame, SequenceSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{Model, CLASSES};
use crate::nn::{Bound, Mode};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const OVERLAY_ALPHA: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SaliencyMethod {
    /// The selected filter's activation map.
    #[default]
    TopFilter,
    /// ReLU of the gradient-weighted sum of all filter maps.
    GradCam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyResult {
    /// Per frame, `[H, W]` in `[0, 1]`.
    pub heatmaps: Vec<Tensor>,
    /// Per frame, index of the filter with the largest mean |gradient|.
    pub filters: Vec<usize>,
    /// Per frame, mean |gradient| of every filter.
    pub scores: Vec<Vec<f64>>,
    /// All gradients were zero; heatmaps are zero.
    pub degenerate: bool,
}

/// Bilinear resize of a row-major `h × w` map (pixel centres aligned).
pub fn upsample_bilinear(map: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, wy) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, wx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = (1.0 - wx) * map[y0 * w + x0] + wx * map[y0 * w + x1];
            let bot = (1.0 - wx) * map[y1 * w + x0] + wx * map[y1 * w + x1];
            out.push((1.0 - wy) * top + wy * bot);
        }
    }
    out
}

/// Rescale to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

pub fn gradcam_top_filter(model: &Model, sample: &SequenceSample, target_class: usize) -> Result<SaliencyResult> {
    saliency(model, sample, target_class, SaliencyMethod::TopFilter)
}

pub fn saliency(
    model: &Model,
    sample: &SequenceSample,
    target_class: usize,
    method: SaliencyMethod,
) -> Result<SaliencyResult> {
    if target_class >= CLASSES {
        return Err(Error::Usage(format!("target class {target_class} out of range")));
    }
    let (batch, _) = load_batch(std::slice::from_ref(sample), model.config.modality)?;
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, &model.params);
    let out = model.forward_in(&mut g, &bound, &batch, Mode::Infer, &mut stream(0), &[])?;
    // Streams are ordered RGB first.
    let act = out.stream_outputs[0];
    g.retain_grad(act);
    let cls = g.select(out.probs, 2, target_class)?;
    let total = g.sum(cls);
    let grads = g.backward(total)?;
    let a = g.value(act).clone();
    let grad = grads.tensor(act);
    let s = a.shape();
    let (t, h, w, c) = (s[1], s[2], s[3], s[4]);
    let (oh, ow) = (sample.frames.shape()[1], sample.frames.shape()[2]);
    let degenerate = grad.max_abs() == 0.0;
    if degenerate {
        log::warn!("{}: class-output gradient is zero everywhere; heatmaps are blank", model.name);
    }
    let mut result = SaliencyResult {
        heatmaps: Vec::with_capacity(t),
        filters: Vec::with_capacity(t),
        scores: Vec::with_capacity(t),
        degenerate,
    };
    let (ad, gd) = (a.data(), grad.data());
    for f in 0..t {
        let at = |y: usize, x: usize, k: usize| ((f * h + y) * w + x) * c + k;
        let scores: Vec<f64> = (0..c)
            .map(|k| {
                let s: f64 = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| gd[at(y, x, k)].abs()).sum();
                s / (h * w) as f64
            })
            .collect();
        let best = scores
            .iter()
            .enumerate()
            .fold(0, |b, (k, &v)| if v > scores[b] { k } else { b });
        let map: Vec<f64> = match method {
            SaliencyMethod::TopFilter => (0..h * w).map(|i| ad[at(i / w, i % w, best)]).collect(),
            SaliencyMethod::GradCam => (0..h * w)
                .map(|i| {
                    let v: f64 = (0..c)
                        .map(|k| {
                            let wk: f64 = (0..h * w).map(|j| gd[at(j / w, j % w, k)]).sum::<f64>() / (h * w) as f64;
                            wk * ad[at(i / w, i % w, k)]
                        })
                        .sum();
                    v.max(0.0)
                })
                .collect(),
        };
        let mut up = if degenerate {
            vec![0.0; oh * ow]
        } else {
            upsample_bilinear(&map, h, w, oh, ow)
        };
        min_max_normalize(&mut up);
        result.heatmaps.push(Tensor::new(&[oh, ow], up)?);
        result.filters.push(best);
        result.scores.push(scores);
    }
    Ok(result)
}

/// Blue-to-red pseudocolour that fades into the grayscale base as heat
/// drops: `h·(h, 0, 1−h) + (1−h)·gray`.
fn colormap(h: f64, gray: f64) -> [f64; 3] {
    [h * h + (1.0 - h) * gray, (1.0 - h) * gray, h * (1.0 - h) + (1.0 - h) * gray]
}

/// `(1−α)·gray + α·colormap(h)` per pixel with `α = 0.4`.
pub fn overlay(frame: &Tensor, heatmap: &Tensor) -> Result<Tensor> {
    let &[h, w, 3] = frame.shape() else {
        return Err(Error::dim("overlay", format!("frame {:?}", frame.shape())));
    };
    if heatmap.shape() != [h, w] {
        return Err(Error::dim("overlay", format!("heatmap {:?} vs frame {h}x{w}", heatmap.shape())));
    }
    let mut out = Vec::with_capacity(h * w * 3);
    for (px, &hv) in frame.data().chunks_exact(3).zip(heatmap.data()) {
        let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        let cm = colormap(hv.clamp(0.0, 1.0), gray);
        out.extend(cm.map(|c| (1.0 - OVERLAY_ALPHA) * gray + OVERLAY_ALPHA * c));
    }
    Tensor::new(&[h, w, 3], out)
}

/// Fraction of heatmap mass inside `[x0, x1) × [y0, y1)` (pixel centres).
pub fn mass_inside(heatmap: &Tensor, bbox: (f64, f64, f64, f64)) -> f64 {
    let w = heatmap.shape()[1];
    let (x0, y0, x1, y1) = bbox;
    let (mut inside, mut total) = (0.0, 0.0);
    for (i, &v) in heatmap.data().iter().enumerate() {
        let (px, py) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        total += v;
        if px >= x0 && px < x1 && py >= y0 && py < y1 {
            inside += v;
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}

/// Write `frame_<t>.png` overlays and append selections to `meta.csv` under
/// `dir`.
pub fn write_saliency(dir: &Path, sample: &SequenceSample, result: &SaliencyResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = String::from("clip_id,start,frame,filter,score,degenerate\n");
    for (t, hm) in result.heatmaps.iter().enumerate() {
        let img = overlay(&sample.frames.index_axis0(t), hm)?;
        Frame::from_tensor(&img)?.write(&dir.join(format!("frame_{t}.png")))?;
        let _ = writeln!(
            meta,
            "{},{},{t},{},{},{}",
            sample.clip_id, sample.start_index, result.filters[t], result.scores[t][result.filters[t]], result.degenerate
        );
    }
    let p = dir.join("meta.csv");
    std::fs::write(&p, meta).map_err(|e| Error::io(&p, e))
}
