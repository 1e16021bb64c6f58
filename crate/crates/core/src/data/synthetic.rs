//! Synthetic corpus in which the class is visible only through motion.
//!
//! Every subject has its own background texture and blob colour. In a
//! positive clip the blob oscillates sinusoidally along a random axis; in a
//! negative clip it sits still at `center0 + amp·dir·sin(ψ)` with a uniform
//! random `ψ`, which is exactly the positional marginal of the moving blob
//! at any fixed instant. A single frame therefore carries no label signal.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

use super::{
    clip_dir, flow_cache, frame_path, successor_path, Clip, Corpus, CorpusManifest, Frame, ManifestEntry, FLOW_FPS,
    FRAME_FPS, MANIFEST_FILE,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub clips_per_class: usize,
    pub frames_per_clip: usize,
    /// Square frame side in pixels.
    pub size: usize,
    pub seed: u64,
    /// Oscillation amplitude as a fraction of the frame side.
    pub amplitude: (f64, f64),
    /// Oscillation frequency in Hz.
    pub frequency: (f64, f64),
    /// Blob radius as a fraction of the frame side.
    pub radius: (f64, f64),
    /// Per-pixel Gaussian noise added to every rendered frame.
    pub noise: f64,
    /// Also render each frame's successor one flow interval later.
    pub successors: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_subjects: 6,
            clips_per_class: 4,
            frames_per_clip: 100,
            size: 128,
            seed: 7,
            amplitude: (0.15, 0.25),
            frequency: (0.15, 0.35),
            radius: (0.10, 0.14),
            noise: 0.02,
            successors: true,
        }
    }
}

fn range_kv(v: (f64, f64)) -> String {
    format!("{},{}", v.0, v.1)
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1;
        if self.n_subjects == 0 || self.clips_per_class == 0 || self.frames_per_clip == 0 || self.size < 8 {
            return Err(Error::Config("synthetic spec needs subjects, clips, frames and size >= 8".into()));
        }
        if !ordered(self.amplitude) || !ordered(self.frequency) || !ordered(self.radius) {
            return Err(Error::Config("synthetic ranges must be positive and ordered".into()));
        }
        if self.amplitude.1 + self.radius.1 > 0.4 || !(self.noise >= 0.0) {
            return Err(Error::Config("blob would leave the frame or noise is negative".into()));
        }
        Ok(())
    }

    pub fn n_clips(&self) -> usize {
        self.n_subjects * self.clips_per_class * 2
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("n_subjects", self.n_subjects.to_string()),
            ("clips_per_class", self.clips_per_class.to_string()),
            ("frames_per_clip", self.frames_per_clip.to_string()),
            ("size", self.size.to_string()),
            ("seed", self.seed.to_string()),
            ("amplitude", range_kv(self.amplitude)),
            ("frequency", range_kv(self.frequency)),
            ("radius", range_kv(self.radius)),
            ("noise", self.noise.to_string()),
            ("successors", self.successors.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Overlay recognised keys onto the defaults; unknown keys are errors.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut s = Self::default();
        for (k, v) in kv {
            let bad = || Error::Config(format!("bad synthetic spec value {k}={v}"));
            let range = || -> Result<(f64, f64)> {
                let (a, b) = v.split_once(',').ok_or_else(bad)?;
                Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
            };
            match k.as_str() {
                "n_subjects" => s.n_subjects = v.parse().map_err(|_| bad())?,
                "clips_per_class" => s.clips_per_class = v.parse().map_err(|_| bad())?,
                "frames_per_clip" => s.frames_per_clip = v.parse().map_err(|_| bad())?,
                "size" => s.size = v.parse().map_err(|_| bad())?,
                "seed" => s.seed = v.parse().map_err(|_| bad())?,
                "amplitude" => s.amplitude = range()?,
                "frequency" => s.frequency = range()?,
                "radius" => s.radius = range()?,
                "noise" => s.noise = v.parse().map_err(|_| bad())?,
                "successors" => s.successors = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown synthetic spec key {k:?}"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    /// Clip id for the `index`-th clip of a subject; even indices are
    /// negative, odd indices positive.
    pub fn clip_id(subject: u32, index: usize) -> String {
        format!("s{subject}_c{index:02}")
    }

    pub fn entries(&self) -> Vec<ManifestEntry> {
        (1..=self.n_subjects as u32)
            .flat_map(|s| {
                (0..2 * self.clips_per_class).map(move |i| ManifestEntry {
                    subject_id: s,
                    clip_id: Self::clip_id(s, i),
                    label: (i % 2) as u8,
                    n_frames: self.frames_per_clip,
                })
            })
            .collect()
    }
}

/// Appearance shared by all clips of one subject.
#[derive(Debug, Clone, PartialEq)]
struct SubjectLook {
    base: [f64; 3],
    /// `(kx, ky, phase, amplitude per channel)` background gratings.
    gratings: Vec<(f64, f64, f64, [f64; 3])>,
    blob: [f64; 3],
    blob_freq: f64,
}

impl SubjectLook {
    fn draw(seed: u64, subject: u32) -> Self {
        let mut r = stream(derive_seed(seed, &[u64::from(subject), 0]));
        let base: [f64; 3] = std::array::from_fn(|_| r.random_range(0.3..0.7));
        let gratings = (0..3)
            .map(|_| {
                let angle = r.random_range(0.0..TAU);
                let k = TAU / r.random_range(6.0..20.0);
                let amp = std::array::from_fn(|_| r.random_range(0.03..0.08));
                (k * angle.cos(), k * angle.sin(), r.random_range(0.0..TAU), amp)
            })
            .collect();
        // Polarity alternates by subject so that every leave-one-out training
        // split sees both light and dark blobs.
        let sign = if subject % 2 == 0 { 1.0 } else { -1.0 };
        let blob = std::array::from_fn(|c| (base[c] + sign * r.random_range(0.28..0.4)).clamp(0.0, 1.0));
        Self {
            base,
            gratings,
            blob,
            blob_freq: TAU / r.random_range(3.0..6.0),
        }
    }
}

/// Generator-known blob trajectory of one clip, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPlan {
    pub label: u8,
    pub center0: (f64, f64),
    pub direction: (f64, f64),
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub radius: f64,
    seed: u64,
}

impl ClipPlan {
    pub fn new(spec: &SyntheticSpec, subject: u32, index: usize) -> Self {
        let seed = derive_seed(spec.seed, &[u64::from(subject), 1 + index as u64]);
        let mut r = stream(seed);
        let size = spec.size as f64;
        let center0 = (
            size * (0.5 + r.random_range(-0.1..0.1)),
            size * (0.5 + r.random_range(-0.1..0.1)),
        );
        let angle = r.random_range(0.0..TAU);
        Self {
            label: (index % 2) as u8,
            center0,
            direction: (angle.cos(), angle.sin()),
            amplitude: size * r.random_range(spec.amplitude.0..=spec.amplitude.1),
            frequency: r.random_range(spec.frequency.0..=spec.frequency.1),
            phase: r.random_range(0.0..TAU),
            radius: size * r.random_range(spec.radius.0..=spec.radius.1),
            seed,
        }
    }

    /// Blob centre `(x, y)` at time `t` seconds.
    pub fn center(&self, t: f64) -> (f64, f64) {
        let s = if self.label == 1 {
            (TAU * self.frequency * t + self.phase).sin()
        } else {
            self.phase.sin()
        };
        (
            self.center0.0 + self.amplitude * self.direction.0 * s,
            self.center0.1 + self.amplitude * self.direction.1 * s,
        )
    }

    /// Axis-aligned blob box `(x0, y0, x1, y1)` at time `t`, grown by `margin`.
    pub fn bounding_box(&self, t: f64, margin: f64) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.center(t);
        let r = self.radius + margin;
        (cx - r, cy - r, cx + r, cy + r)
    }
}

fn render(spec: &SyntheticSpec, look: &SubjectLook, plan: &ClipPlan, t: f64, noise_seed: u64) -> Frame {
    let n = spec.size;
    let (cx, cy) = plan.center(t);
    let mut rng = stream(noise_seed);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid sigma");
    let mut out = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = look.base;
            for (kx, ky, ph, amp) in &look.gratings {
                let s = (kx * px + ky * py + ph).sin();
                (0..3).for_each(|c| rgb[c] += amp[c] * s);
            }
            let (dx, dy) = (px - cx, py - cy);
            let d = (dx * dx + dy * dy).sqrt();
            // Soft-edged disc whose texture travels with it.
            let cover = (plan.radius + 0.5 - d).clamp(0.0, 1.0);
            if cover > 0.0 {
                let tex = 0.85 + 0.15 * (look.blob_freq * dx).sin() * (look.blob_freq * dy).cos();
                (0..3).for_each(|c| rgb[c] = (1.0 - cover) * rgb[c] + cover * look.blob[c] * tex);
            }
            for v in rgb {
                let v = if spec.noise > 0.0 { v + noise.sample(&mut rng) } else { v };
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Frame {
        height: n,
        width: n,
        pixels: out,
    }
}

/// Rendered frames of one clip, plus successors when enabled.
pub fn render_clip(spec: &SyntheticSpec, subject: u32, index: usize) -> (Vec<Frame>, Vec<Frame>) {
    let look = SubjectLook::draw(spec.seed, subject);
    let plan = ClipPlan::new(spec, subject, index);
    let frames = (0..spec.frames_per_clip)
        .map(|k| render(spec, &look, &plan, k as f64 / FRAME_FPS, derive_seed(plan.seed, &[k as u64, 0])))
        .collect();
    let succ = if spec.successors {
        (0..spec.frames_per_clip)
            .map(|k| {
                let t = k as f64 / FRAME_FPS + 1.0 / FLOW_FPS;
                render(spec, &look, &plan, t, derive_seed(plan.seed, &[k as u64, 1]))
            })
            .collect()
    } else {
        Vec::new()
    };
    (frames, succ)
}

fn clip_index(e: &ManifestEntry) -> usize {
    e.clip_id.rsplit_once("_c").and_then(|(_, i)| i.parse().ok()).expect("synthetic clip id")
}

/// Write the corpus under `out`; the manifest is written last.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, out: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    let manifest = CorpusManifest::new(spec.entries());
    manifest.entries.par_iter().try_for_each(|e| -> Result<()> {
        let dir = clip_dir(out, e);
        std::fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
        let (frames, succ) = render_clip(spec, e.subject_id, clip_index(e));
        for (k, f) in frames.iter().enumerate() {
            f.write(&frame_path(out, e, k))?;
        }
        for (k, f) in succ.iter().enumerate() {
            f.write(&successor_path(out, e, k))?;
        }
        Ok(())
    })?;
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Build the corpus in memory, optionally with encoded flow, exactly as it
/// would load from disk after generation and flow extraction.
pub fn build_corpus(spec: &SyntheticSpec, flow: Option<(&FlowParams, f64)>) -> Result<Corpus> {
    spec.validate()?;
    let manifest = CorpusManifest::new(spec.entries());
    let clips = manifest
        .entries
        .par_iter()
        .map(|e| {
            let (frames, succ) = render_clip(spec, e.subject_id, clip_index(e));
            let flow = match flow {
                Some((p, bound)) => Some(flow_cache::clip_flow_in_memory(&frames, &succ, p, bound)?),
                None => None,
            };
            Ok(Clip {
                entry: e.clone(),
                height: spec.size,
                width: spec.size,
                frames: frames.into_iter().map(|f| f.pixels).collect(),
                flow: flow.map(|fl| {
                    fl.into_iter()
                        .map(|t: Tensor| t.data().iter().map(|&v| v as f32).collect())
                        .collect()
                }),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { manifest, clips })
}

/// Mean held-out-subject accuracy of a per-frame logistic regression on raw
/// pixels (average-pooled to at most 16×16), trained leave-one-subject-out.
pub fn logistic_baseline_accuracy(corpus: &Corpus) -> Result<f64> {
    let subjects = corpus.subjects();
    if subjects.len() < 2 {
        return Err(Error::Config("logistic baseline needs at least two subjects".into()));
    }
    let (h, w) = corpus.frame_size().ok_or_else(|| Error::EmptyInput("empty corpus".into()))?;
    let pool = h.max(w).div_ceil(16).max(1);
    let (ph, pw) = (h / pool, w / pool);
    let feats = |px: &[u8]| -> Vec<f64> {
        let mut f = vec![0.0; ph * pw * 3];
        for y in 0..ph * pool {
            for x in 0..pw * pool {
                for c in 0..3 {
                    f[((y / pool) * pw + x / pool) * 3 + c] += px[(y * w + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
        let norm = (pool * pool) as f64;
        f.iter_mut().for_each(|v| *v /= norm);
        f
    };
    let rows: Vec<(u32, u8, Vec<f64>)> = corpus
        .clips
        .iter()
        .flat_map(|c| c.frames.iter().map(move |f| (c.entry.subject_id, c.entry.label, feats(f))))
        .collect();
    let dim = ph * pw * 3;
    let mut accs = Vec::new();
    for &test in &subjects {
        let train: Vec<&(u32, u8, Vec<f64>)> = rows.iter().filter(|r| r.0 != test).collect();
        // Standardise with training statistics.
        let mut mean = vec![0.0; dim];
        let mut sd = vec![0.0; dim];
        for r in &train {
            r.2.iter().enumerate().for_each(|(i, v)| mean[i] += v);
        }
        mean.iter_mut().for_each(|m| *m /= train.len() as f64);
        for r in &train {
            r.2.iter().enumerate().for_each(|(i, v)| sd[i] += (v - mean[i]).powi(2));
        }
        sd.iter_mut().for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-6));
        let z = |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(i, v)| (v - mean[i]) / sd[i]).collect() };
        let xs: Vec<(f64, Vec<f64>)> = train.iter().map(|r| (r.1 as f64, z(&r.2))).collect();
        let (mut wv, mut b) = (vec![0.0; dim], 0.0);
        let (lr, l2) = (0.5, 1e-3);
        for _ in 0..300 {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (y, x) in &xs {
                let s: f64 = b + x.iter().zip(&wv).map(|(a, c)| a * c).sum::<f64>();
                let e = crate::graph::sigmoid(s) - y;
                gb += e;
                x.iter().enumerate().for_each(|(i, v)| gw[i] += e * v);
            }
            let n = xs.len() as f64;
            wv.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= lr * (g / n + l2 * *wi));
            b -= lr * gb / n;
        }
        let test_rows: Vec<_> = rows.iter().filter(|r| r.0 == test).collect();
        let correct = test_rows
            .iter()
            .filter(|r| {
                let x = z(&r.2);
                let s: f64 = b + x.iter().zip(&wv).map(|(a, c)| a * c).sum::<f64>();
                u8::from(s > 0.0) == r.1
            })
            .count();
        accs.push(correct as f64 / test_rows.len() as f64);
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}
