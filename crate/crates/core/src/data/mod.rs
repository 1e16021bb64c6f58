//! Corpus layout, sequence assembly, augmentation and batching.
//!
//! On disk a corpus is `<root>/<subject>/<clip>/frame_<n>.png` plus
//! `<root>/manifest.csv`; cached flow lives under
//! `<cache>/flow/<subject>/<clip>/<n>.tnsr`.

mod flow_cache;
pub mod synthetic;

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{Batch, Modality, CLASSES};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use flow_cache::{extract_clip_flow, flow_cache_path, load_clip_flow, FlowExtraction, DEFAULT_FLOW_BOUND};
pub use synthetic::{generate_synthetic_corpus, logistic_baseline_accuracy, ClipPlan, SyntheticSpec};

pub const SEQUENCE_LEN: usize = 10;
pub const SEQUENCE_STRIDE: usize = 10;
pub const FRAME_FPS: f64 = 2.0;
pub const FLOW_FPS: f64 = 16.0;
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: [&str; 6] = ["subject_id", "clip_id", "label", "n_frames", "frame_fps", "flow_fps"];

/// One training/evaluation unit: `T` consecutive frames of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    /// `[T, H, W, 3]` in `[0, 1]`.
    pub frames: Tensor,
    /// Encoded flow aligned to `frames`, `[T, H, W, 3]`.
    pub flow: Option<Tensor>,
    /// 1 = pain (motion present in the synthetic corpus), 0 = no pain.
    pub label: u8,
    pub subject_id: u32,
    pub clip_id: String,
    pub start_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub subject_id: u32,
    pub clip_id: String,
    pub label: u8,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub frame_fps: f64,
    pub flow_fps: f64,
}

impl CorpusManifest {
    pub fn new(mut entries: Vec<ManifestEntry>) -> Self {
        entries.sort_by(|a, b| (a.subject_id, &a.clip_id).cmp(&(b.subject_id, &b.clip_id)));
        Self {
            entries,
            frame_fps: FRAME_FPS,
            flow_fps: FLOW_FPS,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let fmt_err = |e: csv::Error| Error::Format {
            what: "manifest",
            detail: format!("{}: {e}", path.display()),
        };
        let mut w = csv::Writer::from_path(path).map_err(fmt_err)?;
        w.write_record(MANIFEST_HEADER).map_err(fmt_err)?;
        for e in &self.entries {
            w.write_record([
                e.subject_id.to_string(),
                e.clip_id.clone(),
                e.label.to_string(),
                e.n_frames.to_string(),
                self.frame_fps.to_string(),
                self.flow_fps.to_string(),
            ])
            .map_err(fmt_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "manifest",
            detail: format!("{}: {detail}", path.display()),
        };
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.iter().ne(MANIFEST_HEADER) {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut entries = Vec::new();
        let (mut frame_fps, mut flow_fps) = (FRAME_FPS, FLOW_FPS);
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let field = |i: usize| rec.get(i).unwrap_or_default();
            let parse_err = |i: usize| bad(format!("row {}: bad {} {:?}", line + 1, MANIFEST_HEADER[i], field(i)));
            let label: u8 = field(2).parse().map_err(|_| parse_err(2))?;
            if label > 1 {
                return Err(parse_err(2));
            }
            entries.push(ManifestEntry {
                subject_id: field(0).parse().map_err(|_| parse_err(0))?,
                clip_id: field(1).to_string(),
                label,
                n_frames: field(3).parse().map_err(|_| parse_err(3))?,
            });
            frame_fps = field(4).parse().map_err(|_| parse_err(4))?;
            flow_fps = field(5).parse().map_err(|_| parse_err(5))?;
        }
        let mut m = Self::new(entries);
        m.frame_fps = frame_fps;
        m.flow_fps = flow_fps;
        Ok(m)
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.entries.iter().map(|e| e.subject_id).collect();
        s.dedup();
        s
    }
}

pub fn clip_dir(root: &Path, e: &ManifestEntry) -> PathBuf {
    root.join(e.subject_id.to_string()).join(&e.clip_id)
}

pub fn frame_path(root: &Path, e: &ManifestEntry, n: usize) -> PathBuf {
    clip_dir(root, e).join(format!("frame_{n}.png"))
}

/// Frame rendered one flow interval after frame `n`, when the corpus has it.
pub fn successor_path(root: &Path, e: &ManifestEntry, n: usize) -> PathBuf {
    clip_dir(root, e).join(format!("succ_{n}.png"))
}

/// 8-bit RGB pixels, row-major `[H, W, 3]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn read(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        Ok(Self {
            height: img.height() as usize,
            width: img.width() as usize,
            pixels: img.into_raw(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("pixel buffer matches extents");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Quantise an `[H, W, 3]` tensor in `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[height, width, 3] = t.shape() else {
            return Err(Error::dim("frame", format!("expected [H, W, 3], got {:?}", t.shape())));
        };
        let pixels = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Ok(Self { height, width, pixels })
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::new(&[self.height, self.width, 3], data).expect("extents match")
    }
}

/// Start indices of non-overlapping windows; a trailing remainder shorter
/// than `t` is dropped.
pub fn sequence_starts(n_frames: usize, t: usize, stride: usize) -> Vec<usize> {
    assert!(t >= 1 && stride >= 1, "sequence length and stride must be positive");
    if n_frames < t {
        return Vec::new();
    }
    (0..=n_frames - t).step_by(stride).collect()
}

/// Cut a clip's frames (each `[H, W, 3]`) into samples of `t` frames.
pub fn extract_sequences(
    entry: &ManifestEntry,
    frames: &[Tensor],
    flow: Option<&[Tensor]>,
    t: usize,
    stride: usize,
) -> Result<Vec<SequenceSample>> {
    if t == 0 || stride == 0 {
        return Err(Error::Config("sequence length and stride must be positive".into()));
    }
    sequence_starts(frames.len(), t, stride)
        .into_iter()
        .map(|s| {
            let flow = match flow {
                Some(f) => Some(Tensor::stack(&f[s..s + t])?),
                None => None,
            };
            Ok(SequenceSample {
                frames: Tensor::stack(&frames[s..s + t])?,
                flow,
                label: entry.label,
                subject_id: entry.subject_id,
                clip_id: entry.clip_id.clone(),
                start_index: s,
            })
        })
        .collect()
}

/// Clip frames held as 8-bit pixels; flow as `f32` encoded channels.
#[derive(Debug, Clone)]
pub struct Clip {
    pub entry: ManifestEntry,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<u8>>,
    pub flow: Option<Vec<Vec<f32>>>,
}

/// Position of one sequence inside a [`Corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeqRef {
    pub clip: usize,
    pub start: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub clips: Vec<Clip>,
}

impl Corpus {
    /// Read every clip listed in `<root>/manifest.csv`; with `flow_cache`,
    /// also load cached flow and fail on the first missing entry.
    pub fn load(root: &Path, flow_cache: Option<&Path>) -> Result<Self> {
        let manifest = CorpusManifest::read(&root.join(MANIFEST_FILE))?;
        let clips = manifest
            .entries
            .par_iter()
            .map(|e| {
                let frames: Vec<Frame> = (0..e.n_frames)
                    .map(|n| Frame::read(&frame_path(root, e, n)))
                    .collect::<Result<_>>()?;
                let (height, width) = frames.first().map_or((0, 0), |f| (f.height, f.width));
                if frames.iter().any(|f| (f.height, f.width) != (height, width)) {
                    return Err(Error::Format {
                        what: "clip",
                        detail: format!("clip {} has frames of differing size", e.clip_id),
                    });
                }
                let flow = match flow_cache {
                    Some(cache) => Some(
                        load_clip_flow(cache, e)?
                            .into_iter()
                            .map(|t| t.data().iter().map(|&v| v as f32).collect())
                            .collect(),
                    ),
                    None => None,
                };
                Ok(Clip {
                    entry: e.clone(),
                    height,
                    width,
                    frames: frames.into_iter().map(|f| f.pixels).collect(),
                    flow,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, clips })
    }

    pub fn subjects(&self) -> Vec<u32> {
        self.manifest.subjects()
    }

    pub fn frame_size(&self) -> Option<(usize, usize)> {
        self.clips.first().map(|c| (c.height, c.width))
    }

    pub fn clip_index(&self, clip_id: &str) -> Option<usize> {
        self.clips.iter().position(|c| c.entry.clip_id == clip_id)
    }

    /// Sequences of the given subjects in manifest order.
    pub fn sequences(&self, subjects: &[u32]) -> Vec<SeqRef> {
        self.clips
            .iter()
            .enumerate()
            .filter(|(_, c)| subjects.contains(&c.entry.subject_id))
            .flat_map(|(i, c)| {
                sequence_starts(c.frames.len(), SEQUENCE_LEN, SEQUENCE_STRIDE)
                    .into_iter()
                    .map(move |start| SeqRef { clip: i, start })
            })
            .collect()
    }

    pub fn label(&self, r: SeqRef) -> u8 {
        self.clips[r.clip].entry.label
    }

    pub fn subject(&self, r: SeqRef) -> u32 {
        self.clips[r.clip].entry.subject_id
    }

    pub fn sample(&self, r: SeqRef) -> SequenceSample {
        let c = &self.clips[r.clip];
        let range = r.start..r.start + SEQUENCE_LEN;
        let shape = [SEQUENCE_LEN, c.height, c.width, 3];
        let frames: Vec<f64> = c.frames[range.clone()]
            .iter()
            .flat_map(|f| f.iter().map(|&p| p as f64 / 255.0))
            .collect();
        let flow = c.flow.as_ref().map(|fl| {
            let data = fl[range].iter().flat_map(|f| f.iter().map(|&v| v as f64)).collect();
            Tensor::new(&shape, data).expect("flow extents match frames")
        });
        SequenceSample {
            frames: Tensor::new(&shape, frames).expect("frame extents"),
            flow,
            label: c.entry.label,
            subject_id: c.entry.subject_id,
            clip_id: c.entry.clip_id.clone(),
            start_index: r.start,
        }
    }
}

/// Which augmentations to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentConfig {
    pub flip: bool,
    pub crop: bool,
    pub shade: bool,
}

impl AugmentConfig {
    pub const ALL: Self = Self {
        flip: true,
        crop: true,
        shade: true,
    };
    pub const NONE: Self = Self {
        flip: false,
        crop: false,
        shade: false,
    };
}

pub const CROP_FRACTION: f64 = 0.9;
pub const SHADE_SIGMA: f64 = 0.05;

/// Mirror `[T, H, W, C]` left-right; with `negate_u`, channel 0 is an
/// encoded horizontal displacement and is reflected about 0.5.
pub fn flip_horizontal(t: &Tensor, negate_u: bool) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let frames = t.len() / (h * w * c);
    let src = t.data();
    let mut out = vec![0.0; t.len()];
    for f in 0..frames {
        for y in 0..h {
            for x in 0..w {
                let a = ((f * h + y) * w + x) * c;
                let b = ((f * h + y) * w + (w - 1 - x)) * c;
                out[b..b + c].copy_from_slice(&src[a..a + c]);
                if negate_u {
                    out[b] = 1.0 - out[b];
                }
            }
        }
    }
    Tensor::new(s, out).expect("same extents")
}

/// Crop a `ch × cw` window at `(y0, x0)` from each frame of `[T, H, W, C]`
/// and resize it back to `H × W` bilinearly.
pub fn crop_resize(t: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let frames = t.len() / (h * w * c);
    let src = t.data();
    let mut out = Vec::with_capacity(t.len());
    let (sy, sx) = (ch as f64 / h as f64, cw as f64 / w as f64);
    for f in 0..frames {
        let px = |yy: usize, xx: usize, k: usize| src[((f * h + y0 + yy) * w + x0 + xx) * c + k];
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
            let (ya, wy) = (fy.floor() as usize, fy - fy.floor());
            let yb = (ya + 1).min(ch - 1);
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
                let (xa, wx) = (fx.floor() as usize, fx - fx.floor());
                let xb = (xa + 1).min(cw - 1);
                for k in 0..c {
                    let top = (1.0 - wx) * px(ya, xa, k) + wx * px(ya, xb, k);
                    let bot = (1.0 - wx) * px(yb, xa, k) + wx * px(yb, xb, k);
                    out.push((1.0 - wy) * top + wy * bot);
                }
            }
        }
    }
    Tensor::new(s, out).expect("same extents")
}

/// One draw per enabled transform, applied identically to every frame
/// (and to flow, except shading).
pub fn augment(s: &SequenceSample, rng: &mut Rng, cfg: AugmentConfig) -> SequenceSample {
    let mut out = s.clone();
    if cfg.flip && rng.random_bool(0.5) {
        out.frames = flip_horizontal(&out.frames, false);
        out.flow = out.flow.map(|f| flip_horizontal(&f, true));
    }
    if cfg.crop {
        let sh = out.frames.shape();
        let (h, w) = (sh[1], sh[2]);
        let ch = ((h as f64 * CROP_FRACTION).round() as usize).max(1);
        let cw = ((w as f64 * CROP_FRACTION).round() as usize).max(1);
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        out.frames = crop_resize(&out.frames, y0, x0, ch, cw);
        out.flow = out.flow.map(|f| crop_resize(&f, y0, x0, ch, cw));
    }
    if cfg.shade {
        let delta = Normal::new(0.0, SHADE_SIGMA).expect("valid sigma").sample(rng);
        out.frames = out.frames.map(|v| (v + delta).clamp(0.0, 1.0));
    }
    out
}

/// Stack samples into model inputs and per-frame one-hot labels `[B, T, 2]`.
pub fn load_batch(samples: &[SequenceSample], modality: Modality) -> Result<(Batch, Tensor)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("batch of zero sequences".into()));
    }
    let mut batch = Batch::default();
    if modality.uses_rgb() {
        let frames: Vec<Tensor> = samples.iter().map(|s| s.frames.clone()).collect();
        batch.rgb = Some(Tensor::stack(&frames)?);
    }
    if modality.uses_flow() {
        let flows = samples
            .iter()
            .map(|s| {
                s.flow.clone().ok_or_else(|| Error::CacheMiss {
                    clip: s.clip_id.clone(),
                    path: PathBuf::from("flow").join(s.subject_id.to_string()).join(&s.clip_id),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        batch.flow = Some(Tensor::stack(&flows)?);
    }
    let t = samples[0].frames.shape()[0];
    let mut labels = Vec::with_capacity(samples.len() * t * CLASSES);
    for s in samples {
        for _ in 0..t {
            labels.extend(if s.label == 1 { [0.0, 1.0] } else { [1.0, 0.0] });
        }
    }
    Ok((batch, Tensor::new(&[samples.len(), t, CLASSES], labels)?))
}
