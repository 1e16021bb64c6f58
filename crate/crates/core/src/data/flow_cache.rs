use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::{align_flow_to_frames, farneback_flow, flow_to_three_channel, to_grayscale, FlowParams};
use crate::tensor::Tensor;

use super::{frame_path, successor_path, CorpusManifest, Frame, ManifestEntry};

/// Displacement (pixels) mapped to the ends of the encoded range.
pub const DEFAULT_FLOW_BOUND: f64 = 20.0;

pub fn flow_cache_path(cache: &Path, e: &ManifestEntry, n: usize) -> PathBuf {
    cache
        .join("flow")
        .join(e.subject_id.to_string())
        .join(&e.clip_id)
        .join(format!("{n}.tnsr"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowExtraction {
    pub written: usize,
    pub skipped: usize,
}

impl std::ops::AddAssign for FlowExtraction {
    fn add_assign(&mut self, o: Self) {
        self.written += o.written;
        self.skipped += o.skipped;
    }
}

/// Compute and cache one encoded flow tensor per frame of a clip.
///
/// Each frame is paired with its successor rendered one flow interval later
/// (`succ_<n>.png`) when present, otherwise with the next frame; the last
/// frame without a successor pairs with itself. Entries already cached are
/// left untouched.
pub fn extract_clip_flow(
    root: &Path,
    cache: &Path,
    manifest: &CorpusManifest,
    e: &ManifestEntry,
    params: &FlowParams,
    bound: f64,
) -> Result<FlowExtraction> {
    params.validate()?;
    let n = e.n_frames;
    let mut stats = FlowExtraction::default();
    if n == 0 {
        return Ok(stats);
    }
    // Pair timestamps are the first frame's time; each frame takes the
    // nearest pair.
    let frame_times: Vec<f64> = (0..n).map(|i| i as f64 / manifest.frame_fps).collect();
    let pairs = align_flow_to_frames(&frame_times, &frame_times)?;
    let read_gray = |p: &Path| -> Result<Tensor> { to_grayscale(&Frame::read(p)?.to_tensor()) };
    for (i, &pair) in pairs.iter().enumerate() {
        let out = flow_cache_path(cache, e, i);
        if out.exists() {
            stats.skipped += 1;
            continue;
        }
        let first = read_gray(&frame_path(root, e, pair))?;
        let succ = successor_path(root, e, pair);
        let second = if succ.exists() {
            read_gray(&succ)?
        } else if pair + 1 < n {
            read_gray(&frame_path(root, e, pair + 1))?
        } else {
            first.clone()
        };
        let f = farneback_flow(&first, &second, params)?;
        let enc = flow_to_three_channel(&f, bound)?;
        let dir = out.parent().expect("cache path has a parent");
        std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
        let tmp = out.with_extension("tnsr.tmp");
        enc.save(&tmp)?;
        std::fs::rename(&tmp, &out).map_err(|err| Error::io(&out, err))?;
        stats.written += 1;
    }
    Ok(stats)
}

/// Encoded flow for in-memory frames, using the same pairing rule as
/// [`extract_clip_flow`].
pub(crate) fn clip_flow_in_memory(frames: &[Frame], succ: &[Frame], p: &FlowParams, bound: f64) -> Result<Vec<Tensor>> {
    let gray = |f: &Frame| to_grayscale(&f.to_tensor());
    (0..frames.len())
        .map(|i| {
            let first = gray(&frames[i])?;
            let second = match succ.get(i).or(frames.get(i + 1)) {
                Some(f) => gray(f)?,
                None => first.clone(),
            };
            flow_to_three_channel(&farneback_flow(&first, &second, p)?, bound)
        })
        .collect()
}

/// Cached flow of every frame of a clip, in frame order.
pub fn load_clip_flow(cache: &Path, e: &ManifestEntry) -> Result<Vec<Tensor>> {
    (0..e.n_frames)
        .map(|n| {
            let p = flow_cache_path(cache, e, n);
            if !p.exists() {
                return Err(Error::CacheMiss {
                    clip: e.clip_id.clone(),
                    path: p,
                });
            }
            Tensor::load(&p)
        })
        .collect()
}
