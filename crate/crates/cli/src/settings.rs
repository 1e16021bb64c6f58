//! Run settings shared by `train`, `evaluate` and `saliency`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clstm_core::config::RunConfig;
use clstm_core::data::{Corpus, AugmentConfig, SEQUENCE_LEN};
use clstm_core::train::{OptimizerConfig, OptimizerKind, TrainSchedule};
use clstm_core::{Error, FusionMode, Modality, ModelConfig, ModelKind, Result};

/// Every key a run may set, with its default. `auto` means "derived from the
/// model kind" and is replaced by the concrete value before it is written.
pub const RUN_DEFAULTS: &[(&str, &str)] = &[
    ("corpus", "corpus"),
    ("cache", "cache"),
    ("runs", "runs"),
    ("model", "clstm1"),
    ("modality", "auto"),
    ("fusion", "auto"),
    ("hidden", "32"),
    ("kernel", "5"),
    ("layers", "4"),
    ("dropout", "0.2"),
    ("bn_momentum", "0.99"),
    ("bn_epsilon", "0.001"),
    ("max_epochs", "100"),
    ("patience", "15"),
    ("batch_size", "auto"),
    ("optimizer", "auto"),
    ("lr", "auto"),
    ("clip_norm", "none"),
    ("augment", "true"),
    ("seed", "7"),
    ("test_subject", "none"),
    ("val_subject", "auto"),
    ("repeats", "5"),
];

pub fn defaults() -> RunConfig {
    RunConfig::with_defaults(RUN_DEFAULTS.iter().copied())
}

/// Defaults overlaid by an optional file, then by flags.
pub fn layered(file: Option<&Path>, flags: &[(&str, String)]) -> Result<RunConfig> {
    let mut rc = defaults();
    if let Some(f) = file {
        if !f.is_file() {
            return Err(Error::Usage(format!("config file {} does not exist", f.display())));
        }
        rc.merge_file(f)?;
    }
    for (k, v) in flags {
        rc.set_flag(k, v)?;
    }
    Ok(rc)
}

pub fn path(rc: &RunConfig, key: &str) -> Result<PathBuf> {
    Ok(PathBuf::from(rc.get(key)?))
}

fn optional<T: std::str::FromStr>(rc: &RunConfig, key: &str) -> Result<Option<T>> {
    match rc.get(key)? {
        "none" | "off" => Ok(None),
        _ => rc.parse(key).map(Some),
    }
}

pub fn test_subject(rc: &RunConfig) -> Result<u32> {
    optional(rc, "test_subject")?.ok_or_else(|| Error::Usage("a test subject is required (--test-subject)".into()))
}

/// Replace every `auto` with its concrete value and build the model and
/// schedule. The input resolution comes from the corpus frames.
pub fn resolve(rc: &mut RunConfig, frame_size: (usize, usize)) -> Result<(ModelConfig, TrainSchedule)> {
    let kind: ModelKind = rc.parse("model")?;
    if rc.get("modality")? == "auto" {
        let m = if kind == ModelKind::Clstm2 { Modality::Both } else { Modality::Rgb };
        rc.resolve("modality", m)?;
    }
    if rc.get("fusion")? == "auto" {
        let f = if kind == ModelKind::Clstm2 { FusionMode::Add } else { FusionMode::None };
        rc.resolve("fusion", f)?;
    }
    let mut kv: BTreeMap<String, String> = rc.values();
    kv.insert("frames".into(), SEQUENCE_LEN.to_string());
    kv.insert("height".into(), frame_size.0.to_string());
    kv.insert("width".into(), frame_size.1.to_string());
    let config = ModelConfig::from_kv(&kv)?;

    let seed: u64 = rc.parse("seed")?;
    let mut schedule = TrainSchedule::for_model(config.kind, config.modality, seed);
    if rc.get("optimizer")? == "auto" {
        rc.resolve("optimizer", schedule.optimizer.kind)?;
    }
    let kind: OptimizerKind = rc.parse("optimizer")?;
    schedule.optimizer = OptimizerConfig::default_for(kind);
    if rc.get("lr")? == "auto" {
        rc.resolve("lr", schedule.optimizer.lr)?;
    }
    schedule.optimizer.lr = rc.parse("lr")?;
    if rc.get("batch_size")? == "auto" {
        rc.resolve("batch_size", schedule.batch_size)?;
    }
    schedule.batch_size = rc.parse("batch_size")?;
    schedule.max_epochs = rc.parse("max_epochs")?;
    schedule.patience = optional(rc, "patience")?;
    schedule.clip_norm = optional(rc, "clip_norm")?;
    schedule.augment = if rc.parse::<bool>("augment")? {
        AugmentConfig::ALL
    } else {
        AugmentConfig::NONE
    };
    schedule.validate()?;
    Ok((config, schedule))
}

/// Load the corpus named by the settings, with the flow cache when the model
/// reads flow.
pub fn load_corpus(rc: &RunConfig) -> Result<Corpus> {
    let root = path(rc, "corpus")?;
    if !root.join(clstm_core::data::MANIFEST_FILE).is_file() {
        return Err(Error::Usage(format!("{} has no corpus manifest", root.display())));
    }
    let modality: String = rc.get("modality")?.to_string();
    let needs_flow = rc.get("model")? == "clstm2" || modality == "flow" || modality == "both";
    let cache = path(rc, "cache")?;
    Corpus::load(&root, needs_flow.then_some(cache.as_path()))
}

pub fn frame_size(corpus: &Corpus) -> Result<(usize, usize)> {
    corpus
        .frame_size()
        .ok_or_else(|| Error::EmptyInput("corpus has no frames".into()))
}

pub fn run_label(config: &ModelConfig) -> String {
    match config.kind {
        ModelKind::Clstm2 => format!("{}_{}", config.kind, config.fusion),
        _ => format!("{}_{}", config.kind, config.modality),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clstm_core::config::Provenance;

    #[test]
    fn auto_values_follow_the_model() {
        let mut rc = layered(None, &[("model", "clstm2".into())]).unwrap();
        let (cfg, s) = resolve(&mut rc, (32, 32)).unwrap();
        assert_eq!((cfg.modality, cfg.fusion, s.batch_size), (Modality::Both, FusionMode::Add, 8));
        assert_eq!(rc.get("modality").unwrap(), "both");
        assert_eq!(rc.provenance("modality"), Some(Provenance::Default));

        let mut rc = layered(None, &[("model", "framecnn".into())]).unwrap();
        let (_, s) = resolve(&mut rc, (32, 32)).unwrap();
        assert_eq!((s.optimizer.kind, s.batch_size), (OptimizerKind::Rmsprop, 16));
        assert_eq!(rc.get("optimizer").unwrap(), "rmsprop");
    }

    #[test]
    fn flags_override_and_bad_keys_fail() {
        let mut rc = layered(None, &[("batch_size", "4".into()), ("patience", "none".into())]).unwrap();
        let (_, s) = resolve(&mut rc, (32, 32)).unwrap();
        assert_eq!((s.batch_size, s.patience), (4, None));
        assert!(layered(None, &[("nonsense", "1".into())]).is_err());
        assert!(test_subject(&rc).is_err());
    }
}
