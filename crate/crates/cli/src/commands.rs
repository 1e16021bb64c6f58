use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use clstm_core::config::{read_kv_file, RunConfig, RESOLVED_CONFIG_FILE};
use clstm_core::data::{
    extract_clip_flow, generate_synthetic_corpus, CorpusManifest, FlowExtraction, SeqRef, SyntheticSpec,
    MANIFEST_FILE, SEQUENCE_LEN,
};
use clstm_core::eval::{plan_folds, run_fold, run_loso, score_sequences, EvalReport, FoldPlan, FoldResult, TaskSeeds};
use clstm_core::flow::FlowParams;
use clstm_core::rng::stream;
use clstm_core::saliency::{saliency, write_saliency, SaliencyMethod};
use clstm_core::train::predict_sequences;
use clstm_core::{Error, Model, Result, Tensor};

use crate::settings::{self, frame_size, load_corpus, resolve, run_label};

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const SPEC_COPY_FILE: &str = "synthetic.txt";

fn is_nonempty_dir(p: &Path) -> bool {
    std::fs::read_dir(p).is_ok_and(|mut d| d.next().is_some())
}

fn claim_dir(dir: &Path, force: bool) -> Result<()> {
    if !force && is_nonempty_dir(dir) {
        return Err(Error::Usage(format!(
            "output directory {} is not empty (pass --force to overwrite)",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn gen_data(spec_file: Option<&Path>, out: &Path, seed: Option<u64>, force: bool) -> Result<String> {
    let mut spec = match spec_file {
        Some(p) if !p.is_file() => {
            return Err(Error::Usage(format!("spec file {} does not exist", p.display())));
        }
        Some(p) => SyntheticSpec::from_kv(&read_kv_file(p)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    claim_dir(out, force)?;
    let manifest = generate_synthetic_corpus(&spec, out)?;
    let mut copy = String::new();
    for (k, v) in spec.to_kv() {
        let _ = writeln!(copy, "{k}={v}");
    }
    write_file(&out.join(SPEC_COPY_FILE), &copy)?;
    let frames: usize = manifest.entries.iter().map(|e| e.n_frames).sum();
    Ok(format!(
        "corpus={} clips={} subjects={} frames={} seed={}",
        out.display(),
        manifest.entries.len(),
        manifest.subjects().len(),
        frames,
        spec.seed
    ))
}

pub fn extract_flow(corpus: &Path, cache: &Path, params: &FlowParams, bound: f64) -> Result<String> {
    params.validate()?;
    let mpath = corpus.join(MANIFEST_FILE);
    if !mpath.is_file() {
        return Err(Error::Usage(format!("{} has no corpus manifest", corpus.display())));
    }
    let manifest = CorpusManifest::read(&mpath)?;
    let per_clip: Vec<FlowExtraction> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let r = extract_clip_flow(corpus, cache, &manifest, e, params, bound);
            if let Ok(s) = &r {
                log::info!("{}: {} written, {} skipped", e.clip_id, s.written, s.skipped);
            }
            r
        })
        .collect::<Result<_>>()?;
    let mut total = FlowExtraction::default();
    for s in per_clip {
        total += s;
    }
    Ok(format!(
        "cache={} clips={} written={} skipped={} window={}",
        cache.display(),
        manifest.entries.len(),
        total.written,
        total.skipped,
        params.window
    ))
}

/// The fold of `test`: the standard rotation, or a caller-chosen
/// validation subject with everything else training.
fn fold_plan(subjects: &[u32], test: u32, val: Option<u32>) -> Result<(usize, FoldPlan)> {
    let plans = plan_folds(subjects)?;
    let fold = plans
        .iter()
        .position(|p| p.test_subject == test)
        .ok_or_else(|| Error::Usage(format!("test subject {test} is not in the corpus (subjects {subjects:?})")))?;
    let mut plan = plans[fold].clone();
    if let Some(v) = val {
        if !subjects.contains(&v) {
            return Err(Error::Usage(format!("validation subject {v} is not in the corpus")));
        }
        plan.val_subject = v;
        plan.train_subjects = subjects.iter().copied().filter(|&s| s != test && s != v).collect();
        plan.train_subjects.sort_unstable();
    }
    Ok((fold, plan))
}

fn val_subject(rc: &RunConfig) -> Result<Option<u32>> {
    match rc.get("val_subject")? {
        "auto" => Ok(None),
        _ => rc.parse("val_subject").map(Some),
    }
}

pub struct TrainArgs {
    pub rc: RunConfig,
    pub out: Option<PathBuf>,
    pub force: bool,
}

pub fn train(mut a: TrainArgs) -> Result<String> {
    let test = settings::test_subject(&a.rc)?;
    let corpus = load_corpus(&a.rc)?;
    let (config, schedule) = resolve(&mut a.rc, frame_size(&corpus)?)?;
    let (fold, plan) = fold_plan(&corpus.subjects(), test, val_subject(&a.rc)?)?;
    let seeds = TaskSeeds::derive(schedule.seed, 0, fold);
    let dir = a.out.unwrap_or_else(|| {
        let runs = PathBuf::from(a.rc.get("runs").unwrap_or("runs"));
        runs.join(format!("{}_s{test}_seed{}", run_label(&config), schedule.seed))
    });
    claim_dir(&dir, a.force)?;
    a.rc.write(&dir)?;
    log::info!("training {} on subjects {:?}, validating on {}", run_label(&config), plan.train_subjects, plan.val_subject);
    let (m, _, best_epoch) = run_fold(&corpus, &plan, &config, &schedule, seeds, Some(&dir))?;
    Ok(format!(
        "run={} model={} test_subject={test} val_subject={} best_epoch={best_epoch} f1={} accuracy={}",
        dir.display(),
        run_label(&config),
        plan.val_subject,
        m.f1,
        m.accuracy
    ))
}

/// Settings of a finished run, read back from its directory.
fn load_run(run: &Path) -> Result<RunConfig> {
    let file = run.join(RESOLVED_CONFIG_FILE);
    if !file.is_file() {
        return Err(Error::Usage(format!("{} is not a run directory (no {RESOLVED_CONFIG_FILE})", run.display())));
    }
    settings::layered(Some(&file), &[])
}

fn load_checkpoint(model: &mut Model, run: &Path) -> Result<()> {
    let ckpt = run.join(CHECKPOINT_FILE);
    if !ckpt.is_file() {
        return Err(Error::Usage(format!("missing checkpoint {}", ckpt.display())));
    }
    model.params.load_into(&ckpt)
}

/// First epoch with the lowest validation loss in `history.csv`.
fn best_epoch(run: &Path) -> Result<usize> {
    let p = run.join("history.csv");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    let mut best = (0, f64::INFINITY);
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parsed = (f.first().and_then(|e| e.parse().ok()), f.get(2).and_then(|v| v.parse::<f64>().ok()));
        let (Some(epoch), Some(val)) = parsed else {
            return Err(Error::Format {
                what: "history",
                detail: format!("{}: bad row {line:?}", p.display()),
            });
        };
        if val < best.1 {
            best = (epoch, val);
        }
    }
    Ok(best.0)
}

fn aggregate_line(dir: &Path, report: &EvalReport) -> String {
    let (f1, acc) = (report.f1(), report.accuracy());
    format!(
        "run={} model={} rows={} f1_mean={} f1_std_foldwise={} f1_std_repeatwise={} accuracy_mean={} accuracy_std_foldwise={} accuracy_std_repeatwise={}",
        dir.display(),
        report.model,
        report.rows.len(),
        f1.mean,
        f1.std_foldwise,
        f1.std_repeatwise,
        acc.mean,
        acc.std_foldwise,
        acc.std_repeatwise
    )
}

/// Score a trained run's checkpoint on its test subject.
pub fn evaluate_run(run: &Path) -> Result<String> {
    let mut rc = load_run(run)?;
    let test = settings::test_subject(&rc)?;
    let corpus = load_corpus(&rc)?;
    let (config, schedule) = resolve(&mut rc, frame_size(&corpus)?)?;
    let (fold, _) = fold_plan(&corpus.subjects(), test, val_subject(&rc)?)?;
    let seeds = TaskSeeds::derive(schedule.seed, 0, fold);
    let mut model = Model::build(config.clone(), seeds.init)?;
    load_checkpoint(&mut model, run)?;
    let refs = corpus.sequences(&[test]);
    let probs = predict_sequences(&model, &corpus, &refs, schedule.batch_size)?;
    let (metrics, predictions) = score_sequences(&corpus, &refs, &probs, &mut stream(seeds.vote))?;
    let report = EvalReport {
        model: run_label(&config),
        master_seed: schedule.seed,
        repeats: 1,
        folds: 1,
        rows: vec![FoldResult {
            repeat: 0,
            fold,
            test_subject: test,
            seed: seeds.task,
            best_epoch: best_epoch(run)?,
            metrics,
            predictions,
        }],
    };
    report.write(run)?;
    Ok(aggregate_line(run, &report))
}

pub fn crossval(mut a: TrainArgs) -> Result<String> {
    let corpus = load_corpus(&a.rc)?;
    let (config, schedule) = resolve(&mut a.rc, frame_size(&corpus)?)?;
    let repeats: usize = a.rc.parse("repeats")?;
    let dir = a.out.unwrap_or_else(|| {
        let runs = PathBuf::from(a.rc.get("runs").unwrap_or("runs"));
        runs.join(format!("cv_{}_seed{}", run_label(&config), schedule.seed))
    });
    claim_dir(&dir, a.force)?;
    a.rc.write(&dir)?;
    let mut report = run_loso(&corpus, &config, &schedule, repeats, schedule.seed, Some(&dir))?;
    report.model = run_label(&config);
    report.write(&dir)?;
    Ok(aggregate_line(&dir, &report))
}

pub struct SaliencyArgs {
    pub run: PathBuf,
    pub clip: String,
    pub start: usize,
    pub class: usize,
    pub method: SaliencyMethod,
    pub untrained: bool,
    pub out: Option<PathBuf>,
}

pub fn saliency_maps(a: SaliencyArgs) -> Result<String> {
    let mut rc = load_run(&a.run)?;
    let corpus = load_corpus(&rc)?;
    let (config, _) = resolve(&mut rc, frame_size(&corpus)?)?;
    let clip = corpus
        .clip_index(&a.clip)
        .ok_or_else(|| Error::Usage(format!("unknown clip {:?}", a.clip)))?;
    let n = corpus.clips[clip].entry.n_frames;
    if a.start + SEQUENCE_LEN > n {
        return Err(Error::Usage(format!(
            "start {} leaves fewer than {SEQUENCE_LEN} frames in clip {} ({n} frames)",
            a.start, a.clip
        )));
    }
    let mut model = Model::build(config, 0)?;
    if a.untrained {
        log::warn!("using an untrained all-zero checkpoint; heatmaps will be blank");
        let names: Vec<String> = model.params.trainable_names().map(String::from).collect();
        for name in names {
            let t = model.params.get_mut(&name)?;
            *t = Tensor::zeros(t.shape());
        }
    } else {
        load_checkpoint(&mut model, &a.run)?;
    }
    let sample = corpus.sample(SeqRef { clip, start: a.start });
    let result = saliency(&model, &sample, a.class, a.method)?;
    let dir = a
        .out
        .unwrap_or_else(|| a.run.join("saliency").join(&a.clip).join(a.start.to_string()));
    write_saliency(&dir, &sample, &result)?;
    let filters: Vec<String> = result.filters.iter().map(|f| f.to_string()).collect();
    Ok(format!(
        "out={} clip={} start={} class={} frames={} filters={} degenerate={}",
        dir.display(),
        a.clip,
        a.start,
        a.class,
        result.heatmaps.len(),
        filters.join(","),
        result.degenerate
    ))
}

/// 0 success, 1 data error, 2 usage or configuration error, 3 protocol
/// violation.
pub fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Format { what: "config", .. } => 2,
        Error::Protocol(_) => 3,
        _ => 1,
    }
}
