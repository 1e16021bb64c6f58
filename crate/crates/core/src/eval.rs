//! Sequence-level scoring and the leave-one-subject-out harness.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::data::{Corpus, SeqRef};
use crate::error::{Error, Result};
use crate::models::{frame_labels, Model, ModelConfig};
use crate::rng::{derive_seed, stream, Rng};
use crate::tensor::Tensor;
use crate::train::{check_disjoint, predict_sequences, train, TrainSchedule};

pub const SUBJECTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub test_subject: u32,
    pub val_subject: u32,
    pub train_subjects: Vec<u32>,
}

/// One plan per test subject. With subjects sorted as `s₁..s₆`, validation
/// is `s₅`, or `s₁` when `s₅` is the test subject; the other four train.
pub fn plan_folds(subjects: &[u32]) -> Result<Vec<FoldPlan>> {
    let mut s = subjects.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.len() != SUBJECTS || s.len() != subjects.len() {
        return Err(Error::Config(format!("need {SUBJECTS} distinct subjects, got {subjects:?}")));
    }
    Ok(s.iter()
        .map(|&test| {
            let val = if test == s[4] { s[0] } else { s[4] };
            FoldPlan {
                test_subject: test,
                val_subject: val,
                train_subjects: s.iter().copied().filter(|&x| x != test && x != val).collect(),
            }
        })
        .collect())
}

/// Modal label; an exact tie is settled by one fair draw from `rng`.
pub fn majority_vote(labels: &[u8], rng: &mut Rng) -> Result<u8> {
    if labels.is_empty() {
        return Err(Error::Usage("majority vote over zero labels".into()));
    }
    let ones = labels.iter().filter(|&&l| l == 1).count();
    let zeros = labels.len() - ones;
    Ok(match ones.cmp(&zeros) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Equal => u8::from(rng.random_bool(0.5)),
    })
}

/// Binary scores with pain (1) as the positive class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            tn,
            fn_,
            precision,
            recall,
            f1,
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
        }
    }
}

pub fn compute_metrics(preds: &[u8], labels: &[u8]) -> Result<Metrics> {
    if preds.len() != labels.len() {
        return Err(Error::Usage(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::Usage("metrics over zero predictions".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, tn, fn_))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequencePrediction {
    pub clip_id: String,
    pub start: usize,
    pub label: u8,
    pub predicted: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub repeat: usize,
    /// Index of the test subject in sorted order.
    pub fold: usize,
    pub test_subject: u32,
    pub seed: u64,
    pub best_epoch: usize,
    pub metrics: Metrics,
    pub predictions: Vec<SequencePrediction>,
}

/// Majority-vote each sequence's per-frame probabilities and score them.
pub fn score_sequences(
    corpus: &Corpus,
    refs: &[SeqRef],
    probs: &[Tensor],
    vote_rng: &mut Rng,
) -> Result<(Metrics, Vec<SequencePrediction>)> {
    let mut preds = Vec::with_capacity(refs.len());
    for (&r, p) in refs.iter().zip(probs) {
        let shape = p.shape();
        let batched = p.clone().reshape(&[1, shape[0], shape[1]])?;
        let frames = frame_labels(&batched).remove(0);
        preds.push(SequencePrediction {
            clip_id: corpus.clips[r.clip].entry.clip_id.clone(),
            start: r.start,
            label: corpus.label(r),
            predicted: majority_vote(&frames, vote_rng)?,
        });
    }
    let p: Vec<u8> = preds.iter().map(|s| s.predicted).collect();
    let l: Vec<u8> = preds.iter().map(|s| s.label).collect();
    Ok((compute_metrics(&p, &l)?, preds))
}

/// Seeds of one (repeat, fold) task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSeeds {
    pub task: u64,
    pub init: u64,
    pub schedule: u64,
    pub vote: u64,
}

impl TaskSeeds {
    pub fn derive(master: u64, repeat: usize, fold: usize) -> Self {
        let task = derive_seed(master, &[repeat as u64, fold as u64]);
        Self {
            task,
            init: derive_seed(task, &[0]),
            schedule: derive_seed(task, &[1]),
            vote: derive_seed(task, &[2]),
        }
    }
}

/// Train and test one fold; subject exclusivity is checked first.
pub fn run_fold(
    corpus: &Corpus,
    plan: &FoldPlan,
    config: &ModelConfig,
    schedule: &TrainSchedule,
    seeds: TaskSeeds,
    run_dir: Option<&Path>,
) -> Result<(Metrics, Vec<SequencePrediction>, usize)> {
    let train_refs = corpus.sequences(&plan.train_subjects);
    let val_refs = corpus.sequences(&[plan.val_subject]);
    let test_refs = corpus.sequences(&[plan.test_subject]);
    check_disjoint(
        corpus,
        &[("train", &train_refs), ("validation", &val_refs), ("test", &test_refs)],
    )?;
    if test_refs.is_empty() {
        return Err(Error::EmptyInput(format!("subject {} has no sequences", plan.test_subject)));
    }
    let mut model = Model::build(config.clone(), seeds.init)?;
    let sched = TrainSchedule {
        seed: seeds.schedule,
        ..schedule.clone()
    };
    let outcome = train(&mut model, corpus, &train_refs, &val_refs, &sched, run_dir)?;
    let probs = predict_sequences(&model, corpus, &test_refs, sched.batch_size)?;
    let (m, preds) = score_sequences(corpus, &test_refs, &probs, &mut stream(seeds.vote))?;
    Ok((m, preds, outcome.best_epoch))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub master_seed: u64,
    pub repeats: usize,
    pub folds: usize,
    /// Ordered by (repeat, fold).
    pub rows: Vec<FoldResult>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
fn pstd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// Mean over repeats of the across-fold standard deviation.
    pub std_foldwise: f64,
    /// Mean over test subjects of the across-repeat standard deviation.
    pub std_repeatwise: f64,
}

impl EvalReport {
    fn aggregate(&self, metric: impl Fn(&Metrics) -> f64) -> Aggregate {
        let all: Vec<f64> = self.rows.iter().map(|r| metric(&r.metrics)).collect();
        let mut repeats: Vec<usize> = self.rows.iter().map(|r| r.repeat).collect();
        let mut folds: Vec<usize> = self.rows.iter().map(|r| r.fold).collect();
        repeats.sort_unstable();
        repeats.dedup();
        folds.sort_unstable();
        folds.dedup();
        let spread = |keep: &dyn Fn(&FoldResult) -> bool| {
            let v: Vec<f64> = self.rows.iter().filter(|r| keep(r)).map(|r| metric(&r.metrics)).collect();
            pstd(&v)
        };
        let by_repeat: Vec<f64> = repeats.iter().map(|&rep| spread(&|r| r.repeat == rep)).collect();
        let by_fold: Vec<f64> = folds.iter().map(|&f| spread(&|r| r.fold == f)).collect();
        Aggregate {
            mean: mean(&all),
            std_foldwise: mean(&by_repeat),
            std_repeatwise: mean(&by_fold),
        }
    }

    pub fn f1(&self) -> Aggregate {
        self.aggregate(|m| m.f1)
    }

    pub fn accuracy(&self) -> Aggregate {
        self.aggregate(|m| m.accuracy)
    }

    pub fn report_csv(&self) -> String {
        let mut s = String::from("repeat,fold,test_subject,f1,accuracy,precision,recall,tp,fp,tn,fn\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.repeat, r.fold, r.test_subject, m.f1, m.accuracy, m.precision, m.recall, m.tp, m.fp, m.tn, m.fn_
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("model,metric,mean,std_foldwise,std_repeatwise,folds,repeats,master_seed\n");
        for (name, a) in [("f1", self.f1()), ("accuracy", self.accuracy())] {
            let _ = writeln!(
                s,
                "{},{name},{},{},{},{},{},{}",
                self.model, a.mean, a.std_foldwise, a.std_repeatwise, self.folds, self.repeats, self.master_seed
            );
        }
        s
    }

    pub fn seeds_csv(&self) -> String {
        let mut s = String::from("repeat,fold,seed,best_epoch\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.repeat, r.fold, r.seed, r.best_epoch);
        }
        s
    }

    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("repeat,fold,clip_id,start,label,predicted\n");
        for r in &self.rows {
            for p in &r.predictions {
                let _ = writeln!(s, "{},{},{},{},{},{}", r.repeat, r.fold, p.clip_id, p.start, p.label, p.predicted);
            }
        }
        s
    }

    /// Write `report.csv`, `summary.csv`, `seeds.csv` and `predictions.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.csv", self.report_csv()),
            ("summary.csv", self.summary_csv()),
            ("seeds.csv", self.seeds_csv()),
            ("predictions.csv", self.predictions_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Leave-one-subject-out cross-validation over `repeats` independent
/// repetitions. Tasks run in parallel on the current rayon pool and are
/// merged in (repeat, fold) order; any failure aborts the whole run.
pub fn run_loso(
    corpus: &Corpus,
    config: &ModelConfig,
    schedule: &TrainSchedule,
    repeats: usize,
    master_seed: u64,
    run_dir: Option<&Path>,
) -> Result<EvalReport> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    let plans = plan_folds(&corpus.subjects())?;
    let tasks: Vec<(usize, usize)> = (0..repeats).flat_map(|r| (0..plans.len()).map(move |f| (r, f))).collect();
    let rows = tasks
        .par_iter()
        .map(|&(repeat, fold)| {
            let plan = &plans[fold];
            let seeds = TaskSeeds::derive(master_seed, repeat, fold);
            let dir = run_dir.map(|d| d.join(format!("r{repeat}_s{}", plan.test_subject)));
            let (metrics, predictions, best_epoch) = run_fold(corpus, plan, config, schedule, seeds, dir.as_deref())
                .map_err(|e| Error::Fold {
                    repeat,
                    test_subject: plan.test_subject,
                    source: Box::new(e),
                })?;
            log::info!(
                "repeat {repeat} test subject {}: f1 {:.4} accuracy {:.4}",
                plan.test_subject,
                metrics.f1,
                metrics.accuracy
            );
            Ok(FoldResult {
                repeat,
                fold,
                test_subject: plan.test_subject,
                seed: seeds.task,
                best_epoch,
                metrics,
                predictions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport {
        model: Model::build(config.clone(), 0)?.name,
        master_seed,
        repeats,
        folds: plans.len(),
        rows,
    };
    if let Some(d) = run_dir {
        report.write(d)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::build_corpus;
    use crate::data::SyntheticSpec;
    use crate::models::Modality;
    use crate::train::TrainSchedule;

    #[test]
    fn fold_rotation() {
        let plans = plan_folds(&[1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(plans[2].val_subject, 5);
        assert_eq!(plans[2].train_subjects, vec![1, 2, 4, 6]);
        assert_eq!(plans[4].val_subject, 1);
        assert_eq!(plans[4].train_subjects, vec![2, 3, 4, 6]);
        let tests: Vec<u32> = plans.iter().map(|p| p.test_subject).collect();
        assert_eq!(tests, vec![1, 2, 3, 4, 5, 6]);
        for p in &plans {
            let mut all = p.train_subjects.clone();
            all.extend([p.test_subject, p.val_subject]);
            all.sort_unstable();
            assert_eq!(all, vec![1, 2, 3, 4, 5, 6]);
        }
        assert!(plan_folds(&[1, 2, 3]).is_err());
        assert!(plan_folds(&[1, 1, 2, 3, 4, 5]).is_err());
    }

    #[test]
    fn vote_examples() {
        let mut r = stream(0);
        assert_eq!(majority_vote(&[1, 1, 1, 1, 1, 1, 0, 0, 0, 0], &mut r).unwrap(), 1);
        assert_eq!(majority_vote(&[0; 10], &mut r).unwrap(), 0);
        assert!(majority_vote(&[], &mut r).is_err());
        let tie = [1, 0, 1, 0, 1, 0, 1, 0, 1, 0];
        let a: Vec<u8> = (0..50).map(|s| majority_vote(&tie, &mut stream(s)).unwrap()).collect();
        let b: Vec<u8> = (0..50).map(|s| majority_vote(&tie, &mut stream(s)).unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn metric_examples() {
        let m = compute_metrics(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((m.f1, m.accuracy), (1.0, 1.0));
        let m = compute_metrics(&[1, 1], &[1, 0]).unwrap();
        assert_eq!((m.precision, m.recall), (0.5, 1.0));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        let m = compute_metrics(&[1, 1, 1, 1], &[1, 0, 0, 0]).unwrap();
        assert_eq!(m.accuracy, 0.25);
        assert!((m.f1 - 0.4).abs() < 1e-15);
        assert_eq!(compute_metrics(&[0, 0], &[0, 0]).unwrap().f1, 0.0);
        assert!(compute_metrics(&[1], &[1, 0]).is_err());
    }

    fn six_subject_corpus() -> Corpus {
        let spec = SyntheticSpec {
            clips_per_class: 1,
            frames_per_clip: 20,
            size: 16,
            successors: false,
            ..SyntheticSpec::default()
        };
        build_corpus(&spec, None).unwrap()
    }

    #[test]
    fn constant_pain_output_scores_prevalence() {
        // Drop one negative clip of subject 2 to make prevalence unequal.
        let mut corpus = six_subject_corpus();
        corpus.clips.retain(|c| c.entry.clip_id != "s2_c00");
        for s in corpus.subjects() {
            let refs = corpus.sequences(&[s]);
            let probs = vec![Tensor::new(&[10, 2], [0.2, 0.8].repeat(10)).unwrap(); refs.len()];
            let (m, _) = score_sequences(&corpus, &refs, &probs, &mut stream(0)).unwrap();
            let p = refs.iter().filter(|&&r| corpus.label(r) == 1).count() as f64 / refs.len() as f64;
            assert!((m.accuracy - p).abs() < 1e-15);
            assert!((m.f1 - 2.0 * p / (1.0 + p)).abs() < 1e-15);
        }
    }

    #[test]
    fn corrupted_plan_is_rejected() {
        let corpus = six_subject_corpus();
        let plan = FoldPlan {
            test_subject: 3,
            val_subject: 5,
            train_subjects: vec![1, 2, 3, 4],
        };
        let cfg = ModelConfig {
            hidden: 2,
            kernel: 3,
            layers: 1,
            ..ModelConfig::frame_cnn(Modality::Rgb).with_resolution(16, 16)
        };
        let sched = TrainSchedule::for_model(cfg.kind, cfg.modality, 0);
        let r = run_fold(&corpus, &plan, &cfg, &sched, TaskSeeds::derive(0, 0, 0), None);
        assert!(matches!(r, Err(Error::Protocol(_))));
    }

    #[test]
    fn aggregates_use_population_std_and_equal_fold_weights() {
        let row = |repeat, fold, acc: f64| FoldResult {
            repeat,
            fold,
            test_subject: fold as u32 + 1,
            seed: 0,
            best_epoch: 1,
            metrics: Metrics {
                accuracy: acc,
                ..Metrics::from_counts(0, 0, 0, 0)
            },
            predictions: Vec::new(),
        };
        let report = EvalReport {
            model: "m".into(),
            master_seed: 0,
            repeats: 2,
            folds: 2,
            rows: vec![row(0, 0, 0.5), row(0, 1, 1.0), row(1, 0, 0.7), row(1, 1, 0.9)],
        };
        let a = report.accuracy();
        assert!((a.mean - 0.775).abs() < 1e-15);
        assert!((a.std_foldwise - 0.5 * (0.25 + 0.1)).abs() < 1e-12);
        assert!((a.std_repeatwise - 0.5 * (0.1 + 0.05)).abs() < 1e-12);
        assert!(report.summary_csv().contains("std_foldwise"));
    }

    #[test]
    fn tiny_loso_is_reproducible() {
        let corpus = six_subject_corpus();
        let cfg = ModelConfig {
            hidden: 2,
            kernel: 3,
            layers: 1,
            ..ModelConfig::frame_cnn(Modality::Rgb).with_resolution(16, 16)
        };
        let sched = TrainSchedule {
            max_epochs: 2,
            patience: Some(1),
            ..TrainSchedule::for_model(cfg.kind, cfg.modality, 0)
        };
        let a = run_loso(&corpus, &cfg, &sched, 1, 42, None).unwrap();
        assert_eq!(a.rows.len(), 6);
        assert_eq!(a.report_csv().lines().count(), 7);
        let b = run_loso(&corpus, &cfg, &sched, 1, 42, None).unwrap();
        assert_eq!(a.summary_csv(), b.summary_csv());
        assert_eq!(a.report_csv(), b.report_csv());
    }
}
