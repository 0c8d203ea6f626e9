//! Subcommand implementations.
//!
//! Output files, all under the resolved `out` directory:
//!
//! | command   | files |
//! |-----------|-------|
//! | every run | `resolved.toml` |
//! | `gen`     | `dataset.bin` or `dataset.csv`, `manifest.json` |
//! | `train`   | `checkpoint.bin`, `train_log.csv`, `summary.json`, `roc.csv` |
//! | `eval`    | `roc.csv`, `eval.json` |
//! | `analyze` | `uncertainty.csv`, `bad_cases.csv`, `intra_class.csv`, `blur_probe.csv`, `analysis.json` |
//! | `sweep`   | `sweep.csv` |
//!
//! `roc.csv` has the header `fpr,tpr`. `summary.json` has the keys
//! `mode`, `seed`, `steps`, `final_loss`, `sigma_bar`, `train_acc`, `pairs`,
//! `tpr_at` (list of `{fpr, tpr}`) and `interval_auc`; the ROC fields of a
//! training summary are computed on the training set with cosine scores.
//! `eval.json` has `metric`, `pairs`, `tpr_at`, `interval_auc` and `rank1`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dul_core::analysis::{
    bad_case_report, blur_pair_probe, intra_class_distances, sigma_tertiles, uncertainty_report, BadCaseReport,
    Classifier, NoiseBucket, ProbeTable,
};
use dul_core::checkpoint::{Checkpoint, RunMode};
use dul_core::io as dsio;
use dul_core::linalg::Matrix;
use dul_core::losses::{ClassifierWeights, ClsLossConfig};
use dul_core::metrics::{pair_indices, rank1, roc, score_pairs, Metric, RocReport, TprAtFpr};
use dul_core::model::{EncoderModel, ModelConfig};
use dul_core::synth::{corrupt_fraction, gen_identities, GeneratorSpec, IdentitySpec, SyntheticIdentityDataset};
use dul_core::train::{
    class_center_targets, classification_accuracy, train_baseline, train_dul_cls, train_dul_rgs, TrainConfig, TrainLog,
};
use dul_core::DulError;
use serde::{Deserialize, Serialize};

use crate::config::{corruption_seed, DataFormat, RunConfig, SweepKind, SweepSection};
use crate::failure::Failure;

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Failure::MissingInput(path.display().to_string()).into(),
        _ => anyhow::Error::from(e).context(format!("reading {}", path.display())),
    })
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write_atomic(&cfg.out.join("resolved.toml"), cfg.to_toml().as_bytes())
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref()
        .ok_or_else(|| Failure::Config(format!("missing [{name}] section")).into())
}

/// Contract and spec violations in user-supplied settings are config errors.
fn as_config(e: DulError) -> anyhow::Error {
    match e {
        DulError::Contract(_) | DulError::Infeasible(_) => Failure::Config(e.to_string()).into(),
        other => other.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub corrupted: usize,
    pub format: DataFormat,
    pub file: String,
    pub spec_hash: String,
    pub spec: GeneratorSpec,
}

fn corrupted_count(ds: &SyntheticIdentityDataset) -> usize {
    let base = ds.spec.identities.base_noise;
    ds.noise_levels.iter().filter(|&&n| n != base).count()
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    let g = section(&cfg.gen, "gen")?;
    prepare_out(cfg)?;
    let spec = g.spec(cfg.seed);
    let ds = spec.generate().map_err(as_config)?;
    let (file, bytes) = match g.format {
        DataFormat::Binary => ("dataset.bin", dsio::to_binary(&ds)?),
        DataFormat::Csv => ("dataset.csv", dsio::to_csv(&ds).into_bytes()),
    };
    write_atomic(&cfg.out.join(file), &bytes)?;
    let manifest = Manifest {
        n: ds.len(),
        dim: ds.input_dim(),
        num_classes: ds.num_classes,
        corrupted: corrupted_count(&ds),
        format: g.format,
        file: file.to_string(),
        spec_hash: spec.hash(),
        spec,
    };
    write_json(&cfg.out.join("manifest.json"), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<SyntheticIdentityDataset> {
    let manifest: Manifest = serde_json::from_slice(&read_input(&dir.join("manifest.json"))?)
        .with_context(|| format!("parsing manifest in {}", dir.display()))?;
    let bytes = read_input(&dir.join(&manifest.file))?;
    let records = match manifest.format {
        DataFormat::Binary => dsio::from_binary(&bytes)?,
        DataFormat::Csv => dsio::from_csv(std::str::from_utf8(&bytes).context("dataset csv is not utf-8")?)?,
    };
    Ok(records.into_dataset(manifest.spec)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_input(path)?).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train_config(cfg: &RunConfig, mode: RunMode, seed: u64) -> TrainConfig {
    let o = &cfg.optim;
    let mut tc = match mode {
        RunMode::Baseline | RunMode::DulCls => TrainConfig::classification(
            ClsLossConfig {
                softmax: cfg.softmax.config(),
                lambda: if mode == RunMode::Baseline { 0.0 } else { o.lambda },
            },
            o.steps,
            seed,
        ),
        RunMode::DulRgs => TrainConfig::regression(o.steps, seed),
    };
    tc.batch_size = o.batch_size;
    tc.momentum = o.momentum;
    tc.weight_decay = o.weight_decay;
    tc.base_lr = o.base_lr;
    if let Some(lr) = o.max_lr {
        tc.max_lr = lr;
    }
    tc.zero_eps = o.zero_eps;
    tc
}

fn default_max_lr(mode: RunMode) -> f64 {
    match mode {
        RunMode::DulRgs => 0.01,
        _ => 0.1,
    }
}

/// Trains a baseline or DUL_cls model from fresh initializations drawn
/// from `seed`.
fn train_classification(
    cfg: &RunConfig,
    ds: &SyntheticIdentityDataset,
    mode: RunMode,
    seed: u64,
) -> Result<(Checkpoint, TrainLog)> {
    let m = &cfg.model;
    let mc = ModelConfig {
        input_dim: ds.input_dim(),
        hidden: m.hidden,
        trunk_layers: m.trunk_layers,
        embed_dim: m.embed_dim,
        sigma_bias_init: m.sigma_bias_init,
        mu_norm: m.mu_norm,
    };
    let model = EncoderModel::new(mc, seed).map_err(as_config)?;
    let w = ClassifierWeights::random(m.embed_dim, ds.num_classes, seed).map_err(as_config)?;
    let tc = train_config(cfg, mode, seed);
    tc.validate().map_err(as_config)?;
    let out = match mode {
        RunMode::Baseline => train_baseline(ds, model, w, &tc)?,
        _ => train_dul_cls(ds, model, w, &tc)?,
    };
    let ck = Checkpoint {
        mode,
        seed,
        model: out.model,
        classifier: out.classifier,
        softmax: cfg.softmax.config(),
    };
    Ok((ck, out.log))
}

/// Second DUL_rgs stage on top of a baseline checkpoint. The stored
/// classifier holds the regression targets (class centers).
fn train_regression(
    ds: &SyntheticIdentityDataset,
    baseline: &Checkpoint,
    tc: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    if baseline.mode != RunMode::Baseline {
        return Err(Failure::Config("dul-rgs needs a baseline checkpoint".into()).into());
    }
    tc.validate().map_err(as_config)?;
    let targets = class_center_targets(&baseline.classifier, &baseline.softmax, baseline.model.config.mu_norm)?;
    let (model, log) = train_dul_rgs(ds, &baseline.model, &targets, tc)?;
    let ck = Checkpoint {
        mode: RunMode::DulRgs,
        seed: tc.seed,
        model,
        classifier: targets,
        softmax: baseline.softmax,
    };
    Ok((ck, log))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: RunMode,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub sigma_bar: f64,
    pub train_acc: f64,
    pub pairs: usize,
    pub tpr_at: Vec<TprAtFpr>,
    pub interval_auc: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn roc_on(
    model: &EncoderModel,
    ds: &SyntheticIdentityDataset,
    metric: Metric,
    targets: &[f64],
    cap: usize,
    seed: u64,
) -> Result<(RocReport, usize)> {
    let (mu, sigma) = model.embed(&ds.inputs)?;
    let pairs = pair_indices(ds.len(), cap, seed);
    let scored = score_pairs(&mu, Some(&sigma), &ds.labels, metric, &pairs)?;
    Ok((roc(&scored, targets).map_err(as_config)?, pairs.len()))
}

pub fn train(mut cfg: RunConfig) -> Result<()> {
    let t = section(&cfg.train, "train")?.clone();
    cfg.optim.max_lr.get_or_insert(default_max_lr(t.mode));
    prepare_out(&cfg)?;
    let ds = load_dataset(&t.dataset)?;
    let (ck, log) = match t.mode {
        RunMode::DulRgs => {
            let path = t
                .baseline
                .as_ref()
                .ok_or_else(|| Failure::Config("dul-rgs requires train.baseline".into()))?;
            let baseline = load_checkpoint(path)?;
            train_regression(&ds, &baseline, &train_config(&cfg, RunMode::DulRgs, cfg.seed))?
        }
        mode => train_classification(&cfg, &ds, mode, cfg.seed)?,
    };
    write_atomic(&cfg.out.join("checkpoint.bin"), &ck.to_bytes()?)?;
    write_atomic(&cfg.out.join("train_log.csv"), log.to_csv().as_bytes())?;

    let (report, pairs) = roc_on(&ck.model, &ds, Metric::Cosine, &t.targets, t.pair_cap, cfg.seed)?;
    write_atomic(&cfg.out.join("roc.csv"), report.to_csv().as_bytes())?;
    let summary = TrainSummary {
        mode: t.mode,
        seed: cfg.seed,
        steps: log.len(),
        final_loss: log.final_loss().unwrap_or(f64::NAN),
        sigma_bar: mean(&ck.model.uncertainty(&ds.inputs)?),
        train_acc: classification_accuracy(&ck.model, &ck.classifier, &ck.softmax, &ds.inputs, &ds.labels)?,
        pairs,
        tpr_at: report.tpr_at,
        interval_auc: report.interval_auc,
    };
    write_json(&cfg.out.join("summary.json"), &summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metric: Metric,
    pub pairs: usize,
    pub tpr_at: Vec<TprAtFpr>,
    pub interval_auc: f64,
    /// First sample of each class is the gallery; all others are probes.
    pub rank1: f64,
}

fn gallery_split(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut seen = std::collections::BTreeSet::new();
    let (mut gallery, mut probes) = (Vec::new(), Vec::new());
    for (i, &y) in labels.iter().enumerate() {
        if seen.insert(y) {
            gallery.push(i);
        } else {
            probes.push(i);
        }
    }
    (gallery, probes)
}

fn rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols);
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_vec(idx.len(), m.cols, data)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let e = section(&cfg.eval, "eval")?;
    prepare_out(cfg)?;
    let ck = load_checkpoint(&e.checkpoint)?;
    if e.metric == Metric::Mls && !ck.has_sigma() {
        return Err(Failure::Config("metric mls needs a checkpoint with a trained sigma head".into()).into());
    }
    let ds = load_dataset(&e.dataset)?;
    let (report, pairs) = roc_on(&ck.model, &ds, e.metric, &e.targets, e.pair_cap, cfg.seed)?;
    let (mu, _) = ck.model.embed(&ds.inputs)?;
    let (gallery, probes) = gallery_split(&ds.labels);
    let r1 = if probes.is_empty() {
        f64::NAN
    } else {
        let pick = |idx: &[usize]| idx.iter().map(|&i| ds.labels[i]).collect::<Vec<_>>();
        rank1(
            &rows(&mu, &probes),
            &pick(&probes),
            &rows(&mu, &gallery),
            &pick(&gallery),
        )?
    };
    write_atomic(&cfg.out.join("roc.csv"), report.to_csv().as_bytes())?;
    write_json(
        &cfg.out.join("eval.json"),
        &EvalSummary {
            metric: e.metric,
            pairs,
            tpr_at: report.tpr_at,
            interval_auc: report.interval_auc,
            rank1: r1,
        },
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub buckets: Vec<NoiseBucket>,
    pub corrupted_auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntraClass {
    pub baseline: [Option<f64>; 3],
    pub dul: [Option<f64>; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub uncertainty: UncertaintySummary,
    pub bad_cases: BadCaseReport,
    pub intra_class: IntraClass,
    pub blur_probe: ProbeTable,
}

fn probe_pairs(ds: &SyntheticIdentityDataset, count: usize, seed: u64) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let (mut genuine, mut imposter) = (Vec::new(), Vec::new());
    for (i, j) in pair_indices(ds.len(), crate::config::DEFAULT_PAIR_CAP, seed) {
        let bucket = if ds.labels[i] == ds.labels[j] {
            &mut genuine
        } else {
            &mut imposter
        };
        if bucket.len() < count {
            bucket.push((i, j));
        }
    }
    (genuine, imposter)
}

fn opt_csv(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn analyze(cfg: &RunConfig) -> Result<()> {
    let a = section(&cfg.analyze, "analyze")?;
    prepare_out(cfg)?;
    let ds = load_dataset(&a.dataset)?;
    let base = load_checkpoint(&a.baseline)?;
    let dul = load_checkpoint(&a.dul)?;
    if !dul.has_sigma() {
        return Err(Failure::Config("analyze.dul must be a dul-cls or dul-rgs checkpoint".into()).into());
    }

    let unc = uncertainty_report(&dul.model, &ds)?;
    write_atomic(&cfg.out.join("uncertainty.csv"), unc.to_csv().as_bytes())?;

    let bad = bad_case_report(classifier(&base), classifier(&dul), &ds, &dul.model)?;
    write_atomic(&cfg.out.join("bad_cases.csv"), bad.to_csv().as_bytes())?;

    let tertiles = sigma_tertiles(&unc.sigma)?;
    let distances = |ck: &Checkpoint| -> Result<[Option<f64>; 3]> {
        let centers = class_center_targets(&ck.classifier, &ck.softmax, ck.model.config.mu_norm)?;
        let (mu, _) = ck.model.embed(&ds.inputs)?;
        let normalize = ck.model.config.mu_norm.is_none();
        Ok(intra_class_distances(
            &mu,
            &ds.labels,
            &centers,
            &tertiles.categories,
            normalize,
        )?)
    };
    let intra = IntraClass {
        baseline: distances(&base)?,
        dul: distances(&dul)?,
    };
    let mut csv = String::from("model,easy,semi_hard,hard\n");
    for (name, d) in [("baseline", intra.baseline), ("dul", intra.dul)] {
        let _ = writeln!(csv, "{name},{},{},{}", opt_csv(d[0]), opt_csv(d[1]), opt_csv(d[2]));
    }
    write_atomic(&cfg.out.join("intra_class.csv"), csv.as_bytes())?;

    let (genuine, imposter) = probe_pairs(&ds, a.probe_pairs, cfg.seed);
    let probe = blur_pair_probe(
        &[&base.model, &dul.model],
        &ds.inputs,
        &genuine,
        &imposter,
        &a.probe_ladder,
        cfg.seed,
    )
    .map_err(as_config)?;
    write_atomic(&cfg.out.join("blur_probe.csv"), probe.to_csv().as_bytes())?;

    write_json(
        &cfg.out.join("analysis.json"),
        &AnalysisReport {
            uncertainty: UncertaintySummary {
                buckets: unc.buckets,
                corrupted_auc: unc.corrupted_auc,
            },
            bad_cases: bad,
            intra_class: intra,
            blur_probe: probe,
        },
    )
}

fn classifier(ck: &Checkpoint) -> Classifier<'_> {
    Classifier {
        model: &ck.model,
        weights: &ck.classifier,
        softmax: &ck.softmax,
    }
}

/// Metrics of one sweep run.
#[derive(Debug, Clone)]
pub struct PointMetrics {
    pub sigma_bar: f64,
    pub train_acc: f64,
    pub tpr: Vec<f64>,
    pub interval_auc: f64,
}

fn sweep_point(cfg: &RunConfig, sw: &SweepSection, value: f64, seed: u64) -> Result<PointMetrics> {
    let fraction = match sw.kind {
        SweepKind::Noise => value,
        SweepKind::Lambda => sw.fraction,
    };
    let mut run_cfg = cfg.clone();
    if sw.kind == SweepKind::Lambda {
        run_cfg.optim.lambda = value;
    }
    let spec = sw.identities.spec(seed);
    let clean = gen_identities(&spec).map_err(as_config)?;
    let train = corrupt_fraction(&clean, fraction, sw.corruption_scale, corruption_seed(seed, 0)).map_err(as_config)?;
    let test = gen_identities(&IdentitySpec {
        per_class: sw.test_per_class,
        sample_stream: spec.sample_stream + 1,
        ..spec
    })
    .map_err(as_config)?;

    let ck = match sw.mode {
        RunMode::DulRgs => {
            let (base, _) = train_classification(&run_cfg, &train, RunMode::Baseline, seed)?;
            let mut tc = train_config(&run_cfg, RunMode::DulRgs, seed);
            tc.steps = sw.rgs_steps.unwrap_or(tc.steps);
            tc.max_lr = sw.rgs_max_lr.unwrap_or(default_max_lr(RunMode::DulRgs));
            train_regression(&train, &base, &tc)?.0
        }
        mode => train_classification(&run_cfg, &train, mode, seed)?.0,
    };
    let (report, _) = roc_on(&ck.model, &test, Metric::Cosine, &sw.targets, sw.pair_cap, seed)?;
    Ok(PointMetrics {
        sigma_bar: mean(&ck.model.uncertainty(&train.inputs)?),
        train_acc: classification_accuracy(&ck.model, &ck.classifier, &ck.softmax, &train.inputs, &train.labels)?,
        tpr: report.tpr_at.iter().map(|t| t.tpr).collect(),
        interval_auc: report.interval_auc,
    })
}

/// Seed-averaged metrics per grid value; the first failing seed is
/// reported and the remaining grid values still run.
pub fn sweep_rows(cfg: &RunConfig) -> Result<String> {
    let sw = section(&cfg.sweep, "sweep")?;
    if sw.values.is_empty() || sw.seeds == 0 {
        return Err(Failure::Config("sweep needs at least one value and one seed".into()).into());
    }
    let mut csv = String::from("value,seeds,sigma_bar,train_acc");
    for t in &sw.targets {
        let _ = write!(csv, ",tpr@{t}");
    }
    csv.push_str(",interval_auc,error\n");
    let first_seed = sw.identities.seed.unwrap_or(cfg.seed);
    for &value in &sw.values {
        let mut runs = Vec::new();
        let mut error = String::new();
        for k in 0..sw.seeds {
            match sweep_point(cfg, sw, value, first_seed.wrapping_add(k)) {
                Ok(m) => runs.push(m),
                Err(e) => {
                    error = format!("seed {}: {e:#}", first_seed.wrapping_add(k)).replace([',', '\n'], ";");
                    break;
                }
            }
        }
        let _ = write!(csv, "{value},{}", runs.len());
        if error.is_empty() {
            let n = runs.len() as f64;
            let avg = |f: &dyn Fn(&PointMetrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
            let _ = write!(csv, ",{},{}", avg(&|m| m.sigma_bar), avg(&|m| m.train_acc));
            for i in 0..sw.targets.len() {
                let _ = write!(csv, ",{}", avg(&|m| m.tpr[i]));
            }
            let _ = writeln!(csv, ",{},", avg(&|m| m.interval_auc));
        } else {
            csv.push_str(&",".repeat(sw.targets.len() + 3));
            let _ = writeln!(csv, ",{error}");
        }
    }
    Ok(csv)
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    section(&cfg.sweep, "sweep")?;
    prepare_out(cfg)?;
    let csv = sweep_rows(cfg)?;
    write_atomic(&cfg.out.join("sweep.csv"), csv.as_bytes())
}
