//! Acceptance suite: twelve criteria, one PASS/FAIL line each.
//!
//! Lines go straight to stderr so they show up without `--nocapture`.
//! Training-based criteria share one recipe (see `Recipe`) and reuse runs
//! through a cache.

mod common;

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use dul_core::analysis::{
    bad_case_report, intra_class_distances, pearson, sigma_tertiles, uncertainty_report, Classifier,
};
use dul_core::embedding::GaussianEmbedding;
use dul_core::gradcheck::gradient_check;
use dul_core::linalg::Matrix;
use dul_core::losses::*;
use dul_core::metrics::{mls_terms, pair_indices, roc, roc_with_interval, score_pairs, Metric, ScorePair};
use dul_core::model::{EncoderModel, ModelConfig};
use dul_core::synth::*;
use dul_core::train::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const SEEDS: u64 = 5;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut fails = Vec::new();
    let variants = [
        SoftmaxVariant::Plain,
        SoftmaxVariant::AmSoftmax,
        SoftmaxVariant::Arcface,
        SoftmaxVariant::L2Softmax,
    ];
    let softmax_for = |v: SoftmaxVariant, rng: &mut ChaCha8Rng| {
        let scale = rng.random_range(1.0..8.0);
        match v {
            SoftmaxVariant::Plain => SoftmaxConfig {
                normalize_features: rng.random_bool(0.5),
                ..SoftmaxConfig::plain()
            },
            SoftmaxVariant::AmSoftmax => SoftmaxConfig::am_softmax(rng.random_range(0.0..0.5), scale),
            SoftmaxVariant::Arcface => SoftmaxConfig::arcface(rng.random_range(0.0..0.6), scale),
            SoftmaxVariant::L2Softmax => SoftmaxConfig::l2_softmax(scale),
        }
    };
    let mut record = |name: &str, seed: u64, err: f64, passed: bool| {
        worst = worst.max(err);
        if !passed {
            fails.push(format!("{name}#{seed}"));
        }
    };

    for v in variants {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, d, c) = (
                rng.random_range(1..=5),
                rng.random_range(2..=6),
                rng.random_range(2..=5),
            );
            let cfg = softmax_for(v, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let mut params = gauss(&mut rng, n * d + c * d);
            params.truncate(n * d + c * d);
            let eval = |p: &[f64]| {
                let s = Matrix::from_vec(n, d, p[..n * d].to_vec());
                let w = ClassifierWeights::new(d, c, p[n * d..].to_vec()).unwrap();
                softmax_loss(&s, &labels, &w, &cfg).unwrap()
            };
            let out = eval(&params);
            let mut analytic = out.grad_s.data.clone();
            analytic.extend(&out.grad_w);
            let r = gradient_check(|p| eval(p).loss, &params, &analytic, TOL);
            record(&format!("{v:?}"), seed, r.max_rel_error, r.passed);
        }
    }
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let d = rng.random_range(1..=8);
        let mut params = gauss(&mut rng, d);
        params.extend((0..d).map(|_| rng.random_range(0.2..2.5)));
        let out = kl_terms(&params[..d], &params[d..]).unwrap();
        let mut analytic = out.grad_mu.clone();
        analytic.extend(&out.grad_sigma);
        let r = gradient_check(|p| kl_terms(&p[..d], &p[d..]).unwrap().value, &params, &analytic, TOL);
        record("kl", seed, r.max_rel_error, r.passed);
    }
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (n, d, c) = (
            rng.random_range(1..=5),
            rng.random_range(2..=6),
            rng.random_range(2..=5),
        );
        let cfg = ClsLossConfig {
            softmax: softmax_for(variants[seed as usize % 4], &mut rng),
            lambda: rng.random_range(0.0..1.0),
        };
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let eps = Matrix::from_vec(n, d, gauss(&mut rng, n * d));
        let nd = n * d;
        let mut params = gauss(&mut rng, nd);
        params.extend((0..nd).map(|_| rng.random_range(0.2..1.5)));
        params.extend(gauss(&mut rng, c * d));
        let eval = |p: &[f64]| {
            let mu = Matrix::from_vec(n, d, p[..nd].to_vec());
            let sigma = Matrix::from_vec(n, d, p[nd..2 * nd].to_vec());
            let w = ClassifierWeights::new(d, c, p[2 * nd..].to_vec()).unwrap();
            let batch = ClsBatch {
                mu: &mu,
                sigma: &sigma,
                eps: Some(&eps),
                labels: &labels,
            };
            cls_total_loss(batch, &w, &cfg).unwrap()
        };
        let out = eval(&params);
        let mut analytic = out.grad_mu.data.clone();
        analytic.extend(&out.grad_sigma.data);
        analytic.extend(&out.grad_w);
        let r = gradient_check(|p| eval(p).total, &params, &analytic, TOL);
        record("cls_total", seed, r.max_rel_error, r.passed);
    }
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let d = rng.random_range(1..=8);
        let target = gauss(&mut rng, d);
        let mut params = gauss(&mut rng, d);
        params.extend((0..d).map(|_| rng.random_range(-4.0..4.0)));
        let out = heteroscedastic_nll(&params[..d], &params[d..], &target).unwrap();
        let mut analytic = out.grad_mu.clone();
        analytic.extend(&out.grad_r);
        let r = gradient_check(
            |p| heteroscedastic_nll(&p[..d], &p[d..], &target).unwrap().value,
            &params,
            &analytic,
            TOL,
        );
        record("nll", seed, r.max_rel_error, r.passed);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        fails.is_empty() && secs < 60.0,
        format!("700 instances, max rel err {worst:.2e}, {secs:.1}s, failures {fails:?}"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=12);
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sigma: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..3.0)).collect();
        let r: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let t: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        // E_q[log q - log p] per coordinate
        let mut kl = 0.0;
        let mut nll = 0.0;
        for l in 0..d {
            kl += (-sigma[l].ln() - 0.5) + (mu[l] * mu[l] + sigma[l] * sigma[l]) / 2.0;
            let var = r[l].exp();
            nll += (t[l] - mu[l]).powi(2) / var + var.ln();
        }
        kl /= d as f64;
        nll *= 0.5 / d as f64;
        let got_kl = kl_regularizer(&GaussianEmbedding::new(mu.clone(), sigma).unwrap()).value;
        let got_nll = heteroscedastic_nll(&mu, &r, &t).unwrap().value;
        worst = worst
            .max((got_kl - kl).abs() / kl.abs().max(1.0))
            .max((got_nll - nll).abs() / nll.abs().max(1.0));
    }

    let mu = [0.4, -1.2, 0.0, 2.0];
    let sigma = [0.6, 1.3, 1.0, 0.8];
    let exact = kl_regularizer(&GaussianEmbedding::new(mu.to_vec(), sigma.to_vec()).unwrap()).value;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let mut s = 0.0;
        for l in 0..4 {
            let z = Normal::new(mu[l], sigma[l]).unwrap().sample(&mut rng);
            let u = (z - mu[l]) / sigma[l];
            s += -sigma[l].ln() - 0.5 * u * u + 0.5 * z * z;
        }
        acc += s / 4.0;
    }
    let mc = acc / draws as f64;
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-12 && (mc - exact).abs() < 1e-2 && secs < 60.0,
        format!(
            "scalar-loop rel err {worst:.1e}, monte carlo {mc:.5} vs {exact:.5} (|diff| {:.1e}), {secs:.1}s",
            (mc - exact).abs()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for e2 in [0.25f64, 1.0, 4.0, 9.0] {
        let e = e2.sqrt();
        let (mut best_r, mut best) = (f64::NAN, f64::INFINITY);
        for k in -5000..=5000 {
            let r = k as f64 * 1e-3;
            let v = heteroscedastic_nll(&[0.0], &[r], &[e]).unwrap().value;
            if v < best {
                best = v;
                best_r = r;
            }
        }
        ok &= (best_r - e2.ln()).abs() <= 1e-3;
        detail.push(format!("e2={e2}: {best_r:.3} vs {:.4}", e2.ln()));
    }
    check(ok, detail.join(", "))
}

// ---------------------------------------------------------------- recipe

/// C=20 identities of 200 samples in 32 dims, 16-d embeddings with fixed
/// norm 4, am-softmax (0.35, 30), 2000 SGD steps.
struct Recipe;

impl Recipe {
    const CLASSES: usize = 20;
    const EMBED: usize = 16;
    const MU_NORM: f64 = 4.0;
    const STEPS: usize = 2000;
    const LAMBDA: f64 = 0.01;
    const CORRUPTION_SCALE: f64 = 2.0;

    fn softmax() -> SoftmaxConfig {
        SoftmaxConfig::am_softmax(0.35, 30.0)
    }

    fn spec(base_noise: f64, seed: u64) -> IdentitySpec {
        IdentitySpec {
            num_classes: Self::CLASSES,
            per_class: 200,
            input_dim: 32,
            center_spread: 30.0,
            base_noise,
            seed,
            sample_stream: 0,
        }
    }

    fn train_set(base_noise: f64, fraction: f64, seed: u64) -> SyntheticIdentityDataset {
        let clean = gen_identities(&Self::spec(base_noise, seed)).unwrap();
        corrupt_fraction(&clean, fraction, Self::CORRUPTION_SCALE, seed + 100).unwrap()
    }

    /// Held-out clean split around the same centers.
    fn clean_test(base_noise: f64, seed: u64) -> SyntheticIdentityDataset {
        gen_identities(&IdentitySpec {
            per_class: 20,
            sample_stream: 1,
            ..Self::spec(base_noise, seed)
        })
        .unwrap()
    }

    fn init(seed: u64) -> (EncoderModel, ClassifierWeights) {
        let mut mc = ModelConfig::new(32, Self::EMBED);
        mc.mu_norm = Some(Self::MU_NORM);
        (
            EncoderModel::new(mc, seed).unwrap(),
            ClassifierWeights::random(Self::EMBED, Self::CLASSES, seed).unwrap(),
        )
    }

    fn train(ds: &SyntheticIdentityDataset, lambda: Option<f64>, seed: u64) -> TrainOutcome {
        let (m, w) = Self::init(seed);
        let cfg = TrainConfig::classification(
            ClsLossConfig {
                softmax: Self::softmax(),
                lambda: lambda.unwrap_or(0.0),
            },
            Self::STEPS,
            seed,
        );
        match lambda {
            None => train_baseline(ds, m, w, &cfg).unwrap(),
            Some(_) => train_dul_cls(ds, m, w, &cfg).unwrap(),
        }
    }
}

/// Baseline and DUL_cls runs on the corrupted recipe (base noise 0.15),
/// keyed by (fraction in percent, seed).
struct Pair {
    train: SyntheticIdentityDataset,
    baseline: TrainOutcome,
    dul: TrainOutcome,
}

type RunCache = HashMap<(u32, u64), Arc<Pair>>;

static RUNS: Mutex<Option<RunCache>> = Mutex::new(None);

fn corrupted_runs(fraction: f64, seed: u64) -> Arc<Pair> {
    let key = ((fraction * 100.0).round() as u32, seed);
    if let Some(p) = RUNS.lock().unwrap().get_or_insert_with(HashMap::new).get(&key) {
        return p.clone();
    }
    let train = Recipe::train_set(0.15, fraction, seed);
    let baseline = Recipe::train(&train, None, seed);
    let dul = Recipe::train(&train, Some(Recipe::LAMBDA), seed);
    let p = Arc::new(Pair { train, baseline, dul });
    RUNS.lock().unwrap().as_mut().unwrap().insert(key, p.clone());
    p
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let ds = Recipe::train_set(0.3, 0.0, 0);
    let (m, w) = Recipe::init(0);
    let mut cfg = TrainConfig::classification(
        ClsLossConfig {
            softmax: Recipe::softmax(),
            lambda: 0.0,
        },
        500,
        0,
    );
    let base = train_baseline(&ds, m.clone(), w.clone(), &cfg).unwrap();
    cfg.zero_eps = true;
    let dul = train_dul_cls(&ds, m, w, &cfg).unwrap();
    let params_equal = base.model.param_slices() == dul.model.param_slices();
    let w_equal = base.classifier.as_slice() == dul.classifier.as_slice();
    let losses_equal = base.log.steps.iter().zip(&dul.log.steps).all(|(a, b)| a.loss == b.loss);
    check(
        params_equal && w_equal && losses_equal,
        format!(
            "500 steps: params equal {params_equal}, classifier equal {w_equal}, per-step losses equal {losses_equal}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let lambdas = [0.0, 0.01, 1.0];
    let mut sigma = [0.0; 3];
    let mut acc = [0.0; 3];
    for seed in 0..SEEDS {
        let ds = Recipe::train_set(0.3, 0.0, seed);
        for (k, &l) in lambdas.iter().enumerate() {
            let out = Recipe::train(&ds, Some(l), seed);
            sigma[k] += mean_of(&out.model.uncertainty(&ds.inputs).unwrap()) / SEEDS as f64;
            acc[k] += classification_accuracy(&out.model, &out.classifier, &Recipe::softmax(), &ds.inputs, &ds.labels)
                .unwrap()
                / SEEDS as f64;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        sigma[0] < sigma[1] && sigma[1] < sigma[2] && acc[2] < acc[1] && secs < 600.0,
        format!(
            "sigma_bar {:.4} < {:.4} < {:.4}; train acc lambda=1 {:.4} < lambda=0.01 {:.4}; {secs:.0}s",
            sigma[0], sigma[1], sigma[2], acc[2], acc[1]
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let aucs: Vec<f64> = (0..SEEDS)
        .map(|seed| {
            let p = corrupted_runs(0.3, seed);
            uncertainty_report(&p.dul.model, &p.train)
                .unwrap()
                .corrupted_auc
                .unwrap()
        })
        .collect();
    let auc = mean_of(&aucs);
    check(
        auc > 0.8,
        format!("corrupted-vs-clean sigma AUC {auc:.4} (per seed {aucs:.3?})"),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let f = FnSpec::Affine {
        intercept: 0.0,
        slope: 1.0,
    };
    let s = FnSpec::Affine {
        intercept: 0.1,
        slope: 0.5,
    };
    let train = gen_hetreg(5000, f, s, (0.0, 1.0), 1).unwrap();
    let mut mc = ModelConfig::new(1, 1);
    mc.hidden = 32;
    let model = EncoderModel::new(mc, 3).unwrap();
    let (model, _) = fit_regression(
        &train.inputs(),
        &train.targets(),
        model,
        &TrainConfig::regression(4000, 5),
    )
    .unwrap();

    // Held-out x: a regular grid, none of it seen in training.
    let grid: Vec<f64> = (0..200).map(|k| (k as f64 + 0.5) / 200.0).collect();
    let (mu, sigma) = model.embed(&Matrix::from_vec(grid.len(), 1, grid.clone())).unwrap();
    let truth: Vec<f64> = grid.iter().map(|&x| s.eval(x)).collect();
    let r = pearson(&sigma.data, &truth).unwrap();
    let floor = (0..=1000)
        .map(|k| s.eval(k as f64 / 1000.0))
        .fold(f64::INFINITY, f64::min);
    let worst = grid
        .iter()
        .zip(&mu.data)
        .map(|(&x, m)| (m - f.eval(x)).abs())
        .fold(0.0, f64::max);
    check(
        r > 0.9 && worst < 2.0 * floor,
        format!("pearson {r:.4}; max |mu - f| {worst:.4} < 2 x noise floor {floor}"),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let (mut base, mut dul) = ([0.0; 3], [0.0; 3]);
    let sm = Recipe::softmax();
    for seed in 0..SEEDS {
        let p = corrupted_runs(0.3, seed);
        let r = bad_case_report(
            Classifier {
                model: &p.baseline.model,
                weights: &p.baseline.classifier,
                softmax: &sm,
            },
            Classifier {
                model: &p.dul.model,
                weights: &p.dul.classifier,
                softmax: &sm,
            },
            &p.train,
            &p.dul.model,
        )
        .unwrap();
        let (a, b) = (
            r.model_a.proportions.unwrap_or([0.0; 3]),
            r.model_b.proportions.unwrap_or([0.0; 3]),
        );
        for k in 0..3 {
            base[k] += a[k] / SEEDS as f64;
            dul[k] += b[k] / SEEDS as f64;
        }
    }
    check(
        dul[2] > base[2] && dul[0] < base[0],
        format!(
            "error share easy/semi/hard: baseline {:.3}/{:.3}/{:.3}, dul {:.3}/{:.3}/{:.3}",
            base[0], base[1], base[2], dul[0], dul[1], dul[2]
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let (mut base, mut rgs) = ([0.0; 3], [0.0; 3]);
    for seed in 0..SEEDS {
        let p = corrupted_runs(0.3, seed);
        let centers = class_center_targets(&p.baseline.classifier, &Recipe::softmax(), Some(Recipe::MU_NORM)).unwrap();
        let mut cfg = TrainConfig::regression(6000, seed);
        cfg.max_lr = 0.05;
        let (model, _) = train_dul_rgs(&p.train, &p.baseline.model, &centers, &cfg).unwrap();
        let tertiles = sigma_tertiles(&model.uncertainty(&p.train.inputs).unwrap()).unwrap();
        let (mu_b, _) = p.baseline.model.embed(&p.train.inputs).unwrap();
        let (mu_r, _) = model.embed(&p.train.inputs).unwrap();
        let db = intra_class_distances(&mu_b, &p.train.labels, &centers, &tertiles.categories, false).unwrap();
        let dr = intra_class_distances(&mu_r, &p.train.labels, &centers, &tertiles.categories, false).unwrap();
        for k in 0..3 {
            base[k] += db[k].unwrap() / SEEDS as f64;
            rgs[k] += dr[k].unwrap() / SEEDS as f64;
        }
    }
    check(
        rgs[0] < base[0] && rgs[1] < base[1] && rgs[2] > base[2],
        format!(
            "mean |mu - w_c| easy/semi/hard: baseline {:.4}/{:.4}/{:.4}, dul-rgs {:.4}/{:.4}/{:.4}",
            base[0], base[1], base[2], rgs[0], rgs[1], rgs[2]
        ),
    )
}

// ---------------------------------------------------------------- 10

fn tpr_at_one_percent(model: &EncoderModel, ds: &SyntheticIdentityDataset) -> f64 {
    let (mu, _) = model.embed(&ds.inputs).unwrap();
    let pairs = pair_indices(ds.len(), usize::MAX, 0);
    let scored = score_pairs(&mu, None, &ds.labels, Metric::Cosine, &pairs).unwrap();
    roc(&scored, &[0.01]).unwrap().tpr_at(0.01)
}

fn criterion_10() -> Outcome {
    let mut ok = true;
    let mut rows = Vec::new();
    for frac in [0.0, 0.1, 0.2, 0.3, 0.4] {
        let (mut b, mut d) = (0.0, 0.0);
        for seed in 0..SEEDS {
            let p = corrupted_runs(frac, seed);
            let test = Recipe::clean_test(0.15, seed);
            b += tpr_at_one_percent(&p.baseline.model, &test) / SEEDS as f64;
            d += tpr_at_one_percent(&p.dul.model, &test) / SEEDS as f64;
        }
        if frac >= 0.2 {
            ok &= d >= b;
        }
        rows.push(format!("{frac}: {b:.4} vs {d:.4}"));
    }
    check(ok, format!("clean TPR@1% baseline vs dul: {}", rows.join("; ")))
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Outcome {
    let targets = [0.0, 0.1, 0.25, 0.3, 0.5, 1.0];
    let interval = (0.05, 0.95);
    let cells = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut cases = 0usize;
    let mut mismatches = 0usize;
    for n in 2..=12usize {
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        for mask in 1..(1u32 << n) - 1 {
            let pairs: Vec<ScorePair> = (0..n)
                .map(|k| ScorePair {
                    score: scores[k],
                    genuine: mask >> k & 1 == 1,
                })
                .collect();
            let g = pairs.iter().filter(|p| p.genuine).count() as f64;
            let i = n as f64 - g;
            let mut points: Vec<(f64, f64)> = pairs
                .iter()
                .map(|p| p.score)
                .chain([f64::INFINITY])
                .map(|t| {
                    let tp = pairs.iter().filter(|p| p.genuine && p.score >= t).count() as f64;
                    let fp = pairs.iter().filter(|p| !p.genuine && p.score >= t).count() as f64;
                    (fp / i, tp / g)
                })
                .collect();
            points.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let brute = |f: f64| points.iter().filter(|p| p.0 <= f).map(|p| p.1).fold(0.0, f64::max);
            let report = roc_with_interval(&pairs, &targets, interval).unwrap();
            let (a, b) = (interval.0.log10(), interval.1.log10());
            let h = (b - a) / cells as f64;
            let auc: f64 = (0..cells)
                .map(|k| brute(10f64.powf(a + (k as f64 + 0.5) * h)) * h)
                .sum::<f64>()
                / (b - a);
            let tpr_ok = report.tpr_at.iter().all(|t| t.tpr == brute(t.fpr));
            let auc_ok = (report.interval_auc - auc).abs() <= (n as f64 + 1.0) / cells as f64;
            if !(tpr_ok && auc_ok) {
                mismatches += 1;
            }
            cases += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut asym, mut misranked) = (0usize, 0usize);
    for _ in 0..1000 {
        let d = rng.random_range(1..=16);
        let v =
            |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f64> { (0..d).map(|_| rng.random_range(lo..hi)).collect() };
        let (m1, s1, m2, s2) = (
            v(&mut rng, -2.0, 2.0),
            v(&mut rng, 0.1, 2.0),
            v(&mut rng, -2.0, 2.0),
            v(&mut rng, 0.1, 2.0),
        );
        if mls_terms(&m1, &s1, &m2, &s2).unwrap() != mls_terms(&m2, &s2, &m1, &s1).unwrap() {
            asym += 1;
        }
        // Shared constant sigma: MLS order equals nearest-mean order.
        let k = vec![rng.random_range(0.1..2.0); d];
        let (probe, a, b) = (v(&mut rng, -2.0, 2.0), v(&mut rng, -2.0, 2.0), v(&mut rng, -2.0, 2.0));
        let dist2 = |x: &[f64]| probe.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        let (da, db) = (dist2(&a), dist2(&b));
        let (ma, mb) = (
            mls_terms(&probe, &k, &a, &k).unwrap(),
            mls_terms(&probe, &k, &b, &k).unwrap(),
        );
        if (da - db).abs() > 1e-9 && (da < db) != (ma > mb) {
            misranked += 1;
        }
    }
    check(
        mismatches == 0 && asym == 0 && misranked == 0,
        format!("{cases} exhaustive ROC cases, {mismatches} mismatches; MLS asymmetric {asym}/1000, misranked {misranked}/1000"),
    )
}

// ---------------------------------------------------------------- 12

fn criterion_12() -> Outcome {
    use common::*;
    let t = tempfile::tempdir().unwrap();
    let root = t.path();
    let data = root.join("data");
    let model = "[model]\nhidden = 16\nembed_dim = 4\nmu_norm = 2.0\n";
    let configs: Vec<(&str, String, std::path::PathBuf)> = vec![
        ("gen", gen_config(&data, 6, 40, 0.2, 30.0, Some(0.3)), data.clone()),
        ("train", train_config(&root.join("base"), &data, "baseline", 300, ""), root.join("base")),
        ("train", train_config(&root.join("cls"), &data, "dul-cls", 300, ""), root.join("cls")),
        (
            "train",
            train_config(&root.join("rgs"), &data, "dul-rgs", 300, "")
                + &format!("baseline = \"{}\"\n", p(&root.join("base/checkpoint.bin"))),
            root.join("rgs"),
        ),
        (
            "eval",
            format!(
                "seed = 1\nout = \"{}\"\n[eval]\nmetric = \"mls\"\npair_cap = 2000\ncheckpoint = \"{}\"\ndataset = \"{}\"\n",
                p(&root.join("eval")),
                p(&root.join("cls/checkpoint.bin")),
                p(&data)
            ),
            root.join("eval"),
        ),
        (
            "analyze",
            format!(
                "seed = 1\nout = \"{}\"\n[analyze]\ndataset = \"{}\"\nbaseline = \"{}\"\ndul = \"{}\"\nprobe_pairs = 50\n",
                p(&root.join("an")),
                p(&data),
                p(&root.join("base/checkpoint.bin")),
                p(&root.join("cls/checkpoint.bin"))
            ),
            root.join("an"),
        ),
        (
            "sweep",
            format!(
                "seed = 1\nout = \"{}\"\n{model}[optim]\nsteps = 200\n[sweep]\nkind = \"lambda\"\nmode = \"dul-cls\"\nvalues = [0.0, 0.1]\nseeds = 2\n[sweep.identities]\nnum_classes = 6\nper_class = 30\ninput_dim = 8\nbase_noise = 0.2\n",
                p(&root.join("sw"))
            ),
            root.join("sw"),
        ),
    ];
    let mut checked = Vec::new();
    for (k, (cmd, text, out)) in configs.iter().enumerate() {
        let cfg = write(root, &format!("c{k}.toml"), text);
        if run(cmd, &cfg, &[]) != 0 {
            return Err(format!("dul {cmd} (config {k}) failed"));
        }
        let first = snapshot(out);
        fs::remove_dir_all(out).unwrap();
        if run(cmd, &cfg, &[]) != 0 {
            return Err(format!("dul {cmd} (config {k}) failed on rerun"));
        }
        let second = snapshot(out);
        if first != second {
            return Err(format!("dul {cmd} (config {k}) outputs differ between runs"));
        }
        checked.push(format!("{cmd}:{}", first.len()));
    }
    Ok(format!(
        "byte-identical reruns ({} files per command)",
        checked.join(" ")
    ))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 12] = [
        ("gradient correctness", criterion_1),
        ("closed-form oracles", criterion_2),
        ("attenuation stationarity", criterion_3),
        ("degeneracy to the baseline", criterion_4),
        ("sigma_bar rises with lambda", criterion_5),
        ("uncertainty tracks corruption", criterion_6),
        ("heteroscedastic recovery", criterion_7),
        ("bad-case shift", criterion_8),
        ("intra-class distance shift", criterion_9),
        ("noisy-training robustness", criterion_10),
        ("metric suite", criterion_11),
        ("cli determinism", criterion_12),
    ];
    let mut failed = Vec::new();
    for (k, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let line = format!(
            "acceptance criterion {:>2} {tag}  {name}: {detail} [{:.1}s]\n",
            k + 1,
            start.elapsed().as_secs_f64()
        );
        // Bypasses the test harness's output capture.
        let _ = std::io::stderr().write_all(line.as_bytes());
        if outcome.is_err() {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
