//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if
//! any criterion fails. Runs without the libtest harness so the lines
//! always reach the terminal.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fineflow::baselines::{ha_fit, mean_partition};
use fineflow::checkpoint::{to_bytes, CheckpointMeta, InitRecord};
use fineflow::data::{read_dataset, split_filter, synth_generate, write_dataset, Dataset, Sample, SynthConfig};
use fineflow::eval::{evaluate, MeanBaseline, MetricsReport};
use fineflow::external::{ExternalConfig, ExternalSchema};
use fineflow::grid::{coarsen, n2_normalize, FlowMap, Grid, ScaleFactor};
use fineflow::model::{Batch, FlowModel, ModelConfig, Variant};
use fineflow::nn::{Mode, Pass, Tape};
use fineflow::selfcheck::run_suite;
use fineflow::train::{minmax_descale, minmax_scale, train, TrainConfig, TrainOutcome};

/// Seed of the desk-scale synthetic dataset.
const DATA_SEED: u64 = 42;
/// Model/training seed of the full-data run.
const TRAIN_SEED: u64 = 0;
/// Fixed seeds for the small-data comparison.
const SUBSAMPLE_SEEDS: [u64; 3] = [1, 2, 3];
/// Keep every `SUBSAMPLE_STRIDE`-th training sample.
const SUBSAMPLE_STRIDE: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn budget(elapsed: Duration, limit: Duration) -> (bool, String) {
    (elapsed < limit, format!("{:.1}s of {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

fn random_coarse(rng: &mut ChaCha8Rng, h: usize, w: usize) -> FlowMap {
    // a sprinkling of exact zeros alongside wide magnitudes
    let v = (0..h * w)
        .map(|_| {
            if rng.random::<f64>() < 0.1 {
                0.0
            } else {
                rng.random_range(0.0..2000.0)
            }
        })
        .collect();
    FlowMap::new(h, w, v).unwrap()
}

fn structural_identity() -> Outcome {
    let t0 = Instant::now();
    let scale = ScaleFactor::new(2).unwrap();
    let cfg = ModelConfig::new(4, 32, scale, (8, 8), Variant::NoExternal, None);
    let model = FlowModel::<f32>::build(cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let coarse: Vec<FlowMap> = (0..100).map(|_| random_coarse(&mut rng, 8, 8)).collect();
    let (mut worst, mut checked, mut min_mass) = (0.0f64, 0usize, f64::INFINITY);
    for chunk in coarse.chunks(25) {
        let mut tape = Tape::new();
        let mut no_rng = ChaCha8Rng::seed_from_u64(0);
        let mut pass = Pass::new(Mode::Eval, &mut no_rng);
        let out = model
            .forward(&mut tape, &Batch { coarse: chunk, externals: None }, &mut pass)
            .unwrap();
        for (k, (c, f)) in chunk.iter().zip(&out.fine).enumerate() {
            let masses = &out.block_mass[k * 64..(k + 1) * 64];
            for r in 0..8 {
                for q in 0..8 {
                    let mass = masses[r * 8 + q];
                    if mass < 1e-6 {
                        continue;
                    }
                    min_mass = min_mass.min(mass);
                    let sum: f64 = (0..2).flat_map(|a| (0..2).map(move |b| (a, b))).map(|(a, b)| f.get(2 * r + a, 2 * q + b)).sum();
                    let target = c.get(r, q);
                    let rel = if target > 0.0 { (sum - target).abs() / target } else { sum.abs() };
                    worst = worst.max(rel);
                    checked += 1;
                }
            }
        }
    }
    let (fast, time) = budget(t0.elapsed(), Duration::from_secs(30));
    outcome(
        worst <= 1e-5 && checked == 6400 && fast,
        format!("max relative residual {worst:.2e} over {checked} superregions (min block mass {min_mass:.3}); {time}"),
    )
}

/// Per-block normalization written out longhand.
fn brute_force_normalize(v: &[f64], h: usize, w: usize, n: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for by in 0..h / n {
        for bx in 0..w / n {
            let mut s = 0.0;
            for y in by * n..(by + 1) * n {
                for x in bx * n..(bx + 1) * n {
                    s += v[y * w + x];
                }
            }
            for y in by * n..(by + 1) * n {
                for x in bx * n..(bx + 1) * n {
                    out[y * w + x] = v[y * w + x] / (s + eps);
                }
            }
        }
    }
    out
}

fn normalization_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let n = [2, 3, 4][k % 3];
        let (bh, bw) = (rng.random_range(1..6), rng.random_range(1..6));
        let (h, w) = (bh * n, bw * n);
        let hi = 10f64.powi(rng.random_range(-3..4));
        let v: Vec<f64> = (0..h * w)
            .map(|_| if rng.random::<f64>() < 0.05 { 0.0 } else { rng.random_range(0.0..hi) })
            .collect();
        let eps = 1e-7;
        let got = n2_normalize(&Grid::new(h, w, v.clone()).unwrap(), ScaleFactor::new(n).unwrap(), eps).unwrap();
        let want = brute_force_normalize(&v, h, w, n, eps);
        for (a, b) in got.values().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    let (fast, time) = budget(t0.elapsed(), Duration::from_secs(10));
    outcome(worst <= 1e-6 && fast, format!("max abs difference {worst:.2e} over 1000 tensors; {time}"))
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let results = run_suite(2024).unwrap();
    let failed: Vec<&str> = results.iter().filter(|c| !c.passes()).map(|c| c.name).collect();
    let worst = results.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let (fast, time) = budget(t0.elapsed(), Duration::from_secs(120));
    outcome(
        failed.is_empty() && fast,
        format!(
            "{} checks, worst relative error {worst:.2e}, failing: {failed:?}; {time}",
            results.len()
        ),
    )
}

fn parameter_counts() -> Outcome {
    let scale = ScaleFactor::new(4).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for (m, f, target) in [(16, 64, 1.7e6), (20, 64, 1.9e6), (16, 256, 24.4e6)] {
        let cfg = ModelConfig::new(
            m,
            f,
            scale,
            (32, 32),
            Variant::Full,
            Some(ExternalConfig::new(ExternalSchema::taxi())),
        );
        let count = FlowModel::<f32>::build(cfg, 0).unwrap().param_count() as f64;
        let dev = (count - target).abs() / target;
        pass &= dev <= 0.05;
        lines.push(format!("{m}-{f}: {count} ({:+.1}%)", 100.0 * (count - target) / target));
    }
    outcome(pass, lines.join(", "))
}

fn baseline_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for k in 0..200 {
        let n = 2 + k % 4;
        let scale = ScaleFactor::new(n).unwrap();
        let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
        let c = random_coarse(&mut rng, h, w);
        let fine = mean_partition(&c, scale);
        let agg = coarsen(&fine, scale).unwrap();
        for (a, b) in agg.values().iter().zip(c.values()) {
            worst = worst.max((a - b).abs());
        }
    }
    let mut cfg = SynthConfig::new((8, 8), ScaleFactor::new(2).unwrap(), 200, 9);
    cfg.stationary = true;
    let d = synth_generate(&cfg).unwrap();
    let s = split_filter(&d.samples, d.manifest.ratios, d.manifest.zero_threshold).unwrap();
    let mean = evaluate(&MeanBaseline(d.manifest.scale), &s.test, 64).unwrap();
    let fines: Vec<FlowMap> = s.train.iter().map(|x| x.fine.clone()).collect();
    let ha = evaluate(&ha_fit(&fines, d.manifest.scale).unwrap(), &s.test, 64).unwrap();
    let residual = mean.structural_residual.unwrap();
    outcome(
        worst == 0.0 && residual == 0.0 && ha.rmse <= 1e-6,
        format!(
            "mean residual {worst:e} on 200 random maps, {residual:e} on test; HA stationary test RMSE {:.2e}",
            ha.rmse
        ),
    )
}

fn desk_dataset() -> Dataset {
    let mut cfg = SynthConfig::new((16, 16), ScaleFactor::new(2).unwrap(), 600, DATA_SEED);
    cfg.noise = 0.05;
    synth_generate(&cfg).unwrap()
}

fn desk_model(d: &Dataset, variant: Variant, seed: u64) -> FlowModel<f32> {
    let ext = (variant == Variant::Full).then(|| ExternalConfig::new(d.manifest.schema.clone()));
    let mut cfg = ModelConfig::new(4, 32, d.manifest.scale, (16, 16), variant, ext);
    cfg.scalers = d.manifest.scalers;
    FlowModel::build(cfg, seed).unwrap()
}

struct Run {
    outcome: TrainOutcome,
    test: MetricsReport,
    cfg: TrainConfig,
}

fn desk_run(d: &Dataset, variant: Variant, seed: u64, train_set: &[Sample], valid: &[Sample], test: &[Sample]) -> Run {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let outcome = train(desk_model(d, variant, seed), train_set, valid, &cfg, |_| {}).unwrap();
    let test = evaluate(&outcome.best, test, 64).unwrap();
    Run { outcome, test, cfg }
}

fn checkpoint_bytes(run: &Run, seed: u64) -> Vec<u8> {
    let meta = CheckpointMeta {
        model: run.outcome.best.cfg.clone(),
        init: InitRecord::new(seed),
        train: Some(run.cfg.clone()),
        epoch: Some(run.outcome.best_epoch),
    };
    to_bytes(&meta, &run.outcome.best, Some(&run.outcome.best_adam)).unwrap()
}

struct DeskResults {
    learning: Outcome,
    staircase: Outcome,
    determinism: Outcome,
}

fn desk_scale() -> DeskResults {
    let t0 = Instant::now();
    let d = desk_dataset();
    let s = split_filter(&d.samples, d.manifest.ratios, d.manifest.zero_threshold).unwrap();
    let scale = d.manifest.scale;
    let mean = evaluate(&MeanBaseline(scale), &s.test, 64).unwrap().rmse;
    let fines: Vec<FlowMap> = s.train.iter().map(|x| x.fine.clone()).collect();
    let ha = evaluate(&ha_fit(&fines, scale).unwrap(), &s.test, 64).unwrap().rmse;

    let ne = desk_run(&d, Variant::NoExternal, TRAIN_SEED, &s.train, &s.valid, &s.test);
    let ne_rmse = ne.test.rmse;
    let first = ne_rmse <= 0.7 * mean && ne_rmse <= ha;

    let small: Vec<Sample> = s.train.iter().step_by(SUBSAMPLE_STRIDE).cloned().collect();
    let (mut wins, mut losses, mut detail, mut first_full) = (0, 0, Vec::new(), None);
    for seed in SUBSAMPLE_SEEDS {
        let full = desk_run(&d, Variant::Full, seed, &small, &s.valid, &s.test);
        let base = desk_run(&d, Variant::NoExternal, seed, &small, &s.valid, &s.test);
        let ratio = full.test.rmse / base.test.rmse;
        if ratio <= 0.97 {
            wins += 1;
        } else {
            losses += 1;
        }
        detail.push(format!("seed {seed}: {:.4}/{:.4}={ratio:.3}", full.test.rmse, base.test.rmse));
        if first_full.is_none() {
            first_full = Some((seed, full));
        }
        // a pass on the first seed settles it; otherwise two of three
        if (wins == 1 && losses == 0) || wins == 2 || losses == 2 {
            break;
        }
    }
    let second = wins > losses;
    let (fast, time) = budget(t0.elapsed(), Duration::from_secs(15 * 60));
    let learning = outcome(
        first && second && fast,
        format!(
            "ne test RMSE {ne_rmse:.4} = {:.3}x Mean ({mean:.4}), {:.3}x HA ({ha:.4}); {}-sample subsample full/ne {} ({} of {} within 0.97); {time}",
            ne_rmse / mean,
            ne_rmse / ha,
            small.len(),
            detail.join(", "),
            wins,
            wins + losses
        ),
    );

    let trace = ne.outcome.history.lr_trace();
    let mismatches = trace
        .iter()
        .enumerate()
        .filter(|(e, lr)| **lr != 1e-4 * 2f64.powi(-((e / 20) as i32)))
        .count();
    let staircase = outcome(
        trace.len() == 200 && mismatches == 0,
        format!("{} epochs traced, {mismatches} mismatches, lr at epoch 40 = {:e}", trace.len(), trace[40]),
    );

    let (seed, full) = first_full.expect("at least one subsample run");
    let again = desk_run(&d, Variant::Full, seed, &small, &s.valid, &s.test);
    let same_ckpt = checkpoint_bytes(&full, seed) == checkpoint_bytes(&again, seed);
    let same_report = full.test.to_key_values("full") == again.test.to_key_values("full")
        && full.outcome.history.to_csv() == again.outcome.history.to_csv();
    let determinism = outcome(
        same_ckpt && same_report,
        format!(
            "repeat of the seed-{seed} full run: checkpoint {}, metrics and history {}",
            if same_ckpt { "bit-identical" } else { "DIFFERS" },
            if same_report { "identical" } else { "DIFFER" }
        ),
    );
    DeskResults {
        learning,
        staircase,
        determinism,
    }
}

fn round_trips() -> Outcome {
    let mut cfg = SynthConfig::new((5, 3), ScaleFactor::new(3).unwrap(), 40, 77);
    cfg.noise = 0.05;
    let d = synth_generate(&cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&d, tmp.path()).unwrap();
    let files_exact = read_dataset(tmp.path()).unwrap() == d;

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let m = random_coarse(&mut rng, 6, 4);
        let scaler = rng.random_range(1.0..5000.0);
        let back = minmax_descale(&minmax_scale(&m, scaler).unwrap(), 6, 4, scaler).unwrap();
        for (a, b) in back.values().iter().zip(m.values()) {
            if *b != 0.0 {
                worst = worst.max((a - b).abs() / b.abs());
            } else {
                worst = worst.max(a.abs());
            }
        }
    }
    outcome(
        files_exact && worst <= 1e-7,
        format!("dataset files exact: {files_exact}; scale/descale max relative error {worst:.2e}"),
    )
}

fn main() {
    let mut all = true;
    let mut report = |k: usize, name: &str, o: Outcome| {
        all &= o.pass;
        println!("criterion {k} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, "structural identity", structural_identity());
    report(2, "N^2-normalization oracle", normalization_oracle());
    report(3, "gradient checks", gradient_checks());
    report(4, "parameter counts", parameter_counts());
    report(5, "baseline exactness", baseline_exactness());
    let desk = desk_scale();
    report(6, "desk-scale learning", desk.learning);
    report(7, "learning-rate staircase", desk.staircase);
    report(8, "determinism", desk.determinism);
    report(9, "round trips", round_trips());
    if !all {
        std::process::exit(1);
    }
}
