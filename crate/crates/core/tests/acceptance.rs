//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! The exit status is nonzero when a criterion is evaluated and fails. A
//! criterion whose external dataset is absent is reported as FAIL with the
//! reason but does not change the exit status.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{band_power, fail_index, grad_check, grad_check_mse, psr_counts, rms, sine, expected_shapes};
use psrtr::checkpoint;
use psrtr::config::{examples_from_recording, RunConfig};
use psrtr::eval::compute_metrics;
use psrtr::ingest::{EcgSegment, LabeledExample};
use psrtr::models::{Family, ModelSpec, Predictor};
use psrtr::nn::{LayerSpec, Tensor};
use psrtr::preprocess::{remove_baseline_drift, suppress_mains, FilterConfig};
use psrtr::psr::{embed_samples, grid_count, PsrConfig, PsrImage};
use psrtr::screen::{first_failure, screen_recording, LeadSource, ScreenConfig, SynthSource, Verdict};
use psrtr::synth::{generate_dataset, generate_recording, generate_segment, SynthConfig, SynthDatasetSpec};
use psrtr::train::{prepare_samples, run_cross_validation, train_final, write_results_csv, Sample, TrainConfig};
use psrtr::wfdb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Unavailable(String),
}

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn from(r: Check) -> Outcome {
    match r {
        Ok(s) => Outcome::Pass(s),
        Err(s) => Outcome::Fail(s),
    }
}

// ------------------------------------------------------------------ 1, 2

fn random_signal(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let n = rng.random_range(200..3000);
    match k % 4 {
        0 => (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        // values on the grid lines of every N tested
        1 => (0..n).map(|_| rng.random_range(-16i32..=16) as f64 / 16.0).collect(),
        2 => {
            let (f, a) = (rng.random_range(0.001..0.1), rng.random_range(0.1..5.0));
            (0..n).map(|i| a * (f * i as f64).sin() + 0.05 * rng.random_range(-1.0..1.0)).collect()
        }
        _ => {
            let mut v = 0.0;
            (0..n)
                .map(|_| {
                    v += rng.random_range(-1.0..1.0);
                    v
                })
                .collect()
        }
    }
}

fn image(x: &[f64], tau: usize, grid_n: usize) -> PsrImage {
    let cfg = PsrConfig { tau, grid_n };
    grid_count(&embed_samples(x, &cfg).expect("embeds"), &cfg).expect("counts")
}

fn psr_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0;
    for k in 0..100 {
        let x = random_signal(&mut rng, k);
        for grid_n in [2, 4, 8, 32] {
            for tau in [1, 4, 16] {
                let got = image(&x, tau, grid_n).counts;
                ensure(got == psr_counts(&x, tau, grid_n), format!("signal {k}, N={grid_n}, tau={tau} differs"))?;
                cases += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("took {secs:.1}s"))?;
    Ok(format!("{cases} cases exact in {secs:.2}s"))
}

fn psr_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..200 {
        let x = random_signal(&mut rng, k);
        let tau = [1, 4, 16][k % 3];
        let half = [2, 4, 8, 16][k % 4];
        let img = image(&x, tau, 2 * half);
        let mass: u64 = img.counts.iter().map(|&c| c as u64).sum();
        ensure(mass == (x.len() - tau) as u64 && img.total == mass, format!("signal {k}: mass {mass}"))?;
        let p: f64 = (0..img.grid_n).flat_map(|i| (0..img.grid_n).map(move |j| (i, j))).map(|(i, j)| img.prob(i, j)).sum();
        ensure((p - 1.0).abs() <= 1e-9, format!("signal {k}: probabilities sum to {p}"))?;
        let scaled: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        ensure(image(&scaled, tau, 2 * half) == img, format!("signal {k}: image(3x) != image(x)"))?;
        let coarse = img.coarsen().ok_or("coarsen of an even grid failed")?;
        ensure(coarse.counts == image(&x, tau, half).counts, format!("signal {k}: 2x2 aggregation differs"))?;
    }
    Ok("mass, normalization, scale and refinement hold on 200 signals".into())
}

// --------------------------------------------------------------------- 3

fn gradients() -> Check {
    let start = Instant::now();
    let layers: Vec<(&str, Vec<LayerSpec>, Vec<usize>)> = vec![
        ("dense", vec![LayerSpec::Dense { units: 4 }], vec![5]),
        ("conv2d", vec![LayerSpec::Conv2d { filters: 3, kernel: 3, stride: 1 }], vec![2, 5, 5]),
        ("conv2d/2", vec![LayerSpec::Conv2d { filters: 2, kernel: 3, stride: 2 }], vec![2, 6, 6]),
        ("batch_norm", vec![LayerSpec::BatchNorm], vec![3, 2, 2]),
        ("relu", vec![LayerSpec::Dense { units: 6 }, LayerSpec::Relu], vec![4]),
        ("max_pool2d", vec![LayerSpec::MaxPool2d { size: 2, stride: 2 }], vec![2, 4, 4]),
        ("flatten", vec![LayerSpec::Flatten, LayerSpec::Dense { units: 2 }], vec![2, 3, 3]),
        (
            "skip_add",
            vec![
                LayerSpec::SkipSave { slot: 0 },
                LayerSpec::Conv2d { filters: 2, kernel: 3, stride: 1 },
                LayerSpec::SkipAdd { slot: 0, project: false },
            ],
            vec![2, 4, 4],
        ),
        (
            "skip_add+projection",
            vec![
                LayerSpec::SkipSave { slot: 0 },
                LayerSpec::Conv2d { filters: 3, kernel: 3, stride: 1 },
                LayerSpec::SkipAdd { slot: 0, project: true },
            ],
            vec![1, 4, 4],
        ),
    ];
    let mut worst: f64 = 0.0;
    for (name, specs, input) in &layers {
        let e = grad_check(specs, input, 4, 7);
        ensure(e.rel < 1e-4, format!("{name}: relative error {:.2e}", e.rel))?;
        worst = worst.max(e.rel);
    }
    for grid_n in [4, 32] {
        for family in [Family::Mlp, Family::BasicCnn, Family::ComplexCnn, Family::DeepCnn] {
            let spec = ModelSpec { family, depth: 2, grid_n };
            let e = grad_check_mse(&spec.layers(), &spec.input_shape(), 3, 11);
            ensure(e.rel < 1e-4, format!("{} on {grid_n}x{grid_n}: relative error {:.2e}", spec.name(), e.rel))?;
            worst = worst.max(e.rel);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.0}s"))?;
    Ok(format!("worst relative error {worst:.1e} in {secs:.1}s"))
}

// --------------------------------------------------------------------- 4

fn shapes() -> Check {
    let mut rows = 0;
    for family in [Family::Mlp, Family::BasicCnn, Family::ComplexCnn, Family::DeepCnn] {
        for depth in 1..=5 {
            let spec = ModelSpec::new(family, depth);
            let net = spec.build(0).map_err(|e| e.to_string())?;
            let (_, trace) = net
                .forward_trace(&Tensor::new(vec![2, 1, 32, 32], vec![0.5f32; 2048]))
                .map_err(|e| e.to_string())?;
            let got: Vec<_> = trace.into_iter().filter(|(k, _)| *k != "skip_save").collect();
            let expected = expected_shapes(family, depth);
            ensure(got == expected, format!("{} differs from the expected layer shapes", spec.name()))?;
            rows += expected.len();
        }
    }
    Ok(format!("20 models, {rows} rows"))
}

// --------------------------------------------------------------------- 5

fn filters() -> Check {
    const FS: f64 = 500.0;
    const N: usize = 5000;
    let cfg = FilterConfig::default();
    let seg = |x: Vec<f64>| EcgSegment::new(x, FS, "II");
    let run = |f: fn(&EcgSegment, &FilterConfig) -> psrtr::Result<EcgSegment>, x: &[f64]| {
        f(&seg(x.to_vec()), &cfg).map(|s| s.samples).map_err(|e| e.to_string())
    };

    let x = sine(N, FS, 50.0, 1.0);
    let y = run(suppress_mains, &x)?;
    let stop = 10.0 * (band_power(&y, FS, 49.0, 51.0) / band_power(&x, FS, 49.0, 51.0)).log10();
    ensure(stop <= -20.0, format!("50 Hz attenuated only {:.1} dB", -stop))?;

    let mut ripple: f64 = 0.0;
    for hz in [0.5, 1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0] {
        let x = sine(N, FS, hz, 1.0);
        let y = run(suppress_mains, &x)?;
        let gain = 20.0 * (rms(&y[500..N - 500]) / rms(&x[500..N - 500])).log10();
        ripple = ripple.max(gain.abs());
    }
    ensure(ripple <= 1.0, format!("passband ripple {ripple:.3} dB"))?;

    let (clean, _) = generate_segment(&SynthConfig::default(), 10.0).map_err(|e| e.to_string())?;
    let wander = sine(N, FS, 0.3, 0.5);
    let mixed: Vec<f64> = clean.samples.iter().zip(&wander).map(|(a, b)| a + b).collect();
    let out = run(remove_baseline_drift, &mixed)?;
    let reference = run(remove_baseline_drift, &clean.samples)?;
    let residual: Vec<f64> = out.iter().zip(&reference).map(|(a, b)| a - b).collect();
    let wander_frac = band_power(&residual, FS, 0.0, 0.5) / band_power(&wander, FS, 0.0, 0.5);
    ensure(wander_frac < 0.01, format!("wander residual {:.3}%", 100.0 * wander_frac))?;

    let c = 2.5;
    let flat = run(remove_baseline_drift, &vec![c; N])?;
    let worst = flat[500..N - 500].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure(worst < 1e-6 * c, format!("constant leaves {worst:.2e}"))?;

    Ok(format!(
        "50 Hz -{:.1} dB, ripple {ripple:.3} dB, wander {:.4}%, constant {worst:.1e}",
        -stop,
        100.0 * wander_frac
    ))
}

// --------------------------------------------------------------------- 6

fn metrics() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let m = compute_metrics(&[1.0, 0.0], &[0.0, 0.0]).map_err(|e| e.to_string())?;
    let r = 0.5f64.sqrt();
    ensure(
        close(m.mse, 0.5) && close(m.rmse, r) && close(m.mae, 0.5) && close(m.std_of_errors, r),
        format!("two-point fixture gave {m:?}"),
    )?;
    let y = [0.3, -0.2, 0.5, 0.0, 1.1];
    let c = 0.25;
    let y_hat: Vec<f64> = y.iter().map(|v| v + c).collect();
    let m = compute_metrics(&y, &y_hat).map_err(|e| e.to_string())?;
    ensure(
        close(m.mse, c * c) && close(m.rmse, c) && close(m.mae, c) && close(m.std_of_errors, 0.0),
        format!("constant-error fixture gave {m:?}"),
    )?;
    Ok("two-point and constant-error fixtures within 1e-12".into())
}

// --------------------------------------------------------------------- 7

struct Trained {
    predictor: Predictor,
    test_pixels: Vec<Vec<f32>>,
}

fn synthetic_regression() -> (Check, Option<Trained>) {
    let start = Instant::now();
    let spec = SynthDatasetSpec::default();
    let examples = match generate_dataset(&spec) {
        Ok(e) => e,
        Err(e) => return (Err(e.to_string()), None),
    };
    let samples = prepare_samples(&examples, &FilterConfig::default(), &PsrConfig::default());
    let model = ModelSpec::new(Family::ComplexCnn, 5);
    let out = match train_final(model, &samples, &[], 10, &TrainConfig::default()) {
        Ok(o) => o,
        Err(e) => return (Err(e.to_string()), None),
    };
    let secs = start.elapsed().as_secs_f64();
    let t = out.test;
    let detail = format!(
        "{} samples, {} epochs, held-out n={} MAE {:.4} MSE {:.5} in {:.0}s",
        samples.len(),
        out.log.len(),
        t.n,
        t.mae,
        t.mse,
        secs
    );
    let check = if samples.len() == spec.count && t.mae <= 0.08 && t.mse <= 0.012 && secs < 1800.0 {
        Ok(detail)
    } else {
        Err(detail)
    };
    let test_pixels = samples.iter().take(64).map(|s| s.pixels.clone()).collect();
    (check, Some(Trained { predictor: out.predictor, test_pixels }))
}

// --------------------------------------------------------------------- 8

fn ecgid_examples(dir: &Path) -> Result<Vec<LabeledExample>, String> {
    let mut out = Vec::new();
    for base in wfdb::find_records(dir, "atr").map_err(|e| e.to_string())? {
        let rec = wfdb::read_record(&base, "atr", 0).map_err(|e| e.to_string())?;
        let name = base.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        // the leading window holds the annotated beats
        out.extend(examples_from_recording(&rec, &name).map_err(|e| e.to_string())?.into_iter().take(1));
    }
    Ok(out)
}

fn ecgid() -> Outcome {
    let dir = match std::env::var_os("ECGID_DIR") {
        Some(d) => PathBuf::from(d),
        None => return Outcome::Unavailable("ECG-ID records not available (set ECGID_DIR to the WFDB directory)".into()),
    };
    let examples = match ecgid_examples(&dir) {
        Ok(e) if e.len() >= 10 => e,
        Ok(e) => return Outcome::Unavailable(format!("only {} annotated windows under {}", e.len(), dir.display())),
        Err(e) => return Outcome::Fail(e),
    };
    let samples = prepare_samples(&examples, &FilterConfig::default(), &PsrConfig::default());
    let cfg = TrainConfig::default();
    let mut mae = Vec::new();
    for family in [Family::ComplexCnn, Family::Mlp] {
        match run_cross_validation(ModelSpec::new(family, 5), &samples, &[], 10, &cfg) {
            Ok(r) => mae.push(r.mean.mae),
            Err(e) => return Outcome::Fail(e.to_string()),
        }
    }
    let detail = format!("{} windows: ComplexCNN5 MAE {:.4}, MLP5 MAE {:.4}", samples.len(), mae[0], mae[1]);
    from(if mae[0] <= mae[1] + 0.01 { Ok(detail) } else { Err(detail) })
}

// --------------------------------------------------------------------- 9

fn screening(trained: Option<&Trained>) -> Check {
    let cases: [(&[f64], Option<usize>); 6] = [
        (&[0.2, 0.4, 0.4, 0.1], Some(1)),
        (&[0.4, 0.2, 0.4, 0.2], None),
        (&[0.1, 0.1, 0.1, 0.1], None),
        (&[0.33, 0.33, 0.33], None),
        (&[0.1, 0.34, 0.33, 0.34, 0.34], Some(3)),
        (&[1.0, 0.9, 0.0], Some(0)),
    ];
    for (m, expect) in cases {
        let m: Vec<Option<f64>> = m.iter().copied().map(Some).collect();
        ensure(first_failure(&m, 0.33) == expect, format!("{m:?}: expected {expect:?}"))?;
        ensure(fail_index(&m, 0.33) == expect, format!("oracle disagrees on {m:?}"))?;
    }

    let trained = trained.ok_or("no trained model from the synthetic regression")?;
    let base = SynthConfig { baseline_amp_mv: 0.2, mains_amp_mv: 0.05, noise_std_mv: 0.02, ..Default::default() };
    let with = |ratio: f64, seed: u64| SynthConfig { tr_ratio_target: ratio, seed, ..base.clone() };
    let hour = 3600.0;
    let schedules = [
        ("A", vec![(24.0 * hour, with(0.12, 1))]),
        ("B", vec![(12.0 * hour, with(0.2, 2)), (hour, with(0.55, 3)), (11.0 * hour, with(0.15, 4))]),
        ("C", vec![(6.0 * hour, with(-0.6, 5)), (18.0 * hour, with(0.45, 6))]),
    ];
    let mut recordings = Vec::new();
    for (id, s) in &schedules {
        recordings.push((id.to_string(), generate_recording(s).map_err(|e| e.to_string())?));
    }
    let sources: Vec<SynthSource> =
        recordings.iter().map(|(id, r)| SynthSource { lead_id: id.clone(), recording: r }).collect();
    let dyn_sources: Vec<&dyn LeadSource> = sources.iter().map(|s| s as &dyn LeadSource).collect();
    let cfg = ScreenConfig::default();
    let report = screen_recording(&dyn_sources, &trained.predictor, &FilterConfig::default(), &PsrConfig::default(), &cfg)
        .map_err(|e| e.to_string())?;

    let mut oracle_pass = Vec::new();
    for ((id, rec), lead) in recordings.iter().zip(&report.leads) {
        ensure(lead.segments.len() == 8640, format!("lead {id}: {} predictions", lead.segments.len()))?;
        ensure(lead.skipped == 0, format!("lead {id}: {} segments skipped", lead.skipped))?;
        let truth: Vec<Option<f64>> = rec.true_ratios().iter().map(|r| Some(r.abs())).collect();
        let pass = fail_index(&truth, cfg.threshold).is_none();
        ensure(
            lead.pass == pass,
            format!("lead {id}: predicted pass={} but true ratios give pass={pass}", lead.pass),
        )?;
        oracle_pass.push(pass);
    }
    let oracle_verdict = if oracle_pass.iter().any(|&p| p) { Verdict::Eligible } else { Verdict::NotEligible };
    ensure(report.verdict == oracle_verdict, format!("verdict {:?}, oracle {oracle_verdict:?}", report.verdict))?;
    Ok(format!("rule cases hold; 3 x 8640 predictions, verdict {:?} matches the oracle", report.verdict))
}

// -------------------------------------------------------------------- 10

fn crossval_csv() -> Result<Vec<u8>, String> {
    let cfg = RunConfig::load(
        None,
        &["model=MLP2".into(), "folds=3".into(), "synth.count=90".into(), "train.max_epochs=4".into()],
    )
    .map_err(|e| e.to_string())?;
    let examples = cfg.primary_examples().map_err(|e| e.to_string())?;
    let samples: Vec<Sample> = prepare_samples(&examples, &cfg.filter, &cfg.psr);
    let result = run_cross_validation(cfg.model_spec().map_err(|e| e.to_string())?, &samples, &[], cfg.folds, &cfg.train)
        .map_err(|e| e.to_string())?;
    let mut buf = format!("# config_hash={}\n", cfg.hash()).into_bytes();
    write_results_csv(&mut buf, &[result]).map_err(|e| e.to_string())?;
    Ok(buf)
}

fn reproducibility(trained: Option<&Trained>) -> Check {
    let a = crossval_csv()?;
    let b = crossval_csv()?;
    ensure(a == b, "results CSVs differ between identical runs")?;

    let trained = trained.ok_or("no trained model from the synthetic regression")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &trained.predictor, &PsrConfig::default(), &FilterConfig::default(), serde_json::json!({}))
        .map_err(|e| e.to_string())?;
    let (loaded, _) = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let bits = |p: &Predictor| -> Result<Vec<u64>, String> {
        Ok(p.predict_pixels(&trained.test_pixels).map_err(|e| e.to_string())?.iter().map(|v| v.to_bits()).collect())
    };
    ensure(bits(&trained.predictor)? == bits(&loaded)?, "predictions change after a checkpoint round trip")?;
    Ok(format!(
        "crossval CSVs identical ({} bytes); checkpoint predictions bit-identical on {} images",
        a.len(),
        trained.test_pixels.len()
    ))
}

// ------------------------------------------------------------------ main

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |k: usize, name: &'static str, o: Outcome| {
        let line = match &o {
            Outcome::Pass(d) => format!("PASS {k:>2} {name}: {d}"),
            Outcome::Fail(d) => format!("FAIL {k:>2} {name}: {d}"),
            Outcome::Unavailable(d) => format!("FAIL {k:>2} {name}: not evaluated, {d}"),
        };
        println!("{line}");
        results.push((k, name, o));
    };

    report(1, "PSR oracle equivalence", from(psr_oracle()));
    report(2, "PSR invariants", from(psr_invariants()));
    report(3, "gradient checks", from(gradients()));
    report(4, "shape conformance", from(shapes()));
    report(5, "filter attenuation", from(filters()));
    report(6, "metric closed forms", from(metrics()));
    let (check, trained) = synthetic_regression();
    report(7, "synthetic end-to-end regression", from(check));
    report(8, "ECG-ID architecture ordering", ecgid());
    report(9, "screening rule", from(screening(trained.as_ref())));
    report(10, "reproducibility", from(reproducibility(trained.as_ref())));

    let passed = results.iter().filter(|(_, _, o)| matches!(o, Outcome::Pass(_))).count();
    let failed = results.iter().filter(|(_, _, o)| matches!(o, Outcome::Fail(_))).count();
    let unavailable = results.len() - passed - failed;
    println!("acceptance: {passed}/{} PASS, {failed} failed, {unavailable} not evaluated", results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
