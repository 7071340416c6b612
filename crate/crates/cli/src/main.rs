use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use psrtr::checkpoint;
use psrtr::config::{load_examples, RunConfig};
use psrtr::eval::compute_metrics;
use psrtr::ingest::{read_recordings, write_native_json_bundle, Recording, RecordingFormat};
use psrtr::preprocess::{filter_segment, flip_by_extremum, preprocess_pipeline};
use psrtr::psr::{render_image, segment_image, write_pgm, write_psr};
use psrtr::screen::{screen_recording, segment_detail, write_detail, write_report, LeadSource, RecordingSource};
use psrtr::synth::{generate_dataset, generate_recording, SynthConfig};
use psrtr::train::{prepare_samples, run_cross_validation, train_final, write_results_csv, write_training_log};
use psrtr::wfdb;

/// Exit status for errors; shared with the inconclusive screening verdict.
const EXIT_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "psrtr", version, about = "T:R ratio estimation from ECG phase-space images")]
struct Cli {
    /// Run-config JSON; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.seed=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// More logging (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset or a long multi-lead recording.
    Synth(SynthArgs),
    /// Filter recordings window by window.
    Preprocess(PreprocessArgs),
    /// Render the PSR image of one 10-second window.
    Psr(PsrArgs),
    /// Train one model (or ensemble) and save a checkpoint.
    Train(TrainArgs),
    /// Cross-validate the configured model.
    Crossval(CrossvalArgs),
    /// Score a checkpoint on annotated recordings.
    Evaluate(EvaluateArgs),
    /// Screen a multi-lead recording; exit code 0 eligible, 1 not eligible, 2 inconclusive or error.
    Screen(ScreenArgs),
    /// Dump signal, PSR image and prediction of one segment of every lead.
    Detail(DetailArgs),
    /// Convert PhysioNet WFDB records to native-json.
    ConvertWfdb(ConvertArgs),
    /// Print the resolved run-config and its hash.
    ShowConfig,
}

#[derive(Args)]
struct ModelFlags {
    /// Model name, e.g. `ComplexCNN5` (config key `model`).
    #[arg(long)]
    model: Option<String>,
    /// Training seed (config key `train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Train five-member ensembles (config key `train.ensemble`).
    #[arg(long)]
    ensemble: bool,
}

impl ModelFlags {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(m) = &self.model {
            out.push(format!("model={}", json!(m)));
        }
        if let Some(s) = self.seed {
            out.push(format!("train.seed={s}"));
        }
        if self.ensemble {
            out.push("train.ensemble=true".into());
        }
        out
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(short, long)]
    out: PathBuf,
    /// Write a continuous recording of this many hours instead of a dataset.
    #[arg(long)]
    hours: Option<f64>,
    /// T:R ratio of each lead of the recording (comma separated).
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.15, 0.25, 0.45])]
    lead_ratios: Vec<f64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(short, long = "in")]
    input: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value = "native-json")]
    format: RecordingFormat,
}

#[derive(Args)]
struct PsrArgs {
    #[arg(short, long = "in")]
    input: PathBuf,
    /// Output matrix CSV; the header goes next to it as `.json`.
    #[arg(short, long)]
    out: PathBuf,
    /// Grid size (config key `psr.grid_n`).
    #[arg(short, long)]
    n: Option<usize>,
    /// Delay in samples (config key `psr.tau`).
    #[arg(long)]
    tau: Option<usize>,
    /// Window index within the recording.
    #[arg(long, default_value_t = 0)]
    segment: usize,
    /// Embed the raw window without filtering.
    #[arg(long)]
    raw: bool,
    /// Also write a PGM rendering.
    #[arg(long)]
    pgm: Option<PathBuf>,
    #[arg(long, default_value = "native-json")]
    format: RecordingFormat,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(short, long, default_value = "model.ckpt")]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct CrossvalArgs {
    /// Output directory for results.csv, summary.json and fold logs.
    #[arg(short, long, default_value = "crossval")]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Annotated recordings; defaults to the configured primary data.
    #[arg(short, long = "in")]
    input: Vec<PathBuf>,
    /// Per-example predictions CSV.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScreenArgs {
    #[arg(long)]
    recording: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(short, long, default_value = "screening")]
    out: PathBuf,
    #[arg(long, default_value = "native-json")]
    format: RecordingFormat,
}

#[derive(Args)]
struct DetailArgs {
    #[arg(long)]
    recording: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    segment: usize,
    #[arg(short, long, default_value = "detail")]
    out: PathBuf,
    #[arg(long, default_value = "native-json")]
    format: RecordingFormat,
}

#[derive(Args)]
struct ConvertArgs {
    /// Record base paths (without extension) or directories to scan.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value = "atr")]
    annotator: String,
    /// Signal index within each record.
    #[arg(long, default_value_t = 0)]
    channel: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn load_config(cli: &Cli, extra: Vec<String>) -> Result<RunConfig> {
    let mut overrides = extra;
    overrides.extend(cli.set.iter().cloned());
    Ok(RunConfig::load(cli.config.as_deref(), &overrides)?)
}

fn run(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Synth(a) => synth(load_config(&cli, vec![])?, a),
        Command::Preprocess(a) => preprocess(load_config(&cli, vec![])?, a),
        Command::Psr(a) => {
            let mut extra = Vec::new();
            if let Some(n) = a.n {
                extra.push(format!("psr.grid_n={n}"));
            }
            if let Some(t) = a.tau {
                extra.push(format!("psr.tau={t}"));
            }
            psr(load_config(&cli, extra)?, a)
        }
        Command::Train(a) => train(load_config(&cli, a.model.overrides())?, a),
        Command::Crossval(a) => crossval(load_config(&cli, a.model.overrides())?, a),
        Command::Evaluate(a) => evaluate(load_config(&cli, vec![])?, a),
        Command::Screen(a) => screen(load_config(&cli, vec![])?, a),
        Command::Detail(a) => detail(load_config(&cli, vec![])?, a),
        Command::ConvertWfdb(a) => convert(a),
        Command::ShowConfig => {
            let cfg = load_config(&cli, vec![])?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            eprintln!("config hash {}", cfg.hash());
            Ok(0)
        }
    }
}

fn meta(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg.metadata()).expect("metadata serializes")
}

/// `# key=value` lines prepended to CSV outputs.
fn csv_preamble(cfg: &RunConfig) -> String {
    format!(
        "# psrtr {} config_hash={} seed={}\n# config={}\n",
        psrtr::config::VERSION,
        cfg.hash(),
        cfg.train.seed,
        serde_json::to_string(cfg).expect("config serializes")
    )
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn synth(cfg: RunConfig, a: &SynthArgs) -> Result<u8> {
    create_parent(&a.out)?;
    let recordings: Vec<Recording> = match a.hours {
        None => {
            let examples = generate_dataset(&cfg.synth)?;
            examples
                .into_iter()
                .map(|ex| Recording {
                    sampling_rate_hz: ex.segment.sampling_rate_hz,
                    lead_id: ex.id,
                    samples: ex.segment.samples,
                    r_peaks: ex.annotations.r_indices,
                    t_peaks: ex.annotations.t_indices,
                })
                .collect()
        }
        Some(hours) => {
            if !(hours > 0.0) {
                bail!("--hours must be positive");
            }
            let duration = (hours * 3600.0 / 10.0).round() * 10.0;
            a.lead_ratios
                .iter()
                .enumerate()
                .map(|(k, &ratio)| {
                    let lead = SynthConfig {
                        sampling_rate_hz: cfg.synth.sampling_rate_hz,
                        tr_ratio_target: ratio,
                        noise_std_mv: 0.02,
                        seed: cfg.synth.seed.wrapping_add(k as u64),
                        lead_id: format!("lead{}", k + 1),
                        ..SynthConfig::default()
                    };
                    generate_recording(&[(duration, lead)])?.to_recording(&format!("lead{}", k + 1))
                })
                .collect::<psrtr::Result<_>>()?
        }
    };
    write_native_json_bundle(&a.out, &recordings, &meta(&cfg))?;
    info!("wrote {} recordings to {}", recordings.len(), a.out.display());
    Ok(0)
}

fn preprocess(cfg: RunConfig, a: &PreprocessArgs) -> Result<u8> {
    let mut out = Vec::new();
    for rec in read_recordings(&a.input, a.format)? {
        let mut processed = Recording {
            sampling_rate_hz: rec.sampling_rate_hz,
            lead_id: rec.lead_id.clone(),
            samples: Vec::with_capacity(rec.samples.len()),
            r_peaks: Vec::new(),
            t_peaks: Vec::new(),
        };
        for (segment, ann) in rec.windows()? {
            let offset = processed.samples.len();
            if ann.count() > 0 {
                let p = preprocess_pipeline(&segment, &ann, &cfg.filter)?;
                processed.samples.extend(&p.segment.samples);
                processed.r_peaks.extend(p.annotations.r_indices.iter().map(|i| i + offset));
                processed.t_peaks.extend(p.annotations.t_indices.iter().map(|i| i + offset));
            } else {
                processed.samples.extend(filter_segment(&segment, &cfg.filter)?.samples);
            }
        }
        out.push(processed);
    }
    create_parent(&a.out)?;
    write_native_json_bundle(&a.out, &out, &meta(&cfg))?;
    Ok(0)
}

fn psr(cfg: RunConfig, a: &PsrArgs) -> Result<u8> {
    let recs = read_recordings(&a.input, a.format)?;
    let rec = recs.first().context("no recording in input")?;
    let windows = RecordingSource::new(rec)?;
    let raw = windows.segment(a.segment)?;
    let segment = if a.raw { raw } else { flip_by_extremum(&filter_segment(&raw, &cfg.filter)?).0 };
    let (img, q) = segment_image(&segment, &cfg.psr)?;
    create_parent(&a.out)?;
    write_psr(&a.out, &img, &cfg.psr, q, Some(&meta(&cfg)))?;
    if let Some(p) = &a.pgm {
        write_pgm(p, &render_image(&img), img.grid_n)?;
    }
    info!("PSR image of {} window {}: M = {}, q = {q:.4}", rec.lead_id, a.segment, img.total);
    Ok(0)
}

fn train(cfg: RunConfig, a: &TrainArgs) -> Result<u8> {
    let spec = cfg.model_spec()?;
    let primary = prepare_samples(&cfg.primary_examples()?, &cfg.filter, &cfg.psr);
    let bolster = prepare_samples(&cfg.bolster_examples()?, &cfg.filter, &cfg.psr);
    info!("{}: {} primary and {} bolster samples", spec.name(), primary.len(), bolster.len());
    let out = train_final(spec, &primary, &bolster, cfg.folds, &cfg.train)?;
    println!(
        "{}: test MAE {:.4} MSE {:.5} RMSE {:.4} (n = {})",
        out.predictor.name(),
        out.test.mae,
        out.test.mse,
        out.test.rmse,
        out.test.n
    );
    create_parent(&a.out)?;
    let training = json!({ "metadata": meta(&cfg), "test": out.test });
    checkpoint::save(&a.out, &out.predictor, &cfg.psr, &cfg.filter, training)?;
    let log_path = a.out.with_extension("log.csv");
    write_training_log(&log_path, &out.log)?;
    info!("saved {} and {}", a.out.display(), log_path.display());
    Ok(0)
}

fn crossval(cfg: RunConfig, a: &CrossvalArgs) -> Result<u8> {
    let spec = cfg.model_spec()?;
    let primary = prepare_samples(&cfg.primary_examples()?, &cfg.filter, &cfg.psr);
    let bolster = prepare_samples(&cfg.bolster_examples()?, &cfg.filter, &cfg.psr);
    let result = run_cross_validation(spec, &primary, &bolster, cfg.folds, &cfg.train)?;
    fs::create_dir_all(&a.out)?;
    let mut csv = csv_preamble(&cfg).into_bytes();
    write_results_csv(&mut csv, std::slice::from_ref(&result))?;
    fs::write(a.out.join("results.csv"), &csv)?;
    for (k, log) in result.logs.iter().enumerate() {
        write_training_log(&a.out.join(format!("fold_{:02}_log.csv", k + 1)), log)?;
    }
    let summary = json!({ "metadata": meta(&cfg), "model": result.name, "folds": result.folds, "mean": result.mean });
    fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "{}: mean MAE {:.4} MSE {:.5} RMSE {:.4} over {} folds",
        result.name,
        result.mean.mae,
        result.mean.mse,
        result.mean.rmse,
        result.folds.len()
    );
    Ok(0)
}

fn evaluate(cfg: RunConfig, a: &EvaluateArgs) -> Result<u8> {
    let (predictor, header) = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let examples = if a.input.is_empty() {
        cfg.primary_examples()?
    } else {
        load_examples(&a.input, cfg.data.format)?
    };
    let samples = prepare_samples(&examples, &header.filter, &header.psr);
    if samples.len() < 2 {
        bail!("need at least two usable examples, got {}", samples.len());
    }
    let pixels: Vec<Vec<f32>> = samples.iter().map(|s| s.pixels.clone()).collect();
    let pred = predictor.predict_pixels(&pixels)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let metrics = compute_metrics(&labels, &pred)?;
    if let Some(out) = &a.out {
        create_parent(out)?;
        let mut f = std::io::BufWriter::new(fs::File::create(out)?);
        f.write_all(csv_preamble(&cfg).as_bytes())?;
        writeln!(f, "id,label,prediction")?;
        for (s, p) in samples.iter().zip(&pred) {
            writeln!(f, "{},{},{}", s.id, s.label, p)?;
        }
    }
    let report = json!({ "metadata": meta(&cfg), "checkpoint": header.name, "metrics": metrics });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}

fn leads(path: &Path, format: RecordingFormat) -> Result<Vec<Recording>> {
    let recs = read_recordings(path, format)?;
    if recs.is_empty() {
        bail!("{} holds no leads", path.display());
    }
    Ok(recs)
}

fn screen(cfg: RunConfig, a: &ScreenArgs) -> Result<u8> {
    let (predictor, header) = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let recs = leads(&a.recording, a.format)?;
    let sources = recs.iter().map(RecordingSource::new).collect::<psrtr::Result<Vec<_>>>()?;
    let dyn_sources: Vec<&dyn LeadSource> = sources.iter().map(|s| s as &dyn LeadSource).collect();
    let report = screen_recording(&dyn_sources, &predictor, &header.filter, &header.psr, &cfg.screen)?;
    write_report(&a.out, &report, &meta(&cfg))?;
    for l in &report.leads {
        let status = match l.first_failure_index {
            None => "pass".to_string(),
            Some(i) => format!("fail at segment {i} ({:.0} s)", i as f64 * 10.0),
        };
        println!("{}: {status}, {} of {} segments skipped", l.lead_id, l.skipped, l.segments.len());
    }
    println!("verdict: {:?}", report.verdict);
    Ok(report.verdict.exit_code() as u8)
}

fn detail(cfg: RunConfig, a: &DetailArgs) -> Result<u8> {
    let (predictor, header) = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let recs = leads(&a.recording, a.format)?;
    let sources = recs.iter().map(RecordingSource::new).collect::<psrtr::Result<Vec<_>>>()?;
    let dyn_sources: Vec<&dyn LeadSource> = sources.iter().map(|s| s as &dyn LeadSource).collect();
    let bundle = segment_detail(&dyn_sources, a.segment, &predictor, &header.filter, &header.psr)?;
    write_detail(&a.out, &bundle, &header.psr, &meta(&cfg))?;
    for l in &bundle.leads {
        match (l.predicted_ratio, &l.skip_reason) {
            (Some(r), _) => println!("{}: predicted T:R {r:.4}", l.lead_id),
            (None, Some(why)) => println!("{}: skipped ({why})", l.lead_id),
            (None, None) => println!("{}: skipped", l.lead_id),
        }
    }
    Ok(0)
}

fn convert(a: &ConvertArgs) -> Result<u8> {
    let mut bases = Vec::new();
    for r in &a.records {
        if r.is_dir() {
            bases.extend(wfdb::find_records(r, &a.annotator)?);
        } else {
            bases.push(r.with_extension(""));
        }
    }
    if bases.is_empty() {
        bail!("no annotated WFDB records found");
    }
    let recs = bases
        .iter()
        .map(|b| wfdb::read_record(b, &a.annotator, a.channel).with_context(|| format!("reading {}", b.display())))
        .collect::<Result<Vec<_>>>()?;
    create_parent(&a.out)?;
    let metadata = json!({ "tool": "psrtr", "version": psrtr::config::VERSION, "source": a.records });
    write_native_json_bundle(&a.out, &recs, &metadata)?;
    info!("converted {} records into {}", recs.len(), a.out.display());
    Ok(0)
}
