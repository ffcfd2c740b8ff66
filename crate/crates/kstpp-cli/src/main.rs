//! Command-line front end: simulate synthetic data, fit models, predict
//! next events, evaluate against a reference, dump intensity profiles, and
//! import CSV event logs.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kstpp::checkpoint::{load_checkpoint, save_checkpoint, LoadedModel, ModelCheckpoint};
use kstpp::dataset::{import_csv, load_dataset, save_dataset, DatasetManifest};
use kstpp::metrics;
use kstpp::model::{Domain, EventSequence, IntensityModel, KstppModel, ModelSettings};
use kstpp::predict::{predict_sequence, MarginalIntensity, Prediction};
use kstpp::simulate::{make_dataset, SynthConfig, SynthTruthModel};
use kstpp::train::{fit, FitConfig};
use kstpp::{PoissonModel, SthpFitConfig, SthpModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "kstpp", version, about = "Spatiotemporal point process toolkit")]
struct Cli {
    /// Worker threads; falls back to KSTPP_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample event sequences from a built-in synthetic process.
    Simulate(SimulateArgs),
    /// Fit a model to a dataset and write a checkpoint.
    Fit(FitArgs),
    /// Teacher-forced next-event predictions for every sequence.
    Predict(PredictArgs),
    /// Score a checkpoint: held-out likelihood, intensity recovery,
    /// prediction errors.
    Eval(EvalArgs),
    /// Dump an intensity profile, either a spatial slice at one time or the
    /// space-integrated intensity over time.
    Intensity(IntensityArgs),
    /// Convert a CSV event log into a dataset file.
    Import(ImportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in generator: syn1 (lag-switching sign) or syn2
    /// (distance-switching sign).
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Split label baked into per-sequence seeds, so different splits from
    /// the same master seed are independent.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the domain as "t_max,x_lo,x_hi,y_lo,y_hi".
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Write the training log as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Cap predictions per sequence (evenly strided).
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Intensity-recovery reference: "truth" for the generator stored in
    /// the dataset manifest, or a path to another checkpoint.
    #[arg(long)]
    reference: Option<String>,
    /// Spatial probe grid for the spatiotemporal error, as "nx,ny".
    #[arg(long, default_value = "16,16")]
    grid: String,
    /// Cap predictions per sequence.
    #[arg(long)]
    limit: Option<usize>,
    /// Skip the (slow) prediction-error pass.
    #[arg(long)]
    skip_predictions: bool,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IntensityArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset supplying the conditioning history.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sequence index within the dataset.
    #[arg(long, default_value_t = 0)]
    seq: usize,
    /// Evaluate a spatial slice at this time; otherwise the output is the
    /// space-integrated intensity over a uniform time grid.
    #[arg(long)]
    at: Option<f64>,
    /// Spatial grid for the slice, as "nx,ny".
    #[arg(long, default_value = "32,32")]
    grid: String,
    /// Number of time samples for the temporal profile.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    csv: PathBuf,
    /// Domain as "t_max,x_lo,x_hi,y_lo,y_hi"; inferred from the data when
    /// omitted.
    #[arg(long)]
    domain: Option<String>,
    #[arg(long, default_value = "import")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

/// Model choice plus nested settings, loadable from TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    kind: Kind,
    /// Seed for the value-tensor initialization.
    init_seed: u64,
    model: ModelSettings,
    fit: FitConfig,
    sthp: SthpFitConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Kstpp,
    Poisson,
    Sthp,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kind: Kind::Kstpp,
            init_seed: 0,
            model: ModelSettings::default(),
            fit: FitConfig::default(),
            sthp: SthpFitConfig::default(),
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    setup_threads(cli.threads)?;
    match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Fit(args) => run_fit(args),
        Command::Predict(args) => run_predict(args),
        Command::Eval(args) => run_eval(args),
        Command::Intensity(args) => run_intensity(args),
        Command::Import(args) => run_import(args),
    }
}

fn setup_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("KSTPP_THREADS") {
            Ok(v) => Some(v.parse::<usize>().context("KSTPP_THREADS must be an integer")?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            bail!("thread count must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("failed to configure the thread pool")?;
    }
    Ok(())
}

fn parse_domain(text: &str) -> Result<Domain> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad domain '{}'", text))?;
    if parts.len() != 5 {
        bail!("domain needs 5 numbers (t_max,x_lo,x_hi,y_lo,y_hi), got {}", parts.len());
    }
    Ok(Domain::new(parts[0], (parts[1], parts[2]), (parts[3], parts[4]))?)
}

fn parse_grid(text: &str) -> Result<(usize, usize)> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad grid '{}'", text))?;
    if parts.len() != 2 {
        bail!("grid needs 2 numbers (nx,ny), got {}", parts.len());
    }
    Ok((parts[0], parts[1]))
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")
            .with_context(|| format!("writing {}", p.display()))?,
        None => println!("{}", text),
    }
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let mut config = match args.preset.as_str() {
        "syn1" => SynthConfig::syn1(),
        "syn2" => SynthConfig::syn2(),
        other => bail!("unknown preset '{}', expected syn1 or syn2", other),
    };
    if let Some(text) = &args.domain {
        config.domain = parse_domain(text)?;
    }
    let (seqs, traces) = make_dataset(&config, args.count, &args.split, args.seed)?;
    let mut manifest = DatasetManifest::new(config.domain, &args.split, seqs.len());
    manifest.generator = Some(config);
    manifest.seed = Some(args.seed);
    save_dataset(&args.out, &manifest, &seqs)?;
    let events: usize = seqs.iter().map(|s| s.len()).sum();
    let proposals: usize = traces.iter().map(|t| t.proposals).sum();
    println!(
        "wrote {}: {} sequences, {} events ({:.1} per sequence), {} thinning proposals",
        args.out.display(),
        seqs.len(),
        events,
        events as f64 / seqs.len().max(1) as f64,
        proposals
    );
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
    }
}

fn run_fit(args: FitArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let (manifest, train_seqs) = load_dataset(&args.train)?;
    let val_seqs = match &args.val {
        Some(p) => {
            let (vm, vs) = load_dataset(p)?;
            if vm.domain != manifest.domain {
                bail!("validation domain differs from training domain");
            }
            vs
        }
        None => Vec::new(),
    };
    let events: usize = train_seqs.iter().map(|s| s.len()).sum();
    eprintln!(
        "fitting {:?} on {} sequences ({} events), {} validation sequences",
        cfg.kind,
        train_seqs.len(),
        events,
        val_seqs.len()
    );
    let started = std::time::Instant::now();
    let checkpoint = match cfg.kind {
        Kind::Kstpp => {
            let mut model = KstppModel::init(manifest.domain, &cfg.model, cfg.init_seed)?;
            let rate = events as f64
                / (train_seqs.len() as f64 * manifest.domain.t_max * manifest.domain.area());
            model.set_background_level(rate)?;
            let log = fit(&mut model, &train_seqs, &val_seqs, &cfg.fit)?;
            if let Some(p) = &args.log {
                write_json(Some(p), &log)?;
            }
            if let Some(step) = log.diverged_at_step {
                eprintln!("warning: training diverged at step {}, kept last finite iterate", step);
            }
            if let Some(last) = log.steps.last() {
                eprintln!(
                    "finished {} steps, final objective {:.3}, best epoch {:?}",
                    last.step, last.objective, log.best_epoch
                );
            }
            ModelCheckpoint::from_kstpp(&model)
        }
        Kind::Poisson => {
            let model = PoissonModel::fit(manifest.domain, &train_seqs)?;
            eprintln!("fitted rate {:.6}", model.rate);
            ModelCheckpoint::Poisson(model)
        }
        Kind::Sthp => {
            let (model, trace) = SthpModel::fit(manifest.domain, &train_seqs, &cfg.sthp)?;
            if let Some(p) = &args.log {
                #[derive(Serialize)]
                struct SthpLog<'a> {
                    objectives: &'a [f64],
                }
                write_json(Some(p), &SthpLog { objectives: &trace })?;
            }
            eprintln!(
                "fitted lambda0 {:.4}, excitation {:.4}, decay {:.4}, bandwidth {:.4}",
                model.lambda0(),
                model.excitation(),
                model.decay(),
                model.bandwidth()
            );
            ModelCheckpoint::Sthp(model)
        }
    };
    save_checkpoint(&args.out, &checkpoint)?;
    println!(
        "wrote {} ({} model) in {:.1}s",
        args.out.display(),
        checkpoint.kind(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

#[derive(Serialize)]
struct SequencePredictions {
    seq: usize,
    predictions: Vec<Prediction>,
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.model)?.into_loaded()?;
    let model = loaded.as_model();
    let (manifest, seqs) = load_dataset(&args.data)?;
    if manifest.domain != *model.domain() {
        bail!("dataset domain differs from the model domain");
    }
    let rows: kstpp::Result<Vec<SequencePredictions>> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            Ok(SequencePredictions {
                seq: i,
                predictions: predict_sequence(model, seq, args.limit)?,
            })
        })
        .collect();
    let rows = rows?;
    let total: usize = rows.iter().map(|r| r.predictions.len()).sum();
    write_json(Some(&args.out), &rows)?;
    println!("wrote {}: {} predictions over {} sequences", args.out.display(), total, rows.len());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    model_kind: String,
    sequences: usize,
    events: usize,
    mean_log_likelihood: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    temporal_relative_l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spatiotemporal_relative_l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    time_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    predictions: Option<usize>,
}

enum Reference {
    Truth(SynthTruthModel),
    Checkpoint(LoadedModel),
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.model)?.into_loaded()?;
    let model = loaded.as_model();
    let (manifest, seqs) = load_dataset(&args.data)?;
    if manifest.domain != *model.domain() {
        bail!("dataset domain differs from the model domain");
    }
    let grid = parse_grid(&args.grid)?;
    let lls: kstpp::Result<Vec<f64>> =
        seqs.par_iter().map(|s| model.log_likelihood(s)).collect();
    let lls = lls?;
    let events: usize = seqs.iter().map(|s| s.len()).sum();
    let mut report = EvalReport {
        model_kind: load_checkpoint(&args.model)?.kind().to_string(),
        sequences: seqs.len(),
        events,
        mean_log_likelihood: lls.iter().sum::<f64>() / lls.len().max(1) as f64,
        temporal_relative_l2: None,
        spatiotemporal_relative_l2: None,
        time_rmse: None,
        mean_distance: None,
        predictions: None,
    };
    if let Some(spec) = &args.reference {
        let reference = if spec == "truth" {
            let config = manifest
                .generator
                .ok_or_else(|| anyhow!("dataset has no embedded generator; pass a checkpoint"))?;
            Reference::Truth(SynthTruthModel::new(config))
        } else {
            Reference::Checkpoint(load_checkpoint(Path::new(spec))?.into_loaded()?)
        };
        let refm: &dyn IntensityModel = match &reference {
            Reference::Truth(m) => m,
            Reference::Checkpoint(l) => l.as_model(),
        };
        report.temporal_relative_l2 =
            Some(metrics::temporal_intensity_error(model, refm, &seqs)?.relative_l2);
        report.spatiotemporal_relative_l2 =
            Some(metrics::spatiotemporal_intensity_error(model, refm, &seqs, grid)?.relative_l2);
    }
    if !args.skip_predictions {
        let p = metrics::prediction_errors(model, &seqs, args.limit)?;
        report.time_rmse = Some(p.time_rmse);
        report.mean_distance = Some(p.mean_distance);
        report.predictions = Some(p.count);
    }
    write_json(args.out.as_deref(), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct SpatialSlice {
    t: f64,
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Row-major intensity values, xs outer, ys inner.
    values: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct TemporalProfile {
    times: Vec<f64>,
    /// Space-integrated intensity at each time.
    marginal: Vec<f64>,
}

fn run_intensity(args: IntensityArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.model)?.into_loaded()?;
    let model = loaded.as_model();
    let history = match &args.data {
        Some(p) => {
            let (manifest, mut seqs) = load_dataset(p)?;
            if manifest.domain != *model.domain() {
                bail!("dataset domain differs from the model domain");
            }
            if args.seq >= seqs.len() {
                bail!("sequence {} out of range ({} sequences)", args.seq, seqs.len());
            }
            Some(seqs.swap_remove(args.seq))
        }
        None => None,
    };
    let d = *model.domain();
    match args.at {
        Some(t) => {
            if !(t > 0.0 && t <= d.t_max) {
                bail!("slice time {} outside (0, {}]", t, d.t_max);
            }
            let (nx, ny) = parse_grid(&args.grid)?;
            let centers = |range: (f64, f64), n: usize| -> Vec<f64> {
                let step = (range.1 - range.0) / n as f64;
                (0..n).map(|i| range.0 + (i as f64 + 0.5) * step).collect()
            };
            let xs = centers(d.x_range, nx);
            let ys = centers(d.y_range, ny);
            let mut profiler = model.profiler(xs.clone(), ys.clone())?;
            if let Some(seq) = &history {
                for i in 0..seq.len() {
                    profiler.push_event(seq.times()[i], seq.xs()[i], seq.ys()[i])?;
                }
            }
            let grid = profiler.eval_at(t)?;
            let values: Vec<Vec<f64>> =
                (0..nx).map(|j| (0..ny).map(|k| grid.get(j, k)).collect()).collect();
            write_json(Some(&args.out), &SpatialSlice { t, xs, ys, values })?;
        }
        None => {
            if args.samples == 0 {
                bail!("need at least one time sample");
            }
            let hist_events = match &history {
                Some(seq) => seq.events(),
                None => kstpp::Events::empty(),
            };
            let marginal = MarginalIntensity::new(model, hist_events)?;
            let step = d.t_max / args.samples as f64;
            let times: Vec<f64> =
                (0..args.samples).map(|i| (i as f64 + 0.5) * step).collect();
            let values: kstpp::Result<Vec<f64>> =
                times.iter().map(|&t| marginal.at(t)).collect();
            write_json(Some(&args.out), &TemporalProfile { times, marginal: values? })?;
        }
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_import(args: ImportArgs) -> Result<()> {
    let domain = args.domain.as_deref().map(parse_domain).transpose()?;
    let imported = import_csv(&args.csv, domain)?;
    let manifest = DatasetManifest::new(imported.domain, &args.split, imported.seqs.len());
    save_dataset(&args.out, &manifest, &imported.seqs)?;
    let events: usize = imported.seqs.iter().map(EventSequence::len).sum();
    println!(
        "wrote {}: {} sequences, {} events, domain t<={}, x in [{}, {}], y in [{}, {}]",
        args.out.display(),
        imported.seqs.len(),
        events,
        imported.domain.t_max,
        imported.domain.x_range.0,
        imported.domain.x_range.1,
        imported.domain.y_range.0,
        imported.domain.y_range.1
    );
    Ok(())
}
