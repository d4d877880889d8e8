//! Command implementations behind the `pdm` binary.
//!
//! Every command writes its outputs under one directory (`--out`, overridden
//! by `PDM_OUT`) and is deterministic in its seed.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pdm_core::checkpoint;
use pdm_core::config::{DatasetSpec, RunConfig, Variant};
use pdm_core::data::{grid, load_image_dir, load_png, save_png, synth_two_mode, Dataset};
use pdm_core::metrics::{pca_project, FeatureExtractor, ProxyMetrics};
use pdm_core::prototypes::assign;
use pdm_core::sampler::{generate, Conditioning, Generated, SampleRequest};
use pdm_core::training::{train, LossReport, ModelState};
use pdm_core::{PdmError, Tensor};

pub const OUT_ENV: &str = "PDM_OUT";
pub const METRICS_HEADER: &str = "variant,dataset,K,proxy_is,proxy_fid,proxy_kid,n_real,n_gen";
pub const ABLATION_HEADER: &str = "K,proxy_is,proxy_fid,proxy_kid";

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "pdm", version, about = "Train, sample and evaluate prototype diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Generate images from a checkpoint.
    Sample(SampleArgs),
    /// Compute proxy IS/FID/KID and the feature PCA of a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate one model per prototype count.
    Ablate(AblateArgs),
    /// Print a checkpoint's header and tensor listing.
    Dump(DumpArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default `out`; `PDM_OUT` takes precedence).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Condition on the nearest prototype of this PNG.
    #[arg(long, conflicts_with_all = ["label", "proto_index"])]
    pub ref_image: Option<PathBuf>,
    /// Condition on a class (supervised checkpoints only).
    #[arg(long, conflicts_with = "proto_index")]
    pub label: Option<usize>,
    /// Condition on a specific prototype (0-based).
    #[arg(long)]
    pub proto_index: Option<usize>,
    /// Run only the last N reverse steps (smoke tests; not the full sampler).
    #[arg(long)]
    pub steps_override: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image directory to evaluate against (default: the checkpoint's dataset).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// `filename,label` CSV for `--dataset`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Number of generated images (default: the checkpoint's `eval_n_gen`).
    #[arg(long)]
    pub n_gen: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the real images as the generated set (metric self-check).
    #[arg(long)]
    pub gen_real: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated prototype counts.
    #[arg(long, value_delimiter = ',', required = true)]
    pub k_list: Vec<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct DumpArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<PdmError>()) {
        Some(PdmError::Config(_) | PdmError::NonPositiveTau(_)) => EXIT_CONFIG,
        Some(PdmError::Numeric(_)) => EXIT_NUMERIC,
        Some(PdmError::Data(_) | PdmError::Io { .. } | PdmError::Checkpoint(_) | PdmError::UnknownLabel(_)) => EXIT_DATA,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Sample(a) => cmd_sample(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
        Command::Dump(a) => {
            print!("{}", cmd_dump(&a)?);
            Ok(())
        }
    }
}

/// `PDM_OUT` if set, else the flag, else `out`.
pub fn resolve_out(flag: Option<&Path>) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag.map_or_else(|| PathBuf::from("out"), Path::to_path_buf),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PdmError::io(dir, e))?;
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| PdmError::io(path, e))?;
    Ok(())
}

/// Config file plus `--set` overrides and `--seed`, validated.
pub fn load_config(run: &RunArgs) -> Result<RunConfig> {
    let text = fs::read_to_string(&run.config)
        .map_err(|e| PdmError::Config(format!("cannot read config {}: {e}", run.config.display())))?;
    let mut config = RunConfig::parse(&text)?;
    let mut errors = Vec::new();
    for s in &run.sets {
        match s.split_once('=') {
            Some((k, v)) => {
                if let Err(e) = config.set(k.trim(), v.trim()) {
                    errors.push(format!("--set {s}: {e}"));
                }
            }
            None => errors.push(format!("--set {s}: expected KEY=VALUE")),
        }
    }
    if !errors.is_empty() {
        return Err(PdmError::Config(errors.join("\n")).into());
    }
    if let Some(seed) = run.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// Materializes the configured dataset. Synthetic data is seeded by the run seed.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset<f32>> {
    Ok(match &config.dataset {
        DatasetSpec::TwoMode { n, size } => synth_two_mode(*n, *size, config.seed)?,
        DatasetSpec::Dir { path, labels } => load_image_dir(path, labels.as_deref())?,
    })
}

pub struct TrainOutcome {
    pub state: ModelState<f32>,
    pub curve: Vec<LossReport>,
    pub checkpoint: PathBuf,
}

/// Trains `config` into `out`: `resolved.cfg`, `loss.csv`, `ckpt_{step}.bin`.
pub fn train_into(config: &RunConfig, dataset: &Dataset<f32>, out: &Path) -> Result<TrainOutcome> {
    create_dir(out)?;
    write_file(&out.join("resolved.cfg"), &config.to_text())?;
    let loss_path = out.join("loss.csv");
    let file = fs::File::create(&loss_path).map_err(|e| PdmError::io(&loss_path, e))?;
    let mut loss = std::io::BufWriter::new(file);
    writeln!(loss, "{}", LossReport::CSV_HEADER)?;
    let every = config.checkpoint_every;
    let mut last_rng = pdm_core::training::training_rng(config.seed);
    let (state, curve) = train(dataset, config, |report, state, rng| {
        last_rng = rng.clone();
        writeln!(loss, "{}", report.csv_row()).map_err(|e| PdmError::io(&loss_path, e))?;
        if every > 0 && state.step % every as u64 == 0 {
            checkpoint::save(&out.join(format!("ckpt_{}.bin", state.step)), state, rng)?;
        }
        Ok(())
    })?;
    loss.flush()?;
    let ckpt = out.join(format!("ckpt_{}.bin", state.step));
    if every == 0 || state.step % every as u64 != 0 {
        checkpoint::save(&ckpt, &state, &last_rng)?;
    }
    Ok(TrainOutcome { state, curve, checkpoint: ckpt })
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let config = load_config(&args.run)?;
    let dataset = load_dataset(&config)?;
    let out = resolve_out(args.run.out.as_deref());
    let outcome = train_into(&config, &dataset, &out)?;
    eprintln!(
        "trained {} steps; final total loss {:.6}; checkpoint {}",
        outcome.state.step,
        outcome.curve.last().map_or(f64::NAN, |r| r.total),
        outcome.checkpoint.display()
    );
    Ok(outcome)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState<f32>> {
    let (state, _) = checkpoint::load::<f32>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(state)
}

/// Writes `grid.png` and `sample_{seed}_{i}.png` for a generated batch.
pub fn write_samples(generated: &Generated<f32>, shape: [usize; 3], seed: u64, out: &Path) -> Result<()> {
    create_dir(out)?;
    let items: Vec<Vec<f32>> = (0..generated.images.shape()[0]).map(|i| generated.images.item(i).to_vec()).collect();
    let (g, gshape) = grid(&items, shape);
    save_png(&g, gshape, &out.join("grid.png"))?;
    for (i, im) in items.iter().enumerate() {
        save_png(im, shape, &out.join(format!("sample_{seed}_{i}.png")))?;
    }
    Ok(())
}

pub fn cmd_sample(args: &SampleArgs) -> Result<Generated<f32>> {
    let state = load_checkpoint(&args.ckpt)?;
    let conditioning = if let Some(path) = &args.ref_image {
        let (pixels, shape) = load_png::<f32>(path, state.image_shape[0])?;
        if shape != state.image_shape {
            return Err(PdmError::Data(format!(
                "reference image {} has shape {shape:?}, checkpoint expects {:?}",
                path.display(),
                state.image_shape
            ))
            .into());
        }
        Conditioning::Image(Tensor::from_vec(&shape, pixels)?)
    } else if let Some(label) = args.label {
        if state.variant() != Variant::SPdm {
            return Err(PdmError::Config(format!(
                "--label needs a supervised (spdm) checkpoint; this one is {}",
                state.variant().as_str()
            ))
            .into());
        }
        Conditioning::Label(label)
    } else if let Some(k) = args.proto_index {
        Conditioning::Prototype(k)
    } else {
        Conditioning::Random
    };
    let mut request = SampleRequest::new(args.count, conditioning, args.seed);
    request.steps_override = args.steps_override;
    let generated = generate(&request, &state)?;
    write_samples(&generated, state.image_shape, args.seed, &resolve_out(args.out.as_deref()))?;
    Ok(generated)
}

/// One row of `pca.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaRow {
    pub x: f64,
    pub y: f64,
    pub prototype: Option<usize>,
    pub label: Option<usize>,
}

/// Encoder features of every dataset image, in order.
pub fn encoder_features(state: &ModelState<f32>, dataset: &Dataset<f32>) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(dataset.len());
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(128) {
        let f = state.features(&dataset.batch(chunk)?.images)?;
        out.extend((0..chunk.len()).map(|i| f.item(i).to_vec()));
    }
    Ok(out)
}

/// PCA of the encoder features with nearest-prototype and label columns.
pub fn pca_rows(state: &ModelState<f32>, dataset: &Dataset<f32>) -> Result<Vec<PcaRow>> {
    let feats = encoder_features(state, dataset)?;
    let proj = pca_project(&feats.iter().map(|f| f.iter().map(|&v| f64::from(v)).collect()).collect::<Vec<_>>(), 2)?;
    feats
        .iter()
        .zip(&proj.points)
        .enumerate()
        .map(|(i, (f, p))| {
            let prototype = match state.variant() {
                Variant::Ddpm => None,
                _ => Some(assign(f, &state.bank)?.index),
            };
            Ok(PcaRow { x: p[0], y: p[1], prototype, label: dataset.labels.as_ref().map(|l| l[i]) })
        })
        .collect()
}

/// Labels for the proxy classifier: dataset labels, else nearest-prototype
/// assignments of the checkpoint encoder.
pub fn classifier_labels(state: &ModelState<f32>, dataset: &Dataset<f32>) -> Result<(Vec<usize>, usize)> {
    if let Some(l) = &dataset.labels {
        return Ok((l.clone(), dataset.num_classes));
    }
    if state.variant() == Variant::Ddpm || state.bank.k() < 2 {
        bail!(PdmError::Data("an unlabeled dataset needs a checkpoint with at least 2 prototypes for evaluation".into()));
    }
    let feats = encoder_features(state, dataset)?;
    let labels = feats.iter().map(|f| Ok(assign(f, &state.bank)?.index)).collect::<pdm_core::Result<Vec<_>>>()?;
    Ok((labels, state.bank.k()))
}

pub fn train_extractor(state: &ModelState<f32>, dataset: &Dataset<f32>, seed: u64) -> Result<FeatureExtractor<f32>> {
    let (labels, classes) = classifier_labels(state, dataset)?;
    Ok(FeatureExtractor::train(dataset, &labels, classes, state.config.eval_classifier_steps, seed)?)
}

/// Proxy metrics of `n_gen` randomly conditioned samples against `dataset`.
pub fn proxy_metrics(
    state: &ModelState<f32>,
    dataset: &Dataset<f32>,
    extractor: &FeatureExtractor<f32>,
    n_gen: usize,
    seed: u64,
    gen_real: bool,
) -> Result<ProxyMetrics> {
    if n_gen < 2 {
        bail!(PdmError::Config(format!("--n-gen must be at least 2, got {n_gen}")));
    }
    let generated: Vec<Vec<f32>> = if gen_real {
        dataset.images.clone()
    } else {
        let g = generate(&SampleRequest::new(n_gen, Conditioning::Random, seed), state)?;
        (0..n_gen).map(|i| g.images.item(i).to_vec()).collect()
    };
    let (real_feats, _) = extractor.evaluate(&dataset.images)?;
    let (gen_feats, gen_probs) = extractor.evaluate(&generated)?;
    Ok(ProxyMetrics::from_features(&real_feats, &gen_feats, &gen_probs)?)
}

fn metrics_row(variant: Variant, dataset: &str, k: usize, m: &ProxyMetrics) -> String {
    format!("{},{dataset},{k},{},{},{},{},{}", variant.as_str(), m.is, m.fid, m.kid, m.n_real, m.n_gen)
}

fn eval_dataset(args: &EvalArgs, state: &ModelState<f32>) -> Result<Dataset<f32>> {
    match &args.dataset {
        Some(dir) => Ok(load_image_dir(dir, args.labels.as_deref())?),
        None => load_dataset(&state.config),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<ProxyMetrics> {
    let state = load_checkpoint(&args.ckpt)?;
    let n_gen = args.n_gen.unwrap_or(state.config.eval_n_gen);
    if n_gen < 2 {
        bail!(PdmError::Config(format!("--n-gen must be at least 2, got {n_gen}")));
    }
    let dataset = eval_dataset(args, &state)?;
    if dataset.shape != state.image_shape {
        bail!(PdmError::Data(format!(
            "dataset images are {:?}, checkpoint expects {:?}",
            dataset.shape, state.image_shape
        )));
    }
    let out = resolve_out(args.out.as_deref());
    create_dir(&out)?;
    let extractor = train_extractor(&state, &dataset, args.seed)?;
    let m = proxy_metrics(&state, &dataset, &extractor, n_gen, args.seed, args.gen_real)?;
    let k = if state.variant() == Variant::Ddpm { 0 } else { state.bank.k() };
    write_file(&out.join("metrics.csv"), &format!("{METRICS_HEADER}\n{}\n", metrics_row(state.variant(), &dataset.name, k, &m)))?;
    let rows = pca_rows(&state, &dataset)?;
    write_file(&out.join("pca.csv"), &pca_csv(&rows, dataset.labels.is_some()))?;
    eprintln!("proxy_is {:.4} proxy_fid {:.4} proxy_kid {:.6}", m.is, m.fid, m.kid);
    Ok(m)
}

pub fn pca_csv(rows: &[PcaRow], with_labels: bool) -> String {
    let mut s = String::from(if with_labels { "x,y,assigned_prototype,label\n" } else { "x,y,assigned_prototype\n" });
    for r in rows {
        let proto = r.prototype.map_or(String::new(), |p| p.to_string());
        s.push_str(&format!("{},{},{proto}", r.x, r.y));
        if with_labels {
            s.push_str(&format!(",{}", r.label.map_or(String::new(), |l| l.to_string())));
        }
        s.push('\n');
    }
    s
}

/// One ablation row.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub k: usize,
    pub metrics: ProxyMetrics,
}

pub fn check_k_list(ks: &[usize]) -> Result<()> {
    if ks.is_empty() {
        bail!(PdmError::Config("--k-list is empty".into()));
    }
    for (i, k) in ks.iter().enumerate() {
        if *k == 0 {
            bail!(PdmError::Config("--k-list entries must be positive".into()));
        }
        if ks[..i].contains(k) {
            bail!(PdmError::Config(format!("--k-list repeats K = {k}")));
        }
    }
    Ok(())
}

/// Trains one PDM per K (same seed and budget) into `out/k{K}` and evaluates
/// all of them with one shared proxy classifier, built from the largest-K run
/// when the dataset has no labels.
pub fn ablate_into(config: &RunConfig, ks: &[usize], out: &Path) -> Result<Vec<AblationRow>> {
    check_k_list(ks)?;
    create_dir(out)?;
    let dataset = load_dataset(config)?;
    let mut states = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut c = config.clone();
        c.variant = Variant::Pdm;
        c.k = k;
        states.push(train_into(&c, &dataset, &out.join(format!("k{k}")))?.state);
    }
    let widest = states.iter().max_by_key(|s| s.bank.k()).expect("non-empty k-list");
    let extractor = train_extractor(widest, &dataset, config.seed)?;
    let mut rows = Vec::with_capacity(ks.len());
    let mut csv = format!("{ABLATION_HEADER}\n");
    for (&k, state) in ks.iter().zip(&states) {
        let m = proxy_metrics(state, &dataset, &extractor, config.eval_n_gen, config.seed, false)?;
        eprintln!("K={k}: proxy_is {:.4} proxy_fid {:.4} proxy_kid {:.6}", m.is, m.fid, m.kid);
        csv.push_str(&format!("{k},{},{},{}\n", m.is, m.fid, m.kid));
        rows.push(AblationRow { k, metrics: m });
    }
    write_file(&out.join("ablation.csv"), &csv)?;
    Ok(rows)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<Vec<AblationRow>> {
    check_k_list(&args.k_list)?;
    let config = load_config(&args.run)?;
    ablate_into(&config, &args.k_list, &resolve_out(args.run.out.as_deref()))
}

pub fn cmd_dump(args: &DumpArgs) -> Result<String> {
    let bytes = fs::read(&args.ckpt).map_err(|e| PdmError::io(&args.ckpt, e))?;
    Ok(checkpoint::describe(&bytes)?)
}
