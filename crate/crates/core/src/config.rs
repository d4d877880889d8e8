//! Run configuration and its flat `key = value` text form.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys and malformed values are reported with their line numbers.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{PdmError, Result};
use crate::networks::{DEFAULT_ENCODER_WIDTHS, DESK_WIDTHS, DEFAULT_RES_BLOCKS};
use crate::nn::DEFAULT_HEADS;
use crate::optim::DEFAULT_LR;
use crate::schedule::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};

/// Which objective and conditioning path a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Unsupervised prototypes chosen by nearest-neighbour assignment.
    Pdm,
    /// One prototype bound to each class label; no compactness term.
    SPdm,
    /// Prototype-free baseline conditioned on the timestep embedding alone.
    Ddpm,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Pdm => "pdm",
            Variant::SPdm => "spdm",
            Variant::Ddpm => "ddpm",
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "pdm" => Ok(Variant::Pdm),
            "spdm" => Ok(Variant::SPdm),
            "ddpm" => Ok(Variant::Ddpm),
            other => Err(format!("unknown variant '{other}' (expected pdm, spdm or ddpm)")),
        }
    }
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    /// Generated two-mode toy images.
    TwoMode { n: usize, size: usize },
    /// Directory of PNG files with an optional `filename,label` CSV.
    Dir { path: PathBuf, labels: Option<PathBuf> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub k: usize,
    pub dim: usize,
    pub tau: f64,
    pub beta_compact: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub widths: [usize; 4],
    pub res_blocks: usize,
    pub encoder_widths: [usize; 3],
    pub heads: usize,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Generated images per evaluation.
    pub eval_n_gen: usize,
    /// Optimizer steps for the evaluation classifier.
    pub eval_classifier_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Pdm,
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            k: 10,
            dim: 128,
            tau: 1.0,
            beta_compact: 1.0,
            batch_size: 64,
            epochs: 1,
            max_steps: 0,
            lr: DEFAULT_LR,
            seed: 0,
            dataset: DatasetSpec::TwoMode { n: 2000, size: 16 },
            widths: DESK_WIDTHS,
            res_blocks: DEFAULT_RES_BLOCKS,
            encoder_widths: DEFAULT_ENCODER_WIDTHS,
            heads: DEFAULT_HEADS,
            checkpoint_every: 0,
            eval_n_gen: 256,
            eval_classifier_steps: 300,
        }
    }
}

fn parse_list<const N: usize>(v: &str) -> std::result::Result<[usize; N], String> {
    let items: Vec<usize> = v
        .trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| format!("'{s}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    items.try_into().map_err(|v: Vec<usize>| format!("expected {N} entries, got {}", v.len()))
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("'{v}': {e}"))
}

impl RunConfig {
    /// Sets one key; used by the parser and by command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "variant" => self.variant = v.parse()?,
            "T" | "steps" => self.steps = num(v)?,
            "beta_start" => self.beta_start = num(v)?,
            "beta_end" => self.beta_end = num(v)?,
            "K" | "k" => self.k = num(v)?,
            "D" | "dim" => self.dim = num(v)?,
            "tau" => self.tau = num(v)?,
            "beta_compact" => self.beta_compact = num(v)?,
            "batch_size" => self.batch_size = num(v)?,
            "epochs" => self.epochs = num(v)?,
            "max_steps" => self.max_steps = num(v)?,
            "lr" => self.lr = num(v)?,
            "seed" => self.seed = num(v)?,
            "dataset" => {
                self.dataset = match v {
                    "two_mode" | "synth_two_mode" => match &self.dataset {
                        DatasetSpec::TwoMode { .. } => self.dataset.clone(),
                        _ => DatasetSpec::TwoMode { n: 2000, size: 16 },
                    },
                    path => {
                        let labels = match &self.dataset {
                            DatasetSpec::Dir { labels, .. } => labels.clone(),
                            _ => None,
                        };
                        DatasetSpec::Dir { path: PathBuf::from(path), labels }
                    }
                }
            }
            "labels" => match &mut self.dataset {
                DatasetSpec::Dir { labels, .. } => {
                    *labels = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
                }
                _ => return Err("'labels' requires a directory dataset".into()),
            },
            "synth_n" => match &mut self.dataset {
                DatasetSpec::TwoMode { n, .. } => *n = num(v)?,
                _ => return Err("'synth_n' requires dataset = two_mode".into()),
            },
            "image_size" => match &mut self.dataset {
                DatasetSpec::TwoMode { size, .. } => *size = num(v)?,
                _ => return Err("'image_size' requires dataset = two_mode".into()),
            },
            "widths" => self.widths = parse_list(v)?,
            "res_blocks" => self.res_blocks = num(v)?,
            "encoder_widths" => self.encoder_widths = parse_list(v)?,
            "heads" => self.heads = num(v)?,
            "checkpoint_every" => self.checkpoint_every = num(v)?,
            "eval_n_gen" => self.eval_n_gen = num(v)?,
            "eval_classifier_steps" => self.eval_classifier_steps = num(v)?,
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults, collecting every bad line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut errors = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k, v) {
                        errors.push(format!("line {}: {e}", i + 1));
                    }
                }
                None => errors.push(format!("line {}: expected 'key = value'", i + 1)),
            }
        }
        if !errors.is_empty() {
            return Err(PdmError::Config(errors.join("; ")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PdmError::Config(m));
        if self.steps == 0 {
            return fail("T must be >= 1".into());
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return fail(format!("need 0 < beta_start <= beta_end < 1, got {} and {}", self.beta_start, self.beta_end));
        }
        if self.k == 0 || self.dim == 0 {
            return fail("K and D must be >= 1".into());
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.heads == 0 || !self.widths[3].is_multiple_of(self.heads) {
            return fail(format!("bottleneck width {} not divisible by {} heads", self.widths[3], self.heads));
        }
        if self.widths.contains(&0) || self.encoder_widths.contains(&0) || self.res_blocks == 0 {
            return fail("widths and res_blocks must be positive".into());
        }
        if !(self.lr >= 0.0) {
            return fail(format!("lr must be non-negative, got {}", self.lr));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "variant = {}", self.variant.as_str());
        let _ = writeln!(s, "T = {}", self.steps);
        let _ = writeln!(s, "beta_start = {:?}", self.beta_start);
        let _ = writeln!(s, "beta_end = {:?}", self.beta_end);
        let _ = writeln!(s, "K = {}", self.k);
        let _ = writeln!(s, "D = {}", self.dim);
        let _ = writeln!(s, "tau = {:?}", self.tau);
        let _ = writeln!(s, "beta_compact = {:?}", self.beta_compact);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "max_steps = {}", self.max_steps);
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "seed = {}", self.seed);
        match &self.dataset {
            DatasetSpec::TwoMode { n, size } => {
                let _ = writeln!(s, "dataset = two_mode");
                let _ = writeln!(s, "synth_n = {n}");
                let _ = writeln!(s, "image_size = {size}");
            }
            DatasetSpec::Dir { path, labels } => {
                let _ = writeln!(s, "dataset = {}", path.display());
                if let Some(l) = labels {
                    let _ = writeln!(s, "labels = {}", l.display());
                }
            }
        }
        let _ = writeln!(s, "widths = {}", list(&self.widths));
        let _ = writeln!(s, "res_blocks = {}", self.res_blocks);
        let _ = writeln!(s, "encoder_widths = {}", list(&self.encoder_widths));
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "eval_n_gen = {}", self.eval_n_gen);
        let _ = writeln!(s, "eval_classifier_steps = {}", self.eval_classifier_steps);
        s
    }
}
