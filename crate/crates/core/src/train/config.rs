use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::GateVariant;
use crate::losses::KlDirection;
use crate::model::ModelConfig;
use crate::numkern::Activation;
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Teacher,
    Gates,
}

/// Training-time memory capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    /// Fraction of the training sequence length.
    Fraction(f64),
    Absolute(usize),
}

impl Budget {
    pub fn resolve(&self, seq_len: usize) -> usize {
        match *self {
            Budget::Fraction(f) => ((f * seq_len as f64).round() as usize).max(1),
            Budget::Absolute(m) => m,
        }
    }

    fn parse(v: &str) -> Option<Budget> {
        if let Some(pct) = v.strip_suffix('%') {
            return pct.trim().parse::<f64>().ok().map(|p| Budget::Fraction(p / 100.0));
        }
        if v.contains('.') {
            return v.parse().ok().map(Budget::Fraction);
        }
        v.parse().ok().map(Budget::Absolute)
    }
}

/// Which positions the distillation term is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillPositions {
    All,
    /// Only rows that predict a loss-masked token.
    Targets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub steps: usize,
    pub budget: Budget,
    pub lambda_cap: f64,
    pub kl_direction: KlDirection,
    pub use_ntp: bool,
    pub use_kl: bool,
    pub use_cap: bool,
    pub distill_positions: DistillPositions,
    pub seed: u64,
    pub eval_samples: usize,
    /// Held-out evaluation every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Stop once held-out accuracy reaches this value (teacher stage only).
    pub target_accuracy: Option<f64>,
    pub max_loss: f64,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        TrainConfig {
            stage,
            lr: 2e-4,
            weight_decay: 0.01,
            batch_size: 1,
            grad_accum: 4,
            steps: 1000,
            budget: Budget::Fraction(0.25),
            lambda_cap: 1.0,
            kl_direction: KlDirection::Forward,
            use_ntp: true,
            use_kl: true,
            use_cap: true,
            distill_positions: DistillPositions::All,
            seed: 0,
            eval_samples: 200,
            eval_every: 0,
            target_accuracy: None,
            max_loss: 1e4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be ≥ 0".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("batch_size and grad_accum must be positive".into()));
        }
        if !(self.lambda_cap >= 0.0 && self.lambda_cap.is_finite()) {
            return Err(Error::Config(format!("lambda_cap must be finite and ≥ 0, got {}", self.lambda_cap)));
        }
        match self.budget {
            Budget::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(Error::Config(format!("budget fraction must lie in (0, 1], got {f}")))
            }
            Budget::Absolute(0) => return Err(Error::Config("budget must be positive".into())),
            _ => {}
        }
        if self.stage == Stage::Gates && !(self.use_ntp || self.use_kl) {
            return Err(Error::Config("gate training needs use_ntp or use_kl".into()));
        }
        Ok(())
    }
}

/// Everything a training command needs: hyperparameters, architecture, data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub task: TaskSpec,
    /// Teacher checkpoint, required by the gate stage.
    pub teacher: Option<PathBuf>,
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are ignored.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (ix, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", ix + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", ix + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", ix + 1)));
        }
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}`: expected a boolean, got {v:?}"))),
    }
}

fn activation(key: &str, v: &str) -> Result<Activation> {
    Activation::parse(v).ok_or_else(|| Error::Config(format!("key `{key}`: unknown activation {v:?}")))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// `stage` and `task` are required; `teacher` is required for the gate stage.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = Self::parse_unvalidated(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like [`RunConfig::parse`] but skips [`RunConfig::validate`], so callers
    /// can apply overrides (such as a teacher path) before checking.
    pub fn parse_unvalidated(text: &str) -> Result<Self> {
        let mut kv = parse_kv(text)?;
        let stage = match kv.remove("stage").as_deref() {
            Some("teacher") => Stage::Teacher,
            Some("gates") => Stage::Gates,
            Some(other) => return Err(Error::Config(format!("key `stage`: expected teacher or gates, got {other:?}"))),
            None => return Err(Error::Config("missing required key `stage`".into())),
        };
        let task = TaskSpec::parse(&kv.remove("task").ok_or_else(|| Error::Config("missing required key `task`".into()))?)?;
        let model = ModelConfig {
            vocab_size: task.vocab(),
            max_seq: task.seq_len(),
            ..ModelConfig::default()
        };
        let mut cfg = RunConfig {
            train: TrainConfig::new(stage),
            model,
            task,
            teacher: None,
        };
        for (k, v) in &kv {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if self.model.vocab_size < self.task.vocab() {
            return Err(Error::Config(format!(
                "model vocabulary {} is smaller than the task's {}",
                self.model.vocab_size,
                self.task.vocab()
            )));
        }
        if self.model.max_seq < self.task.seq_len() {
            return Err(Error::Config(format!(
                "max_seq {} is shorter than task sequences of {}",
                self.model.max_seq,
                self.task.seq_len()
            )));
        }
        if self.train.stage == Stage::Gates && self.teacher.is_none() {
            return Err(Error::Config("missing required key `teacher` for the gate stage".into()));
        }
        Ok(())
    }

    /// Sets one key; also used for command-line overrides.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "stage" | "task" => return Err(Error::Config(format!("key `{key}` cannot be overridden"))),
            "teacher" => self.teacher = Some(PathBuf::from(v)),
            "lr" => t.lr = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "grad_accum" => t.grad_accum = num(key, v)?,
            "steps" => t.steps = num(key, v)?,
            "budget" | "M" => {
                t.budget = Budget::parse(v).ok_or_else(|| Error::Config(format!("key `{key}`: cannot parse {v:?}")))?
            }
            "lambda_cap" => t.lambda_cap = num(key, v)?,
            "kl_direction" => {
                t.kl_direction = match v {
                    "forward" => KlDirection::Forward,
                    "reverse" => KlDirection::Reverse,
                    _ => return Err(Error::Config(format!("key `{key}`: expected forward or reverse"))),
                }
            }
            "use_ntp" => t.use_ntp = flag(key, v)?,
            "use_kl" => t.use_kl = flag(key, v)?,
            "use_cap" => t.use_cap = flag(key, v)?,
            "distill_positions" => {
                t.distill_positions = match v {
                    "all" => DistillPositions::All,
                    "targets" => DistillPositions::Targets,
                    _ => return Err(Error::Config(format!("key `{key}`: expected all or targets"))),
                }
            }
            "seed" => t.seed = num(key, v)?,
            "eval_samples" => t.eval_samples = num(key, v)?,
            "eval_every" => t.eval_every = num(key, v)?,
            "target_accuracy" => t.target_accuracy = Some(num(key, v)?),
            "max_loss" => t.max_loss = num(key, v)?,
            "model.n_layers" => m.n_layers = num(key, v)?,
            "model.n_heads" => m.n_heads = num(key, v)?,
            "model.n_kv_heads" => m.n_kv_heads = num(key, v)?,
            "model.d_model" => m.d_model = num(key, v)?,
            "model.d_head" => m.d_head = num(key, v)?,
            "model.d_ff" => m.d_ff = num(key, v)?,
            "model.vocab_size" => m.vocab_size = num(key, v)?,
            "model.max_seq" => m.max_seq = num(key, v)?,
            "model.rope_theta" => m.rope_theta = num(key, v)?,
            "model.activation" => m.activation = activation(key, v)?,
            "model.use_scale" => m.use_scale = flag(key, v)?,
            "model.norm_eps" => m.norm_eps = num(key, v)?,
            "model.attn_tile" => m.attn_tile = num(key, v)?,
            "model.init_std" => m.init_std = num(key, v)?,
            "gate.variant" => {
                m.gate.variant = match v {
                    "mlp" => GateVariant::Mlp,
                    "linear" => GateVariant::Linear,
                    _ => return Err(Error::Config(format!("key `{key}`: expected mlp or linear"))),
                }
            }
            "gate.hidden" => m.gate.hidden = num(key, v)?,
            "gate.bias_init" => m.gate.bias_init = num(key, v)?,
            "gate.init_std" => m.gate.init_std = num(key, v)?,
            "gate.activation" => m.gate.activation = activation(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}
