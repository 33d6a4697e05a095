//! Optimization, the pre-training / fine-tuning / baseline loops, and
//! checkpoints.

pub mod checkpoint;
pub mod loops;
pub mod optim;

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use crate::baselines::BaselineKind;
use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, ModelKind, TrainMeta};
pub use loops::{baseline_loop, finetune_loop, pretrain_loop, TrainRun};
pub use optim::{adamw_step, clip_grad_norm, grad_norm, AdamW, OptimState};

/// Environment variable capping the worker threads used for batch gradients.
pub const THREADS_ENV: &str = "EDGEFORMER_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Pretrain,
    Finetune,
    Baseline(BaselineKind),
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::Pretrain => f.write_str("pretrain"),
            TrainMode::Finetune => f.write_str("finetune"),
            TrainMode::Baseline(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(TrainMode::Pretrain),
            "finetune" => Ok(TrainMode::Finetune),
            other => other.parse().map(TrainMode::Baseline),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub optim: AdamW,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// Defaults per mode: pre-training at lr 1.5e-4 for 20 epochs,
    /// fine-tuning and baselines at lr 1e-3 for 50 epochs, all with weight
    /// decay 0.05 and batch 256.
    pub fn for_mode(mode: TrainMode) -> Self {
        let (lr, epochs) = match mode {
            TrainMode::Pretrain => (1.5e-4, 20),
            _ => (1e-3, 50),
        };
        TrainConfig {
            mode,
            optim: AdamW {
                learning_rate: lr,
                weight_decay: 0.05,
                ..AdamW::default()
            },
            batch_size: 256,
            epochs,
            seed: 0,
            grad_clip: Some(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("grad_clip {c} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Worker pool for batch gradients, sized by [`THREADS_ENV`] when set.
pub fn worker_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
    })
}
