//! Small comparative runs: pretrain then probe, repeated over seeds.

use std::path::PathBuf;

use ftrl_core::data::{load_cifar10, split, Dataset};
use ftrl_core::models::EncoderConfig;
use ftrl_core::trainer::{linear_probe, pretrain, ProbeConfig, TargetKind, TrainConfig};
use ftrl_core::Result;

/// Where CIFAR-10 binaries are looked for: `$CIFAR10_DIR`, then
/// `data/cifar-10-batches-bin` at the workspace root.
pub fn cifar_dir() -> Option<PathBuf> {
    let candidates = std::env::var_os("CIFAR10_DIR").map(PathBuf::from).into_iter().chain(std::iter::once(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/cifar-10-batches-bin"),
    ));
    for c in candidates {
        if c.join("test_batch.bin").is_file() {
            return Some(c);
        }
    }
    None
}

#[derive(Clone, Debug)]
pub struct Protocol {
    /// Training images used for both pretraining and probing.
    pub subset: usize,
    pub epochs: usize,
    pub probe_epochs: usize,
    pub seeds: Vec<u64>,
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            subset: 5000,
            epochs: 10,
            probe_epochs: 3,
            seeds: vec![0, 1, 2],
            val_fraction: 0.1,
            split_seed: 0,
        }
    }
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

impl Protocol {
    pub fn splits(&self, pool: &Dataset) -> Result<Splits> {
        let (train, val) = split(pool, self.val_fraction, self.split_seed)?;
        Ok(Splits {
            train: train.take(self.subset),
            val,
        })
    }

    pub fn load_cifar(&self) -> Option<Result<Splits>> {
        let dir = cifar_dir()?;
        Some(load_cifar10(&dir).and_then(|(pool, _)| self.splits(&pool)))
    }

    /// Compact encoder configuration for `target` under this protocol.
    pub fn config(&self, target: TargetKind, sequential: bool, seed: u64, image_shape: [usize; 3]) -> TrainConfig {
        TrainConfig {
            target,
            sequential,
            epochs: self.epochs,
            probe_epochs: self.probe_epochs,
            seed,
            encoder: EncoderConfig::compact(image_shape),
            ..TrainConfig::default()
        }
    }

    /// Validation Top-1 after pretraining and probing, one value per seed.
    pub fn val_top1(&self, data: &Splits, target: TargetKind, sequential: bool) -> Result<Vec<f64>> {
        self.val_top1_with(data, |seed| self.config(target, sequential, seed, data.train.image_shape()))
    }

    pub fn val_top1_with(&self, data: &Splits, make: impl Fn(u64) -> TrainConfig) -> Result<Vec<f64>> {
        self.seeds
            .iter()
            .map(|&seed| {
                let cfg = make(seed);
                let (model, _) = pretrain(&cfg, &data.train)?;
                let out = linear_probe(&model.encoder, &data.train, &data.val, None, &ProbeConfig::from(&cfg))?;
                Ok(out.final_record().and_then(|r| r.acc1_val).unwrap_or(f64::NAN))
            })
            .collect()
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
