//! Pretraining, the frozen-encoder linear probe, and run metrics.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_order, batches, Dataset, NUM_CLASSES};
use crate::dft::{make_targets, DftDims, TargetSpec};
use crate::error::{Error, Result};
use crate::models::{DecoderConfig, EncoderConfig, HeadConfig, Model, SequentialChainConfig};
use crate::nn::{softmax_cross_entropy, Layer, Linear, Mode, Network, Optimizer, OptimizerKind};
use crate::tensor::Tensor;

/// What the decoder regresses during pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetKind {
    Dft(TargetSpec),
    /// Raw flattened pixels: the plain autoencoder baseline.
    Pixels,
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetKind::Dft(s) => write!(f, "{}/{}D/f{}", s.formulation, s.dims.count(), s.fraction.as_f64()),
            TargetKind::Pixels => f.write_str("pixels"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub target: TargetKind,
    pub sequential: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub probe_epochs: usize,
    pub probe_batch_size: usize,
    pub probe_lr: f64,
    pub encoder: EncoderConfig,
    pub decoder_hidden: [usize; 3],
    /// Width of the sequential chain's representations; `None` picks the
    /// smallest width at which every estimator is smaller than its generator.
    pub chain_width: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            target: TargetKind::Dft(TargetSpec::new(DftDims::Two, crate::dft::Formulation::Magnitude)),
            sequential: false,
            epochs: 10,
            batch_size: 128,
            optimizer: OptimizerKind::default(),
            seed: 0,
            probe_epochs: 3,
            probe_batch_size: 256,
            probe_lr: 1e-3,
            encoder: EncoderConfig::default(),
            decoder_hidden: [512, 1024, 2048],
            chain_width: None,
        }
    }
}

fn hash_f64<H: Hasher>(v: f64, h: &mut H) {
    v.to_bits().hash(h);
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.batch_size == 0 || self.probe_batch_size == 0 {
            return Err(Error::InvalidConfig("batch sizes must be at least 1".into()));
        }
        match self.target {
            TargetKind::Dft(spec) => spec.validate()?,
            TargetKind::Pixels if self.sequential => {
                return Err(Error::InvalidConfig(
                    "sequential decoding needs a DFT target, not pixels".into(),
                ))
            }
            TargetKind::Pixels => {}
        }
        Ok(())
    }

    /// Targets regressed by each head stage, in execution order.
    pub fn stage_targets(&self) -> Vec<TargetKind> {
        match self.target {
            TargetKind::Dft(spec) if self.sequential => (1..=spec.dims.count())
                .map(|d| {
                    TargetKind::Dft(TargetSpec {
                        dims: DftDims::from_count(d).expect("1..=3"),
                        ..spec
                    })
                })
                .collect(),
            t => vec![t],
        }
    }

    fn target_len(&self, target: TargetKind) -> Result<usize> {
        match target {
            TargetKind::Dft(spec) => spec.target_len(&self.encoder.image_shape),
            TargetKind::Pixels => Ok(self.encoder.image_shape.iter().product()),
        }
    }

    pub fn head_config(&self) -> Result<HeadConfig> {
        self.validate()?;
        let emb = self.encoder.embedding_dim;
        let stages = self.stage_targets();
        if !self.sequential {
            let out = self.target_len(stages[0])?;
            return Ok(HeadConfig::Decoder(DecoderConfig::new(emb, out).with_hidden(self.decoder_hidden)));
        }
        let mut specs = Vec::with_capacity(stages.len());
        for t in stages {
            let TargetKind::Dft(spec) = t else { unreachable!("validated") };
            specs.push((spec, self.target_len(t)?));
        }
        let lens: Vec<usize> = specs.iter().map(|s| s.1).collect();
        let width = self.chain_width.unwrap_or_else(|| minimal_chain_width(emb, &lens));
        Ok(HeadConfig::Chain(SequentialChainConfig::new(emb, width, specs)))
    }

    pub fn build_model(&self) -> Result<Model> {
        let head = self.head_config()?;
        Model::build(&self.encoder, &head, &mut ChaCha8Rng::seed_from_u64(self.seed))
    }

    /// Regression targets for a `B×C×H×W` batch, one tensor per stage.
    pub fn targets(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.stage_targets()
            .into_iter()
            .map(|t| match t {
                TargetKind::Dft(spec) => make_targets(images, &spec),
                TargetKind::Pixels => {
                    let b = images.shape()[0];
                    images.reshape(&[b, images.numel() / b])
                }
            })
            .collect()
    }

    /// Hash of every setting except the target; runs that agree here
    /// differ only in what the decoder regresses.
    pub fn hash_without_target(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.sequential.hash(&mut h);
        self.epochs.hash(&mut h);
        self.batch_size.hash(&mut h);
        match self.optimizer {
            OptimizerKind::Sgd { lr, momentum } => {
                0u8.hash(&mut h);
                hash_f64(lr, &mut h);
                hash_f64(momentum, &mut h);
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                1u8.hash(&mut h);
                [lr, beta1, beta2, eps].iter().for_each(|&v| hash_f64(v, &mut h));
            }
        }
        self.seed.hash(&mut h);
        self.probe_epochs.hash(&mut h);
        self.probe_batch_size.hash(&mut h);
        hash_f64(self.probe_lr, &mut h);
        self.encoder.hash(&mut h);
        self.decoder_hidden.hash(&mut h);
        self.chain_width.hash(&mut h);
        h.finish()
    }

    pub fn hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash_without_target().hash(&mut h);
        self.target.hash(&mut h);
        h.finish()
    }
}

/// Smallest width `w >= input` where every stage's linear estimator
/// (`w·len + len` parameters) is smaller than its two-layer generator.
pub fn minimal_chain_width(input: usize, target_lens: &[usize]) -> usize {
    let generator = |w: usize, fan_in: usize| fan_in * w + w + 2 * w + w * w + w + 2 * w;
    let fits = |w: usize| {
        target_lens.iter().enumerate().all(|(i, &len)| {
            let fan_in = if i == 0 { input } else { w };
            w * len + len < generator(w, fan_in)
        })
    };
    let mut w = input.max(1);
    while !fits(w) {
        w += 1;
    }
    w
}

/// Derives an independent stream seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_PRETRAIN: u64 = 1 << 32;
const STREAM_PROBE: u64 = 2 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Probe,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Probe => "probe",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub acc1_val: Option<f64>,
    pub acc5_val: Option<f64>,
    pub acc1_train: Option<f64>,
    pub acc5_train: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
}

pub const CSV_HEADER: &str = "epoch,phase,loss,acc1_val,acc5_val,acc1_train,acc5_train,seconds";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl RunMetrics {
    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    pub fn losses(&self, phase: Phase) -> Vec<f64> {
        self.phase(phase).map(|r| r.loss).collect()
    }

    pub fn extend(&mut self, other: RunMetrics) {
        self.records.extend(other.records);
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{:.3}",
                r.epoch,
                r.phase,
                r.loss,
                opt(r.acc1_val),
                opt(r.acc5_val),
                opt(r.acc1_train),
                opt(r.acc5_train),
                r.seconds
            )?;
        }
        Ok(())
    }

    /// One-line summary of the last probe epoch, if any.
    pub fn summary(&self) -> String {
        let pre = self.phase(Phase::Pretrain).last();
        let probe = self.phase(Phase::Probe).last();
        let mut parts = Vec::new();
        if let Some(p) = pre {
            parts.push(format!("pretrain epochs={} final_loss={:.6}", p.epoch, p.loss));
        }
        if let Some(p) = probe {
            parts.push(format!(
                "probe acc1_val={} acc5_val={} acc1_train={} acc5_train={}",
                fmt_pct(p.acc1_val),
                fmt_pct(p.acc5_val),
                fmt_pct(p.acc1_train),
                fmt_pct(p.acc5_train)
            ));
        }
        if parts.is_empty() {
            "no epochs recorded".into()
        } else {
            parts.join(" | ")
        }
    }
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}%")).unwrap_or_else(|| "n/a".into())
}

/// Runs pretraining on `data`, returning the trained model and per-epoch
/// mean losses.
pub fn pretrain(cfg: &TrainConfig, data: &Dataset) -> Result<(Model, RunMetrics)> {
    let mut model = cfg.build_model()?;
    let metrics = pretrain_model(&mut model, cfg, data)?;
    Ok((model, metrics))
}

pub fn pretrain_model(model: &mut Model, cfg: &TrainConfig, data: &Dataset) -> Result<RunMetrics> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.image_shape() != cfg.encoder.image_shape {
        return Err(Error::InvalidConfig(format!(
            "dataset images are {:?} but the encoder expects {:?}",
            data.image_shape(),
            cfg.encoder.image_shape
        )));
    }
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut metrics = RunMetrics::default();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let seed = derive_seed(cfg.seed, STREAM_PRETRAIN + epoch as u64);
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, batch) in batches(data, cfg.batch_size, seed, true)?.enumerate() {
            // batch statistics need at least two samples
            if batch.indices.len() < 2 {
                continue;
            }
            let targets = cfg.targets(&batch.images)?;
            let loss: f64 = model.train_step(&batch.images, &targets)?.iter().sum();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            opt.step(&mut model.trainable_parameters_mut())?;
            model.zero_grad();
            total += loss;
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidConfig(
                "no batch with at least two samples; enlarge the dataset or batch size".into(),
            ));
        }
        metrics.records.push(EpochRecord {
            epoch,
            phase: Phase::Pretrain,
            loss: total / count as f64,
            acc1_val: None,
            acc5_val: None,
            acc1_train: None,
            acc5_train: None,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(metrics)
}

/// Percentage of rows whose label ranks among the `k` largest logits.
/// Ties go to the lower class index.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let &[b, classes] = logits.shape() else {
        return Err(Error::InvalidShape {
            shape: logits.shape().to_vec(),
            reason: "expected batch×classes".into(),
        });
    };
    if labels.len() != b {
        return Err(Error::shape("topk_accuracy", &[b], &[labels.len()]));
    }
    if k == 0 || k > classes {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in [1, {classes}]")));
    }
    if b == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { index: i, label: y, classes });
        }
        let row = logits.row(i);
        let target = row[y];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < y))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / b as f64)
}

const EMBED_CHUNK: usize = 256;

/// Eval-mode embeddings of every sample, `N×embedding_dim`.
pub fn embed(encoder: &Network, data: &Dataset) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::new();
    let mut dim = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EMBED_CHUNK) {
        let e = encoder.forward_eval(&data.images(chunk))?;
        dim = e.shape()[1];
        rows.extend(e.into_data());
    }
    Tensor::new(vec![data.len(), dim], rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 3,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl From<&TrainConfig> for ProbeConfig {
    fn from(cfg: &TrainConfig) -> Self {
        ProbeConfig {
            epochs: cfg.probe_epochs,
            batch_size: cfg.probe_batch_size,
            lr: cfg.probe_lr,
            seed: cfg.seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub classifier: Network,
    pub metrics: RunMetrics,
    /// Top-1 and Top-5 on the held-out test set, when one was supplied.
    pub test: Option<(f64, f64)>,
}

impl ProbeOutcome {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.metrics.records.last()
    }
}

fn accuracies(classifier: &Network, emb: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let logits = classifier.forward_eval(emb)?;
    Ok((topk_accuracy(&logits, labels, 1)?, topk_accuracy(&logits, labels, 5)?))
}

fn check_labels(labels: &[usize]) -> Result<()> {
    match labels.iter().enumerate().find(|(_, &l)| l >= NUM_CLASSES) {
        Some((index, &label)) => Err(Error::LabelOutOfRange {
            index,
            label,
            classes: NUM_CLASSES,
        }),
        None => Ok(()),
    }
}

/// Trains a zero-initialized linear classifier on frozen embeddings.
///
/// The encoder is only borrowed immutably, so its parameters and buffers
/// cannot change.
pub fn linear_probe(
    encoder: &Network,
    train: &Dataset,
    val: &Dataset,
    test: Option<&Dataset>,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("probe batch size must be at least 1".into()));
    }
    let train_labels = train.labels();
    let val_labels = val.labels();
    check_labels(&train_labels)?;
    check_labels(&val_labels)?;
    let train_emb = embed(encoder, train)?;
    let val_emb = embed(encoder, val)?;
    let dim = train_emb.shape()[1];
    let mut classifier = Network::new("probe", vec![Layer::Linear(Linear::zeros("probe.fc", dim, NUM_CLASSES))])?;
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.lr));
    let mut metrics = RunMetrics::default();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_PROBE));
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                x.extend_from_slice(train_emb.row(i));
            }
            let x = Tensor::new(vec![chunk.len(), dim], x)?;
            let y: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let logits = classifier.forward(&x, Mode::Train)?;
            let (loss, g) = softmax_cross_entropy(&logits, &y)?;
            classifier.backward(&g)?;
            opt.step(&mut classifier.parameters_mut())?;
            total += loss;
            count += 1;
        }
        let (a1v, a5v) = accuracies(&classifier, &val_emb, &val_labels)?;
        let (a1t, a5t) = accuracies(&classifier, &train_emb, &train_labels)?;
        metrics.records.push(EpochRecord {
            epoch,
            phase: Phase::Probe,
            loss: total / count as f64,
            acc1_val: Some(a1v),
            acc5_val: Some(a5v),
            acc1_train: Some(a1t),
            acc5_train: Some(a5t),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let test = match test {
        Some(t) => {
            let labels = t.labels();
            check_labels(&labels)?;
            Some(accuracies(&classifier, &embed(encoder, t)?, &labels)?)
        }
        None => None,
    };
    Ok(ProbeOutcome {
        classifier,
        metrics,
        test,
    })
}

/// Probe loss of the untrained (zero) classifier; equals `ln 10`.
pub fn initial_probe_loss(encoder: &Network, data: &Dataset) -> Result<f64> {
    let emb = embed(encoder, data)?;
    let dim = emb.shape()[1];
    let classifier = Network::new("probe", vec![Layer::Linear(Linear::zeros("probe.fc", dim, NUM_CLASSES))])?;
    let logits = classifier.forward_eval(&emb)?;
    Ok(softmax_cross_entropy(&logits, &data.labels())?.0)
}

/// Visits samples in the order a pretraining epoch would.
pub fn epoch_order(cfg: &TrainConfig, n: usize, epoch: usize) -> Vec<usize> {
    batch_order(n, derive_seed(cfg.seed, STREAM_PRETRAIN + epoch as u64), true)
}
