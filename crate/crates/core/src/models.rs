//! Encoders, decoders and the sequential decoder chain.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dft::TargetSpec;
use crate::error::{Error, Result};
use crate::nn::{
    mse_loss, mse_loss_with_grad, AvgPool, BatchNorm, Conv2d, Flatten, Layer, Linear, Mode, Network,
    Parameter, Relu, ResidualBlock,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    /// Plain conv/BN/ReLU stages, each followed by 2×2 average pooling.
    CompactConv,
    /// Convolutional stem followed by residual blocks; every block after the
    /// first halves the resolution.
    ResidualSmall,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::CompactConv => "compact",
            EncoderKind::ResidualSmall => "residual",
        }
    }

    fn code(self) -> u32 {
        match self {
            EncoderKind::CompactConv => 0,
            EncoderKind::ResidualSmall => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(EncoderKind::CompactConv),
            1 => Ok(EncoderKind::ResidualSmall),
            _ => Err(Error::InvalidConfig(format!("unknown encoder kind code {code}"))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compact" => Ok(EncoderKind::CompactConv),
            "residual" => Ok(EncoderKind::ResidualSmall),
            _ => Err(Error::InvalidArgument(format!(
                "unknown encoder `{s}` (expected compact or residual)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub widths: Vec<usize>,
    pub embedding_dim: usize,
    /// `[C, H, W]` of the input images.
    pub image_shape: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::ResidualSmall,
            widths: vec![32, 64, 128, 256],
            embedding_dim: 256,
            image_shape: [3, 32, 32],
        }
    }
}

impl EncoderConfig {
    pub fn compact(image_shape: [usize; 3]) -> Self {
        EncoderConfig {
            kind: EncoderKind::CompactConv,
            widths: vec![16, 32, 64],
            embedding_dim: 64,
            image_shape,
        }
    }

    /// Number of halvings applied before the global pool.
    fn downsamples(&self) -> usize {
        match self.kind {
            EncoderKind::CompactConv => self.widths.len(),
            EncoderKind::ResidualSmall => self.widths.len() - 1,
        }
    }

    /// Spatial side length entering the global average pool.
    pub fn final_spatial(&self) -> Result<usize> {
        let [c, h, w] = self.image_shape;
        if self.widths.is_empty() || self.widths.contains(&0) || self.embedding_dim == 0 || c == 0 {
            return Err(Error::InvalidConfig(
                "encoder widths, embedding size and channels must be positive and non-empty".into(),
            ));
        }
        if h != w {
            return Err(Error::InvalidConfig(format!(
                "encoder expects square images, got {h}×{w}"
            )));
        }
        let factor = 1usize << self.downsamples();
        if h == 0 || h % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "spatial size {h} is not divisible by {factor} required by the {} pooling schedule",
                self.kind
            )));
        }
        Ok(h / factor)
    }

    pub fn validate(&self) -> Result<()> {
        self.final_spatial().map(|_| ())
    }

    /// Integer encoding used for checkpoint metadata.
    pub fn to_meta(&self) -> Vec<u32> {
        let mut v = vec![
            self.kind.code(),
            self.embedding_dim as u32,
            self.image_shape[0] as u32,
            self.image_shape[1] as u32,
            self.image_shape[2] as u32,
        ];
        v.extend(self.widths.iter().map(|&w| w as u32));
        v
    }

    pub fn from_meta(meta: &[u32]) -> Result<Self> {
        if meta.len() < 6 {
            return Err(Error::InvalidConfig("encoder metadata too short".into()));
        }
        let cfg = EncoderConfig {
            kind: EncoderKind::from_code(meta[0])?,
            embedding_dim: meta[1] as usize,
            image_shape: [meta[2] as usize, meta[3] as usize, meta[4] as usize],
            widths: meta[5..].iter().map(|&w| w as usize).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Builds the encoder network mapping `B×C×H×W` to `B×embedding_dim`.
pub fn build_encoder<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Network> {
    let last_side = cfg.final_spatial()?;
    let channels = cfg.image_shape[0];
    let mut layers = Vec::new();
    match cfg.kind {
        EncoderKind::CompactConv => {
            let mut prev = channels;
            for (i, &w) in cfg.widths.iter().enumerate() {
                let n = i + 1;
                layers.push(Layer::Conv2d(Conv2d::new(&format!("encoder.conv{n}"), prev, w, 3, 1, 1, rng)?));
                layers.push(Layer::BatchNorm(BatchNorm::new(&format!("encoder.bn{n}"), w)));
                layers.push(Layer::Relu(Relu::new(&format!("encoder.relu{n}"))));
                layers.push(Layer::AvgPool(AvgPool::new(&format!("encoder.pool{n}"), 2)?));
                prev = w;
            }
        }
        EncoderKind::ResidualSmall => {
            let stem = cfg.widths[0];
            layers.push(Layer::Conv2d(Conv2d::new("encoder.stem.conv", channels, stem, 3, 1, 1, rng)?));
            layers.push(Layer::BatchNorm(BatchNorm::new("encoder.stem.bn", stem)));
            layers.push(Layer::Relu(Relu::new("encoder.stem.relu")));
            let mut prev = stem;
            for (i, &w) in cfg.widths.iter().enumerate() {
                let stride = if i == 0 { 1 } else { 2 };
                let name = format!("encoder.block{}", i + 1);
                layers.push(Layer::Residual(ResidualBlock::new(&name, prev, w, stride, rng)?));
                prev = w;
            }
        }
    }
    layers.push(Layer::AvgPool(AvgPool::new("encoder.global_pool", last_side)?));
    layers.push(Layer::Flatten(Flatten::new("encoder.flatten")));
    let last = *cfg.widths.last().expect("validated non-empty");
    if cfg.embedding_dim != last {
        layers.push(Layer::Linear(Linear::new("encoder.projection", last, cfg.embedding_dim, rng)));
    }
    Network::new("encoder", layers)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DecoderConfig {
    pub input_dim: usize,
    pub hidden: [usize; 3],
    pub output_dim: usize,
}

impl DecoderConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        DecoderConfig {
            input_dim,
            hidden: [512, 1024, 2048],
            output_dim,
        }
    }

    pub fn with_hidden(mut self, hidden: [usize; 3]) -> Self {
        self.hidden = hidden;
        self
    }
}

fn fc_bn_relu<R: Rng + ?Sized>(layers: &mut Vec<Layer>, prefix: &str, n: usize, fan_in: usize, fan_out: usize, rng: &mut R) {
    layers.push(Layer::Linear(Linear::new(&format!("{prefix}.fc{n}"), fan_in, fan_out, rng)));
    layers.push(Layer::BatchNorm(BatchNorm::new(&format!("{prefix}.bn{n}"), fan_out)));
    layers.push(Layer::Relu(Relu::new(&format!("{prefix}.relu{n}"))));
}

/// Three FC+BN+ReLU stages followed by a linear projection to `output_dim`.
pub fn build_decoder<R: Rng + ?Sized>(cfg: &DecoderConfig, rng: &mut R) -> Result<Network> {
    if cfg.input_dim == 0 || cfg.output_dim == 0 || cfg.hidden.contains(&0) {
        return Err(Error::InvalidConfig("decoder dimensions must be positive".into()));
    }
    let mut layers = Vec::new();
    let mut prev = cfg.input_dim;
    for (i, &h) in cfg.hidden.iter().enumerate() {
        fc_bn_relu(&mut layers, "decoder", i + 1, prev, h, rng);
        prev = h;
    }
    layers.push(Layer::Linear(Linear::new("decoder.out", prev, cfg.output_dim, rng)));
    Network::new("decoder", layers)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SequentialChainConfig {
    pub input_dim: usize,
    /// Width of every intermediate representation.
    pub width: usize,
    /// Stage targets in execution order, with their per-image lengths.
    pub stages: Vec<(TargetSpec, usize)>,
}

impl SequentialChainConfig {
    pub fn new(input_dim: usize, width: usize, stages: Vec<(TargetSpec, usize)>) -> Self {
        SequentialChainConfig {
            input_dim,
            width,
            stages,
        }
    }
}

pub struct ChainStage {
    spec: TargetSpec,
    generator: Network,
    estimator: Network,
}

impl ChainStage {
    pub fn spec(&self) -> &TargetSpec {
        &self.spec
    }

    pub fn generator(&self) -> &Network {
        &self.generator
    }

    pub fn estimator(&self) -> &Network {
        &self.estimator
    }
}

/// Stacked (generator, estimator) pairs; each generator consumes the
/// previous stage's representation.
pub struct SequentialChain {
    stages: Vec<ChainStage>,
}

impl SequentialChain {
    pub fn build<R: Rng + ?Sized>(cfg: &SequentialChainConfig, rng: &mut R) -> Result<Self> {
        if cfg.stages.is_empty() {
            return Err(Error::InvalidConfig("sequential chain needs at least one stage".into()));
        }
        if cfg.input_dim == 0 || cfg.width == 0 {
            return Err(Error::InvalidConfig("chain dimensions must be positive".into()));
        }
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut prev = cfg.input_dim;
        for (i, &(spec, len)) in cfg.stages.iter().enumerate() {
            let prefix = format!("chain.stage{}", i + 1);
            let mut gen_layers = Vec::new();
            fc_bn_relu(&mut gen_layers, &format!("{prefix}.gen"), 1, prev, cfg.width, rng);
            fc_bn_relu(&mut gen_layers, &format!("{prefix}.gen"), 2, cfg.width, cfg.width, rng);
            let generator = Network::new(format!("{prefix}.gen"), gen_layers)?;
            let estimator = Network::new(
                format!("{prefix}.est"),
                vec![Layer::Linear(Linear::new(&format!("{prefix}.est.fc"), cfg.width, len, rng))],
            )?;
            if estimator.parameter_count() >= generator.parameter_count() {
                return Err(Error::InvalidConfig(format!(
                    "stage {} estimator ({} parameters) must be smaller than its generator ({}); \
                     widen the representation",
                    i + 1,
                    estimator.parameter_count(),
                    generator.parameter_count()
                )));
            }
            stages.push(ChainStage {
                spec,
                generator,
                estimator,
            });
            prev = cfg.width;
        }
        Ok(SequentialChain { stages })
    }

    pub fn stages(&self) -> &[ChainStage] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [ChainStage] {
        &mut self.stages
    }

    fn check_targets(&self, targets: &[Tensor]) -> Result<()> {
        if targets.len() != self.stages.len() {
            return Err(Error::InvalidArgument(format!(
                "{} stage targets supplied for a {}-stage chain",
                targets.len(),
                self.stages.len()
            )));
        }
        Ok(())
    }

    /// Per-stage losses without recording tapes.
    pub fn eval_losses(&self, embedding: &Tensor, targets: &[Tensor]) -> Result<Vec<f64>> {
        self.check_targets(targets)?;
        let mut r = embedding.clone();
        let mut losses = Vec::with_capacity(self.stages.len());
        for (stage, target) in self.stages.iter().zip(targets) {
            r = stage.generator.forward_eval(&r)?;
            losses.push(mse_loss(&stage.estimator.forward_eval(&r)?, target)?);
        }
        Ok(losses)
    }

    /// Train-mode forward and backward; returns per-stage losses and the
    /// gradient with respect to the embedding.
    pub fn train_losses(&mut self, embedding: &Tensor, targets: &[Tensor]) -> Result<(Vec<f64>, Tensor)> {
        self.check_targets(targets)?;
        let mut r = embedding.clone();
        let mut losses = Vec::with_capacity(self.stages.len());
        let mut est_grads = Vec::with_capacity(self.stages.len());
        for (stage, target) in self.stages.iter_mut().zip(targets) {
            r = stage.generator.forward(&r, Mode::Train)?;
            let out = stage.estimator.forward(&r, Mode::Train)?;
            let (loss, g) = mse_loss_with_grad(&out, target)?;
            losses.push(loss);
            est_grads.push(g);
        }
        let mut carry: Option<Tensor> = None;
        for (stage, g) in self.stages.iter_mut().zip(est_grads).rev() {
            let mut g_r = stage.estimator.backward(&g)?;
            if let Some(c) = carry {
                g_r.add_assign(&c)?;
            }
            carry = Some(stage.generator.backward(&g_r)?);
        }
        Ok((losses, carry.expect("chain has at least one stage")))
    }

    fn networks(&self) -> impl Iterator<Item = &Network> {
        self.stages.iter().flat_map(|s| [&s.generator, &s.estimator])
    }

    fn networks_mut(&mut self) -> impl Iterator<Item = &mut Network> {
        self.stages.iter_mut().flat_map(|s| [&mut s.generator, &mut s.estimator])
    }
}

/// Total loss of a chain: the unweighted sum of its stage losses.
pub fn sequential_forward_loss(chain: &SequentialChain, embedding: &Tensor, targets: &[Tensor]) -> Result<f64> {
    Ok(chain.eval_losses(embedding, targets)?.iter().sum())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum HeadConfig {
    Decoder(DecoderConfig),
    Chain(SequentialChainConfig),
}

pub enum Head {
    Decoder(Network),
    Chain(SequentialChain),
}

/// Encoder plus its pretraining head.
pub struct Model {
    encoder_config: EncoderConfig,
    pub encoder: Network,
    pub head: Head,
}

impl Model {
    pub fn build<R: Rng + ?Sized>(encoder: &EncoderConfig, head: &HeadConfig, rng: &mut R) -> Result<Self> {
        let enc = build_encoder(encoder, rng)?;
        let input_dim = match head {
            HeadConfig::Decoder(d) => d.input_dim,
            HeadConfig::Chain(c) => c.input_dim,
        };
        if input_dim != encoder.embedding_dim {
            return Err(Error::InvalidConfig(format!(
                "head expects {input_dim} inputs but the encoder emits {}",
                encoder.embedding_dim
            )));
        }
        let head = match head {
            HeadConfig::Decoder(d) => Head::Decoder(build_decoder(d, rng)?),
            HeadConfig::Chain(c) => Head::Chain(SequentialChain::build(c, rng)?),
        };
        Ok(Model {
            encoder_config: encoder.clone(),
            encoder: enc,
            head,
        })
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder_config
    }

    pub fn stage_count(&self) -> usize {
        match &self.head {
            Head::Decoder(_) => 1,
            Head::Chain(c) => c.stages.len(),
        }
    }

    /// Forward and backward on one batch; gradients accumulate into every
    /// parameter. Returns the per-stage losses.
    pub fn train_step(&mut self, images: &Tensor, targets: &[Tensor]) -> Result<Vec<f64>> {
        let emb = self.encoder.forward(images, Mode::Train)?;
        let (losses, g_emb) = match &mut self.head {
            Head::Decoder(dec) => {
                if targets.len() != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "decoder head takes one target, got {}",
                        targets.len()
                    )));
                }
                let out = dec.forward(&emb, Mode::Train)?;
                let (loss, g) = mse_loss_with_grad(&out, &targets[0])?;
                (vec![loss], dec.backward(&g)?)
            }
            Head::Chain(chain) => chain.train_losses(&emb, targets)?,
        };
        self.encoder.backward(&g_emb)?;
        Ok(losses)
    }

    pub fn eval_losses(&self, images: &Tensor, targets: &[Tensor]) -> Result<Vec<f64>> {
        let emb = self.encoder.forward_eval(images)?;
        match &self.head {
            Head::Decoder(dec) => {
                if targets.len() != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "decoder head takes one target, got {}",
                        targets.len()
                    )));
                }
                Ok(vec![mse_loss(&dec.forward_eval(&emb)?, &targets[0])?])
            }
            Head::Chain(chain) => chain.eval_losses(&emb, targets),
        }
    }

    fn head_networks(&self) -> Vec<&Network> {
        match &self.head {
            Head::Decoder(d) => vec![d],
            Head::Chain(c) => c.networks().collect(),
        }
    }

    fn head_networks_mut(&mut self) -> Vec<&mut Network> {
        match &mut self.head {
            Head::Decoder(d) => vec![d],
            Head::Chain(c) => c.networks_mut().collect(),
        }
    }

    /// Parameters an optimizer may update; the encoder's are excluded while
    /// it is frozen.
    pub fn trainable_parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.encoder.trainable_parameters_mut();
        match &mut self.head {
            Head::Decoder(d) => out.extend(d.trainable_parameters_mut()),
            Head::Chain(c) => {
                for n in c.networks_mut() {
                    out.extend(n.trainable_parameters_mut());
                }
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.head_networks_mut().into_iter().for_each(Network::zero_grad);
    }

    /// Every parameter and buffer, encoder first.
    pub fn state(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.state();
        for n in self.head_networks() {
            out.extend(n.state());
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.state_mut();
        match &mut self.head {
            Head::Decoder(d) => out.extend(d.state_mut()),
            Head::Chain(c) => {
                for n in c.networks_mut() {
                    out.extend(n.state_mut());
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.parameter_count() + self.head_networks().iter().map(|n| n.parameter_count()).sum::<usize>()
    }

    pub fn describe(&self) -> Vec<String> {
        let mut out = self.encoder.describe();
        for n in self.head_networks() {
            out.extend(n.describe());
        }
        out
    }
}

/// A model whose decoder regresses the raw flattened image.
pub fn build_autoencoder_baseline<R: Rng + ?Sized>(
    encoder: &EncoderConfig,
    decoder: &DecoderConfig,
    rng: &mut R,
) -> Result<Model> {
    let [c, h, w] = encoder.image_shape;
    if decoder.output_dim != c * h * w {
        return Err(Error::InvalidConfig(format!(
            "autoencoder output {} does not match the {c}×{h}×{w} image",
            decoder.output_dim
        )));
    }
    Model::build(encoder, &HeadConfig::Decoder(decoder.clone()), rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dft::{DftDims, Formulation};
    use crate::nn::LayerKind;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn conv(i: usize, o: usize, k: usize) -> usize {
        o * i * k * k + o
    }

    fn bn(f: usize) -> usize {
        2 * f
    }

    fn fc(i: usize, o: usize) -> usize {
        i * o + o
    }

    fn closed_form_encoder(cfg: &EncoderConfig) -> usize {
        let c = cfg.image_shape[0];
        let mut total = 0;
        let mut prev;
        match cfg.kind {
            EncoderKind::CompactConv => {
                prev = c;
                for &w in &cfg.widths {
                    total += conv(prev, w, 3) + bn(w);
                    prev = w;
                }
            }
            EncoderKind::ResidualSmall => {
                prev = cfg.widths[0];
                total += conv(c, prev, 3) + bn(prev);
                for (i, &w) in cfg.widths.iter().enumerate() {
                    total += conv(prev, w, 3) + bn(w) + conv(w, w, 3) + bn(w);
                    if i > 0 || prev != w {
                        total += conv(prev, w, 1) + bn(w);
                    }
                    prev = w;
                }
            }
        }
        if cfg.embedding_dim != prev {
            total += fc(prev, cfg.embedding_dim);
        }
        total
    }

    #[test]
    fn compact_encoder_output_shape() {
        let cfg = EncoderConfig::compact([3, 32, 32]);
        let enc = build_encoder(&cfg, &mut rng(1)).unwrap();
        let x = Tensor::uniform(&[4, 3, 32, 32], 0.0, 1.0, &mut rng(2));
        assert_eq!(enc.forward_eval(&x).unwrap().shape(), &[4, 64]);
    }

    #[test]
    fn residual_encoder_output_shape() {
        let cfg = EncoderConfig {
            widths: vec![4, 8],
            embedding_dim: 6,
            image_shape: [2, 8, 8],
            ..EncoderConfig::default()
        };
        let enc = build_encoder(&cfg, &mut rng(1)).unwrap();
        let x = Tensor::uniform(&[3, 2, 8, 8], 0.0, 1.0, &mut rng(2));
        assert_eq!(enc.forward_eval(&x).unwrap().shape(), &[3, 6]);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = EncoderConfig::compact([3, 16, 16]);
        let a = build_encoder(&cfg, &mut rng(7)).unwrap();
        let b = build_encoder(&cfg, &mut rng(7)).unwrap();
        assert_eq!(a.state_hash(), b.state_hash());
        let c = build_encoder(&cfg, &mut rng(8)).unwrap();
        assert_ne!(a.state_hash(), c.state_hash());
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        let configs = [
            EncoderConfig::default(),
            EncoderConfig::compact([3, 32, 32]),
            EncoderConfig {
                embedding_dim: 64,
                ..EncoderConfig::compact([1, 8, 8])
            },
            EncoderConfig {
                widths: vec![8, 8, 16],
                embedding_dim: 16,
                image_shape: [3, 16, 16],
                kind: EncoderKind::ResidualSmall,
            },
        ];
        for cfg in &configs {
            let enc = build_encoder(cfg, &mut rng(0)).unwrap();
            assert_eq!(enc.parameter_count(), closed_form_encoder(cfg), "{cfg:?}");
        }
        let dec = build_decoder(&DecoderConfig::new(256, 3072), &mut rng(0)).unwrap();
        let expected = fc(256, 512) + bn(512) + fc(512, 1024) + bn(1024) + fc(1024, 2048) + bn(2048) + fc(2048, 3072);
        assert_eq!(dec.parameter_count(), expected);
    }

    #[test]
    fn bad_spatial_sizes_rejected() {
        let mut cfg = EncoderConfig::compact([3, 12, 12]);
        assert!(build_encoder(&cfg, &mut rng(0)).is_err());
        cfg.image_shape = [3, 16, 8];
        assert!(build_encoder(&cfg, &mut rng(0)).is_err());
        let res = EncoderConfig {
            image_shape: [3, 20, 20],
            ..EncoderConfig::default()
        };
        assert!(build_encoder(&res, &mut rng(0)).is_err());
    }

    #[test]
    fn decoder_output_dims_follow_target() {
        let shape = [3, 32, 32];
        let mag = TargetSpec::new(DftDims::One, Formulation::Magnitude).target_len(&shape).unwrap();
        assert_eq!(mag, 3072);
        let ri = TargetSpec::new(DftDims::One, Formulation::RealImag).target_len(&shape).unwrap();
        assert_eq!(ri, 6144);
        let dec = build_decoder(&DecoderConfig::new(256, mag).with_hidden([8, 8, 8]), &mut rng(0)).unwrap();
        let x = Tensor::uniform(&[2, 256], -1.0, 1.0, &mut rng(1));
        assert_eq!(dec.forward_eval(&x).unwrap().shape(), &[2, 3072]);
    }

    #[test]
    fn decoder_layer_audit() {
        let dec = build_decoder(&DecoderConfig::new(16, 10), &mut rng(0)).unwrap();
        let count = |k: LayerKind| dec.layers().iter().filter(|l| l.kind() == k).count();
        assert_eq!(count(LayerKind::FullyConnected), 4);
        assert_eq!(count(LayerKind::BatchNorm), 3);
        assert_eq!(count(LayerKind::ReLU), 3);
        let last = dec.layers().last().unwrap();
        assert_eq!(last.describe(), "FullyConnected(2048->10)");
        // every hidden FC is immediately followed by BN
        for (i, l) in dec.layers().iter().enumerate().take(9) {
            if l.kind() == LayerKind::FullyConnected {
                assert_eq!(dec.layers()[i + 1].kind(), LayerKind::BatchNorm);
            }
        }
    }

    #[test]
    fn autoencoder_requires_pixel_output() {
        let enc = EncoderConfig::compact([3, 32, 32]);
        let dec = DecoderConfig::new(64, 3072).with_hidden([8, 8, 8]);
        assert!(build_autoencoder_baseline(&enc, &dec, &mut rng(0)).is_ok());
        let bad = DecoderConfig::new(64, 3000).with_hidden([8, 8, 8]);
        assert!(build_autoencoder_baseline(&enc, &bad, &mut rng(0)).is_err());
    }

    #[test]
    fn autoencoder_and_dft_model_share_architecture() {
        let enc = EncoderConfig::compact([3, 32, 32]);
        let target = TargetSpec::new(DftDims::Two, Formulation::Magnitude).target_len(&enc.image_shape).unwrap();
        let dec = DecoderConfig::new(64, target).with_hidden([8, 8, 8]);
        let ae = build_autoencoder_baseline(&enc, &dec, &mut rng(3)).unwrap();
        let dft = Model::build(&enc, &HeadConfig::Decoder(dec), &mut rng(3)).unwrap();
        assert_eq!(ae.describe(), dft.describe());
        assert_eq!(ae.encoder.parameter_count(), dft.encoder.parameter_count());
        assert_eq!(ae.encoder.state_hash(), dft.encoder.state_hash());
    }

    #[test]
    fn autoencoder_overfits_single_image() {
        let enc = EncoderConfig {
            widths: vec![4],
            embedding_dim: 8,
            ..EncoderConfig::compact([1, 4, 4])
        };
        let dec = DecoderConfig::new(8, 16).with_hidden([16, 16, 16]);
        let mut model = build_autoencoder_baseline(&enc, &dec, &mut rng(5)).unwrap();
        // two copies so batch norm sees more than one value per channel
        let img = Tensor::uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut rng(6));
        let mut data = img.data().to_vec();
        data.extend_from_slice(img.data());
        let x = Tensor::new(vec![2, 1, 4, 4], data).unwrap();
        let t = x.reshape(&[2, 16]).unwrap();
        let mut opt = crate::nn::Optimizer::new(crate::nn::OptimizerKind::adam(1e-2));
        let first = model.train_step(&x, &[t.clone()]).unwrap()[0];
        opt.step(&mut model.trainable_parameters_mut()).unwrap();
        let mut last = first;
        for _ in 0..200 {
            last = model.train_step(&x, &[t.clone()]).unwrap()[0];
            opt.step(&mut model.trainable_parameters_mut()).unwrap();
        }
        assert!(last < first * 1e-2, "{first} -> {last}");
    }

    fn tiny_chain(stages: usize, seed: u64) -> SequentialChain {
        let specs = (1..=stages)
            .map(|d| (TargetSpec::new(DftDims::from_count(d).unwrap(), Formulation::Magnitude), 5))
            .collect();
        SequentialChain::build(&SequentialChainConfig::new(3, 8, specs), &mut rng(seed)).unwrap()
    }

    #[test]
    fn chain_rejects_large_estimators() {
        let spec = TargetSpec::new(DftDims::One, Formulation::Magnitude);
        let cfg = SequentialChainConfig::new(4, 4, vec![(spec, 64)]);
        assert!(SequentialChain::build(&cfg, &mut rng(0)).is_err());
    }

    #[test]
    fn chain_estimators_smaller_than_generators() {
        let chain = tiny_chain(3, 1);
        for s in chain.stages() {
            assert!(s.estimator().parameter_count() < s.generator().parameter_count());
        }
    }

    #[test]
    fn chain_rejects_target_count_mismatch() {
        let chain = tiny_chain(2, 1);
        let emb = Tensor::zeros(&[2, 3]);
        assert!(sequential_forward_loss(&chain, &emb, &[Tensor::zeros(&[2, 5])]).is_err());
    }

    #[test]
    fn chain_loss_is_zero_on_exact_targets() {
        let chain = tiny_chain(2, 2);
        let emb = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng(3));
        let mut r = emb.clone();
        let mut targets = Vec::new();
        for s in chain.stages() {
            r = s.generator().forward_eval(&r).unwrap();
            targets.push(s.estimator().forward_eval(&r).unwrap());
        }
        assert_eq!(sequential_forward_loss(&chain, &emb, &targets).unwrap(), 0.0);
    }

    #[test]
    fn single_stage_chain_matches_plain_network() {
        let chain = tiny_chain(1, 4);
        let stage = &chain.stages()[0];
        let mut layers: Vec<Layer> = stage.generator().layers().to_vec();
        layers.extend(stage.estimator().layers().to_vec());
        let plain = Network::new("plain", layers).unwrap();
        let emb = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng(5));
        let t = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng(6));
        let expected = mse_loss(&plain.forward_eval(&emb).unwrap(), &t).unwrap();
        assert_eq!(sequential_forward_loss(&chain, &emb, &[t]).unwrap(), expected);
    }

    #[test]
    fn two_stage_loss_is_sum_of_stage_losses() {
        let chain = tiny_chain(2, 7);
        let emb = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng(8));
        let t1 = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng(9));
        let t2 = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng(10));
        let s = chain.stages();
        let r1 = s[0].generator().forward_eval(&emb).unwrap();
        let l1 = mse_loss(&s[0].estimator().forward_eval(&r1).unwrap(), &t1).unwrap();
        let r2 = s[1].generator().forward_eval(&r1).unwrap();
        let l2 = mse_loss(&s[1].estimator().forward_eval(&r2).unwrap(), &t2).unwrap();
        let total = sequential_forward_loss(&chain, &emb, &[t1, t2]).unwrap();
        assert!((total - (l1 + l2)).abs() < 1e-12);
    }

    #[test]
    fn stage_two_target_reaches_stage_one_generator() {
        let emb = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng(11));
        let t1 = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng(12));
        let t2 = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng(13));
        let grads = |t2: &Tensor| {
            let mut chain = tiny_chain(2, 14);
            chain.train_losses(&emb, &[t1.clone(), t2.clone()]).unwrap();
            chain.stages()[0].generator().parameters()[0].grad().clone()
        };
        let base = grads(&t2);
        let shifted = grads(&t2.map(|v| v + 0.5));
        assert!(base.max_abs_diff(&shifted).unwrap() > 1e-6);
    }

    #[test]
    fn chain_gradients_match_finite_differences() {
        let emb = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng(16));
        let targets = [
            Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng(17)),
            Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng(18)),
        ];
        let mut chain = tiny_chain(2, 15);
        let (_, g_emb) = chain.train_losses(&emb, &targets).unwrap();
        let total = |chain: &mut SequentialChain, emb: &Tensor| -> f64 {
            let (l, _) = chain.train_losses(emb, &targets).unwrap();
            chain.networks_mut().for_each(Network::zero_grad);
            l.iter().sum()
        };
        let analytic: Vec<Tensor> = chain
            .networks()
            .flat_map(|n| n.parameters().into_iter().map(|p| p.grad().clone()))
            .collect();
        chain.networks_mut().for_each(Network::zero_grad);
        let h = 1e-5;
        let check = |a: f64, n: f64| {
            let diff = (a - n).abs();
            assert!(diff < 1e-7 || diff / a.abs().max(n.abs()) < 1e-4, "{a} vs {n}");
        };
        let mut idx = 0;
        let param_total = analytic.len();
        for p in 0..param_total {
            let len = analytic[p].numel();
            for i in 0..len {
                let set = |chain: &mut SequentialChain, v: f64| {
                    let mut ps: Vec<&mut Parameter> =
                        chain.networks_mut().flat_map(|n| n.parameters_mut()).collect();
                    ps[p].value_mut()[i] = v;
                };
                let orig = chain.networks().flat_map(|n| n.parameters()).nth(p).unwrap().value().data()[i];
                set(&mut chain, orig + h);
                let plus = total(&mut chain, &emb);
                set(&mut chain, orig - h);
                let minus = total(&mut chain, &emb);
                set(&mut chain, orig);
                check(analytic[p].data()[i], (plus - minus) / (2.0 * h));
                idx += 1;
            }
        }
        assert!(idx > 0);
        for i in 0..emb.numel() {
            let mut e = emb.clone();
            e.data_mut()[i] += h;
            let plus = total(&mut chain, &e);
            e.data_mut()[i] -= 2.0 * h;
            let minus = total(&mut chain, &e);
            check(g_emb.data()[i], (plus - minus) / (2.0 * h));
        }
    }

    #[test]
    fn freezing_keeps_encoder_bitwise() {
        let enc = EncoderConfig {
            widths: vec![4],
            embedding_dim: 4,
            ..EncoderConfig::compact([1, 4, 4])
        };
        let dec = DecoderConfig::new(4, 16).with_hidden([8, 8, 8]);
        let mut model = build_autoencoder_baseline(&enc, &dec, &mut rng(19)).unwrap();
        model.encoder.set_frozen(true);
        let dec_before = match &model.head {
            Head::Decoder(d) => d.parameters()[0].value().clone(),
            _ => unreachable!(),
        };
        let x = Tensor::uniform(&[4, 1, 4, 4], 0.0, 1.0, &mut rng(20));
        let t = x.reshape(&[4, 16]).unwrap();
        let mut opt = crate::nn::Optimizer::new(crate::nn::OptimizerKind::adam(1e-2));
        for _ in 0..3 {
            model.train_step(&x, &[t.clone()]).unwrap();
            opt.step(&mut model.trainable_parameters_mut()).unwrap();
            model.zero_grad();
        }
        // parameters unchanged; running statistics are buffers, not parameters
        let enc_params: Vec<_> = model.encoder.parameters().iter().map(|p| p.value().clone()).collect();
        let fresh = build_autoencoder_baseline(&enc, &dec, &mut rng(19)).unwrap();
        let fresh_params: Vec<_> = fresh.encoder.parameters().iter().map(|p| p.value().clone()).collect();
        assert_eq!(enc_params, fresh_params);
        let dec_after = match &model.head {
            Head::Decoder(d) => d.parameters()[0].value().clone(),
            _ => unreachable!(),
        };
        assert_ne!(dec_before, dec_after);
    }

    #[test]
    fn encoder_meta_round_trip() {
        let cfg = EncoderConfig::default();
        assert_eq!(EncoderConfig::from_meta(&cfg.to_meta()).unwrap(), cfg);
        assert!(EncoderConfig::from_meta(&[9, 1, 1, 1, 1, 1]).is_err());
    }
}
