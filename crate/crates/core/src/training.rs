//! The three training stages, their configuration, step logging, and the
//! frozen inference pipeline shared by evaluation and Stage III targets.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::{BasisSet, WeightMap, WeightPredictor};
use crate::checkpoint::{
    Checkpoint, ParamGroup, DECODER, DISCRIMINATOR, ENCODER, PREDICTOR, PROJECTION, RESTORATION_ENCODER,
};
use crate::codebook::{
    latents_to_tensor, quantize_node, tensor_to_latents, vq_loss_node, CodeIndexGrid, LatentGrid, LatentKind,
    VectorCodebook,
};
use crate::degradation::{
    apply_mask, derive_seed, generate_mask, inpainting_input, degrade, DegradationSpec, MaskSpec,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    disc_hinge_node, gen_hinge_node, info_nce_batch_node, l1_node, mse_node, perceptual_node, semantic_node,
    style_node, LossBreakdown, LossWeights, Objective,
};
use crate::networks::{
    ConvProjection, ConvPyramid, Decoder, Discriminator, Encoder, FeatureExtractor, NetworkConfig,
    RestorationEncoder,
};
use crate::nn::{Adam, Bound, ParamSet};
use crate::patch::{images_to_tensor, resize, tensor_to_images, ImagePatch, Mask, Resample};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[default]
    #[serde(rename = "reconstruction")]
    Reconstruction,
    #[serde(rename = "sr", alias = "super_resolution")]
    SuperResolution,
    #[serde(rename = "inpaint", alias = "inpainting")]
    Inpainting,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Reconstruction => "reconstruction",
            Task::SuperResolution => "sr",
            Task::Inpainting => "inpaint",
        }
    }

    /// Channels of the encoder input for this task.
    pub fn input_channels(self) -> usize {
        match self {
            Task::Inpainting => 4,
            _ => 3,
        }
    }
}

/// How Stage I codebooks start once training begins.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookInit {
    /// Keep the uniform random entries of the initialization.
    Random,
    /// Fit entries to encoder outputs of the training patches with a few
    /// k-means steps. Random entries are far from the encoder's output
    /// range, so nearly every location picks the same code.
    #[default]
    Samples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub stage: u8,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub loss_weights: LossWeights,
    /// Codebook size `N_k` per super-class; `n_z` comes from the network.
    pub codebook_sizes: Vec<usize>,
    /// Labels of the bases used by Stage II, in blending order.
    pub basis_subset: Option<Vec<String>>,
    pub task: Task,
    /// Fraction of iterations before the adversarial term joins the
    /// generator objective.
    pub adv_warmup: f64,
    pub codebook_init: CodebookInit,
    pub degradation: DegradationSpec,
    pub mask: MaskSpec,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::desk(1)
    }
}

impl StageConfig {
    pub fn desk(stage: u8) -> Self {
        Self {
            stage,
            iterations: 2000,
            batch_size: 8,
            lr_generator: 1e-4,
            lr_discriminator: 4e-4,
            loss_weights: LossWeights::default(),
            codebook_sizes: vec![64, 32, 64, 32, 32],
            basis_subset: None,
            task: if stage == 3 { Task::SuperResolution } else { Task::Reconstruction },
            adv_warmup: 0.25,
            codebook_init: CodebookInit::Samples,
            degradation: DegradationSpec::default(),
            mask: MaskSpec::default(),
            seed: 0,
        }
    }

    /// Full-scale settings; never exercised by the tests.
    pub fn paper(stage: u8) -> Self {
        Self {
            iterations: 350_000,
            batch_size: 32,
            codebook_sizes: vec![512, 256, 512, 256, 256],
            ..Self::desk(stage)
        }
    }

    /// Settings for [`NetworkConfig::toy`]: faster generator steps and a
    /// discriminator slow enough that the adversarial term does not swamp
    /// reconstruction on tiny patches.
    pub fn toy(stage: u8) -> Self {
        Self {
            iterations: 300,
            batch_size: 4,
            lr_generator: 1e-3,
            lr_discriminator: 1e-4,
            codebook_sizes: vec![8, 8, 8],
            ..Self::desk(stage)
        }
    }

    /// Small settings for tests and examples: zero iterations, batch 2.
    pub fn tiny(stage: u8) -> Self {
        Self {
            iterations: 0,
            batch_size: 2,
            lr_generator: 2e-3,
            lr_discriminator: 2e-3,
            codebook_sizes: vec![16, 16, 16],
            ..Self::desk(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1, 2 or 3, got {}", self.stage)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, lr) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..=1.0).contains(&self.adv_warmup) {
            return Err(Error::Config(format!("adv_warmup must lie in [0, 1], got {}", self.adv_warmup)));
        }
        if self.codebook_sizes.is_empty() || self.codebook_sizes.contains(&0) {
            return Err(Error::Config("codebook_sizes must list at least one positive size".into()));
        }
        if let Some(s) = &self.basis_subset {
            if s.is_empty() {
                return Err(Error::Config("basis_subset must not be empty".into()));
            }
        }
        match (self.stage, self.task) {
            (3, Task::Reconstruction) => {
                return Err(Error::Config("stage 3 needs task `sr` or `inpaint`".into()));
            }
            (1 | 2, t) if t != Task::Reconstruction => {
                return Err(Error::Config(format!("stage {} trains reconstruction only", self.stage)));
            }
            _ => {}
        }
        self.loss_weights.validate()?;
        self.degradation.validate()?;
        self.mask.validate()
    }

    fn warmup_steps(&self) -> u64 {
        (self.adv_warmup * self.iterations as f64).floor() as u64
    }

    /// Whether the adversarial term is active at 0-based `step`.
    pub fn adversarial_active(&self, step: u64) -> bool {
        self.loss_weights.lambda > 0.0 && step >= self.warmup_steps()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: u64,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    pub disc_loss: f64,
}

pub trait StepSink {
    fn record(&mut self, r: &StepRecord) -> Result<()>;
}

impl StepSink for Vec<StepRecord> {
    fn record(&mut self, r: &StepRecord) -> Result<()> {
        self.push(r.clone());
        Ok(())
    }
}

/// Discards records.
pub struct NullSink;

impl StepSink for NullSink {
    fn record(&mut self, _: &StepRecord) -> Result<()> {
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonlSink<W: Write>(pub W);

impl<W: Write> StepSink for JsonlSink<W> {
    fn record(&mut self, r: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.0, r)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

const STREAM_ENCODER: u64 = 1;
const STREAM_DECODER: u64 = 2;
const STREAM_DISC: u64 = 3;
const STREAM_PROJ: u64 = 4;
const STREAM_CODEBOOK: u64 = 5;
const STREAM_PREDICTOR: u64 = 6;
const STREAM_CODEBOOK_FIT: u64 = 8;
const STREAM_BATCHES: u64 = 100;

/// Patches fed through the encoder when fitting a codebook to samples.
const FIT_PATCHES: usize = 64;
const FIT_ITERATIONS: usize = 10;

/// Continuous encoder outputs of up to [`FIT_PATCHES`] patches as
/// row-major `n_z` vectors.
fn encoder_samples(encoder: &Encoder, patches: &[ImagePatch], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in patches[..patches.len().min(FIT_PATCHES)].chunks(batch.max(1)) {
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(chunk)?);
        let p = encoder.params.bind(&mut g, false);
        let z = encoder.forward(&mut g, &p, x)?;
        for grid in tensor_to_latents(g.value(z), LatentKind::Continuous)? {
            out.extend_from_slice(grid.values());
        }
    }
    Ok(out)
}

/// Draws distinct indices per batch while the dataset is large enough,
/// otherwise cycles through it.
struct Sampler {
    rng: ChaCha8Rng,
    n: usize,
    batch: usize,
}

impl Sampler {
    fn new(seed: u64, n: usize, batch: usize) -> Self {
        Self {
            rng: rng_stream(seed, STREAM_BATCHES),
            n,
            batch,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.n >= self.batch {
            rand::seq::index::sample(&mut self.rng, self.n, self.batch).into_vec()
        } else {
            (0..self.batch).map(|i| i % self.n).collect()
        }
    }
}

/// Quantized and blended latents of one forward pass.
#[derive(Clone, Debug)]
pub struct LatentPath {
    /// Continuous encoder output `z_hat`.
    pub z_hat: Var,
    /// Per-basis codes as looked up, without the straight-through wrapper.
    pub quantized: Vec<Var>,
    /// `[B, K, h, w]` weights, absent for a single basis without predictor.
    pub weights: Option<Var>,
    /// Straight-through blend fed to the decoder.
    pub z: Var,
    /// Blend of the raw codes, used by the VQ loss.
    pub z_raw: Var,
    pub indices: Vec<Vec<usize>>,
}

/// Quantizes `z_hat` against every codebook (`codebook_vars[k]` holds the
/// entries of `codebooks[k]`), wraps each in the straight-through op and
/// blends with the predictor's weights.
pub fn quantize_and_blend(
    g: &mut Graph,
    z_hat: Var,
    codebooks: &[VectorCodebook],
    codebook_vars: &[Var],
    predictor: Option<(&WeightPredictor, &Bound)>,
) -> Result<LatentPath> {
    if codebooks.is_empty() || codebooks.len() != codebook_vars.len() {
        return Err(Error::invalid("quantize_and_blend needs one node per codebook"));
    }
    let mut quantized = Vec::with_capacity(codebooks.len());
    let mut st = Vec::with_capacity(codebooks.len());
    let mut indices = Vec::with_capacity(codebooks.len());
    for (cb, &var) in codebooks.iter().zip(codebook_vars) {
        let (q, idx) = quantize_node(g, z_hat, var, cb)?;
        st.push(g.straight_through(z_hat, q)?);
        quantized.push(q);
        indices.push(idx);
    }
    let (weights, z, z_raw) = match predictor {
        None if codebooks.len() == 1 => (None, st[0], quantized[0]),
        None => return Err(Error::invalid("several codebooks need a weight predictor")),
        Some((p, bound)) => {
            let w = p.forward(g, bound, z_hat)?;
            let z = g.weighted_sum(w, &st)?;
            let z_raw = g.weighted_sum(w, &quantized)?;
            (Some(w), z, z_raw)
        }
    };
    Ok(LatentPath {
        z_hat,
        quantized,
        weights,
        z,
        z_raw,
        indices,
    })
}

fn adversarial_term(
    g: &mut Graph,
    disc: &Discriminator,
    disc_bound: Option<&Bound>,
    fake: Var,
) -> Result<Var> {
    match disc_bound {
        Some(b) => {
            let logits = disc.forward(g, b, fake)?;
            Ok(gen_hinge_node(g, logits))
        }
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

/// Stage I trainables for one super-class.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Model {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
    pub projection: ConvProjection,
    pub codebook: VectorCodebook,
}

/// Graph bindings of a [`Stage1Model`].
pub struct Stage1Bound {
    pub encoder: Bound,
    pub decoder: Bound,
    pub projection: Bound,
    pub codebook_params: Bound,
    pub codebook: Var,
}

impl Stage1Model {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Stage1Bound {
        let mut cb = ParamSet::new();
        cb.insert("entries", self.codebook.entries().clone());
        let codebook_params = cb.bind(g, trainable);
        let codebook = codebook_params.get("entries").expect("bound entries");
        Stage1Bound {
            codebook_params,
            encoder: self.encoder.params.bind(g, trainable),
            decoder: self.decoder.params.bind(g, trainable),
            projection: self.projection.params.bind(g, trainable),
            codebook,
        }
    }

    /// Generator objective `L1 + L_per + lambda L_adv + L_VQ + lambda L_sem`
    /// for the images `x` given an already quantized latent path. A `None`
    /// discriminator binding leaves the adversarial term at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn objective(
        &self,
        g: &mut Graph,
        b: &Stage1Bound,
        x: Var,
        path: &LatentPath,
        phi: &dyn FeatureExtractor,
        weights: &LossWeights,
        disc_bound: Option<&Bound>,
    ) -> Result<(Objective, Var)> {
        let y = self.decoder.forward(g, &b.decoder, path.z)?;
        let l1 = l1_node(g, y, x)?;
        let per = perceptual_node(g, phi, y, x)?;
        let adv = adversarial_term(g, &self.discriminator, disc_bound, y)?;
        let vq = vq_loss_node(g, path.z_hat, path.z_raw, weights.beta)?;
        let sem = semantic_node(g, &self.projection, &b.projection, path.z_hat, phi, x)?;
        let obj = Objective::compose(
            g,
            &[
                ("l1", l1, 1.0),
                ("perceptual", per, 1.0),
                ("adversarial", adv, weights.lambda),
                ("vq", vq, 1.0),
                ("semantic", sem, weights.lambda),
            ],
        )?;
        Ok((obj, y))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_stage(1)?;
        let basis = ckpt.basis()?;
        Ok(Self {
            encoder: ckpt.encoder()?,
            decoder: ckpt.decoder()?,
            discriminator: ckpt.discriminator()?,
            projection: ckpt.projection()?,
            codebook: basis.codebooks()[0].clone(),
        })
    }

    fn to_checkpoint(&self, config: &StageConfig, iteration: u64) -> Checkpoint {
        Checkpoint {
            stage: 1,
            iteration,
            network: self.encoder.config.clone(),
            config: config.clone(),
            groups: vec![
                ParamGroup::new(ENCODER, false, self.encoder.params.clone()),
                ParamGroup::new(DECODER, false, self.decoder.params.clone()),
                ParamGroup::new(DISCRIMINATOR, false, self.discriminator.params.clone()),
                ParamGroup::new(PROJECTION, false, self.projection.params.clone()),
                Checkpoint::codebook_group(&self.codebook, false),
            ],
        }
    }
}

fn check_batchable(images: &[&ImagePatch], net: &NetworkConfig, what: &str) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid(format!("{what} dataset is empty")))?;
    let (h, w) = first.dims();
    let f = net.downsample_factor.max(net.disc_stride());
    if h % f != 0 || w % f != 0 {
        return Err(Error::invalid(format!(
            "{what} images are {h}x{w}; both sides must be divisible by {f}"
        )));
    }
    if images.iter().any(|i| i.dims() != (h, w)) {
        return Err(Error::invalid(format!("{what} images must share one size")));
    }
    Ok(())
}

fn check_finite(breakdown: &LossBreakdown, step: u64) -> Result<()> {
    match breakdown.non_finite_term() {
        Some(term) => Err(Error::NonFinite { term, step }),
        None => Ok(()),
    }
}

/// One hinge update of the discriminator on real and generated images.
fn discriminator_step(disc: &mut Discriminator, opt: &mut Adam, real: &Tensor, fake: &Tensor, step: u64) -> Result<f64> {
    let mut g = Graph::new();
    let p = disc.params.bind(&mut g, true);
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let lr = disc.forward(&mut g, &p, r)?;
    let lf = disc.forward(&mut g, &p, f)?;
    let loss = disc_hinge_node(&mut g, lr, lf);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            term: "discriminator".into(),
            step,
        });
    }
    let grads = g.backward(loss);
    opt.step(&mut disc.params, &p, &grads)?;
    Ok(value)
}

fn record(stage: u8, step: u64, b: LossBreakdown, disc_loss: f64) -> StepRecord {
    StepRecord {
        stage,
        step,
        total: b.total,
        terms: b.terms,
        disc_loss,
    }
}

/// Deterministic Stage I initialization for one super-class.
pub fn init_stage1(net: &NetworkConfig, config: &StageConfig, label: &str, codebook_size: usize) -> Result<Checkpoint> {
    net.validate()?;
    config.validate()?;
    if config.stage != 1 {
        return Err(Error::Config(format!("stage 1 training got a stage {} config", config.stage)));
    }
    let model = Stage1Model {
        encoder: Encoder::init(net, &mut rng_stream(config.seed, STREAM_ENCODER)),
        decoder: Decoder::init(net, &mut rng_stream(config.seed, STREAM_DECODER)),
        discriminator: Discriminator::init(net, &mut rng_stream(config.seed, STREAM_DISC)),
        projection: ConvProjection::init(net.latent_dim, net.feature_dim, &mut rng_stream(config.seed, STREAM_PROJ)),
        codebook: VectorCodebook::random(
            codebook_size,
            net.latent_dim,
            label,
            &mut rng_stream(config.seed, STREAM_CODEBOOK),
        )?,
    };
    Ok(model.to_checkpoint(config, 0))
}

/// Trains encoder, decoder, discriminator, projection and the class codebook
/// on one super-class.
pub fn train_stage1(
    net: &NetworkConfig,
    config: &StageConfig,
    label: &str,
    codebook_size: usize,
    patches: &[ImagePatch],
    sink: &mut dyn StepSink,
) -> Result<Checkpoint> {
    let init = init_stage1(net, config, label, codebook_size)?;
    check_batchable(&patches.iter().collect::<Vec<_>>(), net, "stage 1")?;
    let mut model = Stage1Model::from_checkpoint(&init)?;
    if config.iterations > 0 && config.codebook_init == CodebookInit::Samples {
        let samples = encoder_samples(&model.encoder, patches, config.batch_size)?;
        model.codebook = VectorCodebook::from_samples(
            &samples,
            net.latent_dim,
            codebook_size,
            FIT_ITERATIONS,
            label,
            &mut rng_stream(config.seed, STREAM_CODEBOOK_FIT),
        )?;
    }
    let phi = ConvPyramid::new(net);
    let lr = config.lr_generator;
    let (mut o_enc, mut o_dec, mut o_proj, mut o_cb) = (Adam::new(lr), Adam::new(lr), Adam::new(lr), Adam::new(lr));
    let mut o_disc = Adam::new(config.lr_discriminator);
    let mut sampler = Sampler::new(config.seed, patches.len(), config.batch_size);
    for step in 0..config.iterations {
        let batch: Vec<ImagePatch> = sampler.next().into_iter().map(|i| patches[i].clone()).collect();
        let x_t = images_to_tensor(&batch)?;
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let b = model.bind(&mut g, true);
        let disc_bound = config
            .adversarial_active(step)
            .then(|| model.discriminator.params.bind(&mut g, false));
        let z_hat = model.encoder.forward(&mut g, &b.encoder, x)?;
        let path = quantize_and_blend(&mut g, z_hat, std::slice::from_ref(&model.codebook), &[b.codebook], None)?;
        let (obj, y) = model.objective(&mut g, &b, x, &path, &phi, &config.loss_weights, disc_bound.as_ref())?;
        let breakdown = obj.breakdown(&g);
        check_finite(&breakdown, step)?;
        let fake = g.value(y).clone();
        let grads = g.backward(obj.total);
        o_enc.step(&mut model.encoder.params, &b.encoder, &grads)?;
        o_dec.step(&mut model.decoder.params, &b.decoder, &grads)?;
        o_proj.step(&mut model.projection.params, &b.projection, &grads)?;
        let mut cb = ParamSet::new();
        cb.insert("entries", model.codebook.entries().clone());
        o_cb.step(&mut cb, &b.codebook_params, &grads)?;
        model.codebook.set_entries(cb.get("entries").expect("entries").clone());
        let disc_loss = discriminator_step(&mut model.discriminator, &mut o_disc, &x_t, &fake, step)?;
        sink.record(&record(1, step, breakdown, disc_loss))?;
    }
    Ok(model.to_checkpoint(config, config.iterations))
}

/// Stage II trainables plus the frozen basis.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Model {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
    pub predictor: WeightPredictor,
    pub basis: BasisSet,
}

impl Stage2Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_stage(2)?;
        Ok(Self {
            encoder: ckpt.encoder()?,
            decoder: ckpt.decoder()?,
            discriminator: ckpt.discriminator()?,
            predictor: ckpt.predictor()?,
            basis: ckpt.basis()?,
        })
    }

    fn to_checkpoint(&self, config: &StageConfig, iteration: u64) -> Checkpoint {
        let mut groups = vec![
            ParamGroup::new(ENCODER, false, self.encoder.params.clone()),
            ParamGroup::new(DECODER, false, self.decoder.params.clone()),
            ParamGroup::new(DISCRIMINATOR, false, self.discriminator.params.clone()),
            ParamGroup::new(PREDICTOR, false, self.predictor.params.clone()),
        ];
        groups.extend(self.basis.codebooks().iter().map(|c| Checkpoint::codebook_group(c, true)));
        Checkpoint {
            stage: 2,
            iteration,
            network: self.encoder.config.clone(),
            config: config.clone(),
            groups,
        }
    }
}

/// Assembles the basis from Stage I checkpoints (optionally a labelled
/// subset, in subset order). Encoder, decoder and discriminator start from
/// the checkpoint of the first selected basis; the predictor is fresh.
pub fn init_stage2(config: &StageConfig, stage1: &[Checkpoint]) -> Result<Checkpoint> {
    config.validate()?;
    if config.stage != 2 {
        return Err(Error::Config(format!("stage 2 training got a stage {} config", config.stage)));
    }
    if stage1.is_empty() {
        return Err(Error::invalid("stage 2 needs at least one stage 1 checkpoint"));
    }
    let mut books = Vec::with_capacity(stage1.len());
    for c in stage1 {
        c.expect_stage(1)?;
        books.push(c.basis()?.codebooks()[0].clone());
    }
    let all = BasisSet::new(books)?;
    let basis = match &config.basis_subset {
        Some(labels) => all.subset(labels)?,
        None => all,
    };
    let first_label = basis.codebooks()[0].label();
    let source = stage1
        .iter()
        .find(|c| c.basis().map(|b| b.codebooks()[0].label() == first_label).unwrap_or(false))
        .expect("selected basis comes from a checkpoint");
    let net = source.network.clone();
    if net.latent_dim != basis.dim() {
        return Err(Error::invalid(format!(
            "codebooks have n_z = {} but the network expects {}",
            basis.dim(),
            net.latent_dim
        )));
    }
    let model = Stage2Model {
        encoder: source.encoder()?,
        decoder: source.decoder()?,
        discriminator: source.discriminator()?,
        predictor: WeightPredictor::init(
            &net.predictor,
            net.latent_dim,
            basis.len(),
            &mut rng_stream(config.seed, STREAM_PREDICTOR),
        ),
        basis,
    };
    Ok(model.to_checkpoint(config, 0))
}

/// Trains encoder, weight predictor, decoder and discriminator with the
/// codebooks frozen.
pub fn train_stage2(
    config: &StageConfig,
    stage1: &[Checkpoint],
    images: &[ImagePatch],
    sink: &mut dyn StepSink,
) -> Result<Checkpoint> {
    let init = init_stage2(config, stage1)?;
    let net = init.network.clone();
    check_batchable(&images.iter().collect::<Vec<_>>(), &net, "stage 2")?;
    let mut model = Stage2Model::from_checkpoint(&init)?;
    let phi = ConvPyramid::new(&net);
    let lr = config.lr_generator;
    let (mut o_enc, mut o_dec, mut o_pred) = (Adam::new(lr), Adam::new(lr), Adam::new(lr));
    let mut o_disc = Adam::new(config.lr_discriminator);
    let mut sampler = Sampler::new(config.seed, images.len(), config.batch_size);
    let w = config.loss_weights;
    for step in 0..config.iterations {
        let batch: Vec<ImagePatch> = sampler.next().into_iter().map(|i| images[i].clone()).collect();
        let x_t = images_to_tensor(&batch)?;
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let pe = model.encoder.params.bind(&mut g, true);
        let pd = model.decoder.params.bind(&mut g, true);
        let pp = model.predictor.params.bind(&mut g, true);
        let cb_vars: Vec<Var> = model
            .basis
            .codebooks()
            .iter()
            .map(|c| g.constant(c.entries().clone()))
            .collect();
        let disc_bound = config
            .adversarial_active(step)
            .then(|| model.discriminator.params.bind(&mut g, false));
        let z_hat = model.encoder.forward(&mut g, &pe, x)?;
        let path = quantize_and_blend(&mut g, z_hat, model.basis.codebooks(), &cb_vars, Some((&model.predictor, &pp)))?;
        let y = model.decoder.forward(&mut g, &pd, path.z)?;
        let l1 = l1_node(&mut g, y, x)?;
        let per = perceptual_node(&mut g, &phi, y, x)?;
        let adv = adversarial_term(&mut g, &model.discriminator, disc_bound.as_ref(), y)?;
        let vq = vq_loss_node(&mut g, path.z_hat, path.z_raw, w.beta)?;
        let obj = Objective::compose(
            &mut g,
            &[
                ("l1", l1, 1.0),
                ("perceptual", per, 1.0),
                ("adversarial", adv, w.lambda),
                ("vq", vq, 1.0),
            ],
        )?;
        let breakdown = obj.breakdown(&g);
        check_finite(&breakdown, step)?;
        let fake = g.value(y).clone();
        let grads = g.backward(obj.total);
        o_enc.step(&mut model.encoder.params, &pe, &grads)?;
        o_dec.step(&mut model.decoder.params, &pd, &grads)?;
        o_pred.step(&mut model.predictor.params, &pp, &grads)?;
        let disc_loss = discriminator_step(&mut model.discriminator, &mut o_disc, &x_t, &fake, step)?;
        sink.record(&record(2, step, breakdown, disc_loss))?;
    }
    Ok(model.to_checkpoint(config, config.iterations))
}

/// One Stage III training example. `input` is the low-resolution image for
/// super-resolution or the masked image for inpainting.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub input: ImagePatch,
    pub mask: Option<Mask>,
    pub hr: ImagePatch,
}

/// Builds degraded inputs from ground-truth patches with per-index seeds.
pub fn make_pairs(hrs: &[ImagePatch], task: Task, degradation: &DegradationSpec, mask: &MaskSpec) -> Result<Vec<PairedSample>> {
    hrs.iter()
        .enumerate()
        .map(|(i, hr)| match task {
            Task::SuperResolution => Ok(PairedSample {
                input: degrade(hr, &degradation.for_index(i))?,
                mask: None,
                hr: hr.clone(),
            }),
            Task::Inpainting => {
                let m = generate_mask(&mask.for_index(i), hr.height(), hr.width())?;
                Ok(PairedSample {
                    input: apply_mask(hr, &m)?,
                    mask: Some(m),
                    hr: hr.clone(),
                })
            }
            Task::Reconstruction => Ok(PairedSample {
                input: hr.clone(),
                mask: None,
                hr: hr.clone(),
            }),
        })
        .collect()
}

/// Naive restoration baseline: bicubic upsampling for SR, the masked input
/// itself for inpainting.
pub fn naive_restore(task: Task, input: &ImagePatch, scale: usize) -> Result<ImagePatch> {
    match task {
        Task::SuperResolution => resize(input, input.height() * scale, input.width() * scale, Resample::Bicubic),
        _ => Ok(input.clone()),
    }
}

/// Encoder input tensor for a batch: bicubic-upsampled images for SR, masked
/// image plus mask channel for inpainting.
pub fn restoration_input(task: Task, scale: usize, inputs: &[&ImagePatch], masks: &[Option<&Mask>]) -> Result<Tensor> {
    match task {
        Task::Inpainting => {
            let masks = masks
                .iter()
                .map(|m| m.cloned().ok_or_else(|| Error::invalid("inpainting sample lacks a mask")))
                .collect::<Result<Vec<_>>>()?;
            let imgs: Vec<ImagePatch> = inputs.iter().map(|&i| i.clone()).collect();
            inpainting_input(&imgs, &masks)
        }
        _ => {
            let up = inputs
                .iter()
                .map(|i| naive_restore(task, i, scale))
                .collect::<Result<Vec<_>>>()?;
            images_to_tensor(&up)
        }
    }
}

/// Stage III trainables plus the frozen decoder and basis.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage3Model {
    pub encoder: RestorationEncoder,
    pub predictor: WeightPredictor,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
    pub basis: BasisSet,
}

impl Stage3Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_stage(3)?;
        Ok(Self {
            encoder: ckpt.restoration_encoder()?,
            predictor: ckpt.predictor()?,
            decoder: ckpt.decoder()?,
            discriminator: ckpt.discriminator()?,
            basis: ckpt.basis()?,
        })
    }

    fn to_checkpoint(&self, config: &StageConfig, iteration: u64) -> Checkpoint {
        let mut groups = vec![
            ParamGroup::new(RESTORATION_ENCODER, false, self.encoder.params.clone()),
            ParamGroup::new(PREDICTOR, false, self.predictor.params.clone()),
            ParamGroup::new(DISCRIMINATOR, false, self.discriminator.params.clone()),
            ParamGroup::new(DECODER, true, self.decoder.params.clone()),
        ];
        groups.extend(self.basis.codebooks().iter().map(|c| Checkpoint::codebook_group(c, true)));
        Checkpoint {
            stage: 3,
            iteration,
            network: self.decoder.config.clone(),
            config: config.clone(),
            groups,
        }
    }
}

/// The restoration encoder starts as a copy of the Stage II encoder with a
/// zero shortcut; predictor and discriminator continue from Stage II.
pub fn init_stage3(config: &StageConfig, stage2: &Checkpoint) -> Result<Checkpoint> {
    stage2.expect_stage(2)?;
    config.validate()?;
    if config.stage != 3 {
        return Err(Error::Config(format!("stage 3 training got a stage {} config", config.stage)));
    }
    let s2 = Stage2Model::from_checkpoint(stage2)?;
    let model = Stage3Model {
        encoder: RestorationEncoder::from_encoder(&s2.encoder, config.task.input_channels())?,
        predictor: s2.predictor,
        decoder: s2.decoder,
        discriminator: s2.discriminator,
        basis: s2.basis,
    };
    Ok(model.to_checkpoint(config, 0))
}

/// Ground-truth latent of `hr` under the frozen Stage II pipeline.
pub fn compute_z_gt(hr: &ImagePatch, stage2: &Checkpoint) -> Result<LatentGrid> {
    stage2.expect_stage(2)?;
    Pipeline::from_checkpoint(stage2)?.run(hr, None)
        .map(|o| o.blended)
}

/// Trains the restoration encoder and weight predictor (and the
/// discriminator) with decoder and codebooks frozen.
pub fn train_stage3(
    config: &StageConfig,
    stage2: &Checkpoint,
    pairs: &[PairedSample],
    sink: &mut dyn StepSink,
) -> Result<Checkpoint> {
    let init = init_stage3(config, stage2)?;
    let net = init.network.clone();
    if pairs.is_empty() {
        return Err(Error::invalid("stage 3 dataset is empty"));
    }
    check_batchable(&pairs.iter().map(|p| &p.hr).collect::<Vec<_>>(), &net, "stage 3")?;
    let scale = config.degradation.scale;
    for p in pairs {
        let expect = match config.task {
            Task::SuperResolution => (p.hr.height() / scale, p.hr.width() / scale),
            _ => p.hr.dims(),
        };
        if p.input.dims() != expect || (config.task == Task::SuperResolution && p.hr.height() % scale != 0) {
            return Err(Error::invalid(format!(
                "stage 3 input is {:?}, expected {expect:?} for task {}",
                p.input.dims(),
                config.task.name()
            )));
        }
    }
    let teacher = Pipeline::from_checkpoint(stage2)?;
    let mut z_gt_cache: Vec<Option<LatentGrid>> = vec![None; pairs.len()];
    let mut model = Stage3Model::from_checkpoint(&init)?;
    let phi = ConvPyramid::new(&net);
    let lr = config.lr_generator;
    let (mut o_enc, mut o_pred) = (Adam::new(lr), Adam::new(lr));
    let mut o_disc = Adam::new(config.lr_discriminator);
    let mut sampler = Sampler::new(config.seed, pairs.len(), config.batch_size);
    let w = config.loss_weights;
    for step in 0..config.iterations {
        let idx = sampler.next();
        let batch: Vec<&PairedSample> = idx.iter().map(|&i| &pairs[i]).collect();
        let mut gts = Vec::with_capacity(idx.len());
        for &i in &idx {
            if z_gt_cache[i].is_none() {
                z_gt_cache[i] = Some(teacher.run(&pairs[i].hr, None)?.blended);
            }
            gts.push(z_gt_cache[i].clone().expect("cached"));
        }
        let input_t = restoration_input(
            config.task,
            scale,
            &batch.iter().map(|p| &p.input).collect::<Vec<_>>(),
            &batch.iter().map(|p| p.mask.as_ref()).collect::<Vec<_>>(),
        )?;
        let hr_t = images_to_tensor(&batch.iter().map(|p| p.hr.clone()).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let x = g.constant(input_t);
        let hr = g.constant(hr_t.clone());
        let pe = model.encoder.params.bind(&mut g, true);
        let pp = model.predictor.params.bind(&mut g, true);
        let pd = model.decoder.params.bind(&mut g, false);
        let cb_vars: Vec<Var> = model
            .basis
            .codebooks()
            .iter()
            .map(|c| g.constant(c.entries().clone()))
            .collect();
        let disc_bound = config
            .adversarial_active(step)
            .then(|| model.discriminator.params.bind(&mut g, false));
        let z_hat = model.encoder.forward(&mut g, &pe, x)?;
        let path = quantize_and_blend(&mut g, z_hat, model.basis.codebooks(), &cb_vars, Some((&model.predictor, &pp)))?;
        let y = model.decoder.forward(&mut g, &pd, path.z)?;
        let z_gt = g.constant(latents_to_tensor(&gts)?);
        let l1 = l1_node(&mut g, y, hr)?;
        let per = perceptual_node(&mut g, &phi, y, hr)?;
        let adv = adversarial_term(&mut g, &model.discriminator, disc_bound.as_ref(), y)?;
        let nce = if batch.len() >= 2 {
            info_nce_batch_node(&mut g, path.z, z_gt, w.tau)?
        } else {
            g.constant(Tensor::scalar(0.0))
        };
        let style = style_node(&mut g, z_gt, path.z)?;
        let target = g.detach(z_gt);
        let commit = mse_node(&mut g, path.z_hat, target)?;
        let code = Objective::compose(&mut g, &[("info_nce", nce, 1.0), ("style", style, 1.0), ("commitment", commit, w.beta)])?;
        let mut obj = Objective::compose(
            &mut g,
            &[
                ("l1", l1, 1.0),
                ("perceptual", per, 1.0),
                ("adversarial", adv, w.lambda),
                ("code", code.total, 1.0),
            ],
        )?;
        obj.terms.extend(code.terms);
        let breakdown = obj.breakdown(&g);
        check_finite(&breakdown, step)?;
        let fake = g.value(y).clone();
        let grads = g.backward(obj.total);
        o_enc.step(&mut model.encoder.params, &pe, &grads)?;
        o_pred.step(&mut model.predictor.params, &pp, &grads)?;
        let disc_loss = discriminator_step(&mut model.discriminator, &mut o_disc, &hr_t, &fake, step)?;
        sink.record(&record(3, step, breakdown, disc_loss))?;
    }
    Ok(model.to_checkpoint(config, config.iterations))
}

/// Frozen inference path of any stage's checkpoint.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub stage: u8,
    pub task: Task,
    pub scale: usize,
    encoder: PipelineEncoder,
    predictor: Option<WeightPredictor>,
    pub basis: BasisSet,
    pub decoder: Decoder,
}

#[derive(Clone, Debug)]
enum PipelineEncoder {
    Plain(Encoder),
    Restoration(RestorationEncoder),
}

/// Everything one frozen forward pass produces for a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub continuous: LatentGrid,
    pub blended: LatentGrid,
    pub weights: WeightMap,
    pub indices: Vec<CodeIndexGrid>,
    /// Raw decoder output; clip before display or scoring.
    pub output: ImagePatch,
}

impl Pipeline {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (encoder, predictor) = match ckpt.stage {
            1 => (PipelineEncoder::Plain(ckpt.encoder()?), None),
            2 => (PipelineEncoder::Plain(ckpt.encoder()?), Some(ckpt.predictor()?)),
            3 => (
                PipelineEncoder::Restoration(ckpt.restoration_encoder()?),
                Some(ckpt.predictor()?),
            ),
            s => return Err(Error::Format(format!("unknown stage {s}"))),
        };
        Ok(Self {
            stage: ckpt.stage,
            task: ckpt.config.task,
            scale: ckpt.config.degradation.scale,
            encoder,
            predictor,
            basis: ckpt.basis()?,
            decoder: ckpt.decoder()?,
        })
    }

    pub fn downsample_factor(&self) -> usize {
        self.decoder.config.downsample_factor
    }

    /// Full forward pass on one image. For a Stage III pipeline `input` is
    /// the degraded image (with `mask` for inpainting); otherwise it is the
    /// image to reconstruct.
    pub fn run(&self, input: &ImagePatch, mask: Option<&Mask>) -> Result<PipelineOutput> {
        let x_t = match &self.encoder {
            PipelineEncoder::Plain(_) => images_to_tensor(std::slice::from_ref(input))?,
            PipelineEncoder::Restoration(_) => restoration_input(self.task, self.scale, &[input], &[mask])?,
        };
        let mut g = Graph::new();
        let x = g.constant(x_t);
        let z_hat = match &self.encoder {
            PipelineEncoder::Plain(e) => {
                let p = e.params.bind(&mut g, false);
                e.forward(&mut g, &p, x)?
            }
            PipelineEncoder::Restoration(e) => {
                let p = e.params.bind(&mut g, false);
                e.forward(&mut g, &p, x)?
            }
        };
        let cb_vars: Vec<Var> = self
            .basis
            .codebooks()
            .iter()
            .map(|c| g.constant(c.entries().clone()))
            .collect();
        let pp = self.predictor.as_ref().map(|p| p.params.bind(&mut g, false));
        let pred = self.predictor.as_ref().zip(pp.as_ref());
        let path = quantize_and_blend(&mut g, z_hat, self.basis.codebooks(), &cb_vars, pred)?;
        let pd = self.decoder.params.bind(&mut g, false);
        let y = self.decoder.forward(&mut g, &pd, path.z)?;
        let continuous = tensor_to_latents(g.value(z_hat), LatentKind::Continuous)?.remove(0);
        let blended = tensor_to_latents(g.value(path.z), LatentKind::Blended)?.remove(0);
        let [h, w, _] = continuous.shape();
        let weights = match path.weights {
            Some(wv) => WeightMap::from_tensor(g.value(wv), 0)?,
            None => WeightMap::one_hot(h, w, 1, 0)?,
        };
        let indices = path
            .indices
            .into_iter()
            .map(|i| CodeIndexGrid::new(h, w, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(PipelineOutput {
            continuous,
            blended,
            weights,
            indices,
            output: tensor_to_images(g.value(y))?.remove(0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{synthesize_toy_dataset, ToySpec};

    fn toy_images(classes: usize, n: usize, size: usize, seed: u64) -> Vec<Vec<ImagePatch>> {
        let spec = ToySpec { classes, patches_per_class: n, patch_size: size };
        synthesize_toy_dataset(&spec, seed)
            .unwrap()
            .into_iter()
            .map(|c| c.into_iter().map(|p| p.patch).collect())
            .collect()
    }

    fn stage1_ckpts(iters: u64) -> (Vec<Checkpoint>, Vec<Vec<ImagePatch>>) {
        let net = NetworkConfig::tiny();
        let data = toy_images(2, 4, 16, 1);
        let ckpts = data
            .iter()
            .enumerate()
            .map(|(k, imgs)| {
                let cfg = StageConfig { iterations: iters, seed: k as u64, ..StageConfig::tiny(1) };
                train_stage1(&net, &cfg, &ToySpec::class_label(k), 16, imgs, &mut NullSink).unwrap()
            })
            .collect();
        (ckpts, data)
    }

    #[test]
    fn zero_iterations_return_the_initialization() {
        let net = NetworkConfig::tiny();
        let cfg = StageConfig::tiny(1);
        let imgs = toy_images(1, 2, 16, 0).remove(0);
        let init = init_stage1(&net, &cfg, "checker", 16).unwrap();
        let trained = train_stage1(&net, &cfg, "checker", 16, &imgs, &mut NullSink).unwrap();
        assert_eq!(init, trained);
    }

    #[test]
    fn stage1_reduces_reconstruction_loss() {
        let net = NetworkConfig::tiny();
        let cfg = StageConfig { iterations: 60, batch_size: 1, ..StageConfig::tiny(1) };
        let imgs = toy_images(1, 1, 16, 2).remove(0);
        let mut log: Vec<StepRecord> = Vec::new();
        train_stage1(&net, &cfg, "checker", 16, &imgs, &mut log).unwrap();
        assert_eq!(log.len(), 60);
        assert!(log.last().unwrap().terms["l1"] < log[0].terms["l1"]);
        assert!(log.iter().all(|r| r.terms.contains_key("semantic")));
    }

    #[test]
    fn stage2_freezes_codebooks_and_reduces_to_stage1() {
        let (s1, data) = stage1_ckpts(5);
        let cfg = StageConfig { iterations: 5, ..StageConfig::tiny(2) };
        let mixed: Vec<ImagePatch> = data.concat();
        let s2 = train_stage2(&cfg, &s1, &mixed, &mut NullSink).unwrap();
        for c in &s1 {
            let label = c.basis().unwrap().codebooks()[0].label().to_string();
            let name = Checkpoint::codebook_group_name(&label);
            assert_eq!(c.group(&name).unwrap().content_hash(), s2.group(&name).unwrap().content_hash());
            assert!(s2.group(&name).unwrap().frozen);
        }

        let one = StageConfig { basis_subset: Some(vec!["checker".into()]), ..StageConfig::tiny(2) };
        let s2one = init_stage2(&one, &s1).unwrap();
        let a = Pipeline::from_checkpoint(&s1[0]).unwrap().run(&mixed[0], None).unwrap();
        let b = Pipeline::from_checkpoint(&s2one).unwrap().run(&mixed[0], None).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.blended.values(), b.blended.values());
        assert!(b.weights.weights().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stage2_rejects_wrong_inputs() {
        let (s1, _) = stage1_ckpts(0);
        let cfg = StageConfig::tiny(2);
        let s2 = init_stage2(&cfg, &s1).unwrap();
        assert!(matches!(init_stage2(&cfg, &[s2.clone()]), Err(Error::StageMismatch { .. })));
        assert!(matches!(
            init_stage3(&StageConfig::tiny(3), &s1[0]),
            Err(Error::StageMismatch { expected: 2, found: 1 })
        ));
        let bad = StageConfig { basis_subset: Some(vec!["nope".into()]), ..cfg.clone() };
        assert!(init_stage2(&bad, &s1).is_err());
        let mut other = s1[1].clone();
        let n = Checkpoint::codebook_group_name("stripes");
        other.group_mut(&n).unwrap().params.insert("entries", Tensor::zeros(&[4, 3]));
        assert!(matches!(init_stage2(&cfg, &[s1[0].clone(), other]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn z_gt_contract() {
        let (s1, data) = stage1_ckpts(0);
        let s2 = init_stage2(&StageConfig::tiny(2), &s1).unwrap();
        let z = compute_z_gt(&data[0][0], &s2).unwrap();
        assert_eq!(z.shape(), [4, 4, NetworkConfig::tiny().latent_dim]);
        assert_eq!(z, compute_z_gt(&data[0][0], &s2).unwrap());
        assert!(matches!(compute_z_gt(&data[0][0], &s1[0]), Err(Error::StageMismatch { .. })));

        // The decoder sees exactly z_gt in a Stage II forward pass.
        let pipe = Pipeline::from_checkpoint(&s2).unwrap();
        let out = pipe.run(&data[0][0], None).unwrap();
        assert_eq!(out.output, pipe.decoder.decode(&z).unwrap());
    }

    #[test]
    fn stage3_freezes_decoder_and_codebooks() {
        let (s1, data) = stage1_ckpts(0);
        let s2 = init_stage2(&StageConfig::tiny(2), &s1).unwrap();
        for task in [Task::SuperResolution, Task::Inpainting] {
            let cfg = StageConfig {
                iterations: 4,
                task,
                degradation: DegradationSpec { scale: 2, ..Default::default() },
                ..StageConfig::tiny(3)
            };
            let pairs = make_pairs(&data.concat(), task, &cfg.degradation, &cfg.mask).unwrap();
            let mut log: Vec<StepRecord> = Vec::new();
            let s3 = train_stage3(&cfg, &s2, &pairs, &mut log).unwrap();
            assert_eq!(s3.group(DECODER).unwrap().content_hash(), s2.group(DECODER).unwrap().content_hash());
            assert!(s3.group(DECODER).unwrap().frozen);
            for (name, hash) in s2.hashes().into_iter().filter(|(n, _)| n.starts_with("codebook/")) {
                assert_eq!(s3.group(&name).unwrap().content_hash(), hash);
            }
            assert!(log.iter().all(|r| r.terms["info_nce"] > 0.0));
            let pipe = Pipeline::from_checkpoint(&s3).unwrap();
            let out = pipe.run(&pairs[0].input, pairs[0].mask.as_ref()).unwrap();
            assert_eq!(out.output.dims(), (16, 16));
        }
        let cfg = StageConfig::tiny(3);
        assert!(train_stage3(&cfg, &s2, &[], &mut NullSink).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let net = NetworkConfig::tiny();
        let cfg = StageConfig { iterations: 6, adv_warmup: 0.5, ..StageConfig::tiny(1) };
        let imgs = toy_images(1, 3, 16, 4).remove(0);
        let run = || {
            let mut log: Vec<StepRecord> = Vec::new();
            let c = train_stage1(&net, &cfg, "checker", 16, &imgs, &mut log).unwrap();
            (log, c)
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a, b);
        assert_eq!(ca.hashes(), cb.hashes());
        assert_eq!(a[2].terms["adversarial"], 0.0);
        assert_ne!(a[3].terms["adversarial"], 0.0);
    }

    #[test]
    fn stage1_uses_several_codes() {
        let net = NetworkConfig::tiny();
        let cfg = StageConfig { iterations: 1, ..StageConfig::tiny(1) };
        let imgs = toy_images(1, 4, 16, 5).remove(0);
        let ckpt = train_stage1(&net, &cfg, "checker", 16, &imgs, &mut NullSink).unwrap();
        let pipe = Pipeline::from_checkpoint(&ckpt).unwrap();
        let mut used = std::collections::BTreeSet::new();
        for img in &imgs {
            used.extend(pipe.run(img, None).unwrap().indices[0].indices().iter().copied());
        }
        assert!(used.len() >= 2, "{used:?}");
    }

    #[test]
    fn nan_input_aborts_naming_the_term() {
        let net = NetworkConfig::tiny();
        let cfg = StageConfig { iterations: 3, codebook_init: CodebookInit::Random, ..StageConfig::tiny(1) };
        let mut imgs = toy_images(1, 2, 16, 0).remove(0);
        for img in &mut imgs {
            img.data_mut()[0] = f64::NAN;
        }
        match train_stage1(&net, &cfg, "checker", 16, &imgs, &mut NullSink) {
            Err(Error::NonFinite { term, step: 0 }) => assert_eq!(term, "l1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn jsonl_sink_writes_one_line_per_step() {
        let mut buf = Vec::new();
        let r = StepRecord { stage: 1, step: 0, total: 1.0, terms: BTreeMap::new(), disc_loss: 2.0 };
        {
            let mut sink = JsonlSink(&mut buf);
            sink.record(&r).unwrap();
            sink.record(&r).unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: StepRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn config_validation() {
        assert!(StageConfig::desk(1).validate().is_ok());
        assert!(StageConfig::paper(2).validate().is_ok());
        assert!((1..=3).all(|s| StageConfig::toy(s).validate().is_ok()));
        assert!(StageConfig { stage: 4, ..StageConfig::desk(1) }.validate().is_err());
        assert!(StageConfig { task: Task::SuperResolution, ..StageConfig::desk(1) }.validate().is_err());
        assert!(StageConfig { task: Task::Reconstruction, ..StageConfig::desk(3) }.validate().is_err());
        assert!(StageConfig { batch_size: 0, ..StageConfig::desk(1) }.validate().is_err());
        let t: StageConfig = toml::from_str("stage = 3\ntask = \"inpaint\"\n").unwrap();
        assert_eq!(t.task, Task::Inpainting);
        assert!(toml::from_str::<StageConfig>("bogus = 1").is_err());
    }
}
