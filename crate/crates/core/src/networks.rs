//! Encoder, decoder, patch discriminator, the frozen feature extractor and
//! the 1x1 projection used by the semantic loss.
//!
//! All networks share one configurable convolutional family: `log2(f)`
//! stride-2 3x3 convolutions down (nearest 2x upsample + 3x3 conv up),
//! residual blocks at the bottleneck and SiLU activations throughout. There
//! are no normalization layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::PredictorConfig;
use crate::codebook::{latents_to_tensor, tensor_to_latents, LatentDecoder, LatentGrid, LatentKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{conv, init_conv, Bound, ParamSet};
use crate::patch::{images_to_tensor, tensor_to_images, ImagePatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Spatial reduction between image and latent grid (4, 8 or 16).
    pub downsample_factor: usize,
    /// Code dimension `n_z`.
    pub latent_dim: usize,
    /// Channel width per resolution level, finest first; the last width is
    /// reused for any deeper level.
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    /// Output width of the feature extractor.
    pub feature_dim: usize,
    pub feature_width: usize,
    /// Seed of the frozen feature extractor weights.
    pub feature_seed: u64,
    /// Widths of the stride-2 discriminator stack.
    pub disc_channels: Vec<usize>,
    pub predictor: PredictorConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    pub fn desk() -> Self {
        Self {
            downsample_factor: 8,
            latent_dim: 32,
            channels: vec![32, 64, 128],
            res_blocks: 1,
            feature_dim: 32,
            feature_width: 32,
            feature_seed: 0x5eed_f1,
            disc_channels: vec![32, 64, 64],
            predictor: PredictorConfig::default(),
        }
    }

    /// Full-scale preset: 512x512 patches to a 32x32 grid of 256-d codes.
    pub fn paper() -> Self {
        Self {
            downsample_factor: 16,
            latent_dim: 256,
            channels: vec![128, 128, 256, 256, 512],
            res_blocks: 2,
            feature_dim: 256,
            feature_width: 64,
            feature_seed: 0x5eed_f1,
            disc_channels: vec![64, 128, 256, 512],
            predictor: PredictorConfig {
                embed_dim: 256,
                blocks: 4,
                window: 8,
            },
        }
    }

    /// 16x16 to 32x32 texture patches, factor 4; trains in minutes on a
    /// single core.
    pub fn toy() -> Self {
        Self {
            downsample_factor: 4,
            latent_dim: 8,
            channels: vec![16, 32],
            res_blocks: 1,
            feature_dim: 8,
            feature_width: 8,
            feature_seed: 7,
            disc_channels: vec![8, 16],
            predictor: PredictorConfig {
                embed_dim: 16,
                blocks: 2,
                window: 2,
            },
        }
    }

    /// A configuration small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            downsample_factor: 4,
            latent_dim: 8,
            channels: vec![8, 12],
            res_blocks: 1,
            feature_dim: 6,
            feature_width: 8,
            feature_seed: 7,
            disc_channels: vec![8, 8],
            predictor: PredictorConfig {
                embed_dim: 8,
                blocks: 2,
                window: 2,
            },
        }
    }

    pub fn levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    fn width(&self, level: usize) -> usize {
        self.channels[level.min(self.channels.len() - 1)]
    }

    pub fn disc_stride(&self) -> usize {
        1 << self.disc_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if ![4, 8, 16].contains(&self.downsample_factor) {
            return Err(Error::Config(format!(
                "downsample_factor must be 4, 8 or 16, got {}",
                self.downsample_factor
            )));
        }
        if self.latent_dim == 0 || self.feature_dim == 0 || self.feature_width == 0 {
            return Err(Error::Config("latent and feature dimensions must be positive".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channels must be a non-empty list of positive widths".into()));
        }
        if self.disc_channels.is_empty() || self.disc_channels.contains(&0) {
            return Err(Error::Config("disc_channels must be a non-empty list of positive widths".into()));
        }
        self.predictor.validate()
    }

    fn check_image_dims(&self, context: &str, h: usize, w: usize) -> Result<()> {
        let f = self.downsample_factor;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::invalid(format!(
                "{context}: image {h}x{w} is not divisible by downsample factor {f}"
            )));
        }
        Ok(())
    }
}

fn res_block(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = g.silu(x);
    let h = conv(g, p, &format!("{name}.conv1"), h, 1)?;
    let h = g.silu(h);
    let h = conv(g, p, &format!("{name}.conv2"), h, 1)?;
    g.add(x, h)
}

fn init_res_block(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, ch: usize) {
    init_conv(ps, rng, &format!("{name}.conv1"), ch, ch, 3);
    init_conv(ps, rng, &format!("{name}.conv2"), ch, ch, 3);
}

/// Which network a parameter group belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkRole {
    Encoder,
    RestorationEncoder,
    Decoder,
    Discriminator,
    WeightPredictor,
    ConvProj,
    FeatureExtractor,
}

impl NetworkRole {
    pub fn name(self) -> &'static str {
        match self {
            NetworkRole::Encoder => "encoder",
            NetworkRole::RestorationEncoder => "restoration_encoder",
            NetworkRole::Decoder => "decoder",
            NetworkRole::Discriminator => "discriminator",
            NetworkRole::WeightPredictor => "weight_predictor",
            NetworkRole::ConvProj => "conv_proj",
            NetworkRole::FeatureExtractor => "feature_extractor",
        }
    }
}

/// `E`: image `[B, 3, H, W]` to continuous latent `[B, n_z, H/f, W/f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: NetworkConfig,
    pub params: ParamSet,
}

impl Encoder {
    pub fn init(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new();
        init_conv(&mut ps, rng, "conv_in", 3, config.width(0), 3);
        init_trunk(config, &mut ps, rng);
        Self {
            config: config.clone(),
            params: ps,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("encode", &[0, 3, 0, 0], &s));
        }
        self.config.check_image_dims("encode", s[2], s[3])?;
        let h = conv(g, p, "conv_in", image, 1)?;
        trunk_forward(&self.config, g, p, h)
    }

    pub fn encode(&self, image: &ImagePatch) -> Result<LatentGrid> {
        self.config.check_image_dims("encode", image.height(), image.width())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images_to_tensor(std::slice::from_ref(image))?);
        let z = self.forward(&mut g, &p, x)?;
        Ok(tensor_to_latents(g.value(z), LatentKind::Continuous)?.remove(0))
    }
}

fn init_trunk(config: &NetworkConfig, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
    let levels = config.levels();
    for i in 0..levels {
        init_conv(ps, rng, &format!("down.{i}"), config.width(i), config.width(i + 1), 3);
    }
    for r in 0..config.res_blocks {
        init_res_block(ps, rng, &format!("mid.{r}"), config.width(levels));
    }
    init_conv(ps, rng, "conv_out", config.width(levels), config.latent_dim, 1);
}

fn trunk_forward(config: &NetworkConfig, g: &mut Graph, p: &Bound, mut h: Var) -> Result<Var> {
    for i in 0..config.levels() {
        h = conv(g, p, &format!("down.{i}"), h, 2)?;
        h = g.silu(h);
    }
    for r in 0..config.res_blocks {
        h = res_block(g, p, &format!("mid.{r}"), h)?;
    }
    let h = g.silu(h);
    conv(g, p, "conv_out", h, 1)
}

/// Stage III encoder: the plain encoder trunk plus a residual shortcut that
/// maps the shallow `conv_in` features straight to the latent grid with one
/// `f x f` stride-`f` convolution. Accepts extra input channels (the hole mask
/// for inpainting).
#[derive(Clone, Debug, PartialEq)]
pub struct RestorationEncoder {
    pub config: NetworkConfig,
    pub in_channels: usize,
    pub params: ParamSet,
}

impl RestorationEncoder {
    pub fn init(config: &NetworkConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new();
        init_conv(&mut ps, rng, "conv_in", in_channels, config.width(0), 3);
        init_trunk(config, &mut ps, rng);
        init_conv(
            &mut ps,
            rng,
            "shortcut",
            config.width(0),
            config.latent_dim,
            config.downsample_factor,
        );
        Self {
            config: config.clone(),
            in_channels,
            params: ps,
        }
    }

    /// Starts from a trained encoder: trunk weights are copied, weights for
    /// extra input channels and the whole shortcut start at zero, so the
    /// initial output equals the source encoder's.
    pub fn from_encoder(encoder: &Encoder, in_channels: usize) -> Result<Self> {
        if in_channels < 3 {
            return Err(Error::invalid("restoration encoder needs at least 3 input channels"));
        }
        let config = &encoder.config;
        let mut ps = encoder.params.clone();
        let w = encoder.params.get("conv_in.weight").expect("encoder has conv_in");
        let [co, _, k, _] = w.dims4();
        let mut data = vec![0.0; co * in_channels * k * k];
        for o in 0..co {
            for c in 0..3 {
                for i in 0..k * k {
                    data[(o * in_channels + c) * k * k + i] = w.data()[(o * 3 + c) * k * k + i];
                }
            }
        }
        ps.insert("conv_in.weight", crate::Tensor::new(vec![co, in_channels, k, k], data)?);
        let f = config.downsample_factor;
        ps.insert(
            "shortcut.weight",
            crate::Tensor::zeros(&[config.latent_dim, config.width(0), f, f]),
        );
        ps.insert("shortcut.bias", crate::Tensor::zeros(&[config.latent_dim]));
        Ok(Self {
            config: config.clone(),
            in_channels,
            params: ps,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, input: Var) -> Result<Var> {
        let s = g.shape(input).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape("encode_restoration", &[0, self.in_channels, 0, 0], &s));
        }
        self.config.check_image_dims("encode_restoration", s[2], s[3])?;
        let shallow = conv(g, p, "conv_in", input, 1)?;
        let main = trunk_forward(&self.config, g, p, shallow)?;
        let f = self.config.downsample_factor;
        let skip = conv(g, p, "shortcut", shallow, f)?;
        g.add(main, skip)
    }
}

/// `G`: latent `[B, n_z, h, w]` to image `[B, 3, h*f, w*f]`. The output is
/// raw; clip with [`ImagePatch::clipped`] for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: NetworkConfig,
    pub params: ParamSet,
}

impl Decoder {
    pub fn init(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new();
        let levels = config.levels();
        init_conv(&mut ps, rng, "conv_in", config.latent_dim, config.width(levels), 3);
        for r in 0..config.res_blocks {
            init_res_block(&mut ps, rng, &format!("mid.{r}"), config.width(levels));
        }
        for i in (0..levels).rev() {
            init_conv(&mut ps, rng, &format!("up.{i}"), config.width(i + 1), config.width(i), 3);
        }
        init_conv(&mut ps, rng, "conv_out", config.width(0), 3, 3);
        if let Some(b) = ps.get_mut("conv_out.bias") {
            b.data_mut().fill(0.5);
        }
        Self {
            config: config.clone(),
            params: ps,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, latent: Var) -> Result<Var> {
        let s = g.shape(latent).to_vec();
        if s.len() != 4 || s[1] != self.config.latent_dim {
            return Err(Error::shape("decode", &[0, self.config.latent_dim, 0, 0], &s));
        }
        let mut h = conv(g, p, "conv_in", latent, 1)?;
        for r in 0..self.config.res_blocks {
            h = res_block(g, p, &format!("mid.{r}"), h)?;
        }
        for i in (0..self.config.levels()).rev() {
            h = g.upsample2x(h);
            h = conv(g, p, &format!("up.{i}"), h, 1)?;
            h = g.silu(h);
        }
        conv(g, p, "conv_out", h, 1)
    }

    /// Raw (unclipped) decoder output.
    pub fn decode(&self, latent: &LatentGrid) -> Result<ImagePatch> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(latents_to_tensor(std::slice::from_ref(latent))?);
        let y = self.forward(&mut g, &p, z)?;
        Ok(tensor_to_images(g.value(y))?.remove(0))
    }
}

impl LatentDecoder for Decoder {
    fn downsample_factor(&self) -> usize {
        self.config.downsample_factor
    }

    fn decode_latent(&self, latent: &LatentGrid) -> Result<ImagePatch> {
        self.decode(latent)
    }
}

/// Patch discriminator: a stack of stride-2 3x3 convolutions followed by a
/// 1x1 projection to one logit per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub config: NetworkConfig,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn init(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new();
        let mut cin = 3;
        for (i, &c) in config.disc_channels.iter().enumerate() {
            init_conv(&mut ps, rng, &format!("down.{i}"), cin, c, 3);
            cin = c;
        }
        init_conv(&mut ps, rng, "head", cin, 1, 1);
        Self {
            config: config.clone(),
            params: ps,
        }
    }

    pub fn stride(&self) -> usize {
        self.config.disc_stride()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        let stride = self.stride();
        if s.len() != 4 || s[1] != 3 || s[2] % stride != 0 || s[3] % stride != 0 {
            return Err(Error::invalid(format!(
                "discriminate: input {s:?} must be [B, 3, H, W] with H, W divisible by {stride}"
            )));
        }
        let mut h = image;
        for i in 0..self.config.disc_channels.len() {
            h = conv(g, p, &format!("down.{i}"), h, 2)?;
            h = g.silu(h);
        }
        conv(g, p, "head", h, 1)
    }

    /// Logit grid `[H/s, W/s]`, row-major.
    pub fn discriminate(&self, image: &ImagePatch) -> Result<(usize, usize, Vec<f64>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images_to_tensor(std::slice::from_ref(image))?);
        let y = self.forward(&mut g, &p, x)?;
        let s = g.shape(y).to_vec();
        Ok((s[2], s[3], g.value(y).data().to_vec()))
    }
}

/// `Phi`: a frozen feature map at latent resolution. Implementations must
/// never expose trainable parameters to the graph.
pub trait FeatureExtractor {
    fn output_dim(&self) -> usize;
    fn downsample_factor(&self) -> usize;
    fn features(&self, g: &mut Graph, image: Var) -> Result<Var>;
}

/// Default `Phi`: a seeded random convolutional pyramid whose weights are
/// fixed at construction and always bound as graph constants.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvPyramid {
    config: NetworkConfig,
    params: ParamSet,
}

impl ConvPyramid {
    pub fn new(config: &NetworkConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.feature_seed);
        let mut ps = ParamSet::new();
        let w = config.feature_width;
        init_conv(&mut ps, &mut rng, "conv_in", 3, w, 3);
        for i in 0..config.levels() {
            init_conv(&mut ps, &mut rng, &format!("down.{i}"), w, w, 3);
        }
        init_conv(&mut ps, &mut rng, "conv_out", w, config.feature_dim, 1);
        Self {
            config: config.clone(),
            params: ps,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn extract(&self, image: &ImagePatch) -> Result<LatentGrid> {
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(std::slice::from_ref(image))?);
        let y = self.features(&mut g, x)?;
        Ok(tensor_to_latents(g.value(y), LatentKind::Continuous)?.remove(0))
    }
}

impl FeatureExtractor for ConvPyramid {
    fn output_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn downsample_factor(&self) -> usize {
        self.config.downsample_factor
    }

    fn features(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("extract_features", &[0, 3, 0, 0], &s));
        }
        self.config.check_image_dims("extract_features", s[2], s[3])?;
        let p = self.params.bind(g, false);
        let mut h = conv(g, &p, "conv_in", image, 1)?;
        for i in 0..self.config.levels() {
            h = g.silu(h);
            h = conv(g, &p, &format!("down.{i}"), h, 2)?;
        }
        let h = g.silu(h);
        conv(g, &p, "conv_out", h, 1)
    }
}

/// `CONV`: trainable 1x1 projection from `n_z` to the feature width of `Phi`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvProjection {
    pub params: ParamSet,
}

impl ConvProjection {
    pub fn init(latent_dim: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new();
        init_conv(&mut ps, rng, "proj", latent_dim, feature_dim, 1);
        Self { params: ps }
    }

    /// Identity weights and zero bias; requires `n_z == d_Phi`.
    pub fn identity(dim: usize) -> Self {
        let mut w = crate::Tensor::zeros(&[dim, dim, 1, 1]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        let mut ps = ParamSet::new();
        ps.insert("proj.weight", w);
        ps.insert("proj.bias", crate::Tensor::zeros(&[dim]));
        Self { params: ps }
    }

    pub fn input_dim(&self) -> usize {
        self.params.get("proj.weight").map_or(0, |w| w.shape()[1])
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, latent: Var) -> Result<Var> {
        let s = g.shape(latent).to_vec();
        if s.len() != 4 || s[1] != self.input_dim() {
            return Err(Error::shape("conv_project", &[0, self.input_dim(), 0, 0], &s));
        }
        conv(g, p, "proj", latent, 1)
    }

    pub fn project(&self, latent: &LatentGrid) -> Result<LatentGrid> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(latents_to_tensor(std::slice::from_ref(latent))?);
        let y = self.forward(&mut g, &p, z)?;
        Ok(tensor_to_latents(g.value(y), LatentKind::Continuous)?.remove(0))
    }
}
