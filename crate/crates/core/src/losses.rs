//! Training objectives. Each loss exists as a graph builder (`*_node`) used
//! by training and as a plain function over images or latent grids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codebook::{latents_to_tensor, LatentGrid};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::networks::{ConvProjection, FeatureExtractor};
use crate::nn::Bound;
use crate::patch::{images_to_tensor, ImagePatch};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the adversarial and semantic terms.
    pub lambda: f64,
    /// Commitment weight.
    pub beta: f64,
    /// InfoNCE temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            beta: 0.25,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.beta >= 0.0) || !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!(
                "loss weights need lambda >= 0, beta >= 0, tau > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

fn same_shape(g: &Graph, ctx: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(ctx, g.shape(a), g.shape(b)));
    }
    Ok(())
}

pub fn l1_node(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, "l1_loss", a, b)?;
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

pub fn mse_node(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, "mse", a, b)?;
    let d = g.sub(a, b)?;
    let d = g.square(d);
    Ok(g.mean(d))
}

pub fn perceptual_node(g: &mut Graph, phi: &dyn FeatureExtractor, a: Var, b: Var) -> Result<Var> {
    same_shape(g, "perceptual_loss", a, b)?;
    let fa = phi.features(g, a)?;
    let fb = phi.features(g, b)?;
    mse_node(g, fa, fb)
}

/// Hinge discriminator loss `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn disc_hinge_node(g: &mut Graph, real: Var, fake: Var) -> Var {
    let r = g.scale(real, -1.0);
    let r = g.add_scalar(r, 1.0);
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.add_scalar(fake, 1.0);
    let f = g.relu(f);
    let f = g.mean(f);
    g.add(r, f).expect("scalars")
}

/// Generator side of the hinge loss, `-mean(fake)`.
pub fn gen_hinge_node(g: &mut Graph, fake: Var) -> Var {
    let m = g.mean(fake);
    g.scale(m, -1.0)
}

/// `mean((CONV(z_hat) - Phi(y))^2)`; `Phi` stays frozen.
pub fn semantic_node(
    g: &mut Graph,
    proj: &ConvProjection,
    proj_params: &Bound,
    latent: Var,
    phi: &dyn FeatureExtractor,
    image: Var,
) -> Result<Var> {
    let projected = proj.forward(g, proj_params, latent)?;
    let features = phi.features(g, image)?;
    if g.shape(projected) != g.shape(features) {
        return Err(Error::invalid(format!(
            "semantic_loss: projected latent {:?} does not match feature map {:?}",
            g.shape(projected),
            g.shape(features)
        )));
    }
    mse_node(g, projected, features)
}

fn flatten_row(g: &mut Graph, v: Var) -> Result<Var> {
    let n = g.value(v).len();
    g.reshape(v, &[1, 1, n])
}

/// InfoNCE for one anchor with cosine similarity on flattened grids.
pub fn info_nce_node(g: &mut Graph, anchor: Var, positive: Var, negatives: &[Var], tau: f64) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::invalid("info_nce needs at least one negative"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("info_nce temperature must be positive, got {tau}")));
    }
    for &n in std::iter::once(&positive).chain(negatives) {
        same_shape(g, "info_nce", anchor, n)?;
    }
    let a = flatten_row(g, anchor)?;
    let a = g.l2_normalize_last(a)?;
    let rows = std::iter::once(positive)
        .chain(negatives.iter().copied())
        .map(|v| flatten_row(g, v))
        .collect::<Result<Vec<_>>>()?;
    let cands = g.concat(&rows, 1)?;
    let cands = g.l2_normalize_last(cands)?;
    let logits = g.matmul(a, cands, false, true)?;
    let logits = g.scale(logits, 1.0 / tau);
    let logp = g.log_softmax_last(logits);
    let pos = g.gather(logp, vec![0], &[1])?;
    let s = g.sum(pos);
    Ok(g.scale(s, -1.0))
}

/// Batched InfoNCE averaged over anchors. Anchor `i` is `z[i]`, its positive
/// is `z_gt[i]` and its negatives are every other `z_gt[j]` and `z[j]` in the
/// batch. Needs a batch of at least two.
pub fn info_nce_batch_node(g: &mut Graph, z: Var, z_gt: Var, tau: f64) -> Result<Var> {
    same_shape(g, "info_nce", z, z_gt)?;
    let b = g.shape(z)[0];
    if b < 2 {
        return Err(Error::invalid("in-batch info_nce needs a batch of at least two"));
    }
    let d = g.value(z).len() / b;
    let zf = g.reshape(z, &[1, b, d])?;
    let zf = g.l2_normalize_last(zf)?;
    let gf = g.reshape(z_gt, &[1, b, d])?;
    let gf = g.l2_normalize_last(gf)?;
    let s_zg = g.matmul(zf, gf, false, true)?;
    let s_zz = g.matmul(zf, zf, false, true)?;
    let both = g.concat(&[s_zg, s_zz], 2)?;
    let width = 2 * b;
    let mut idx = Vec::with_capacity(b * (width - 1));
    for i in 0..b {
        idx.push(i * width + i);
        idx.extend((0..b).filter(|&j| j != i).map(|j| i * width + j));
        idx.extend((0..b).filter(|&j| j != i).map(|j| i * width + b + j));
    }
    let logits = g.gather(both, idx, &[1, b, width - 1])?;
    let logits = g.scale(logits, 1.0 / tau);
    let logp = g.log_softmax_last(logits);
    let pos = g.gather(logp, (0..b).map(|i| i * (width - 1)).collect(), &[b])?;
    let m = g.mean(pos);
    Ok(g.scale(m, -1.0))
}

/// Channel Gram matrices `X^T X / (h w)` of a `[B, C, h, w]` node.
pub fn gram_node(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("gram", &[0, 0, 0, 0], &s));
    }
    let hw = s[2] * s[3];
    let flat = g.reshape(x, &[s[0], s[1], hw])?;
    let gram = g.matmul(flat, flat, false, true)?;
    Ok(g.scale(gram, 1.0 / hw as f64))
}

/// Mean over entries of the squared Gram difference, averaged over the batch.
pub fn style_node(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, "style_loss", a, b)?;
    let ga = gram_node(g, a)?;
    let gb = gram_node(g, b)?;
    mse_node(g, ga, gb)
}

/// `beta * mean((z_hat - sg[z_gt])^2)`.
pub fn commitment_node(g: &mut Graph, z_hat: Var, z_gt: Var, beta: f64) -> Result<Var> {
    let target = g.detach(z_gt);
    let m = mse_node(g, z_hat, target)?;
    Ok(g.scale(m, beta))
}

/// A scalar objective node with its named, unweighted terms.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub terms: Vec<(&'static str, Var)>,
}

impl Objective {
    /// Left-to-right sum of `weight * term`. Weights of exactly one skip the
    /// multiply, which leaves the value unchanged.
    pub fn compose(g: &mut Graph, terms: &[(&'static str, Var, f64)]) -> Result<Self> {
        let mut total: Option<Var> = None;
        for &(_, v, w) in terms {
            let scaled = if w == 1.0 { v } else { g.scale(v, w) };
            total = Some(match total {
                None => scaled,
                Some(t) => g.add(t, scaled)?,
            });
        }
        Ok(Self {
            total: total.ok_or_else(|| Error::invalid("objective needs at least one term"))?,
            terms: terms.iter().map(|&(n, v, _)| (n, v)).collect(),
        })
    }

    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            total: g.value(self.total).item(),
            terms: self.terms.iter().map(|&(n, v)| (n.to_string(), g.value(v).item())).collect(),
        }
    }
}

/// Term values of one evaluation of an objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossBreakdown {
    /// First non-finite term, or the total when every term is finite but the
    /// sum is not.
    pub fn non_finite_term(&self) -> Option<String> {
        self.terms
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k.clone())
            .or_else(|| (!self.total.is_finite()).then(|| "total".to_string()))
    }
}

fn fold(terms: &[(f64, f64)]) -> f64 {
    let mut it = terms.iter().map(|&(v, w)| if w == 1.0 { v } else { w * v });
    let first = it.next().unwrap_or(0.0);
    it.fold(first, |acc, x| acc + x)
}

/// Term values of the Stage I objective
/// `L1 + L_per + lambda L_adv + L_VQ + lambda L_sem`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Terms {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub vq: f64,
    pub semantic: f64,
}

impl Stage1Terms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        fold(&[
            (self.l1, 1.0),
            (self.perceptual, 1.0),
            (self.adversarial, w.lambda),
            (self.vq, 1.0),
            (self.semantic, w.lambda),
        ])
    }
}

/// Stage II: the Stage I objective without the semantic term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Terms {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub vq: f64,
}

impl Stage2Terms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        fold(&[
            (self.l1, 1.0),
            (self.perceptual, 1.0),
            (self.adversarial, w.lambda),
            (self.vq, 1.0),
        ])
    }
}

/// Code-level terms; `commitment` is the unweighted mean squared error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodeTerms {
    pub info_nce: f64,
    pub style: f64,
    pub commitment: f64,
}

impl CodeTerms {
    pub fn total(&self, beta: f64) -> f64 {
        fold(&[(self.info_nce, 1.0), (self.style, 1.0), (self.commitment, beta)])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage3Terms {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub code: CodeTerms,
}

impl Stage3Terms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        fold(&[
            (self.l1, 1.0),
            (self.perceptual, 1.0),
            (self.adversarial, w.lambda),
            (self.code.total(w.beta), 1.0),
        ])
    }
}

fn image_pair(g: &mut Graph, a: &ImagePatch, b: &ImagePatch, ctx: &'static str) -> Result<(Var, Var)> {
    if a.dims() != b.dims() {
        let (ah, aw) = a.dims();
        let (bh, bw) = b.dims();
        return Err(Error::shape(ctx, &[ah, aw], &[bh, bw]));
    }
    let x = g.constant(images_to_tensor(std::slice::from_ref(a))?);
    let y = g.constant(images_to_tensor(std::slice::from_ref(b))?);
    Ok((x, y))
}

fn latent_const(g: &mut Graph, z: &LatentGrid) -> Result<Var> {
    Ok(g.constant(latents_to_tensor(std::slice::from_ref(z))?))
}

pub fn l1_loss(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    let mut g = Graph::new();
    let (x, y) = image_pair(&mut g, a, b, "l1_loss")?;
    let l = l1_node(&mut g, x, y)?;
    Ok(g.value(l).item())
}

pub fn perceptual_loss(a: &ImagePatch, b: &ImagePatch, phi: &dyn FeatureExtractor) -> Result<f64> {
    let mut g = Graph::new();
    let (x, y) = image_pair(&mut g, a, b, "perceptual_loss")?;
    let l = perceptual_node(&mut g, phi, x, y)?;
    Ok(g.value(l).item())
}

/// `(gen_loss, disc_loss)` of the hinge form.
pub fn adversarial_losses(real_logits: &[f64], fake_logits: &[f64]) -> Result<(f64, f64)> {
    if real_logits.is_empty() || fake_logits.is_empty() {
        return Err(Error::invalid("adversarial losses need non-empty logit grids"));
    }
    if !real_logits.iter().chain(fake_logits).all(|v| v.is_finite()) {
        return Err(Error::invalid("adversarial losses need finite logits"));
    }
    let mut g = Graph::new();
    let r = g.constant(crate::Tensor::new(vec![real_logits.len()], real_logits.to_vec())?);
    let f = g.constant(crate::Tensor::new(vec![fake_logits.len()], fake_logits.to_vec())?);
    let d = disc_hinge_node(&mut g, r, f);
    let gen = gen_hinge_node(&mut g, f);
    Ok((g.value(gen).item(), g.value(d).item()))
}

pub fn semantic_loss(
    latent: &LatentGrid,
    image: &ImagePatch,
    proj: &ConvProjection,
    phi: &dyn FeatureExtractor,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = proj.params.bind(&mut g, false);
    let z = latent_const(&mut g, latent)?;
    let y = g.constant(images_to_tensor(std::slice::from_ref(image))?);
    let l = semantic_node(&mut g, proj, &p, z, phi, y)?;
    Ok(g.value(l).item())
}

pub fn info_nce(anchor: &LatentGrid, positive: &LatentGrid, negatives: &[LatentGrid], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = latent_const(&mut g, anchor)?;
    let p = latent_const(&mut g, positive)?;
    let n = negatives
        .iter()
        .map(|z| latent_const(&mut g, z))
        .collect::<Result<Vec<_>>>()?;
    let l = info_nce_node(&mut g, a, p, &n, tau)?;
    Ok(g.value(l).item())
}

pub fn style_loss(a: &LatentGrid, b: &LatentGrid) -> Result<f64> {
    let mut g = Graph::new();
    let x = latent_const(&mut g, a)?;
    let y = latent_const(&mut g, b)?;
    let l = style_node(&mut g, x, y)?;
    Ok(g.value(l).item())
}

/// Terms of `info_nce(z, z_gt, negatives) + style(z_gt, z) + beta mean((z_hat - z_gt)^2)`;
/// combine them with [`CodeTerms::total`]. With no negatives the contrastive
/// term is omitted.
pub fn code_level_loss(
    z: &LatentGrid,
    z_hat: &LatentGrid,
    z_gt: &LatentGrid,
    negatives: &[LatentGrid],
    tau: f64,
) -> Result<CodeTerms> {
    let mut g = Graph::new();
    let zv = latent_const(&mut g, z)?;
    let zh = latent_const(&mut g, z_hat)?;
    let gt = latent_const(&mut g, z_gt)?;
    let info_nce = if negatives.is_empty() {
        0.0
    } else {
        let n = negatives
            .iter()
            .map(|v| latent_const(&mut g, v))
            .collect::<Result<Vec<_>>>()?;
        let l = info_nce_node(&mut g, zv, gt, &n, tau)?;
        g.value(l).item()
    };
    let style = style_node(&mut g, gt, zv)?;
    let commit = commitment_node(&mut g, zh, gt, 1.0)?;
    Ok(CodeTerms {
        info_nce,
        style: g.value(style).item(),
        commitment: g.value(commit).item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::LatentKind;
    use crate::networks::{ConvPyramid, NetworkConfig};
    use crate::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize, d: usize, v: Vec<f64>) -> LatentGrid {
        LatentGrid::new(h, w, d, v, LatentKind::Continuous).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImagePatch {
        ImagePatch::new(h, w, (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    /// `Phi(x) = 2x`, no downsampling.
    struct Doubler;

    impl FeatureExtractor for Doubler {
        fn output_dim(&self) -> usize {
            3
        }
        fn downsample_factor(&self) -> usize {
            1
        }
        fn features(&self, g: &mut Graph, image: Var) -> Result<Var> {
            Ok(g.scale(image, 2.0))
        }
    }

    #[test]
    fn l1_examples() {
        let a = ImagePatch::filled(4, 4, 0.0);
        let b = ImagePatch::filled(4, 4, 0.5);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a, &b).unwrap(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, y) = (random_image(&mut rng, 3, 5), random_image(&mut rng, 3, 5));
        assert_eq!(l1_loss(&x, &y).unwrap(), l1_loss(&y, &x).unwrap());
        assert!(l1_loss(&x, &ImagePatch::filled(3, 4, 0.0)).is_err());
    }

    #[test]
    fn perceptual_examples() {
        let a = ImagePatch::from_fn(2, 2, |c, y, x| (c + 2 * y + x) as f64 / 10.0);
        let b = ImagePatch::filled(2, 2, 0.25);
        let hand: f64 = a.data().iter().map(|v| (2.0 * v - 0.5).powi(2)).sum::<f64>() / 12.0;
        assert!((perceptual_loss(&a, &b, &Doubler).unwrap() - hand).abs() < 1e-15);
        assert_eq!(perceptual_loss(&a, &a, &Doubler).unwrap(), 0.0);

        let phi = ConvPyramid::new(&NetworkConfig::tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y) = (random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8));
        assert_eq!(perceptual_loss(&x, &y, &phi).unwrap(), perceptual_loss(&y, &x, &phi).unwrap());
        assert_eq!(perceptual_loss(&x, &x, &phi).unwrap(), 0.0);
    }

    #[test]
    fn adversarial_examples() {
        let (gen, disc) = adversarial_losses(&[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!((gen, disc), (0.0, 2.0));
        let (_, disc) = adversarial_losses(&[1e6; 4], &[-1e6; 4]).unwrap();
        assert_eq!(disc, 0.0);
        let mut last = f64::INFINITY;
        for i in 0..10 {
            let (gen, _) = adversarial_losses(&[0.0], &[i as f64 * 0.3 - 1.0]).unwrap();
            assert!(gen < last);
            last = gen;
        }
    }

    #[test]
    fn semantic_examples_and_gradient_flow() {
        let cfg = NetworkConfig::tiny();
        let phi = ConvPyramid::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 8, 8);
        let target = phi.extract(&img).unwrap();
        let proj = ConvProjection::identity(cfg.feature_dim);
        assert_eq!(semantic_loss(&target, &img, &proj, &phi).unwrap(), 0.0);

        let proj = ConvProjection::init(cfg.latent_dim, cfg.feature_dim, &mut rng);
        let z = grid(2, 2, cfg.latent_dim, (0..4 * cfg.latent_dim).map(|i| (i as f64).sin()).collect());
        assert!(semantic_loss(&z, &img, &proj, &phi).unwrap() > 0.0);
        let bad = grid(2, 2, 3, vec![0.0; 12]);
        assert!(semantic_loss(&bad, &img, &proj, &phi).is_err());

        let mut g = Graph::new();
        let p = proj.params.bind(&mut g, true);
        let zv = g.param(latents_to_tensor(&[z]).unwrap());
        let y = g.constant(images_to_tensor(&[img]).unwrap());
        let l = semantic_node(&mut g, &proj, &p, zv, &phi, y).unwrap();
        let grads = g.backward(l);
        assert!(grads.get(zv).is_some());
        assert!(p.iter().all(|(_, v)| grads.get(*v).is_some()));
    }

    #[test]
    fn info_nce_examples() {
        let a = grid(1, 1, 2, vec![1.0, 0.0]);
        let p = grid(1, 1, 2, vec![0.6, 0.8]);
        let n = grid(1, 1, 2, vec![0.6, -0.8]);
        let l = info_nce(&a, &p, &[n], 0.1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9);

        let p = grid(1, 1, 2, vec![2.0, 0.0]);
        let n = grid(1, 1, 2, vec![0.0, 3.0]);
        let l = info_nce(&a, &p, &[n.clone()], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);

        let tiny = info_nce(&a, &p, &[n.clone()], 1e-3).unwrap();
        assert!(tiny < 1e-100);

        let zero = grid(1, 1, 2, vec![0.0, 0.0]);
        assert!(info_nce(&a, &p, &[zero.clone()], 0.1).is_err());
        assert!(info_nce(&zero, &p, &[n.clone()], 0.1).is_err());
        assert!(info_nce(&a, &p, &[], 0.1).is_err());
    }

    #[test]
    fn info_nce_monotonicity() {
        let a = grid(1, 1, 2, vec![1.0, 0.0]);
        let n = grid(1, 1, 2, vec![0.0, 1.0]);
        let mut last = f64::INFINITY;
        for i in 0..8 {
            let t = i as f64 * 0.2;
            let p = grid(1, 1, 2, vec![t.cos(), t.sin()]);
            let l = info_nce(&a, &p, &[n.clone()], 0.5).unwrap();
            if i > 0 {
                assert!(l > last);
            }
            last = l;
        }
    }

    #[test]
    fn batched_info_nce_matches_per_anchor_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = 3;
        let grids: Vec<LatentGrid> = (0..2 * b)
            .map(|_| grid(2, 2, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let (zs, gts) = grids.split_at(b);
        let mut expected = 0.0;
        for i in 0..b {
            let negs: Vec<LatentGrid> = (0..b)
                .filter(|&j| j != i)
                .map(|j| gts[j].clone())
                .chain((0..b).filter(|&j| j != i).map(|j| zs[j].clone()))
                .collect();
            expected += info_nce(&zs[i], &gts[i], &negs, 0.1).unwrap();
        }
        expected /= b as f64;
        let mut g = Graph::new();
        let z = g.constant(latents_to_tensor(zs).unwrap());
        let gt = g.constant(latents_to_tensor(gts).unwrap());
        let l = info_nce_batch_node(&mut g, z, gt, 0.1).unwrap();
        assert!((g.value(l).item() - expected).abs() < 1e-12);

        let one = g.constant(latents_to_tensor(&zs[..1]).unwrap());
        assert!(info_nce_batch_node(&mut g, one, one, 0.1).is_err());
    }

    #[test]
    fn style_examples() {
        let ones = grid(2, 2, 1, vec![1.0; 4]);
        let zeros = grid(2, 2, 1, vec![0.0; 4]);
        assert_eq!(style_loss(&ones, &zeros).unwrap(), 1.0);
        assert_eq!(style_loss(&ones, &ones).unwrap(), 0.0);
        assert!(style_loss(&ones, &grid(1, 4, 1, vec![1.0; 4])).is_err());
    }

    #[test]
    fn code_level_examples() {
        let z = grid(1, 1, 2, vec![1.0, 0.0]);
        let neg = grid(1, 1, 2, vec![0.0, 1.0]);
        let terms = code_level_loss(&z, &z, &z, &[neg.clone()], 0.1).unwrap();
        assert_eq!(terms.style, 0.0);
        assert_eq!(terms.commitment, 0.0);
        let nce = info_nce(&z, &z, &[neg.clone()], 0.1).unwrap();
        assert_eq!(terms.total(0.25), nce);
        assert_eq!(terms.total(0.0), nce);

        let z_hat = grid(1, 1, 2, vec![0.5, 2.0]);
        let z_gt = grid(1, 1, 2, vec![1.0, 1.0]);
        let terms = code_level_loss(&z, &z_hat, &z_gt, &[neg], 0.1).unwrap();
        assert_eq!(terms.commitment, (0.25 + 1.0) / 2.0);
    }

    #[test]
    fn commitment_blocks_target_gradient() {
        let mut g = Graph::new();
        let zh = g.param(Tensor::new(vec![1, 2, 1, 1], vec![0.5, 2.0]).unwrap());
        let gt = g.param(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 1.0]).unwrap());
        let l = commitment_node(&mut g, zh, gt, 0.25).unwrap();
        let grads = g.backward(l);
        assert!(grads.get(gt).is_none());
        assert_eq!(grads.get(zh).unwrap().data(), &[-0.125, 0.25]);
    }

    #[test]
    fn stage_objective_identities() {
        let w = LossWeights::default();
        assert_eq!(Stage1Terms::default().total(&w), 0.0);
        assert_eq!(Stage2Terms::default().total(&w), 0.0);
        assert_eq!(Stage3Terms::default().total(&w), 0.0);
        let t = Stage1Terms { l1: 0.5, perceptual: 0.25, adversarial: 1.5, vq: 0.125, semantic: 2.0 };
        let zero = LossWeights { lambda: 0.0, ..w };
        assert_eq!(t.total(&zero), t.l1 + t.perceptual + t.vq);
        let one = LossWeights { lambda: 0.5, ..w };
        let two = LossWeights { lambda: 1.0, ..w };
        assert_eq!(t.total(&two) - t.total(&one), 0.5 * (t.adversarial + t.semantic));
        let s2 = Stage2Terms { l1: t.l1, perceptual: t.perceptual, adversarial: t.adversarial, vq: t.vq };
        assert_eq!(s2.total(&one), t.total(&one) - 0.5 * t.semantic);
    }

    #[test]
    fn objective_node_matches_pure_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = LossWeights { lambda: 0.37, ..Default::default() };
        for _ in 0..50 {
            let t = Stage1Terms {
                l1: rng.gen(),
                perceptual: rng.gen(),
                adversarial: rng.gen_range(-2.0..2.0),
                vq: rng.gen(),
                semantic: rng.gen(),
            };
            let mut g = Graph::new();
            let v: Vec<Var> = [t.l1, t.perceptual, t.adversarial, t.vq, t.semantic]
                .iter()
                .map(|&x| g.constant(Tensor::scalar(x)))
                .collect();
            let obj = Objective::compose(
                &mut g,
                &[
                    ("l1", v[0], 1.0),
                    ("perceptual", v[1], 1.0),
                    ("adversarial", v[2], w.lambda),
                    ("vq", v[3], 1.0),
                    ("semantic", v[4], w.lambda),
                ],
            )
            .unwrap();
            let b = obj.breakdown(&g);
            assert_eq!(b.total.to_bits(), t.total(&w).to_bits());
            assert_eq!(b.terms["semantic"], t.semantic);
            assert!(b.non_finite_term().is_none());
        }
    }

    #[test]
    fn breakdown_names_non_finite_term() {
        let mut b = LossBreakdown::default();
        b.terms.insert("l1".into(), 0.1);
        b.terms.insert("perceptual".into(), f64::NAN);
        assert_eq!(b.non_finite_term().as_deref(), Some("perceptual"));
    }

    proptest! {
        #[test]
        fn style_is_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w, d) = (3, 4, 3);
            let a: Vec<Vec<f64>> = (0..h * w).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let mut perm: Vec<usize> = (0..h * w).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let b: Vec<Vec<f64>> = perm.iter().map(|&i| a[i].clone()).collect();
            let ga = LatentGrid::from_vectors(h, w, &a, LatentKind::Continuous).unwrap();
            let gb = LatentGrid::from_vectors(h, w, &b, LatentKind::Continuous).unwrap();
            prop_assert!(style_loss(&ga, &gb).unwrap().abs() < 1e-9);
        }

        #[test]
        fn losses_are_non_negative(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = (random_image(&mut rng, 4, 4), random_image(&mut rng, 4, 4));
            prop_assert!(l1_loss(&x, &y).unwrap() >= 0.0);
            prop_assert!(perceptual_loss(&x, &y, &Doubler).unwrap() >= 0.0);
            let real: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let fake: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            prop_assert!(adversarial_losses(&real, &fake).unwrap().1 >= 0.0);
            let a = grid(2, 2, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let b = grid(2, 2, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
            prop_assert!(style_loss(&a, &b).unwrap() >= 0.0);
            prop_assert!(info_nce(&a, &b, &[a.clone()], 0.1).unwrap() >= 0.0);
        }
    }
}
