//! Multi-codebook quantization and per-location blending of the quantized
//! grids with a predicted weight map.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{
    latents_to_tensor, quantize, tensor_to_latents, CodeIndexGrid, LatentGrid, LatentKind,
    VectorCodebook,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{conv, init_conv, Bound, ParamSet};
use crate::patch::save_gray_png;
use crate::tensor::Tensor;

/// The `K` class-specific codebooks, in blending order.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet {
    codebooks: Vec<VectorCodebook>,
}

impl BasisSet {
    pub fn new(codebooks: Vec<VectorCodebook>) -> Result<Self> {
        let first = codebooks
            .first()
            .ok_or_else(|| Error::invalid("a basis set needs at least one codebook"))?;
        for (i, cb) in codebooks.iter().enumerate() {
            if cb.dim() != first.dim() {
                return Err(Error::invalid(format!(
                    "codebook `{}` has n_z = {}, expected {}",
                    cb.label(),
                    cb.dim(),
                    first.dim()
                )));
            }
            if codebooks[..i].iter().any(|o| o.label() == cb.label()) {
                return Err(Error::invalid(format!("duplicate codebook label `{}`", cb.label())));
            }
        }
        Ok(Self { codebooks })
    }

    pub fn len(&self) -> usize {
        self.codebooks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codebooks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.codebooks[0].dim()
    }

    pub fn codebooks(&self) -> &[VectorCodebook] {
        &self.codebooks
    }

    pub fn get(&self, label: &str) -> Option<&VectorCodebook> {
        self.codebooks.iter().find(|c| c.label() == label)
    }

    pub fn labels(&self) -> Vec<String> {
        self.codebooks.iter().map(|c| c.label().to_string()).collect()
    }

    /// Keeps only the codebooks named in `labels`, in the given order.
    pub fn subset(&self, labels: &[String]) -> Result<Self> {
        let picked = labels
            .iter()
            .map(|l| {
                self.get(l).cloned().ok_or_else(|| {
                    Error::invalid(format!("unknown basis `{l}`; available: {}", self.labels().join(", ")))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(picked)
    }

    /// One codebook holding every entry of every basis, in basis order.
    pub fn merged(&self, label: impl Into<String>) -> Result<VectorCodebook> {
        let dim = self.dim();
        let total: usize = self.codebooks.iter().map(VectorCodebook::size).sum();
        let data = self
            .codebooks
            .iter()
            .flat_map(|c| c.entries().data().iter().copied())
            .collect();
        VectorCodebook::new(Tensor::new(vec![total, dim], data)?, label)
    }
}

/// `h x w x K` blending weights, location-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    height: usize,
    width: usize,
    k: usize,
    weights: Vec<f64>,
}

impl WeightMap {
    /// Validates non-negativity and per-location unit sums (within `1e-6`).
    pub fn new(height: usize, width: usize, k: usize, weights: Vec<f64>) -> Result<Self> {
        let map = Self::raw(height, width, k, weights)?;
        for (i, w) in map.weights.chunks_exact(k).enumerate() {
            let sum: f64 = w.iter().sum();
            if w.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "weights at location {i} must be non-negative and sum to 1, got {w:?}"
                )));
            }
        }
        Ok(map)
    }

    /// Unnormalized weights, used to probe linearity of [`combine`].
    pub fn raw(height: usize, width: usize, k: usize, weights: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || k == 0 {
            return Err(Error::invalid("weight map dimensions must be positive"));
        }
        if weights.len() != height * width * k {
            return Err(Error::shape("weight map", &[height, width, k], &[weights.len()]));
        }
        Ok(Self { height, width, k, weights })
    }

    /// Every location selects basis `index` exclusively.
    pub fn one_hot(height: usize, width: usize, k: usize, index: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::invalid(format!("one-hot index {index} out of range {k}")));
        }
        let mut w = vec![0.0; height * width * k];
        w.iter_mut().skip(index).step_by(k).for_each(|v| *v = 1.0);
        Self::new(height, width, k, w)
    }

    pub fn uniform(height: usize, width: usize, k: usize) -> Result<Self> {
        Self::new(height, width, k, vec![1.0 / k as f64; height * width * k])
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.k]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.k;
        &self.weights[i..i + self.k]
    }

    /// Channel `k` as an `h x w` plane.
    pub fn channel(&self, k: usize) -> Vec<f64> {
        self.weights.iter().skip(k).step_by(self.k).copied().collect()
    }

    /// Channel-major `[1, K, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.weights.len());
        for k in 0..self.k {
            data.extend(self.channel(k));
        }
        Tensor::from_parts(vec![1, self.k, self.height, self.width], data)
    }

    pub(crate) fn from_tensor(t: &Tensor, batch_index: usize) -> Result<Self> {
        let [_, k, h, w] = t.dims4();
        let hw = h * w;
        let base = batch_index * k * hw;
        let mut weights = vec![0.0; hw * k];
        for c in 0..k {
            for s in 0..hw {
                weights[s * k + c] = t.data()[base + c * hw + s];
            }
        }
        Self::new(h, w, k, weights)
    }

    /// Writes one grayscale PNG per basis (`<stem>_<k>.png`), values in `[0, 1]`.
    pub fn save_pngs(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
        (0..self.k)
            .map(|k| {
                let path = dir.as_ref().join(format!("{stem}_{k}.png"));
                save_gray_png(&self.channel(k), self.height, self.width, &path)?;
                Ok(path)
            })
            .collect()
    }
}

/// Quantizes `latent` against every basis, preserving basis order.
pub fn quantize_all(latent: &LatentGrid, basis: &BasisSet) -> Result<Vec<(LatentGrid, CodeIndexGrid)>> {
    basis.codebooks.iter().map(|cb| quantize(latent, cb)).collect()
}

/// Per-location weighted sum `z = sum_k w_k * z_qk`.
pub fn combine(quantized: &[LatentGrid], weights: &WeightMap) -> Result<LatentGrid> {
    let first = quantized
        .first()
        .ok_or_else(|| Error::invalid("combine needs at least one quantized grid"))?;
    let [h, w, _] = first.shape();
    if weights.shape() != [h, w, quantized.len()] {
        return Err(Error::shape("combine weights", &[h, w, quantized.len()], &weights.shape()));
    }
    let mut g = Graph::new();
    let items = quantized
        .iter()
        .map(|q| {
            if q.shape() != first.shape() {
                return Err(Error::shape("combine", &first.shape(), &q.shape()));
            }
            Ok(g.constant(latents_to_tensor(std::slice::from_ref(q))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let wv = g.constant(weights.to_tensor());
    let z = g.weighted_sum(wv, &items)?;
    Ok(tensor_to_latents(g.value(z), LatentKind::Blended)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    /// Number of residual attention blocks.
    pub blocks: usize,
    /// Side of the square attention window; falls back to global attention
    /// when the grid is not divisible by it.
    pub window: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            blocks: 4,
            window: 4,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.window == 0 {
            return Err(Error::Config("predictor embed_dim and window must be positive".into()));
        }
        Ok(())
    }
}

/// Weight predictor: 1x1 embedding, a stack of residual blocks (windowed
/// self-attention, pointwise MLP, 3x3 conv, each with a skip connection), and
/// a 1x1 head to `K` channels followed by a softmax over the channels.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightPredictor {
    pub config: PredictorConfig,
    pub latent_dim: usize,
    pub num_bases: usize,
    pub params: ParamSet,
}

impl WeightPredictor {
    pub fn init(config: &PredictorConfig, latent_dim: usize, num_bases: usize, rng: &mut ChaCha8Rng) -> Self {
        let e = config.embed_dim;
        let mut ps = ParamSet::new();
        init_conv(&mut ps, rng, "embed", latent_dim, e, 1);
        for b in 0..config.blocks {
            for part in ["q", "k", "v", "attn_out"] {
                init_conv(&mut ps, rng, &format!("block.{b}.{part}"), e, e, 1);
            }
            init_conv(&mut ps, rng, &format!("block.{b}.mlp1"), e, 2 * e, 1);
            init_conv(&mut ps, rng, &format!("block.{b}.mlp2"), 2 * e, e, 1);
            init_conv(&mut ps, rng, &format!("block.{b}.conv"), e, e, 3);
        }
        init_conv(&mut ps, rng, "head", e, num_bases, 1);
        Self {
            config: config.clone(),
            latent_dim,
            num_bases,
            params: ps,
        }
    }

    /// `[B, n_z, h, w]` to normalized weights `[B, K, h, w]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, latent: Var) -> Result<Var> {
        let s = g.shape(latent).to_vec();
        if s.len() != 4 || s[1] != self.latent_dim {
            return Err(Error::shape("predict_weights", &[0, self.latent_dim, 0, 0], &s));
        }
        let mut x = conv(g, p, "embed", latent, 1)?;
        for b in 0..self.config.blocks {
            let block_in = x;
            let a = self.window_attention(g, p, b, x)?;
            x = g.add(x, a)?;
            let m = conv(g, p, &format!("block.{b}.mlp1"), x, 1)?;
            let m = g.silu(m);
            let m = conv(g, p, &format!("block.{b}.mlp2"), m, 1)?;
            x = g.add(x, m)?;
            let c = conv(g, p, &format!("block.{b}.conv"), x, 1)?;
            x = g.add(block_in, c)?;
        }
        let logits = conv(g, p, "head", x, 1)?;
        let nhwc = g.permute(logits, &[0, 2, 3, 1]);
        let soft = g.softmax_last(nhwc);
        Ok(g.permute(soft, &[0, 3, 1, 2]))
    }

    fn window_attention(&self, g: &mut Graph, p: &Bound, block: usize, x: Var) -> Result<Var> {
        let [b, e, h, w] = {
            let s = g.shape(x);
            [s[0], s[1], s[2], s[3]]
        };
        let ws = self.config.window;
        let (wy, wx) = if h % ws == 0 && w % ws == 0 { (ws, ws) } else { (h, w) };
        let (ny, nx) = (h / wy, w / wx);
        let tokens = wy * wx;
        let split = |g: &mut Graph, name: &str| -> Result<Var> {
            let t = conv(g, p, &format!("block.{block}.{name}"), x, 1)?;
            let t = g.reshape(t, &[b, e, ny, wy, nx, wx])?;
            let t = g.permute(t, &[0, 2, 4, 3, 5, 1]);
            g.reshape(t, &[b * ny * nx, tokens, e])
        };
        let q = split(g, "q")?;
        let k = split(g, "k")?;
        let v = split(g, "v")?;
        let scores = g.matmul(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (e as f64).sqrt());
        let attn = g.softmax_last(scores);
        let out = g.matmul(attn, v, false, false)?;
        let out = g.reshape(out, &[b, ny, nx, wy, wx, e])?;
        let out = g.permute(out, &[0, 5, 1, 3, 2, 4]);
        let out = g.reshape(out, &[b, e, h, w])?;
        conv(g, p, &format!("block.{block}.attn_out"), out, 1)
    }

    pub fn predict_weights(&self, latent: &LatentGrid) -> Result<WeightMap> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(latents_to_tensor(std::slice::from_ref(latent))?);
        let w = self.forward(&mut g, &p, z)?;
        WeightMap::from_tensor(g.value(w), 0)
    }
}

/// Quantizes a `[B, n_z, h, w]` node against every basis (codebooks as
/// constants) and applies the straight-through composition to each.
#[cfg(test)]
pub(crate) fn quantize_all_node(g: &mut Graph, continuous: Var, basis: &BasisSet) -> Result<Vec<Var>> {
    let s = g.shape(continuous).to_vec();
    basis
        .codebooks()
        .iter()
        .map(|cb| {
            let idx = crate::codebook::quantize_tensor(g.value(continuous), cb)?;
            let cbv = g.constant(cb.entries().clone());
            let q = g.embed(cbv, idx, s[0], s[2], s[3])?;
            g.straight_through(continuous, q)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::quantize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> LatentGrid {
        let v = (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        LatentGrid::new(h, w, d, v, LatentKind::Continuous).unwrap()
    }

    fn basis(rng: &mut ChaCha8Rng, k: usize, n: usize, d: usize) -> BasisSet {
        BasisSet::new(
            (0..k)
                .map(|i| VectorCodebook::random(n, d, format!("c{i}"), rng).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn basis_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = VectorCodebook::random(4, 3, "a", &mut rng).unwrap();
        let b = VectorCodebook::random(4, 2, "b", &mut rng).unwrap();
        assert!(BasisSet::new(vec![]).is_err());
        assert!(BasisSet::new(vec![a.clone(), b]).is_err());
        assert!(BasisSet::new(vec![a.clone(), a.clone()]).is_err());
        let set = basis(&mut rng, 3, 5, 2);
        assert_eq!(set.merged("all").unwrap().size(), 15);
        assert_eq!(set.subset(&["c2".into()]).unwrap().labels(), vec!["c2"]);
        assert!(set.subset(&["nope".into()]).is_err());
    }

    #[test]
    fn quantize_all_matches_single_codebook() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_grid(&mut rng, 3, 3, 4);
        let one = basis(&mut rng, 1, 8, 4);
        let all = quantize_all(&z, &one).unwrap();
        assert_eq!(all, vec![quantize(&z, &one.codebooks()[0]).unwrap()]);

        let cb = VectorCodebook::random(8, 4, "x", &mut rng).unwrap();
        let mut twin = cb.clone();
        twin = VectorCodebook::new(twin.entries().clone(), "y").unwrap();
        let twins = BasisSet::new(vec![cb, twin]).unwrap();
        let out = quantize_all(&z, &twins).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn combine_examples() {
        let a = LatentGrid::new(1, 1, 2, vec![1.0, 0.0], LatentKind::Quantized).unwrap();
        let b = LatentGrid::new(1, 1, 2, vec![0.0, 1.0], LatentKind::Quantized).unwrap();
        let w = WeightMap::new(1, 1, 2, vec![0.3, 0.7]).unwrap();
        let z = combine(&[a.clone(), b.clone()], &w).unwrap();
        assert_eq!(z.values(), &[0.3, 0.7]);
        assert_eq!(z.kind(), LatentKind::Blended);

        let z = combine(&[a.clone(), b.clone()], &WeightMap::one_hot(1, 1, 2, 1).unwrap()).unwrap();
        assert_eq!(z.values(), b.values());

        let same = combine(&[a.clone(), a.clone(), a.clone()], &WeightMap::new(1, 1, 3, vec![0.2, 0.5, 0.3]).unwrap()).unwrap();
        for (x, y) in same.values().iter().zip(a.values()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(combine(&[a.clone(), b], &WeightMap::uniform(1, 1, 3).unwrap()).is_err());
    }

    #[test]
    fn weight_map_validation() {
        assert!(WeightMap::new(1, 1, 2, vec![0.5, 0.6]).is_err());
        assert!(WeightMap::new(1, 1, 2, vec![-0.1, 1.1]).is_err());
        assert!(WeightMap::one_hot(2, 2, 2, 2).is_err());
    }

    fn predictor(k: usize) -> WeightPredictor {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = PredictorConfig { embed_dim: 8, blocks: 4, window: 2 };
        WeightPredictor::init(&cfg, 4, k, &mut rng)
    }

    #[test]
    fn single_basis_weights_are_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = predictor(1).predict_weights(&random_grid(&mut rng, 4, 4, 4)).unwrap();
        assert!(w.weights().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn predicted_weights_are_normalized_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_grid(&mut rng, 4, 6, 4);
        let w = predictor(3).predict_weights(&z).unwrap();
        assert_eq!(w.shape(), [4, 6, 3]);
        for y in 0..4 {
            for x in 0..6 {
                let px = w.at(y, x);
                assert!(px.iter().all(|&v| v >= 0.0));
                assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let again = predictor(3).predict_weights(&z).unwrap();
        assert_eq!(
            w.weights().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.weights().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let bad = random_grid(&mut rng, 4, 4, 5);
        assert!(predictor(3).predict_weights(&bad).is_err());
    }

    #[test]
    fn predictor_parameters_receive_gradient_through_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let basis = basis(&mut rng, 3, 6, 4);
        let pred = predictor(3);
        let z = random_grid(&mut rng, 4, 4, 4);
        let mut g = Graph::new();
        let p = pred.params.bind(&mut g, true);
        let zt = g.param(latents_to_tensor(&[z]).unwrap());
        let qs = quantize_all_node(&mut g, zt, &basis).unwrap();
        let w = pred.forward(&mut g, &p, zt).unwrap();
        let blended = g.weighted_sum(w, &qs).unwrap();
        let sq = g.square(blended);
        let loss = g.mean(sq);
        let grads = g.backward(loss);
        for (name, var) in p.iter() {
            let gsum: f64 = grads.get(*var).map_or(0.0, |t| t.data().iter().map(|v| v.abs()).sum());
            assert!(gsum > 0.0, "no gradient reached {name}");
        }
    }

    #[test]
    fn weight_map_png_export() {
        let dir = tempfile::tempdir().unwrap();
        let w = WeightMap::new(2, 2, 2, vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0, 0.25, 0.75]).unwrap();
        let paths = w.save_pngs(dir.path(), "w").unwrap();
        assert_eq!(paths.len(), 2);
        let img = image::open(&paths[0]).unwrap().to_luma8();
        assert_eq!(img.get_pixel(0, 0)[0], 255);
        assert_eq!(img.get_pixel(1, 1)[0], 64);
    }

    proptest! {
        #[test]
        fn combine_stays_in_convex_hull(seed in 0u64..5000, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grids: Vec<LatentGrid> = (0..k).map(|_| random_grid(&mut rng, 2, 3, 3)).collect();
            let mut raw: Vec<f64> = (0..6 * k).map(|_| rng.gen_range(0.0..1.0)).collect();
            for chunk in raw.chunks_mut(k) {
                let s: f64 = chunk.iter().sum();
                chunk.iter_mut().for_each(|v| *v /= s);
            }
            let w = WeightMap::new(2, 3, k, raw).unwrap();
            let z = combine(&grids, &w).unwrap();
            for y in 0..2 {
                for x in 0..3 {
                    for c in 0..3 {
                        let vals: Vec<f64> = grids.iter().map(|g| g.vector(y, x)[c]).collect();
                        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let v = z.vector(y, x)[c];
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn combine_is_linear_in_raw_weights(seed in 0u64..5000, alpha in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grids: Vec<LatentGrid> = (0..3).map(|_| random_grid(&mut rng, 2, 2, 2)).collect();
            let w1: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w2: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let z = combine(&grids, &WeightMap::raw(2, 2, 3, mix).unwrap()).unwrap();
            let z1 = combine(&grids, &WeightMap::raw(2, 2, 3, w1).unwrap()).unwrap();
            let z2 = combine(&grids, &WeightMap::raw(2, 2, 3, w2).unwrap()).unwrap();
            for ((a, b), c) in z.values().iter().zip(z1.values()).zip(z2.values()) {
                prop_assert!((a - (alpha * b + (1.0 - alpha) * c)).abs() < 1e-12);
            }
        }
    }
}
