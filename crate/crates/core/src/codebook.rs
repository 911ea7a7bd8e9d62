//! Single-codebook vector quantization: nearest-code lookup, the
//! straight-through composition, the VQ loss, usage histograms and code
//! visualization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::patch::ImagePatch;
use crate::tensor::Tensor;

/// One learnable `N x n_z` code table, tagged with the super-class it was
/// trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorCodebook {
    entries: Tensor,
    label: String,
}

impl VectorCodebook {
    pub fn new(entries: Tensor, label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        match entries.shape() {
            &[n, d] if n >= 1 && d >= 1 => {}
            s => return Err(Error::invalid(format!("codebook entries must be N x n_z with N, n_z >= 1, got {s:?}"))),
        }
        if !entries.is_finite() {
            return Err(Error::invalid("codebook entries must be finite"));
        }
        if label.is_empty() {
            return Err(Error::invalid("codebook label must be non-empty"));
        }
        Ok(Self { entries, label })
    }

    /// Entries drawn i.i.d. from `U(-1/N, 1/N)`.
    pub fn random(size: usize, dim: usize, label: impl Into<String>, rng: &mut impl Rng) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::invalid("codebook size and dimension must be positive"));
        }
        let bound = 1.0 / size as f64;
        let data = (0..size * dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::new(Tensor::new(vec![size, dim], data)?, label)
    }

    /// Entries fitted to `samples` (row-major vectors of length `dim`):
    /// `size` distinct samples drawn at random, refined by `iterations`
    /// Lloyd steps. Clusters that empty out keep their previous entry.
    pub fn from_samples(
        samples: &[f64],
        dim: usize,
        size: usize,
        iterations: usize,
        label: impl Into<String>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim == 0 || size == 0 || samples.is_empty() || samples.len() % dim != 0 {
            return Err(Error::invalid("codebook samples must be a non-empty multiple of the dimension"));
        }
        let n = samples.len() / dim;
        let picks: Vec<usize> = if n >= size {
            rand::seq::index::sample(rng, n, size).into_vec()
        } else {
            (0..size).map(|i| i % n).collect()
        };
        let mut data: Vec<f64> = picks.iter().flat_map(|&i| samples[i * dim..(i + 1) * dim].to_vec()).collect();
        if n < size {
            // Repeated picks would tie forever; spread them slightly.
            let scale = 1e-3 * samples.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-6);
            for v in data[n * dim..].iter_mut() {
                *v += rng.gen_range(-scale..scale);
            }
        }
        let mut cb = Self::new(Tensor::new(vec![size, dim], data)?, label)?;
        for _ in 0..iterations {
            let mut sums = vec![0.0; size * dim];
            let mut counts = vec![0usize; size];
            for v in samples.chunks(dim) {
                let k = cb.nearest(v);
                counts[k] += 1;
                for (s, x) in sums[k * dim..(k + 1) * dim].iter_mut().zip(v) {
                    *s += x;
                }
            }
            let mut next = cb.entries.data().to_vec();
            for k in 0..size {
                if counts[k] > 0 {
                    for c in 0..dim {
                        next[k * dim + c] = sums[k * dim + c] / counts[k] as f64;
                    }
                }
            }
            cb.entries = Tensor::new(vec![size, dim], next)?;
        }
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &[f64] {
        let d = self.dim();
        &self.entries.data()[index * d..(index + 1) * d]
    }

    pub(crate) fn set_entries(&mut self, entries: Tensor) {
        debug_assert_eq!(entries.shape(), self.entries.shape());
        self.entries = entries;
    }

    /// Index of the entry closest to `v` in squared Euclidean distance; the
    /// lowest index wins ties.
    pub fn nearest(&self, v: &[f64]) -> usize {
        nearest_code(self.entries.data(), self.dim(), v)
    }
}

pub(crate) fn nearest_code(entries: &[f64], dim: usize, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (c, e) in entries.chunks_exact(dim).enumerate() {
        let d: f64 = e.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_dist {
            best_dist = d;
            best = c;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentKind {
    Continuous,
    Quantized,
    Blended,
}

/// `h x w x n_z` latent feature map stored location-major: the `n_z` values
/// of one spatial location are contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
    kind: LatentKind,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>, kind: LatentKind) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::invalid("latent grid dimensions must be positive"));
        }
        if values.len() != height * width * dim {
            return Err(Error::shape("latent grid", &[height, width, dim], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent values must be finite"));
        }
        Ok(Self { height, width, dim, values, kind })
    }

    pub fn from_vectors(height: usize, width: usize, vectors: &[Vec<f64>], kind: LatentKind) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::invalid("latent vectors must share a dimension"));
        }
        Self::new(height, width, dim, vectors.concat(), kind)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.dim]
    }

    pub fn kind(&self) -> LatentKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn vector(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.dim;
        &self.values[i..i + self.dim]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn with_kind(mut self, kind: LatentKind) -> Self {
        self.kind = kind;
        self
    }

    fn same_shape(&self, other: &LatentGrid, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(context, &self.shape(), &other.shape()));
        }
        Ok(())
    }
}

/// Packs grids into a channel-major `[B, n_z, h, w]` tensor.
pub fn latents_to_tensor(grids: &[LatentGrid]) -> Result<Tensor> {
    let first = grids.first().ok_or_else(|| Error::invalid("empty latent batch"))?;
    let [h, w, d] = first.shape();
    let mut data = vec![0.0; grids.len() * d * h * w];
    for (b, g) in grids.iter().enumerate() {
        first.same_shape(g, "latent batch")?;
        for (s, v) in g.vectors().enumerate() {
            for (c, &x) in v.iter().enumerate() {
                data[(b * d + c) * h * w + s] = x;
            }
        }
    }
    Tensor::new(vec![grids.len(), d, h, w], data)
}

pub fn tensor_to_latents(t: &Tensor, kind: LatentKind) -> Result<Vec<LatentGrid>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape("latent tensor", &[0, 0, 0, 0], s));
    }
    let [b, d, h, w] = [s[0], s[1], s[2], s[3]];
    (0..b)
        .map(|n| {
            let mut values = vec![0.0; h * w * d];
            for c in 0..d {
                for sidx in 0..h * w {
                    values[sidx * d + c] = t.data()[(n * d + c) * h * w + sidx];
                }
            }
            LatentGrid::new(h, w, d, values, kind)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeIndexGrid {
    height: usize,
    width: usize,
    indices: Vec<usize>,
}

impl CodeIndexGrid {
    pub fn new(height: usize, width: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != height * width {
            return Err(Error::shape("code index grid", &[height, width], &[indices.len()]));
        }
        Ok(Self { height, width, indices })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.indices[y * self.width + x]
    }
}

pub fn quantize(latent: &LatentGrid, codebook: &VectorCodebook) -> Result<(LatentGrid, CodeIndexGrid)> {
    if latent.dim() != codebook.dim() {
        return Err(Error::shape("quantize", &[codebook.dim()], &[latent.dim()]));
    }
    let indices: Vec<usize> = latent.vectors().map(|v| codebook.nearest(v)).collect();
    let mut values = Vec::with_capacity(latent.values.len());
    for &i in &indices {
        values.extend_from_slice(codebook.entry(i));
    }
    Ok((
        LatentGrid::new(latent.height, latent.width, latent.dim, values, LatentKind::Quantized)?,
        CodeIndexGrid::new(latent.height, latent.width, indices)?,
    ))
}

/// Nearest-code indices for a channel-major `[B, n_z, h, w]` tensor, in
/// `(b, y, x)` order.
pub fn quantize_tensor(latent: &Tensor, codebook: &VectorCodebook) -> Result<Vec<usize>> {
    let s = latent.shape();
    if s.len() != 4 || s[1] != codebook.dim() {
        return Err(Error::shape("quantize", &[0, codebook.dim(), 0, 0], s));
    }
    let [b, d, h, w] = [s[0], s[1], s[2], s[3]];
    let hw = h * w;
    let mut v = vec![0.0; d];
    let mut out = Vec::with_capacity(b * hw);
    for n in 0..b {
        for sidx in 0..hw {
            for (c, slot) in v.iter_mut().enumerate() {
                *slot = latent.data()[(n * d + c) * hw + sidx];
            }
            out.push(codebook.nearest(&v));
        }
    }
    Ok(out)
}

/// Quantizes `continuous` (a graph node) against `codebook` and returns the
/// embedded codes as a node plus the chosen indices. When `codebook` is a
/// trainable node the lookup carries gradient to it.
pub(crate) fn quantize_node(
    g: &mut Graph,
    continuous: Var,
    codebook_var: Var,
    codebook: &VectorCodebook,
) -> Result<(Var, Vec<usize>)> {
    let indices = quantize_tensor(g.value(continuous), codebook)?;
    let s = g.shape(continuous).to_vec();
    let q = g.embed(codebook_var, indices.clone(), s[0], s[2], s[3])?;
    Ok((q, indices))
}

/// Forward value of the quantized grid. Downstream gradients pass to the
/// continuous grid unchanged, i.e. `continuous + sg[quantized - continuous]`;
/// see [`Graph::straight_through`] for the differentiable form.
pub fn straight_through(continuous: &LatentGrid, quantized: &LatentGrid) -> Result<LatentGrid> {
    continuous.same_shape(quantized, "straight_through")?;
    Ok(quantized.clone())
}

/// `mean((sg[z] - z_q)^2) + beta * mean((z - sg[z_q])^2)`.
pub fn vq_loss(continuous: &LatentGrid, quantized: &LatentGrid, beta: f64) -> Result<f64> {
    continuous.same_shape(quantized, "vq_loss")?;
    check_beta(beta)?;
    let mse = continuous
        .values
        .iter()
        .zip(&quantized.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / continuous.values.len() as f64;
    Ok(mse + beta * mse)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be finite and >= 0, got {beta}")));
    }
    Ok(())
}

/// Differentiable VQ loss: the codebook term sees only the quantized side,
/// the commitment term only the continuous side.
pub fn vq_loss_node(g: &mut Graph, continuous: Var, quantized: Var, beta: f64) -> Result<Var> {
    check_beta(beta)?;
    let cont_sg = g.detach(continuous);
    let quant_sg = g.detach(quantized);
    let d1 = g.sub(cont_sg, quantized)?;
    let d1 = g.square(d1);
    let codebook_term = g.mean(d1);
    let d2 = g.sub(continuous, quant_sg)?;
    let d2 = g.square(d2);
    let commit = g.mean(d2);
    let commit = g.scale(commit, beta);
    g.add(codebook_term, commit)
}

/// Histogram of code indices.
pub fn code_usage(indices: &CodeIndexGrid, n: usize) -> Result<Vec<usize>> {
    code_usage_slice(&indices.indices, n)
}

pub(crate) fn code_usage_slice(indices: &[usize], n: usize) -> Result<Vec<usize>> {
    let mut hist = vec![0usize; n];
    for &i in indices {
        *hist
            .get_mut(i)
            .ok_or_else(|| Error::invalid(format!("code index {i} out of range {n}")))? += 1;
    }
    Ok(hist)
}

/// Anything that maps a latent grid back to image space.
pub trait LatentDecoder {
    fn downsample_factor(&self) -> usize;
    fn decode_latent(&self, latent: &LatentGrid) -> Result<ImagePatch>;
}

/// Side length of the tiled latent used by [`visualize_code`].
pub const VIS_TILE: usize = 4;

/// Decodes a `4 x 4` grid filled with entry `index` and clips the result
/// to `[0, 1]`; with a factor-8 decoder this is a `32 x 32` patch.
pub fn visualize_code(codebook: &VectorCodebook, index: usize, decoder: &dyn LatentDecoder) -> Result<ImagePatch> {
    if index >= codebook.size() {
        return Err(Error::invalid(format!(
            "code index {index} out of range for codebook `{}` of size {}",
            codebook.label(),
            codebook.size()
        )));
    }
    let tile = vec![codebook.entry(index).to_vec(); VIS_TILE * VIS_TILE];
    let latent = LatentGrid::from_vectors(VIS_TILE, VIS_TILE, &tile, LatentKind::Quantized)?;
    Ok(decoder.decode_latent(&latent)?.clipped())
}
