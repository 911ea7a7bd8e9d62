//! Synthetic degradations, inpainting masks, semantic grouping of patches
//! and the procedural toy dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::{resize, ImagePatch, Mask, Resample};
use crate::tensor::Tensor;

/// Fill value for hole pixels.
pub const HOLE_FILL: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSpec {
    pub blur_sigma: f64,
    /// Downscale factor: 1, 2 or 4.
    pub scale: usize,
    pub noise_std: f64,
    pub resample: Resample,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            scale: 4,
            noise_std: 0.02,
            resample: Resample::Bicubic,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn identity() -> Self {
        Self {
            blur_sigma: 0.0,
            scale: 1,
            noise_std: 0.0,
            resample: Resample::Bicubic,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.scale) {
            return Err(Error::Config(format!("degradation scale must be 1, 2 or 4, got {}", self.scale)));
        }
        if !(self.blur_sigma >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("blur_sigma and noise_std must be non-negative".into()));
        }
        Ok(())
    }

    /// Same spec with a seed derived for the `index`-th image of a dataset.
    pub fn for_index(&self, index: usize) -> Self {
        Self {
            seed: derive_seed(self.seed, index as u64),
            ..self.clone()
        }
    }
}

pub(crate) fn derive_seed(base: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &ImagePatch, sigma: f64) -> ImagePatch {
    if sigma == 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.dims();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let horiz = ImagePatch::from_fn(h, w, |c, y, x| {
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * img.get(c, y, clamp(x as isize + t as isize - r, w)))
            .sum()
    });
    ImagePatch::from_fn(h, w, |c, y, x| {
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * horiz.get(c, clamp(y as isize + t as isize - r, h), x))
            .sum()
    })
}

/// Blur, downscale, seeded additive Gaussian noise, clip, in that order.
pub fn degrade(hr: &ImagePatch, spec: &DegradationSpec) -> Result<ImagePatch> {
    spec.validate().map_err(|e| Error::invalid(e.to_string()))?;
    let (h, w) = hr.dims();
    if h % spec.scale != 0 || w % spec.scale != 0 {
        return Err(Error::invalid(format!(
            "degrade: image {h}x{w} is not divisible by scale {}",
            spec.scale
        )));
    }
    let blurred = gaussian_blur(hr, spec.blur_sigma);
    let mut out = resize(&blurred, h / spec.scale, w / spec.scale, spec.resample)?;
    if spec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        for v in out.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out.clipped())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub num_strokes: usize,
    /// Upper bound on polyline vertices per stroke (at least 2 are drawn).
    pub max_vertices: usize,
    pub min_width: f64,
    pub max_width: f64,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            num_strokes: 4,
            max_vertices: 5,
            min_width: 4.0,
            max_width: 9.0,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_vertices < 2 {
            return Err(Error::Config("mask max_vertices must be at least 2".into()));
        }
        if !(self.min_width > 0.0) || !(self.max_width >= self.min_width) {
            return Err(Error::Config("mask stroke widths need 0 < min_width <= max_width".into()));
        }
        Ok(())
    }

    pub fn for_index(&self, index: usize) -> Self {
        Self {
            seed: derive_seed(self.seed, index as u64),
            ..self.clone()
        }
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Random thick polylines. Each stroke starts at a uniform point and takes
/// 1 to `max_vertices - 1` steps of random direction and length between a
/// tenth and a third of the longer image side.
pub fn generate_mask(spec: &MaskSpec, height: usize, width: usize) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("generate_mask: dimensions must be positive"));
    }
    spec.validate().map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = Mask::empty(height, width);
    let side = height.max(width) as f64;
    for _ in 0..spec.num_strokes {
        let vertices = rng.gen_range(2..=spec.max_vertices);
        let radius = rng.gen_range(spec.min_width..=spec.max_width) / 2.0;
        let mut p = (rng.gen_range(0.0..width as f64), rng.gen_range(0.0..height as f64));
        for _ in 1..vertices {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let len = rng.gen_range(side / 10.0..side / 3.0);
            let q = (
                (p.0 + len * angle.cos()).clamp(0.0, width as f64 - 1.0),
                (p.1 + len * angle.sin()).clamp(0.0, height as f64 - 1.0),
            );
            let x0 = (p.0.min(q.0) - radius).floor().max(0.0) as usize;
            let x1 = ((p.0.max(q.0) + radius).ceil() as usize).min(width - 1);
            let y0 = (p.1.min(q.1) - radius).floor().max(0.0) as usize;
            let y1 = ((p.1.max(q.1) + radius).ceil() as usize).min(height - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if segment_distance(x as f64 + 0.5, y as f64 + 0.5, p, q) <= radius {
                        mask.set_hole(y, x);
                    }
                }
            }
            p = q;
        }
    }
    Ok(mask)
}

/// Hole pixels become [`HOLE_FILL`]; the rest are unchanged.
pub fn apply_mask(image: &ImagePatch, mask: &Mask) -> Result<ImagePatch> {
    if image.dims() != mask.dims() {
        let (h, w) = image.dims();
        let (mh, mw) = mask.dims();
        return Err(Error::shape("apply_mask", &[h, w], &[mh, mw]));
    }
    let mut out = image.clone();
    let (h, w) = image.dims();
    for y in 0..h {
        for x in 0..w {
            if mask.is_hole(y, x) {
                for c in 0..3 {
                    out.set(c, y, x, HOLE_FILL);
                }
            }
        }
    }
    Ok(out)
}

/// `[B, 4, H, W]` inpainting encoder input: the masked image plus the hole
/// mask as a fourth channel.
pub fn inpainting_input(images: &[ImagePatch], masks: &[Mask]) -> Result<Tensor> {
    if images.len() != masks.len() || images.is_empty() {
        return Err(Error::invalid("inpainting input needs one mask per image"));
    }
    let (h, w) = images[0].dims();
    let mut data = Vec::with_capacity(images.len() * 4 * h * w);
    for (img, mask) in images.iter().zip(masks) {
        if img.dims() != (h, w) {
            return Err(Error::shape("inpainting batch", &[h, w], &[img.height(), img.width()]));
        }
        data.extend_from_slice(apply_mask(img, mask)?.data());
        data.extend(mask.as_f64());
    }
    Tensor::new(vec![images.len(), 4, h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub patch: ImagePatch,
    pub super_class: String,
}

/// Fine label to super-class mapping. Super-classes keep the order of their
/// first appearance in the mapping file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelMap {
    fine: BTreeMap<String, String>,
    order: Vec<String>,
}

impl LabelMap {
    pub fn new(pairs: &[(&str, &str)]) -> Self {
        let mut m = Self::default();
        for (f, s) in pairs {
            m.insert(f, s);
        }
        m
    }

    fn insert(&mut self, fine: &str, sup: &str) {
        if !self.order.iter().any(|s| s == sup) {
            self.order.push(sup.to_string());
        }
        self.fine.insert(fine.to_string(), sup.to_string());
    }

    /// Parses `<fine_label> <super_class>` lines; blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(f), Some(s), None) => m.insert(f, s),
                _ => return Err(Error::Format(format!("label map line {}: expected `<fine> <super>`", n + 1))),
            }
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Self::parse(&text)
    }

    pub fn super_classes(&self) -> &[String] {
        &self.order
    }

    pub fn lookup(&self, fine: &str) -> Option<&str> {
        self.fine.get(fine).map(String::as_str)
    }
}

/// Partitions patches by mapped super-class, one list per super-class in
/// map order, preserving input order inside each list.
pub fn group_patches(patches: Vec<(ImagePatch, String)>, map: &LabelMap) -> Result<Vec<Vec<LabeledPatch>>> {
    let mut groups: Vec<Vec<LabeledPatch>> = vec![Vec::new(); map.order.len()];
    for (patch, fine) in patches {
        let sup = map
            .lookup(&fine)
            .ok_or_else(|| Error::invalid(format!("label `{fine}` is not in the label map")))?;
        let k = map.order.iter().position(|s| s == sup).expect("mapped super-class is registered");
        groups[k].push(LabeledPatch {
            patch,
            super_class: sup.to_string(),
        });
    }
    Ok(groups)
}

/// Reads a `<relative_path> <fine_label>` file; paths resolve against the
/// file's directory.
pub fn load_labeled_patches(label_file: impl AsRef<Path>) -> Result<Vec<(ImagePatch, String)>> {
    let label_file = label_file.as_ref();
    let text = fs::read_to_string(label_file).map_err(|_| Error::MissingFile(label_file.to_path_buf()))?;
    let root = label_file.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(p), Some(l), None) => out.push((ImagePatch::load_png(root.join(p))?, l.to_string())),
            _ => {
                return Err(Error::Format(format!(
                    "{} line {}: expected `<path> <label>`",
                    label_file.display(),
                    n + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Texture families of the toy dataset, assigned to classes in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureFamily {
    Checker,
    Stripes,
    Gradient,
    Blobs,
    Noise,
}

const PALETTE_JITTER: f64 = 0.1;

impl TextureFamily {
    pub const ALL: [TextureFamily; 5] = [
        TextureFamily::Checker,
        TextureFamily::Stripes,
        TextureFamily::Gradient,
        TextureFamily::Blobs,
        TextureFamily::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureFamily::Checker => "checker",
            TextureFamily::Stripes => "stripes",
            TextureFamily::Gradient => "gradient",
            TextureFamily::Blobs => "blobs",
            TextureFamily::Noise => "noise",
        }
    }

    /// Two base colours per family; patches jitter around them.
    fn palette(self) -> [[f64; 3]; 2] {
        match self {
            TextureFamily::Checker => [[0.15, 0.2, 0.45], [0.9, 0.8, 0.3]],
            TextureFamily::Stripes => [[0.75, 0.2, 0.2], [0.3, 0.8, 0.85]],
            TextureFamily::Gradient => [[0.2, 0.55, 0.25], [0.85, 0.4, 0.8]],
            TextureFamily::Blobs => [[0.1, 0.1, 0.1], [0.95, 0.6, 0.2]],
            TextureFamily::Noise => [[0.5, 0.45, 0.4], [0.6, 0.6, 0.7]],
        }
    }

    pub fn render(self, size: usize, rng: &mut ChaCha8Rng) -> ImagePatch {
        let [pa, pb] = self.palette();
        let mut jitter = |base: [f64; 3]| base.map(|v| (v + rng.gen_range(-PALETTE_JITTER..PALETTE_JITTER)).clamp(0.0, 1.0));
        let (a, b) = (jitter(pa), jitter(pb));
        let mix = |c: usize, t: f64| a[c] * (1.0 - t) + b[c] * t;
        match self {
            TextureFamily::Checker => {
                let cell = rng.gen_range(3..=6) as usize;
                let (oy, ox) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
                ImagePatch::from_fn(size, size, |c, y, x| {
                    mix(c, (((y + oy) / cell + (x + ox) / cell) % 2) as f64)
                })
            }
            TextureFamily::Stripes => {
                let period = rng.gen_range(4.0..8.0);
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let (s, co) = angle.sin_cos();
                ImagePatch::from_fn(size, size, |c, y, x| {
                    let u = x as f64 * co + y as f64 * s;
                    mix(c, 0.5 + 0.5 * (std::f64::consts::TAU * u / period + phase).sin())
                })
            }
            TextureFamily::Gradient => {
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (s, co) = angle.sin_cos();
                let half = (size as f64 - 1.0) / 2.0;
                ImagePatch::from_fn(size, size, |c, y, x| {
                    let u = ((x as f64 - half) * co + (y as f64 - half) * s) / (size as f64 * 0.71);
                    mix(c, (u + 0.5).clamp(0.0, 1.0))
                })
            }
            TextureFamily::Blobs => {
                let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(2..=4))
                    .map(|_| {
                        let r = rng.gen_range(0.12..0.25) * size as f64;
                        (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64), r, rng.gen_range(0.5..1.0))
                    })
                    .collect();
                ImagePatch::from_fn(size, size, |c, y, x| {
                    let t: f64 = blobs
                        .iter()
                        .map(|&(by, bx, r, amp)| {
                            let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                            amp * (-d2 / (2.0 * r * r)).exp()
                        })
                        .sum();
                    mix(c, t.min(1.0))
                })
            }
            TextureFamily::Noise => {
                let amp = rng.gen_range(0.15..0.3);
                let field: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
                ImagePatch::from_fn(size, size, |c, y, x| {
                    (a[c] + amp * field[y * size + x]).clamp(0.0, 1.0)
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    /// Number of super-classes `K`; families repeat past five.
    pub classes: usize,
    pub patches_per_class: usize,
    pub patch_size: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            classes: 5,
            patches_per_class: 100,
            patch_size: 64,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("toy dataset needs at least one class".into()));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("toy patch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn class_label(k: usize) -> String {
        let family = TextureFamily::ALL[k % TextureFamily::ALL.len()].name();
        match k / TextureFamily::ALL.len() {
            0 => family.to_string(),
            n => format!("{family}{n}"),
        }
    }
}

/// One procedural texture family per class; patch `i` of class `k` draws from
/// its own seed, so the dataset is deterministic per `seed`.
pub fn synthesize_toy_dataset(spec: &ToySpec, seed: u64) -> Result<Vec<Vec<LabeledPatch>>> {
    spec.validate()?;
    Ok((0..spec.classes)
        .map(|k| {
            let family = TextureFamily::ALL[k % TextureFamily::ALL.len()];
            let label = ToySpec::class_label(k);
            (0..spec.patches_per_class)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (k * 1_000_003 + i) as u64));
                    LabeledPatch {
                        patch: family.render(spec.patch_size, &mut rng),
                        super_class: label.clone(),
                    }
                })
                .collect()
        })
        .collect())
}

/// Writes one subdirectory per class plus `labels.txt` and `mapping.txt`
/// (identity mapping from class name to itself).
pub fn write_dataset(dir: impl AsRef<Path>, classes: &[Vec<LabeledPatch>]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut labels = String::new();
    let mut mapping = String::new();
    let mut class_dirs = Vec::new();
    for (k, patches) in classes.iter().enumerate() {
        let name = patches
            .first()
            .map(|p| p.super_class.clone())
            .unwrap_or_else(|| ToySpec::class_label(k));
        let sub = dir.join(&name);
        fs::create_dir_all(&sub)?;
        for (i, p) in patches.iter().enumerate() {
            let rel = format!("{name}/{i:05}.png");
            p.patch.save_png(dir.join(&rel))?;
            labels.push_str(&format!("{rel} {name}\n"));
        }
        mapping.push_str(&format!("{name} {name}\n"));
        class_dirs.push(sub);
    }
    fs::write(dir.join("labels.txt"), labels)?;
    fs::write(dir.join("mapping.txt"), mapping)?;
    Ok(class_dirs)
}

/// Every `.png` in `dir`, in file-name order.
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, ImagePatch)>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let img = ImagePatch::load_png(&p)?;
            Ok((p, img))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn noise(seed: u64, h: usize, w: usize) -> ImagePatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePatch::new(h, w, (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn degrade_examples() {
        let img = noise(0, 16, 16);
        assert_eq!(degrade(&img, &DegradationSpec::identity()).unwrap(), img);
        let spec = DegradationSpec::default();
        assert_eq!(degrade(&noise(1, 64, 64), &spec).unwrap().dims(), (16, 16));
        let a = degrade(&img, &spec).unwrap();
        assert_eq!(a, degrade(&img, &spec).unwrap());
        let other = DegradationSpec { seed: 1, ..spec.clone() };
        assert_ne!(a, degrade(&img, &other).unwrap());
        assert!(degrade(&noise(2, 18, 16), &spec).is_err());
        assert!(degrade(&img, &DegradationSpec { scale: 3, ..spec }).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let img = ImagePatch::filled(9, 7, 0.3);
        let b = gaussian_blur(&img, 1.5);
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn mask_examples() {
        let none = MaskSpec { num_strokes: 0, ..Default::default() };
        assert_eq!(generate_mask(&none, 32, 32).unwrap().coverage(), 0.0);
        let spec = MaskSpec::default();
        assert_eq!(generate_mask(&spec, 32, 48).unwrap(), generate_mask(&spec, 32, 48).unwrap());
        assert!(generate_mask(&spec, 0, 8).is_err());
        let bad = MaskSpec { max_vertices: 1, ..Default::default() };
        assert!(generate_mask(&bad, 8, 8).is_err());
    }

    #[test]
    fn default_mask_coverage_is_moderate() {
        for seed in 0..100 {
            let spec = MaskSpec { seed, ..Default::default() };
            let c = generate_mask(&spec, 64, 64).unwrap().coverage();
            assert!(c > 0.05 && c < 0.5, "seed {seed}: coverage {c}");
        }
    }

    #[test]
    fn apply_mask_examples() {
        let img = noise(3, 8, 8);
        assert_eq!(apply_mask(&img, &Mask::empty(8, 8)).unwrap(), img);
        assert_eq!(apply_mask(&img, &Mask::full(8, 8)).unwrap(), ImagePatch::filled(8, 8, HOLE_FILL));
        let m = generate_mask(&MaskSpec::default(), 8, 8).unwrap();
        let once = apply_mask(&img, &m).unwrap();
        assert_eq!(apply_mask(&once, &m).unwrap(), once);
        assert!(apply_mask(&img, &Mask::empty(8, 4)).is_err());
        let t = inpainting_input(&[img], &[Mask::full(8, 8)]).unwrap();
        assert_eq!(t.shape(), &[1, 4, 8, 8]);
        assert!(t.data()[3 * 64..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grouping_examples() {
        let map = LabelMap::parse("a X\n# comment\nb Y\n").unwrap();
        let p = ImagePatch::filled(2, 2, 0.0);
        let groups = group_patches(
            vec![(p.clone(), "a".into()), (p.clone(), "b".into()), (p.clone(), "a".into())],
            &map,
        )
        .unwrap();
        assert_eq!(groups.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 1]);
        assert_eq!(groups[0][0].super_class, "X");
        let empty = group_patches(vec![], &map).unwrap();
        assert_eq!(empty.len(), 2);
        assert!(empty.iter().all(Vec::is_empty));
        let err = group_patches(vec![(p, "c".into())], &map).unwrap_err();
        assert!(err.to_string().contains("`c`"));
        assert!(LabelMap::parse("a b c").is_err());
    }

    #[test]
    fn toy_dataset_contract() {
        let spec = ToySpec { classes: 2, patches_per_class: 100, patch_size: 16 };
        let data = synthesize_toy_dataset(&spec, 7).unwrap();
        assert_eq!(data.len(), 2);
        assert!(data.iter().all(|c| c.len() == 100));
        assert_eq!(data[1][0].super_class, "stripes");
        assert_eq!(data, synthesize_toy_dataset(&spec, 7).unwrap());
        assert!(synthesize_toy_dataset(&ToySpec { classes: 0, ..spec }, 7).is_err());
        assert_eq!(ToySpec::class_label(6), "stripes1");
    }

    fn texture_stats(p: &ImagePatch) -> [f64; 3] {
        let l = p.luma();
        let (h, w) = p.dims();
        let mean = l.iter().sum::<f64>() / l.len() as f64;
        let std = (l.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / l.len() as f64).sqrt();
        let mut dx = 0.0;
        let mut lap = 0.0;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let c = l[y * w + x];
                dx += (l[y * w + x + 1] - c).abs() + (l[(y + 1) * w + x] - c).abs();
                lap += (4.0 * c - l[y * w + x - 1] - l[y * w + x + 1] - l[(y - 1) * w + x] - l[(y + 1) * w + x]).abs();
            }
        }
        let n = ((h - 2) * (w - 2)) as f64;
        [std, dx / n, lap / n]
    }

    #[test]
    fn classes_are_statistically_distinct() {
        let spec = ToySpec { classes: 5, patches_per_class: 20, patch_size: 32 };
        let data = synthesize_toy_dataset(&spec, 3).unwrap();
        let stats: Vec<Vec<[f64; 3]>> = data
            .iter()
            .map(|c| c.iter().map(|p| texture_stats(&p.patch)).collect())
            .collect();
        let dist = |a: &[f64; 3], b: &[f64; 3]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for (k, ck) in stats.iter().enumerate() {
            for (j, cj) in stats.iter().enumerate() {
                for a in ck {
                    for b in cj {
                        if k == j {
                            intra += dist(a, b);
                            ni += 1;
                        } else {
                            inter += dist(a, b);
                            nx += 1;
                        }
                    }
                }
            }
        }
        assert!(inter / nx as f64 > intra / ni as f64);
    }

    #[test]
    fn dataset_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec { classes: 2, patches_per_class: 3, patch_size: 8 };
        let data = synthesize_toy_dataset(&spec, 1).unwrap();
        let dirs = write_dataset(dir.path(), &data).unwrap();
        assert_eq!(dirs.len(), 2);
        assert_eq!(load_image_dir(&dirs[0]).unwrap().len(), 3);
        let labeled = load_labeled_patches(dir.path().join("labels.txt")).unwrap();
        let map = LabelMap::load(dir.path().join("mapping.txt")).unwrap();
        let groups = group_patches(labeled, &map).unwrap();
        assert_eq!(groups.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3]);
    }

    proptest! {
        #[test]
        fn degrade_stays_in_unit_range(seed in 0u64..1000, sigma in 0.0f64..2.0, noise_std in 0.0f64..0.5) {
            let spec = DegradationSpec { blur_sigma: sigma, scale: 2, noise_std, resample: Resample::Bicubic, seed };
            let out = degrade(&noise(seed, 8, 8), &spec).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
