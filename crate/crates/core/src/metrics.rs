//! PSNR, SSIM and per-task evaluation reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::degradation::{DegradationSpec, MaskSpec};
use crate::error::{Error, Result};
use crate::patch::ImagePatch;
use crate::training::{make_pairs, naive_restore, Pipeline, Task};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_dims(a: &ImagePatch, b: &ImagePatch, what: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(what, &[a.height(), a.width()], &[b.height(), b.width()]));
    }
    Ok(())
}

pub fn mse(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    same_dims(a, b, "mse")?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)` over all RGB values, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    let m = mse(a, b)?;
    if !m.is_finite() {
        return Err(Error::invalid("psnr of non-finite images"));
    }
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean local SSIM of the BT.601 luma planes, using an 11x11 Gaussian
/// window (sigma 1.5) at every fully contained position.
pub fn ssim(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    same_dims(a, b, "ssim")?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let (x, y) = (a.luma(), b.luma());
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let mxx = filter_valid(&prod(&x, &x), h, w, &k);
    let myy = filter_valid(&prod(&y, &y), h, w, &k);
    let mxy = filter_valid(&prod(&x, &y), h, w, &k);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// One evaluated image. `extra` holds optional plug-in metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the naive baseline (bicubic upsampling or the masked input).
    pub baseline_psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

/// Means over all rows; absent when there are none.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_baseline_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub checkpoint_stage: u8,
    /// Path of the config snapshot the run was made with, if any.
    pub config_snapshot: Option<String>,
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn new(task: Task, checkpoint_stage: u8, rows: Vec<EvalRow>) -> Self {
        let summary = EvalSummary {
            count: rows.len(),
            mean_psnr: mean(rows.iter().map(|r| r.psnr)),
            mean_ssim: mean(rows.iter().map(|r| r.ssim)),
            mean_baseline_psnr: if rows.iter().all(|r| r.baseline_psnr.is_some()) {
                mean(rows.iter().filter_map(|r| r.baseline_psnr))
            } else {
                None
            },
        };
        Self {
            task,
            checkpoint_stage,
            config_snapshot: None,
            rows,
            summary,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Tab-separated rows followed by a summary block.
    pub fn to_text(&self) -> String {
        let mut s = format!("# task {} stage {}\nname\tpsnr\tssim\tbaseline_psnr\n", self.task.name(), self.checkpoint_stage);
        for r in &self.rows {
            let base = r.baseline_psnr.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            s += &format!("{}\t{:.4}\t{:.4}\t{}\n", r.name, r.psnr, r.ssim, base);
        }
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        s += &format!(
            "# summary\ncount\t{}\nmean_psnr\t{}\nmean_ssim\t{}\nmean_baseline_psnr\t{}\n",
            self.summary.count,
            opt(self.summary.mean_psnr),
            opt(self.summary.mean_ssim),
            opt(self.summary.mean_baseline_psnr)
        );
        s
    }

    /// Writes `report.json` and `report.tsv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        fs::write(dir.join("report.tsv"), self.to_text())?;
        Ok(())
    }
}

/// Restored images alongside the report, for comparison grids.
#[derive(Clone, Debug)]
pub struct EvalOutputs {
    pub report: EvalReport,
    /// `(name, naive baseline, restored, ground truth)` per image.
    pub images: Vec<(String, ImagePatch, ImagePatch, ImagePatch)>,
}

fn expected_stage(task: Task) -> u8 {
    match task {
        Task::Reconstruction => 2,
        _ => 3,
    }
}

/// Runs the frozen pipeline of `ckpt` over `dataset` (named ground-truth
/// images) and scores the clipped outputs. SR inputs and inpainting masks
/// are derived from `degradation` and `mask` per image index.
pub fn evaluate_with_outputs(
    task: Task,
    ckpt: &Checkpoint,
    dataset: &[(String, ImagePatch)],
    degradation: &DegradationSpec,
    mask: &MaskSpec,
) -> Result<EvalOutputs> {
    let want = expected_stage(task);
    if ckpt.stage != want {
        return Err(Error::invalid(format!(
            "task {} needs a stage {want} checkpoint, got stage {}",
            task.name(),
            ckpt.stage
        )));
    }
    if want == 3 && ckpt.config.task != task {
        return Err(Error::invalid(format!(
            "checkpoint was trained for {}, not {}",
            ckpt.config.task.name(),
            task.name()
        )));
    }
    degradation.validate()?;
    let mut pipe = Pipeline::from_checkpoint(ckpt)?;
    pipe.scale = degradation.scale;
    let hrs: Vec<ImagePatch> = dataset.iter().map(|(_, p)| p.clone()).collect();
    let pairs = make_pairs(&hrs, task, degradation, mask)?;
    let mut rows = Vec::with_capacity(pairs.len());
    let mut images = Vec::with_capacity(pairs.len());
    for ((name, _), pair) in dataset.iter().zip(&pairs) {
        let restored = pipe.run(&pair.input, pair.mask.as_ref())?.output.clipped();
        if restored.dims() != pair.hr.dims() {
            return Err(Error::shape(
                "restored image",
                &[pair.hr.height(), pair.hr.width()],
                &[restored.height(), restored.width()],
            ));
        }
        let (baseline, baseline_psnr) = match task {
            Task::Reconstruction => (pair.input.clone(), None),
            _ => {
                let b = naive_restore(task, &pair.input, degradation.scale)?.clipped();
                let p = psnr(&b, &pair.hr)?;
                (b, Some(p))
            }
        };
        rows.push(EvalRow {
            name: name.clone(),
            psnr: psnr(&restored, &pair.hr)?,
            ssim: ssim(&restored, &pair.hr)?,
            baseline_psnr,
            extra: BTreeMap::new(),
        });
        images.push((name.clone(), baseline, restored, pair.hr.clone()));
    }
    Ok(EvalOutputs {
        report: EvalReport::new(task, ckpt.stage, rows),
        images,
    })
}

pub fn evaluate(
    task: Task,
    ckpt: &Checkpoint,
    dataset: &[(String, ImagePatch)],
    degradation: &DegradationSpec,
    mask: &MaskSpec,
) -> Result<EvalReport> {
    evaluate_with_outputs(task, ckpt, dataset, degradation, mask).map(|o| o.report)
}

/// Lays equally sized tiles out left to right, `columns` per row, separated
/// by `gap` white pixels.
pub fn image_grid(tiles: &[ImagePatch], columns: usize, gap: usize) -> Result<ImagePatch> {
    let first = tiles.first().ok_or_else(|| Error::invalid("image grid needs at least one tile"))?;
    if columns == 0 {
        return Err(Error::invalid("image grid needs at least one column"));
    }
    let (th, tw) = first.dims();
    if let Some(t) = tiles.iter().find(|t| t.dims() != (th, tw)) {
        return Err(Error::shape("grid tile", &[th, tw], &[t.height(), t.width()]));
    }
    let cols = columns.min(tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let (h, w) = (rows * th + (rows - 1) * gap, cols * tw + (cols - 1) * gap);
    let mut out = ImagePatch::filled(h, w, 1.0);
    for (i, t) in tiles.iter().enumerate() {
        let (oy, ox) = ((i / cols) * (th + gap), (i % cols) * (tw + gap));
        for c in 0..3 {
            for y in 0..th {
                for x in 0..tw {
                    out.set(c, oy + y, ox + x, t.get(c, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Saves one `baseline | restored | ground truth` strip per image as
/// `<dir>/<index>_<name>.png`. Baselines smaller than the ground truth are
/// shown with nearest-neighbour upsampling.
pub fn write_comparison_grids(outputs: &EvalOutputs, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, (name, base, restored, hr)) in outputs.images.iter().enumerate() {
        let base = crate::patch::resize(base, hr.height(), hr.width(), crate::patch::Resample::Nearest)?;
        let grid = image_grid(&[base, restored.clone(), hr.clone()], 3, 2)?;
        let stem: String = name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        grid.save_png(dir.join(format!("{i:04}_{stem}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImagePatch {
        let data = (0..3 * h * w).map(|_| rng.gen::<f64>()).collect();
        ImagePatch::new(h, w, data).unwrap()
    }

    /// Direct per-window SSIM: weighted means, variances and covariance
    /// computed from scratch at every window position.
    fn ssim_oracle(a: &ImagePatch, b: &ImagePatch) -> f64 {
        let (h, w) = a.dims();
        let (x, y) = (a.luma(), b.luma());
        let mut win = [[0.0f64; 11]; 11];
        let mut norm = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                norm += *v;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=h - 11 {
            for ox in 0..=w - 11 {
                let (mut ux, mut uy) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = win[i][j] / norm;
                        ux += wt * x[(oy + i) * w + ox + j];
                        uy += wt * y[(oy + i) * w + ox + j];
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = win[i][j] / norm;
                        let dx = x[(oy + i) * w + ox + j] - ux;
                        let dy = y[(oy + i) * w + ox + j] - uy;
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cxy += wt * dx * dy;
                    }
                }
                total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_examples() {
        let a = ImagePatch::filled(8, 8, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = ImagePatch::filled(8, 8, 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
        let c = ImagePatch::filled(8, 8, 0.8);
        assert!((psnr(&a, &c).unwrap() - 6.020599913279624).abs() < 1e-6);
        assert!(psnr(&a, &ImagePatch::filled(8, 9, 0.3)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_image(16, 16, &mut rng);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let bin = ImagePatch::from_fn(16, 16, |_, y, x| ((x / 2 + y / 2) % 2) as f64);
        let inv = ImagePatch::from_fn(16, 16, |c, y, x| 1.0 - bin.get(c, y, x));
        assert!(ssim(&bin, &inv).unwrap() < 0.0);
        assert!(ssim(&ImagePatch::filled(10, 16, 0.0), &ImagePatch::filled(10, 16, 0.0)).is_err());
    }

    #[test]
    fn ssim_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let h = rng.gen_range(11..24);
            let w = rng.gen_range(11..24);
            let a = random_image(h, w, &mut rng);
            let b = random_image(h, w, &mut rng);
            assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-4);
        }
    }

    #[test]
    fn empty_report_has_no_nan() {
        let r = EvalReport::new(Task::Reconstruction, 2, vec![]);
        assert_eq!(r.summary.count, 0);
        assert_eq!(r.summary.mean_psnr, None);
        assert!(!r.to_json().unwrap().contains("NaN"));
        assert!(!r.to_text().contains("NaN"));
    }

    #[test]
    fn grid_layout() {
        let tiles: Vec<ImagePatch> = (0..5).map(|i| ImagePatch::filled(4, 4, i as f64 / 10.0)).collect();
        let g = image_grid(&tiles, 3, 1).unwrap();
        assert_eq!(g.dims(), (9, 14));
        assert_eq!(g.get(0, 5, 5), 0.4);
        assert_eq!(g.get(0, 4, 0), 1.0);
        assert!(image_grid(&[], 3, 1).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(12, 13, &mut rng);
            let b = random_image(12, 13, &mut rng);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn psnr_decreases_with_noise(seed in any::<u64>(), amp in 0.01f64..0.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(8, 8, &mut rng);
            let signs: Vec<f64> = (0..a.data().len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            let noisy = |s: f64| ImagePatch::new(8, 8, a.data().iter().zip(&signs).map(|(v, d)| v + s * d).collect()).unwrap();
            prop_assert!(psnr(&a, &noisy(amp)).unwrap() > psnr(&a, &noisy(amp * 1.5)).unwrap());
        }

        #[test]
        fn aggregate_is_row_mean(values in proptest::collection::vec((0.0f64..60.0, -1.0f64..1.0), 1..20)) {
            let rows: Vec<EvalRow> = values.iter().enumerate().map(|(i, &(p, s))| EvalRow {
                name: i.to_string(), psnr: p, ssim: s, baseline_psnr: None, extra: BTreeMap::new(),
            }).collect();
            let r = EvalReport::new(Task::Reconstruction, 2, rows);
            let mp = values.iter().map(|v| v.0).sum::<f64>() / values.len() as f64;
            prop_assert!((r.summary.mean_psnr.unwrap() - mp).abs() < 1e-9);
            prop_assert_eq!(r.summary.mean_baseline_psnr, None);
        }
    }
}
