//! Command-line front end. Flags override the config file, which in turn
//! is overridden for the output root by [`OUTPUT_ROOT_ENV`].

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::codebook::visualize_code;
use crate::config::{RunConfig, RunLayout, OUTPUT_ROOT_ENV};
use crate::degradation::{
    apply_mask, generate_mask, load_image_dir, synthesize_toy_dataset, write_dataset, LabelMap,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_with_outputs, image_grid, write_comparison_grids};
use crate::patch::{ImagePatch, Mask};
use crate::training::{make_pairs, train_stage1, train_stage2, train_stage3, JsonlSink, Pipeline, Task};

#[derive(Debug, Parser)]
#[command(name = "adacode", version, about = "Adaptive multi-codebook image restoration")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root, overriding the config file and the environment.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the procedural texture dataset.
    SynthData(SynthArgs),
    /// Train one stage.
    Train(TrainArgs),
    /// Restore degraded images with a Stage III checkpoint.
    Restore(RestoreArgs),
    /// Score a checkpoint and write a report.
    Eval(EvalArgs),
    /// Decode sampled codebook entries into an image grid.
    VizCodes(VizArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub patches_per_class: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Restoration task for stage 3.
    #[arg(long, value_parser = parse_restore_task)]
    pub task: Option<Task>,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long, value_parser = parse_restore_task)]
    pub task: Task,
    /// Defaults to the run's Stage III checkpoint for the task.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// A PNG or a directory of PNGs.
    #[arg(long)]
    pub input: PathBuf,
    /// Hole mask PNG (white = hole) or a directory of masks named like the
    /// inputs. Without it, masks are generated and applied to the inputs.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write one grayscale weight map per basis.
    #[arg(long)]
    pub weights: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `reconstruction`, `sr` or `inpaint`; inferred from the checkpoint.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Directory of ground-truth PNGs; class subdirectories are scanned too.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write side-by-side comparison PNGs.
    #[arg(long)]
    pub grids: bool,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    /// Stage I or II checkpoint; defaults to the run's Stage II checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Basis codebook to draw from.
    #[arg(long)]
    pub label: String,
    /// Comma-separated code indices.
    #[arg(long, value_delimiter = ',', conflicts_with = "random")]
    pub indices: Option<Vec<usize>>,
    /// Number of distinct random indices (default 10).
    #[arg(long)]
    pub random: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    match s {
        "reconstruction" | "recon" => Ok(Task::Reconstruction),
        "sr" | "super_resolution" => Ok(Task::SuperResolution),
        "inpaint" | "inpainting" => Ok(Task::Inpainting),
        _ => Err(format!("unknown task `{s}` (expected reconstruction, sr or inpaint)")),
    }
}

fn parse_restore_task(s: &str) -> std::result::Result<Task, String> {
    match parse_task(s)? {
        Task::Reconstruction => Err("expected sr or inpaint".into()),
        t => Ok(t),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// File, then environment, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    if let Some(o) = &cli.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::SynthData(a) => {
            let toy = &mut cfg.data.toy;
            toy.classes = a.classes.unwrap_or(toy.classes);
            toy.patches_per_class = a.patches_per_class.unwrap_or(toy.patches_per_class);
            toy.patch_size = a.patch_size.unwrap_or(toy.patch_size);
        }
        Command::Train(a) => {
            let s = cfg.section_mut(a.stage)?;
            s.iterations = a.iterations.unwrap_or(s.iterations);
            s.batch_size = a.batch_size.unwrap_or(s.batch_size);
            if let Some(t) = a.task {
                if a.stage != 3 {
                    return Err(Error::Config("--task only applies to stage 3".into()));
                }
                s.task = Some(t);
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    info!("output root {} (override with {OUTPUT_ROOT_ENV})", cfg.output_dir.display());
    match &cli.command {
        Command::SynthData(_) => cmd_synth_data(&cfg).map(|_| ()),
        Command::Train(a) => cmd_train(&cfg, a.stage).map(|_| ()),
        Command::Restore(a) => cmd_restore(&cfg, a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&cfg, a).map(|_| ()),
        Command::VizCodes(a) => cmd_viz_codes(&cfg, a).map(|_| ()),
    }
}

pub fn cmd_synth_data(cfg: &RunConfig) -> Result<PathBuf> {
    let layout = cfg.layout();
    let classes = synthesize_toy_dataset(&cfg.data.toy, cfg.seed)?;
    write_dataset(&layout.data, &classes)?;
    cfg.write_snapshot(layout.data.join("config.toml"))?;
    for c in &classes {
        if let Some(first) = c.first() {
            println!("{}\t{}", first.super_class, c.len());
        }
    }
    Ok(layout.data)
}

/// Super-class names of a training root, in `mapping.txt` order when that
/// file exists, otherwise sorted subdirectory names.
pub fn class_labels(data: &Path) -> Result<Vec<String>> {
    let mapping = data.join("mapping.txt");
    if mapping.is_file() {
        return Ok(LabelMap::load(&mapping)?.super_classes().to_vec());
    }
    if !data.is_dir() {
        return Err(Error::MissingFile(data.to_path_buf()));
    }
    let mut labels: Vec<String> = fs::read_dir(data)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    labels.sort();
    Ok(labels)
}

fn load_classes(data: &Path) -> Result<Vec<(String, Vec<(PathBuf, ImagePatch)>)>> {
    let labels = class_labels(data)?;
    if labels.is_empty() {
        return Err(Error::invalid(format!("no class directories under {}", data.display())));
    }
    labels
        .into_iter()
        .map(|l| {
            let imgs = load_image_dir(data.join(&l))?;
            Ok((l, imgs))
        })
        .collect()
}

fn jsonl(path: PathBuf) -> Result<JsonlSink<BufWriter<File>>> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    Ok(JsonlSink(BufWriter::new(File::create(path)?)))
}

fn require(paths: &[PathBuf], what: &str) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(format!("missing {what}: {}", missing.join(", "))))
    }
}

/// Trains `stage` and returns the written checkpoint paths.
pub fn cmd_train(cfg: &RunConfig, stage: u8) -> Result<Vec<PathBuf>> {
    let layout = cfg.layout();
    let sc = cfg.stage_config(stage)?;
    let written = match stage {
        1 => {
            let classes = load_classes(&layout.data)?;
            let mut out = Vec::new();
            for (k, (label, imgs)) in classes.iter().enumerate() {
                let c = crate::training::StageConfig {
                    seed: cfg.seed.wrapping_add(k as u64),
                    ..sc.clone()
                };
                let size = sc.codebook_sizes[k % sc.codebook_sizes.len()];
                let patches: Vec<ImagePatch> = imgs.iter().map(|(_, p)| p.clone()).collect();
                info!("stage 1 `{label}`: {} patches, {size} codes", patches.len());
                let mut sink = jsonl(layout.logs().join(format!("stage1_{label}.jsonl")))?;
                let ckpt = train_stage1(&cfg.network, &c, label, size, &patches, &mut sink)?;
                let path = layout.stage1_checkpoint(label);
                save_checkpoint(&ckpt, &path)?;
                out.push(path);
            }
            out
        }
        2 => {
            let labels = match &sc.basis_subset {
                Some(s) => s.clone(),
                None => class_labels(&layout.data)?,
            };
            let paths: Vec<PathBuf> = labels.iter().map(|l| layout.stage1_checkpoint(l)).collect();
            require(&paths, "stage 1 checkpoints")?;
            let ckpts = paths.iter().map(load_checkpoint).collect::<Result<Vec<_>>>()?;
            let images = mixed_images(&layout)?;
            let mut sink = jsonl(layout.logs().join("stage2.jsonl"))?;
            let ckpt = train_stage2(&sc, &ckpts, &images, &mut sink)?;
            let path = layout.stage2_checkpoint();
            save_checkpoint(&ckpt, &path)?;
            vec![path]
        }
        _ => {
            let s2 = layout.stage2_checkpoint();
            require(std::slice::from_ref(&s2), "stage 2 checkpoint")?;
            let s2 = load_checkpoint(&s2)?;
            let images = mixed_images(&layout)?;
            let pairs = make_pairs(&images, sc.task, &sc.degradation, &sc.mask)?;
            let mut sink = jsonl(layout.logs().join(format!("stage3_{}.jsonl", sc.task.name())))?;
            let ckpt = train_stage3(&sc, &s2, &pairs, &mut sink)?;
            let path = layout.stage3_checkpoint(sc.task);
            save_checkpoint(&ckpt, &path)?;
            vec![path]
        }
    };
    cfg.write_snapshot(layout.checkpoints().join(format!("stage{stage}.config.toml")))?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}

fn mixed_images(layout: &RunLayout) -> Result<Vec<ImagePatch>> {
    Ok(load_classes(&layout.data)?
        .into_iter()
        .flat_map(|(_, imgs)| imgs.into_iter().map(|(_, p)| p))
        .collect())
}

fn input_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        Ok(load_image_dir(path)?.into_iter().map(|(p, _)| p).collect())
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

/// Restores every input image and returns the written output paths.
pub fn cmd_restore(cfg: &RunConfig, args: &RestoreArgs) -> Result<Vec<PathBuf>> {
    let layout = cfg.layout();
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| layout.stage3_checkpoint(args.task));
    let ckpt = load_checkpoint(&ckpt_path)?;
    ckpt.expect_stage(3)?;
    if ckpt.config.task != args.task {
        return Err(Error::invalid(format!(
            "{} was trained for {}, not {}",
            ckpt_path.display(),
            ckpt.config.task.name(),
            args.task.name()
        )));
    }
    let pipe = Pipeline::from_checkpoint(&ckpt)?;
    let out_dir = args.out.clone().unwrap_or_else(|| layout.root.join(format!("restore_{}", args.task.name())));
    fs::create_dir_all(&out_dir)?;
    let mut written = Vec::new();
    for (i, path) in input_files(&args.input)?.iter().enumerate() {
        let img = ImagePatch::load_png(path)?;
        let name = stem(path);
        let (input, mask) = match args.task {
            Task::Inpainting => {
                let (input, mask) = match &args.mask {
                    Some(m) if m.is_dir() => (img, Mask::load_png(m.join(path.file_name().unwrap_or_default()))?),
                    Some(m) => (img, Mask::load_png(m)?),
                    None => {
                        let m = generate_mask(&cfg.mask.for_index(i), img.height(), img.width())?;
                        (apply_mask(&img, &m)?, m)
                    }
                };
                if mask.dims() != input.dims() {
                    return Err(Error::invalid(format!("mask for {} does not match the image size", path.display())));
                }
                (input, Some(mask))
            }
            _ => (img, None),
        };
        let out = pipe.run(&input, mask.as_ref())?;
        let dest = out_dir.join(format!("{name}.png"));
        out.output.clipped().save_png(&dest)?;
        if args.weights {
            out.weights.save_pngs(&out_dir, &format!("{name}_w"))?;
        }
        written.push(dest);
    }
    cfg.write_snapshot(out_dir.join("config.toml"))?;
    println!("{} images -> {}", written.len(), out_dir.display());
    Ok(written)
}

fn eval_dataset(cfg: &RunConfig, args: &EvalArgs) -> Result<Vec<(String, ImagePatch)>> {
    let root = args
        .data
        .clone()
        .or_else(|| cfg.data.eval_dir.clone())
        .unwrap_or_else(|| cfg.layout().data);
    if !root.is_dir() {
        return Err(Error::MissingFile(root));
    }
    let name = |p: &Path| p.strip_prefix(&root).unwrap_or(p).display().to_string();
    let mut out: Vec<(String, ImagePatch)> = load_image_dir(&root)?
        .into_iter()
        .map(|(p, img)| (name(&p), img))
        .collect();
    if out.is_empty() {
        for (_, imgs) in load_classes(&root)? {
            out.extend(imgs.into_iter().map(|(p, img)| (name(&p), img)));
        }
    }
    Ok(out)
}

/// Evaluates a checkpoint and returns the report directory.
pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<PathBuf> {
    let layout = cfg.layout();
    let (ckpt, task) = match &args.checkpoint {
        Some(p) => {
            let c = load_checkpoint(p)?;
            let t = args.task.unwrap_or(if c.stage == 3 { c.config.task } else { Task::Reconstruction });
            (c, t)
        }
        None => {
            let t = args.task.unwrap_or(Task::Reconstruction);
            let p = match t {
                Task::Reconstruction => layout.stage2_checkpoint(),
                _ => layout.stage3_checkpoint(t),
            };
            (load_checkpoint(p)?, t)
        }
    };
    let dataset = eval_dataset(cfg, args)?;
    let degradation = match task {
        Task::Reconstruction => cfg.degradation.clone(),
        _ => ckpt_degradation(&ckpt),
    };
    let mut outputs = evaluate_with_outputs(task, &ckpt, &dataset, &degradation, &cfg.mask)?;
    outputs.report.config_snapshot = Some("config.toml".into());
    let out_dir = args.out.clone().unwrap_or_else(|| layout.root.join(format!("eval_{}", task.name())));
    outputs.report.write(&out_dir)?;
    cfg.write_snapshot(out_dir.join("config.toml"))?;
    if args.grids {
        write_comparison_grids(&outputs, out_dir.join("grids"))?;
    }
    let s = &outputs.report.summary;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    println!("{} images: psnr {} ssim {}", s.count, fmt(s.mean_psnr), fmt(s.mean_ssim));
    Ok(out_dir)
}

/// Restoration checkpoints are scored at the scale they were trained for.
fn ckpt_degradation(ckpt: &Checkpoint) -> crate::degradation::DegradationSpec {
    ckpt.config.degradation.clone()
}

/// Writes the tile grid and returns its path.
pub fn cmd_viz_codes(cfg: &RunConfig, args: &VizArgs) -> Result<PathBuf> {
    let layout = cfg.layout();
    let path = args.checkpoint.clone().unwrap_or_else(|| layout.stage2_checkpoint());
    let ckpt = load_checkpoint(&path)?;
    if ckpt.stage > 2 {
        return Err(Error::StageMismatch { expected: 2, found: ckpt.stage });
    }
    let basis = ckpt.basis()?;
    let cb = basis.get(&args.label).ok_or_else(|| {
        Error::invalid(format!("unknown codebook `{}`; available: {}", args.label, basis.labels().join(", ")))
    })?;
    let indices = match &args.indices {
        Some(i) if i.is_empty() => return Err(Error::invalid("--indices is empty")),
        Some(i) => i.clone(),
        None => {
            let n = args.random.unwrap_or(10).min(cb.size());
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut v = rand::seq::index::sample(&mut rng, cb.size(), n).into_vec();
            v.sort_unstable();
            v
        }
    };
    let decoder = ckpt.decoder()?;
    let tiles = indices
        .iter()
        .map(|&i| visualize_code(cb, i, &decoder))
        .collect::<Result<Vec<_>>>()?;
    let grid = image_grid(&tiles, 10, 2)?;
    let out = args.out.clone().unwrap_or_else(|| layout.root.join("viz").join(format!("{}.png", args.label)));
    if let Some(d) = out.parent() {
        fs::create_dir_all(d)?;
    }
    grid.save_png(&out)?;
    println!("{} codes -> {}", tiles.len(), out.display());
    Ok(out)
}
