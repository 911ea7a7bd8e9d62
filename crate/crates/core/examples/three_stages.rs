// All three training stages on a tiny network, with checkpoints written to
// and read back from disk.

use adacode::checkpoint::{load_checkpoint, save_checkpoint};
use adacode::degradation::{synthesize_toy_dataset, DegradationSpec, ToySpec};
use adacode::metrics::psnr;
use adacode::networks::NetworkConfig;
use adacode::patch::ImagePatch;
use adacode::training::{make_pairs, train_stage1, train_stage2, train_stage3, Pipeline, StageConfig, StepRecord, Task};

pub fn run_example() -> adacode::Result<()> {
    let net = NetworkConfig::tiny();
    let spec = ToySpec { classes: 2, patches_per_class: 4, patch_size: 16 };
    let classes: Vec<Vec<ImagePatch>> = synthesize_toy_dataset(&spec, 0)?
        .into_iter()
        .map(|c| c.into_iter().map(|p| p.patch).collect())
        .collect();
    let mixed = classes.concat();
    let dir = tempfile::tempdir()?;

    // Stage I: one codebook per super-class.
    let mut stage1 = Vec::new();
    for (k, images) in classes.iter().enumerate() {
        let cfg = StageConfig { iterations: 20, seed: k as u64, ..StageConfig::tiny(1) };
        let mut log: Vec<StepRecord> = Vec::new();
        let ckpt = train_stage1(&net, &cfg, &ToySpec::class_label(k), 16, images, &mut log)?;
        println!(
            "stage I {}: l1 {:.4} -> {:.4}",
            ToySpec::class_label(k),
            log[0].terms["l1"],
            log.last().unwrap().terms["l1"]
        );
        let path = dir.path().join(format!("stage1_{k}.ckpt"));
        save_checkpoint(&ckpt, &path)?;
        stage1.push(load_checkpoint(&path)?);
    }

    // Stage II: frozen codebooks, learned weight map.
    let cfg2 = StageConfig { iterations: 20, ..StageConfig::tiny(2) };
    let stage2 = train_stage2(&cfg2, &stage1, &mixed, &mut adacode::training::NullSink)?;
    let recon = Pipeline::from_checkpoint(&stage2)?.run(&mixed[0], None)?;
    println!(
        "stage II: {} bases, reconstruction PSNR {:.2} dB",
        stage2.basis()?.len(),
        psnr(&recon.output.clipped(), &mixed[0])?
    );

    // Stage III: a restoration encoder for x2 super-resolution.
    let cfg3 = StageConfig {
        iterations: 20,
        task: Task::SuperResolution,
        degradation: DegradationSpec { scale: 2, ..Default::default() },
        ..StageConfig::tiny(3)
    };
    let pairs = make_pairs(&mixed, Task::SuperResolution, &cfg3.degradation, &cfg3.mask)?;
    let stage3 = train_stage3(&cfg3, &stage2, &pairs, &mut adacode::training::NullSink)?;
    let out = Pipeline::from_checkpoint(&stage3)?.run(&pairs[0].input, None)?;
    println!("stage III: {:?} input restored to {:?}", pairs[0].input.dims(), out.output.dims());
    Ok(())
}

#[allow(dead_code)]
fn main() -> adacode::Result<()> {
    run_example()
}
