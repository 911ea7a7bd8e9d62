// Scoring a checkpoint on a held-out set and writing the report.

use adacode::degradation::{synthesize_toy_dataset, MaskSpec, ToySpec};
use adacode::metrics::{evaluate_with_outputs, write_comparison_grids};
use adacode::networks::NetworkConfig;
use adacode::patch::ImagePatch;
use adacode::training::{train_stage1, train_stage2, NullSink, StageConfig, Task};

pub fn run_example() -> adacode::Result<()> {
    let net = NetworkConfig::tiny();
    let train: Vec<ImagePatch> = synthesize_toy_dataset(&ToySpec { classes: 1, patches_per_class: 4, patch_size: 16 }, 0)?
        .remove(0)
        .into_iter()
        .map(|p| p.patch)
        .collect();
    let s1 = train_stage1(&net, &StageConfig { iterations: 30, ..StageConfig::tiny(1) }, "checker", 16, &train, &mut NullSink)?;
    let s2 = train_stage2(&StageConfig { iterations: 10, ..StageConfig::tiny(2) }, &[s1], &train, &mut NullSink)?;

    let test: Vec<(String, ImagePatch)> = synthesize_toy_dataset(&ToySpec { classes: 1, patches_per_class: 3, patch_size: 16 }, 99)?
        .remove(0)
        .into_iter()
        .enumerate()
        .map(|(i, p)| (format!("test_{i}"), p.patch))
        .collect();
    let outputs = evaluate_with_outputs(Task::Reconstruction, &s2, &test, &Default::default(), &MaskSpec::default())?;
    print!("{}", outputs.report.to_text());

    let dir = tempfile::tempdir()?;
    outputs.report.write(dir.path())?;
    write_comparison_grids(&outputs, dir.path())?;
    let mut files: Vec<String> = std::fs::read_dir(dir.path())?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()?;
    files.sort();
    println!("wrote {}", files.join(", "));
    Ok(())
}

#[allow(dead_code)]
fn main() -> adacode::Result<()> {
    run_example()
}
