// The TOML run configuration and the command-line entry point.

use adacode::config::RunConfig;

pub fn run_example() -> adacode::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut config = RunConfig::tiny();
    config.output_dir = dir.path().join("run");
    let text = config.to_toml()?;
    println!("{}", text.lines().take(6).collect::<Vec<_>>().join("\n"));

    // Partial files fill in defaults.
    let partial = RunConfig::parse("seed = 7\n[stage3]\ntask = \"inpaint\"\n")?;
    let stage3 = partial.stage_config(3)?;
    println!("stage III task {} with seed {}", stage3.task.name(), stage3.seed);

    let path = dir.path().join("run.toml");
    config.write_snapshot(&path)?;
    let layout = config.layout();
    println!("checkpoints go to {}", layout.checkpoints().display());

    // The CLI takes the same file; exit code 0 on success.
    let code = adacode::cli::run(["adacode", "--config", path.to_str().unwrap(), "synth-data"]);
    assert_eq!(code, 0);
    let classes = std::fs::read_dir(&layout.data)?.filter(|e| e.as_ref().is_ok_and(|e| e.path().is_dir())).count();
    println!("synth-data wrote {classes} class directories");

    // A malformed file is a configuration error: exit code 1.
    std::fs::write(&path, "bogus = 1")?;
    assert_eq!(adacode::cli::run(["adacode", "--config", path.to_str().unwrap(), "synth-data"]), 1);
    Ok(())
}

#[allow(dead_code)]
fn main() -> adacode::Result<()> {
    run_example()
}
