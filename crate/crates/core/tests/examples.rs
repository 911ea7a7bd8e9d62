mod quantize_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/quantize.rs"));
}

#[test]
fn quantize_example_runs() {
    quantize_example::run_example().expect("quantize example");
}

mod adaptive_blend_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/adaptive_blend.rs"));
}

#[test]
fn adaptive_blend_example_runs() {
    adaptive_blend_example::run_example().expect("adaptive_blend example");
}

mod networks_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/networks.rs"));
}

#[test]
fn networks_example_runs() {
    networks_example::run_example().expect("networks example");
}

mod losses_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/losses.rs"));
}

#[test]
fn losses_example_runs() {
    losses_example::run_example().expect("losses example");
}

mod degradation_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/degradation.rs"));
}

#[test]
fn degradation_example_runs() {
    degradation_example::run_example().expect("degradation example");
}

mod three_stages_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/three_stages.rs"));
}

#[test]
fn three_stages_example_runs() {
    three_stages_example::run_example().expect("three_stages example");
}

mod evaluation_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/evaluation.rs"));
}

#[test]
fn evaluation_example_runs() {
    evaluation_example::run_example().expect("evaluation example");
}

mod code_visualization_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/code_visualization.rs"));
}

#[test]
fn code_visualization_example_runs() {
    code_visualization_example::run_example().expect("code_visualization example");
}

mod run_config_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/run_config.rs"));
}

#[test]
fn run_config_example_runs() {
    run_config_example::run_example().expect("run_config example");
}
