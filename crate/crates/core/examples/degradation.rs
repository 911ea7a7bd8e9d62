// Toy dataset synthesis, the SR degradation and inpainting masks.

use adacode::degradation::{
    apply_mask, degrade, generate_mask, synthesize_toy_dataset, DegradationSpec, MaskSpec, ToySpec,
};
use adacode::training::{naive_restore, Task};

pub fn run_example() -> adacode::Result<()> {
    let spec = ToySpec { classes: 5, patches_per_class: 2, patch_size: 32 };
    let classes = synthesize_toy_dataset(&spec, 0)?;
    for class in &classes {
        println!("{:>9}: {} patches", class[0].super_class, class.len());
    }
    let hr = &classes[1][0].patch;

    let deg = DegradationSpec::default();
    let lr = degrade(hr, &deg)?;
    let up = naive_restore(Task::SuperResolution, &lr, deg.scale)?;
    println!("SR x{}: {:?} -> {:?} -> bicubic {:?}", deg.scale, hr.dims(), lr.dims(), up.dims());

    let mask = generate_mask(&MaskSpec::default(), 32, 32)?;
    let holed = apply_mask(hr, &mask)?;
    println!("mask covers {:.1}% of the patch", 100.0 * mask.coverage());
    assert_eq!(holed.dims(), hr.dims());

    // Same seed, same mask.
    assert_eq!(mask, generate_mask(&MaskSpec::default(), 32, 32)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> adacode::Result<()> {
    run_example()
}
