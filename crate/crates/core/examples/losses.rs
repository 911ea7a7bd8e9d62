// The loss terms on small hand-made inputs.

use adacode::codebook::{LatentGrid, LatentKind};
use adacode::losses::{
    adversarial_losses, code_level_loss, info_nce, l1_loss, perceptual_loss, style_loss, LossWeights, Stage1Terms,
};
use adacode::networks::{ConvPyramid, NetworkConfig};
use adacode::patch::ImagePatch;

fn grid(h: usize, w: usize, d: usize, v: Vec<f64>) -> adacode::Result<LatentGrid> {
    LatentGrid::new(h, w, d, v, LatentKind::Continuous)
}

pub fn run_example() -> adacode::Result<()> {
    let a = ImagePatch::filled(16, 16, 0.2);
    let b = ImagePatch::from_fn(16, 16, |c, y, x| 0.2 + 0.01 * (c + y + x) as f64);
    println!("L1 {:.4}", l1_loss(&a, &b)?);
    let phi = ConvPyramid::new(&NetworkConfig::tiny());
    println!("perceptual {:.3e}", perceptual_loss(&a, &b, &phi)?);

    let (gen, disc) = adversarial_losses(&[2.0, 0.5], &[-1.5, 0.0])?;
    println!("hinge: generator {gen:.3}, discriminator {disc:.3}");

    // Orthogonal positive and negative at equal distance give ln 2.
    let anchor = grid(1, 1, 2, vec![1.0, 0.0])?;
    let pos = grid(1, 1, 2, vec![0.0, 1.0])?;
    let neg = grid(1, 1, 2, vec![0.0, -1.0])?;
    let nce = info_nce(&anchor, &pos, std::slice::from_ref(&neg), 0.1)?;
    println!("InfoNCE {nce:.6} (ln 2 = {:.6})", std::f64::consts::LN_2);

    let x = grid(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0])?;
    let swapped = grid(2, 1, 2, vec![0.0, 1.0, 1.0, 0.0])?;
    println!("style loss of a location permutation: {}", style_loss(&x, &swapped)?);

    let code = code_level_loss(&x, &swapped, &x, std::slice::from_ref(&swapped), 0.1)?;
    println!("code terms {code:?}, total {:.4}", code.total(0.25));

    let t = Stage1Terms { l1: 0.5, perceptual: 0.1, adversarial: -0.2, vq: 0.05, semantic: 0.3 };
    let w = LossWeights::default();
    println!("stage I objective {:.4} at lambda {}", t.total(&w), w.lambda);
    Ok(())
}

#[allow(dead_code)]
fn main() -> adacode::Result<()> {
    run_example()
}
