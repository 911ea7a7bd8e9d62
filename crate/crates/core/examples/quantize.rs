// Nearest-neighbour quantization of a latent grid against one codebook.

use adacode::codebook::{code_usage, quantize, straight_through, vq_loss, LatentGrid, LatentKind, VectorCodebook};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> adacode::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let codebook = VectorCodebook::random(16, 4, "demo", &mut rng)?;

    let (h, w) = (4, 4);
    let values: Vec<f64> = (0..h * w * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let latent = LatentGrid::new(h, w, 4, values, LatentKind::Continuous)?;
    let (quantized, indices) = quantize(&latent, &codebook)?;

    println!("code indices:");
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| format!("{:2}", indices.get(y, x))).collect();
        println!("  {}", row.join(" "));
    }
    let usage = code_usage(&indices, codebook.size())?;
    println!("codes used: {} of {}", usage.iter().filter(|&&c| c > 0).count(), codebook.size());

    // The forward value of the straight-through latent is the quantized one.
    let st = straight_through(&latent, &quantized)?;
    assert_eq!(st.values(), quantized.values());
    println!("VQ loss (beta 0.25): {:.4}", vq_loss(&latent, &quantized, 0.25)?);

    // Every chosen entry is at least as close as any other.
    for (i, v) in latent.vectors().enumerate() {
        let chosen = codebook.entry(indices.indices()[i]);
        let d = |e: &[f64]| e.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        assert!((0..codebook.size()).all(|k| d(chosen) <= d(codebook.entry(k))));
    }

    // Data-dependent initialization: k-means on samples.
    let samples: Vec<f64> = (0..200).flat_map(|i| [(i % 2) as f64, 1.0 - (i % 2) as f64]).collect();
    let fitted = VectorCodebook::from_samples(&samples, 2, 2, 5, "fitted", &mut rng)?;
    println!("fitted entries: {:?} {:?}", fitted.entry(0), fitted.entry(1));
    Ok(())
}

#[allow(dead_code)]
fn main() -> adacode::Result<()> {
    run_example()
}
