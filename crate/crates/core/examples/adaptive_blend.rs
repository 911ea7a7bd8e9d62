// Several codebooks blended per location by a weight map, and the learned
// predictor that produces such maps.

use adacode::adaptive::{combine, quantize_all, BasisSet, PredictorConfig, WeightMap, WeightPredictor};
use adacode::codebook::{quantize, LatentGrid, LatentKind, VectorCodebook};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> adacode::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dim = 6;
    let basis = BasisSet::new(vec![
        VectorCodebook::random(8, dim, "checker", &mut rng)?,
        VectorCodebook::random(8, dim, "stripes", &mut rng)?,
        VectorCodebook::random(8, dim, "blobs", &mut rng)?,
    ])?;
    println!("basis {:?}, {} codebooks of dim {}", basis.labels(), basis.len(), basis.dim());

    let (h, w) = (3, 3);
    let latent = LatentGrid::new(
        h,
        w,
        dim,
        (0..h * w * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        LatentKind::Continuous,
    )?;
    let quantized: Vec<LatentGrid> = quantize_all(&latent, &basis)?.into_iter().map(|(q, _)| q).collect();

    // A one-hot map picks a single codebook exactly.
    let one_hot = combine(&quantized, &WeightMap::one_hot(h, w, 3, 1)?)?;
    let single = quantize(&latent, &basis.codebooks()[1])?.0;
    assert_eq!(one_hot.values(), single.values());

    let uniform = combine(&quantized, &WeightMap::uniform(h, w, 3)?)?;
    println!("uniform blend at (0,0): {:.3?}", uniform.vector(0, 0));

    // The predictor maps a continuous latent to a softmax weight map.
    let predictor = WeightPredictor::init(&PredictorConfig::default(), dim, basis.len(), &mut rng);
    let weights = predictor.predict_weights(&latent)?;
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| format!("{:.2?}", weights.at(y, x))).collect();
        println!("  {}", row.join(" "));
    }
    let blended = combine(&quantized, &weights)?;
    println!("blended latent shape {:?}", blended.shape());

    // The merged baseline concatenates all entries into one codebook.
    let merged = basis.merged("merged")?;
    println!("merged codebook size {}", merged.size());
    Ok(())
}

#[allow(dead_code)]
fn main() -> adacode::Result<()> {
    run_example()
}
