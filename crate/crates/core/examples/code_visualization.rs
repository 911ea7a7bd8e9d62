// Decoding individual codebook entries into image tiles.

use adacode::codebook::visualize_code;
use adacode::metrics::image_grid;
use adacode::networks::NetworkConfig;
use adacode::training::{init_stage1, StageConfig};

pub fn run_example() -> adacode::Result<()> {
    let net = NetworkConfig::tiny();
    let ckpt = init_stage1(&net, &StageConfig::tiny(1), "noise", 16)?;
    let decoder = ckpt.decoder()?;
    let basis = ckpt.basis()?;
    let codebook = &basis.codebooks()[0];

    let tiles = (0..10)
        .map(|i| visualize_code(codebook, i, &decoder))
        .collect::<adacode::Result<Vec<_>>>()?;
    println!("each code decodes to a {:?} tile", tiles[0].dims());
    let sheet = image_grid(&tiles, 5, 1)?;
    println!("contact sheet {:?}", sheet.dims());

    // Out-of-range indices are rejected.
    assert!(visualize_code(codebook, codebook.size(), &decoder).is_err());

    let dir = tempfile::tempdir()?;
    sheet.save_png(dir.path().join("codes.png"))?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> adacode::Result<()> {
    run_example()
}
