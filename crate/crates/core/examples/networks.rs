// Encoder, decoder, discriminator and the frozen feature pyramid on one
// toy patch.

use adacode::degradation::TextureFamily;
use adacode::networks::{ConvPyramid, ConvProjection, Decoder, Discriminator, Encoder, NetworkConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> adacode::Result<()> {
    let net = NetworkConfig::tiny();
    net.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = TextureFamily::Checker.render(16, &mut rng);

    let encoder = Encoder::init(&net, &mut rng);
    let decoder = Decoder::init(&net, &mut rng);
    let disc = Discriminator::init(&net, &mut rng);
    let phi = ConvPyramid::new(&net);

    let latent = encoder.encode(&image)?;
    println!("16x16 image -> latent {:?} (factor {})", latent.shape(), net.downsample_factor);
    let recon = decoder.decode(&latent)?;
    println!("decoded back to {:?}", recon.dims());

    let (ph, pw, logits) = disc.discriminate(&image)?;
    println!("discriminator: {ph}x{pw} patch logits, first {:.4}", logits[0]);

    let features = phi.extract(&image)?;
    println!("feature map {:?}", features.shape());
    let proj = ConvProjection::init(net.latent_dim, net.feature_dim, &mut rng);
    println!("projected latent {:?}", proj.project(&latent)?.shape());
    Ok(())
}

#[allow(dead_code)]
fn main() -> adacode::Result<()> {
    run_example()
}
