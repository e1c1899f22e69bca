//! Runs the medium MLP over a camera's ray field and shows that it depends on
//! ray direction alone.

use rand::SeedableRng;
use smoke_gs::camera::Camera;
use smoke_gs::medium::{encode_directions, medium_forward, MediumWeights};

fn main() -> smoke_gs::error::Result<()> {
    let weights = MediumWeights::init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(2));
    let a = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 30.0, 30.0, 24, 24)?;
    // Same orientation, different position: identical ray directions.
    let b = Camera::look_at([5.0, -2.0, 3.0], [5.0, -2.0, 0.0], [0.0, 1.0, 0.0], 30.0, 30.0, 24, 24)?;
    let run = |cam: &Camera| -> smoke_gs::error::Result<_> {
        let feats = encode_directions(&cam.ray_direction_field())?;
        Ok(medium_forward(&weights, &feats, cam.width, cam.height)?.outputs)
    };
    let (ma, mb) = (run(&a)?, run(&b)?);
    let gap = ma
        .rgb
        .data
        .iter()
        .zip(&mb.rgb.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "medium_rgb mean {:.4}, backscatter mean {:.4}, attenuation mean {:.4}",
        mean(&ma.rgb.data),
        mean(&ma.backscatter.data),
        mean(&ma.attenuation.data)
    );
    println!("largest medium_rgb difference between translated cameras: {gap:e}");
    Ok(())
}
