//! Loss and image metrics on a clean image and noisy copies of it.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use smoke_gs::image::ImageBuffer;
use smoke_gs::loss::{combined_loss, psnr, ssim_value, LossConfig};

fn main() -> smoke_gs::error::Result<()> {
    let mut clean = ImageBuffer::new(48, 48);
    for y in 0..48 {
        for x in 0..48 {
            clean.set(x, y, [x as f64 / 47.0, y as f64 / 47.0, ((x + y) % 8) as f64 / 7.0]);
        }
    }
    let cfg = LossConfig::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    println!("{:>6} {:>9} {:>8} {:>8}", "sigma", "PSNR dB", "SSIM", "loss");
    for sigma in [0.0, 0.01, 0.03, 0.1, 0.3] {
        let mut noisy = clean.clone();
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).unwrap();
            for v in &mut noisy.data {
                *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        let l = combined_loss(&noisy, &clean, &cfg)?;
        println!(
            "{sigma:>6} {:>9.3} {:>8.4} {:>8.5}",
            psnr(&noisy, &clean)?,
            ssim_value(&noisy, &clean, &cfg)?,
            l.total
        );
    }
    Ok(())
}
