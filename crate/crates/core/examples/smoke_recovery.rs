//! Generates a smoky synthetic scene, trains the "small" preset with and
//! without the medium branch, and compares holdout PSNR against the clean and
//! hazy references.
//!
//! ```text
//! cargo run --release --example smoke_recovery -- [steps] [out_dir]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use smoke_gs::config::TrainConfig;
use smoke_gs::data::{generate_synthetic, load_dataset, write_synthetic, LoadOptions, SyntheticSpec};
use smoke_gs::loss::psnr;
use smoke_gs::trainer::{render_view, RenderOptions, Trainer};

fn main() -> smoke_gs::error::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let steps: u64 = args
        .next()
        .map(|s| s.parse().expect("steps must be an integer"))
        .unwrap_or(5_000);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("smoke_recovery"));

    let synth = generate_synthetic(&SyntheticSpec::default(), 1)?;
    write_synthetic(&synth, &out.join("scene"))?;
    let dataset = load_dataset(&out.join("scene"), &LoadOptions::default())?;
    let holdout: Vec<usize> = dataset
        .frames
        .iter()
        .enumerate()
        .filter(|(_, f)| f.role == smoke_gs::data::FrameRole::Holdout)
        .map(|(i, _)| i)
        .collect();

    for medium in [true, false] {
        let mut cfg = TrainConfig::preset("small")?;
        cfg.apply_overrides(&[format!("steps={steps}"), format!("medium_enabled={medium}")])?;
        let trainer = Trainer::from_dataset(cfg.clone(), &dataset)?;
        let opts = trainer.render_options();
        let base_opts = RenderOptions {
            medium: false,
            ..opts.clone()
        };
        let score = |scene: &smoke_gs::scene::GaussianScene, o: &RenderOptions, clean: bool| -> f64 {
            let total: f64 = holdout
                .iter()
                .map(|&i| {
                    let img = render_view(scene, &synth.cameras[i], o).unwrap().export();
                    let target = if clean { &synth.clean[i] } else { &synth.hazy[i] };
                    psnr(&img, target).unwrap()
                })
                .sum();
            total / holdout.len() as f64
        };
        let clean0 = score(&trainer.scene, &base_opts, true);
        let t = Instant::now();
        let res = trainer.run(Some(&out.join(if medium { "fused" } else { "base" })))?;
        println!(
            "medium={medium}: {steps} steps in {:.1}s | clean PSNR step 0 {clean0:.2} dB -> base {:.2} dB, fused {:.2} dB | hazy PSNR fused {:.2} dB",
            t.elapsed().as_secs_f64(),
            score(&res.scene, &base_opts, true),
            score(&res.scene, &opts, true),
            score(&res.scene, &opts, false),
        );
    }
    Ok(())
}
