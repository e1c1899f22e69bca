//! Writes a synthetic smoky scene and reports how far the smoke moves each
//! view from its clean render.
//!
//! ```text
//! cargo run --release --example synth -- [out_dir] [seed]
//! ```

use std::path::PathBuf;

use smoke_gs::data::{generate_synthetic, write_synthetic, SyntheticSpec};
use smoke_gs::loss::psnr;

fn main() -> smoke_gs::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("smoke_gs_synth"));
    let seed = args
        .next()
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(1);
    let spec = SyntheticSpec::default();
    let synth = generate_synthetic(&spec, seed)?;
    write_synthetic(&synth, &out)?;
    for (f, (c, h)) in synth
        .manifest
        .frames
        .iter()
        .zip(synth.clean.iter().zip(&synth.hazy))
        .take(6)
    {
        println!(
            "frame {} ({:?}): hazy vs clean {:.2} dB",
            f.id,
            f.split.unwrap(),
            psnr(h, c)?
        );
    }
    println!("wrote {} frames to {}", synth.manifest.frames.len(), out.display());
    Ok(())
}
