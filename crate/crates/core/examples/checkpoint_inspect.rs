//! Saves a freshly initialized scene, reloads it and prints its summary.

use smoke_gs::checkpoint::{load_checkpoint, save_checkpoint};
use smoke_gs::cli::describe;
use smoke_gs::scene::{init_scene, Aabb};

fn main() -> smoke_gs::error::Result<()> {
    let scene = init_scene(1000, &Aabb::unit_cube(), 0)?;
    let path = std::env::temp_dir().join("smoke_gs_example.smgs");
    save_checkpoint(&scene, &path)?;
    let back = load_checkpoint(&path)?;
    assert_eq!(back, scene);
    println!(
        "{} ({} bytes)",
        path.display(),
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0)
    );
    for line in describe(&back) {
        println!("  {line}");
    }
    Ok(())
}
