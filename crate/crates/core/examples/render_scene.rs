//! Renders the default view of each built-in connector plus a perturbed,
//! noisy and occluded variant, writing PGM files to the given directory.
//!
//! ```bash
//! cargo run --example render_scene -- /tmp/frames
//! ```

use rand::SeedableRng;
use siamese_servo::sampler::{base_placements, placement_scene, sample_offset, SamplingRanges, Station};
use siamese_servo::scene::{augment, occlude, CameraIntrinsics, ConnectorSpec, CONNECTOR_IDS};
use siamese_servo::geometry::Pose;
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "frames".into()));
    std::fs::create_dir_all(&out)?;
    let placements = base_placements();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for id in CONNECTOR_IDS {
        let spec = ConnectorSpec::builtin(id).expect("built-in id");
        let station = Station::new(placement_scene(&spec, &placements[0]), CameraIntrinsics::default());
        let img = station.render(Pose::IDENTITY);
        img.save_pgm(&out.join(format!("{id}_default.pgm")))?;
        let moved = station.render(sample_offset(&mut rng, &SamplingRanges::default()));
        moved.save_pgm(&out.join(format!("{id}_sampled.pgm")))?;
        augment(&moved, 7, 0.08).save_pgm(&out.join(format!("{id}_noisy.pgm")))?;
        occlude(&img, 0.5)?.save_pgm(&out.join(format!("{id}_half_visible.pgm")))?;
        println!("{id}: {} connector pixels", img.connector_pixel_count());
    }
    println!("wrote frames to {}", out.display());
    Ok(())
}
