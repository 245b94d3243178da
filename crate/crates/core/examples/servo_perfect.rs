//! One-shot and iterative servoing with the exact-label estimator, including
//! an occluded reference view.

use siamese_servo::geometry::Pose;
use siamese_servo::sampler::{base_placements, placement_scene, SamplingRanges, Station};
use siamese_servo::scene::{CameraIntrinsics, ConnectorSpec};
use siamese_servo::servo::*;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ConnectorSpec::builtin("B1").unwrap();
    let stations: Vec<Station> = base_placements().iter().map(|p| Station::new(placement_scene(&spec, p), CameraIntrinsics::default())).collect();
    let tol = fit_tolerance(&ToleranceGrid::table_one())?.model;

    let shots = run_one_shot_trials(&PerfectModel, &stations, 10, &SamplingRanges::default(), &tol, 1)?;
    println!("one-shot: {}/{} insertions", shots.iter().filter(|t| t.success).count(), shots.len());

    for vis in [1.0, 0.5, 0.3] {
        let opts = ServoOptions { visible_fraction: vis, ..ServoOptions::default() };
        let runs = run_iterative_trials(&PerfectModel, &stations, 5, &SamplingRanges::default().scaled(3.0), &opts, &tol, 2)?;
        let iters: Vec<usize> = runs.iter().map(|r| r.iterations).collect();
        println!("iterative, {:>3.0}% visible: iterations {:?}", vis * 100.0, iters);
    }

    let r = iterative_servo(&PerfectModel, &stations[0], Pose::IDENTITY, Pose::from_translation(0.004, -0.002, -0.006), &ServoOptions::default())?;
    r.write_jsonl(std::io::stdout().lock())?;
    Ok(())
}
