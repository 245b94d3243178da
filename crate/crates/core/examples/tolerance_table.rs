//! Fits the insertion-tolerance frontier to the embedded pass/fail table and
//! queries it.

use siamese_servo::cli::tolerance_report;
use siamese_servo::servo::{fit_tolerance, ToleranceGrid};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = ToleranceGrid::table_one();
    let fit = fit_tolerance(&grid)?;
    print!("{}", tolerance_report(&grid, &fit));
    for (mm, deg) in [(0.1, 2.0), (0.4, 0.5), (0.5, 0.5), (0.7, 0.0)] {
        println!("{mm:.1} mm at {deg:.2} deg -> {}", if fit.model.passes(mm, deg) { "insert" } else { "jam" });
    }
    Ok(())
}
