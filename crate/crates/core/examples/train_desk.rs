//! Trains the desk network on an in-memory single-connector dataset and
//! reports held-out error against the identity baseline.
//!
//! ```bash
//! cargo run --release --example train_desk -- [samples] [pairs_per_epoch] [epochs] [learning_rate] [loss_weight] [translation_scale]
//! ```

use std::time::Instant;

use siamese_servo::sampler::{generate_samples, DatasetManifest};
use siamese_servo::tensornet::{evaluate, identity_baseline, NetworkSpec, SiameseModel, TrainConfig, TrainData, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let arg = |i: usize, d: usize| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let mut manifest = DatasetManifest::single_connector("A1", 7);
    manifest.samples_per_connector = vec![arg(1, 2000)];
    let t0 = Instant::now();
    let data = generate_samples(&manifest)?;
    let c = &data.connectors[0];
    let (train, val, test) = (c.subset(&c.splits.train), c.subset(&c.splits.val), c.subset(&c.splits.test));
    println!("rendered {} samples in {:.1?}", c.samples.len(), t0.elapsed());

    let argf = |i: usize, d: f64| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        pairs_per_epoch: arg(2, 20_000),
        epochs: arg(3, 10),
        learning_rate: argf(4, defaults.learning_rate),
        loss_weight: argf(5, defaults.loss_weight),
        seed: 3,
        ..defaults
    };
    let mut spec = NetworkSpec::desk();
    if let Some(k) = std::env::args().nth(6).and_then(|s| s.parse::<f64>().ok()) {
        spec.output_scale = Some(vec![k, k, k, 1.0, 1.0, 1.0, 1.0]);
    }
    let model = SiameseModel::new(spec, config.seed)?;
    println!("{} parameters", model.params.numel());
    let mut trainer = Trainer::new(model, config)?;
    let td = TrainData { train: vec![&train], val: vec![&val] };
    let t1 = Instant::now();
    trainer.run(&td, |_, m| {
        let e = m.val.error;
        println!(
            "epoch {:2} lr {:.2e} loss {:.3e} (first {:.3e}) val {:.3e} | mm {:.3} {:.3} {:.3} | deg {:.3} {:.3} {:.3} | {:.0?}",
            m.epoch, m.learning_rate, m.train_loss, m.first_batch_loss, m.val.loss,
            e.e_x, e.e_y, e.e_z, e.e_roll, e.e_pitch, e.e_yaw, t1.elapsed()
        );
    })?;
    let best = trainer.best_model();
    let (summary, _) = evaluate(best, &[&test], trainer.config.loss_weight)?;
    let base = identity_baseline(&[&test]);
    println!("test     {:?}", summary.error);
    println!("identity {:?}", base);
    Ok(())
}
