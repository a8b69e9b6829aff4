//! Train a small residual classifier on synthetic data, then measure how
//! critical each layer is by re-randomizing one layer at a time.
//!
//!     cargo run --release --example profile_criticality

use critmap::{
    build_model, profile_model, synth_dataset, train, ArchConfig, Result, RunConfig, SynthConfig,
    TrainConfig,
};

fn main() -> Result<()> {
    let mut data_cfg = SynthConfig::new(4, 1024, 16);
    data_cfg.margin = 0.5;
    let dataset = synth_dataset(&data_cfg, 7)?;
    println!(
        "dataset: {} samples, {} classes, margin {}",
        dataset.len(),
        dataset.num_classes,
        data_cfg.margin
    );

    let arch = ArchConfig::mini(4, [3, 16, 16]);
    let model = build_model(&arch, 1)?;
    let train_cfg = TrainConfig::new(12, 32, 0.1, 1);
    let started = std::time::Instant::now();
    let (model, log) = train(model, &dataset, &train_cfg)?;
    let last = log.last().expect("nonempty log");
    println!(
        "trained {} epochs in {:.1}s: loss {:.4}, accuracy {:.4}",
        last.epoch,
        started.elapsed().as_secs_f64(),
        last.loss,
        last.accuracy
    );

    let mut run_cfg = RunConfig::new(99);
    run_cfg.n_samples = 1000;
    let started = std::time::Instant::now();
    let profile = profile_model(&model, &dataset, &run_cfg)?;
    println!(
        "profiled {} layers x {} trials in {:.1}s (clean accuracy {:.4})",
        profile.entries.len(),
        run_cfg.n_trials,
        started.elapsed().as_secs_f64(),
        profile.clean_accuracy
    );

    println!("\n{:<28} {:>8} {:>8} {:>8}", "layer", "mean", "std", "stderr");
    for e in &profile.entries {
        println!(
            "{:<28} {:>8.4} {:>8.4} {:>8.4}",
            e.layer_id, e.mean, e.std, e.stderr
        );
    }
    Ok(())
}
