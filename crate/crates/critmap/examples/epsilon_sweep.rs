//! Adversarial-training sweep: train one model per attack budget and watch
//! the mean criticality respond to eps.
//!
//!     cargo run --release --example epsilon_sweep

use rayon::prelude::*;

use critmap::{
    build_model, mean_model_criticality, profile_model, synth_dataset, train, ArchConfig,
    AttackConfig, Norm, Result, RunConfig, SynthConfig, TrainConfig, TrainMode,
};

fn main() -> Result<()> {
    let mut data_cfg = SynthConfig::new(4, 512, 16);
    data_cfg.margin = 0.5;
    let dataset = synth_dataset(&data_cfg, 7)?;

    let eps_values = [0.0, 4.0 / 255.0, 16.0 / 255.0];
    let seeds = [1u64, 2, 3];
    let combos: Vec<(f64, u64)> = eps_values
        .iter()
        .flat_map(|&e| seeds.iter().map(move |&s| (e, s)))
        .collect();

    let started = std::time::Instant::now();
    let rows: Vec<(f64, u64, f64, f64)> = combos
        .par_iter()
        .map(|&(eps, seed)| -> Result<(f64, u64, f64, f64)> {
            let arch = ArchConfig::mini(4, [3, 16, 16]);
            let model = build_model(&arch, seed)?;
            let config = TrainConfig {
                mode: TrainMode::Adversarial(AttackConfig::new(eps, Norm::Linf)),
                ..TrainConfig::new(8, 32, 0.1, seed)
            };
            let (model, _) = train(model, &dataset, &config)?;
            let mut run_cfg = RunConfig::new(50);
            run_cfg.n_samples = 512;
            let profile = profile_model(&model, &dataset, &run_cfg)?;
            Ok((
                eps,
                seed,
                profile.clean_accuracy,
                mean_model_criticality(&profile)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    println!(
        "{} runs in {:.1}s\n\n{:>10} {:>6} {:>10} {:>18}",
        rows.len(),
        started.elapsed().as_secs_f64(),
        "eps",
        "seed",
        "clean_acc",
        "mean_criticality"
    );
    for (eps, seed, acc, crit) in &rows {
        println!("{eps:>10.5} {seed:>6} {acc:>10.4} {crit:>18.4}");
    }

    println!("\nper-eps mean criticality (averaged over seeds):");
    for &eps in &eps_values {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.0 == eps)
            .map(|r| r.3)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        println!("  eps {eps:.5}: {mean:.4}");
    }
    Ok(())
}
