//! Exhaustive reconstruction-loss pruning against the random and frequency
//! baselines on one model: per-layer losses and holdout divergence.
//!
//! ```bash
//! cargo run --example pruning_baselines
//! ```

use moe_sparsity::calibration::run_calibration;
use moe_sparsity::evaluation::eval_fidelity;
use moe_sparsity::modelgen::{gen_calib, gen_model, DomainSpec, GenSpec};
use moe_sparsity::moe::ModelConfig;
use moe_sparsity::numerics::Vector;
use moe_sparsity::pruning::{
    prune_frequency, prune_model_layerwise, prune_random, PruneMethod, PruneSpec,
};

fn main() -> moe_sparsity::Result<()> {
    let spec = GenSpec::plain(ModelConfig::desk(), 1.0, 21);
    let model = gen_model(&spec)?;
    let domain = DomainSpec {
        domain_id: 0,
        mean: Vector::zeros(32),
        scale: 1.0,
        seed: 22,
    };
    let calib = gen_calib(&domain, 2048, 32)?;
    let mut holdout_domain = domain.clone();
    holdout_domain.seed = 23;
    let holdout = gen_calib(&holdout_domain, 512, 32)?;

    let (cache, stats) = run_calibration(&model, &calib)?;
    let r = 6;

    let (ex_model, ex_report) =
        prune_model_layerwise(&model, &cache, &PruneSpec::new(PruneMethod::Exhaustive, r))?;
    let (fq_model, fq_report) = prune_frequency(
        &model,
        &stats,
        &PruneSpec::new(PruneMethod::Frequency, r),
        Some(&cache),
    )?;
    let mut rand_spec = PruneSpec::new(PruneMethod::Random, r);
    rand_spec.seed = 1;
    let (rd_model, rd_report) = prune_random(&model, &rand_spec, Some(&cache))?;

    println!("calibration reconstruction loss per layer (r = {r}):");
    println!("  layer | exhaustive | frequency | random");
    for l in 0..model.config.n_layers {
        println!(
            "    {l}   |  {:>8.4} | {:>8.4}  | {:>8.4}",
            ex_report.layers[l].loss.unwrap(),
            fq_report.layers[l].loss.unwrap(),
            rd_report.layers[l].loss.unwrap()
        );
    }

    println!("\nholdout end-to-end relative error vs the original model:");
    for (name, pruned) in [
        ("exhaustive", &ex_model),
        ("frequency ", &fq_model),
        ("random    ", &rd_model),
    ] {
        let eval = eval_fidelity(&model, pruned, None, &holdout)?;
        println!("  {name}: {:.4}", eval.end_to_end_rel_err);
    }
    Ok(())
}
