//! Plant dead experts (router bias -50, never selected) and verify the
//! exhaustive reconstruction-loss search prunes exactly them at ~zero loss.
//!
//! ```bash
//! cargo run --example prune_planted_model
//! ```

use moe_sparsity::calibration::run_calibration;
use moe_sparsity::modelgen::{gen_calib, gen_model, DomainSpec, GenSpec};
use moe_sparsity::moe::ModelConfig;
use moe_sparsity::numerics::Vector;
use moe_sparsity::pruning::{prune_model_layerwise, PruneMethod, PruneSpec};

fn main() -> moe_sparsity::Result<()> {
    let config = ModelConfig::desk();
    // Two dead experts per layer, rotating with depth.
    let dead: Vec<Vec<usize>> = (0..config.n_layers)
        .map(|l| {
            let mut v = vec![l % 8, (l + 3) % 8];
            v.sort_unstable();
            v
        })
        .collect();
    let spec = GenSpec {
        config,
        weight_scale: 1.0,
        dead_experts: Some(dead.clone()),
        domain_plant: None,
        seed: 11,
    };
    let model = gen_model(&spec)?;

    let domain = DomainSpec {
        domain_id: 0,
        mean: Vector::zeros(32),
        scale: 1.0,
        seed: 12,
    };
    let tokens = gen_calib(&domain, 2048, 32)?;
    let (cache, _) = run_calibration(&model, &tokens)?;

    let (pruned, report) =
        prune_model_layerwise(&model, &cache, &PruneSpec::new(PruneMethod::Exhaustive, 6))?;

    println!("exhaustive pruning to r = 6 (two experts dropped per layer):");
    let mut recovered = 0;
    for (l, lr) in report.layers.iter().enumerate() {
        let dropped: Vec<usize> = (0..8).filter(|e| !lr.retained.contains(e)).collect();
        let hit = dropped == dead[l];
        if hit {
            recovered += 1;
        }
        println!(
            "  layer {l}: dropped {:?} (planted {:?}) loss {:.3e} {}",
            dropped,
            dead[l],
            lr.loss.unwrap(),
            if hit { "ok" } else { "MISS" }
        );
    }
    println!(
        "\nrecovered the planted dead pair in {recovered}/{} layers",
        report.layers.len()
    );
    println!(
        "pruned model: experts_per_layer = {:?}",
        pruned.config.experts_per_layer
    );
    Ok(())
}
