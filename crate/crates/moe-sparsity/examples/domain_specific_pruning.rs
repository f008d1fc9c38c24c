//! Task-specific calibration: plant two token domains with disjoint expert
//! specialists, prune once with domain-A calibration data and once with
//! domain-B data, and compare the retained subsets.
//!
//! ```bash
//! cargo run --example domain_specific_pruning
//! ```

use moe_sparsity::calibration::run_calibration;
use moe_sparsity::evaluation::{compare_subsets, eval_fidelity};
use moe_sparsity::modelgen::{gen_calib, gen_model, planted_domain_spec, DomainPlant, GenSpec};
use moe_sparsity::moe::ModelConfig;
use moe_sparsity::pruning::{prune_model_layerwise, PruneMethod, PruneSpec};
use std::collections::BTreeMap;

fn main() -> moe_sparsity::Result<()> {
    let config = ModelConfig::desk();
    let specialists: Vec<BTreeMap<usize, Vec<usize>>> = (0..config.n_layers)
        .map(|l| {
            let mut a: Vec<usize> = (0..4).map(|i| (l + i) % 8).collect();
            a.sort_unstable();
            let b: Vec<usize> = (0..8).filter(|e| !a.contains(e)).collect();
            BTreeMap::from([(0, a), (1, b)])
        })
        .collect();
    let spec = GenSpec {
        config,
        weight_scale: 0.15,
        dead_experts: None,
        domain_plant: Some(DomainPlant {
            n_domains: 2,
            specialists,
            bias: 8.0,
        }),
        seed: 99,
    };
    let model = gen_model(&spec)?;

    let mut reports = Vec::new();
    let mut pruned_models = Vec::new();
    for domain_id in [0, 1] {
        let domain = planted_domain_spec(&spec, domain_id, 0.25)?;
        let tokens = gen_calib(&domain, 2048, 32)?;
        let (cache, _) = run_calibration(&model, &tokens)?;
        let (pruned, report) =
            prune_model_layerwise(&model, &cache, &PruneSpec::new(PruneMethod::Exhaustive, 4))?;
        reports.push(report);
        pruned_models.push(pruned);
    }

    println!("retained subsets at r = 4:");
    println!("  layer |  A-calibrated  |  B-calibrated");
    for l in 0..8 {
        println!(
            "    {l}   |  {:?}  |  {:?}",
            reports[0].layers[l].retained, reports[1].layers[l].retained
        );
    }

    let cmp = compare_subsets(&reports[0], &reports[1])?;
    println!(
        "\nsubsets differ in {}/8 layers, mean Jaccard overlap {:.3}",
        8 - cmp.layers_equal,
        cmp.mean_jaccard
    );

    // Cross-domain damage: each pruned model evaluated on the other domain.
    for (name, pruned, eval_domain) in [
        ("A-pruned on A", &pruned_models[0], 0),
        ("A-pruned on B", &pruned_models[0], 1),
        ("B-pruned on B", &pruned_models[1], 1),
        ("B-pruned on A", &pruned_models[1], 0),
    ] {
        let domain = planted_domain_spec(&spec, eval_domain, 0.25)?;
        let mut holdout_domain = domain.clone();
        holdout_domain.seed ^= 0x5A5A;
        let holdout = gen_calib(&holdout_domain, 512, 32)?;
        let eval = eval_fidelity(&model, pruned, None, &holdout)?;
        println!(
            "  {name}: end-to-end relative error {:.4}",
            eval.end_to_end_rel_err
        );
    }
    Ok(())
}
