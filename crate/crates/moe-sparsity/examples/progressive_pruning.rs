//! Layer-wise vs progressive subset search: the progressive variant feeds
//! each layer the activations of the already-pruned prefix instead of the
//! original model's activations.
//!
//! ```bash
//! cargo run --example progressive_pruning
//! ```

use moe_sparsity::calibration::run_calibration;
use moe_sparsity::evaluation::{compare_subsets, eval_fidelity};
use moe_sparsity::modelgen::{gen_calib, gen_model, DomainSpec, GenSpec};
use moe_sparsity::moe::ModelConfig;
use moe_sparsity::numerics::Vector;
use moe_sparsity::pruning::{
    prune_model_layerwise, prune_model_progressive, PruneMethod, PruneSpec,
};

fn main() -> moe_sparsity::Result<()> {
    let spec = GenSpec::plain(ModelConfig::desk(), 1.0, 31);
    let model = gen_model(&spec)?;
    let domain = DomainSpec {
        domain_id: 0,
        mean: Vector::zeros(32),
        scale: 1.0,
        seed: 32,
    };
    let calib = gen_calib(&domain, 2048, 32)?;
    let mut holdout_domain = domain.clone();
    holdout_domain.seed = 33;
    let holdout = gen_calib(&holdout_domain, 512, 32)?;

    for r in [6, 4] {
        let (cache, _) = run_calibration(&model, &calib)?;
        let (flat_model, flat) =
            prune_model_layerwise(&model, &cache, &PruneSpec::new(PruneMethod::Exhaustive, r))?;
        let (prog_model, prog) =
            prune_model_progressive(&model, &calib, &PruneSpec::new(PruneMethod::Progressive, r))?;

        let cmp = compare_subsets(&flat, &prog)?;
        println!("r = {r}: retained subsets agree in {}/8 layers", cmp.layers_equal);
        for l in 0..8 {
            println!(
                "  layer {l}: layer-wise {:?} ({:.4}) | progressive {:?} ({:.4})",
                flat.layers[l].retained,
                flat.layers[l].loss.unwrap(),
                prog.layers[l].retained,
                prog.layers[l].loss.unwrap()
            );
        }
        let flat_eval = eval_fidelity(&model, &flat_model, None, &holdout)?;
        let prog_eval = eval_fidelity(&model, &prog_model, None, &holdout)?;
        println!(
            "  holdout relative error: layer-wise {:.4}, progressive {:.4}\n",
            flat_eval.end_to_end_rel_err, prog_eval.end_to_end_rel_err
        );
    }
    Ok(())
}
