//! Dynamic expert skipping: calibrate per-layer thresholds as the median
//! top-2 weight ratio, measure skip rates and expected expert evaluations,
//! and check the reconstruction-loss bound on live routing decisions.
//!
//! ```bash
//! cargo run --example dynamic_skipping
//! ```

use moe_sparsity::accounting::expected_expert_evals;
use moe_sparsity::calibration::run_calibration;
use moe_sparsity::evaluation::eval_fidelity;
use moe_sparsity::modelgen::{gen_calib, gen_model, DomainSpec, GenSpec};
use moe_sparsity::moe::{expert_eval, route, ModelConfig};
use moe_sparsity::numerics::Vector;
use moe_sparsity::skipping::{calibrate_beta, check_skip_bound, SkipMode};

fn main() -> moe_sparsity::Result<()> {
    let spec = GenSpec::plain(ModelConfig::desk(), 1.0, 5);
    let model = gen_model(&spec)?;
    let domain = DomainSpec {
        domain_id: 0,
        mean: Vector::zeros(32),
        scale: 1.0,
        seed: 6,
    };
    let calib = gen_calib(&domain, 2048, 32)?;

    let (_, stats) = run_calibration(&model, &calib)?;
    let skip = calibrate_beta(&stats, SkipMode::Top2)?;
    println!("median-calibrated per-layer beta:");
    for (l, b) in skip.beta.iter().enumerate() {
        println!("  layer {l}: beta = {b:.4}");
    }

    let evals = expected_expert_evals(&model, &calib, Some(&skip))?;
    println!("\nexpected expert evaluations per token (k = 2 without skipping):");
    for (l, e) in evals.iter().enumerate() {
        println!("  layer {l}: {e:.3} (skip rate {:.3})", 2.0 - e);
    }

    // Output damage from skipping on fresh tokens.
    let mut holdout_domain = domain.clone();
    holdout_domain.seed = 777;
    let holdout = gen_calib(&holdout_domain, 512, 32)?;
    let eval = eval_fidelity(&model, &model, Some(&skip), &holdout)?;
    println!(
        "\nskipped vs full model on holdout: end-to-end relative error {:.4}",
        eval.end_to_end_rel_err
    );

    // The tail-fraction bound on one live decision: keep only the top expert
    // and compare the incurred loss against (tail fraction) * d_max.
    let x = holdout.row_vector(0);
    let decision = route(&model.layers[0], &x, 2)?;
    let outputs: Vec<Vector> = decision
        .selected
        .iter()
        .map(|&e| expert_eval(&model.layers[0].experts[e], &x))
        .collect::<moe_sparsity::Result<_>>()?;
    let check = check_skip_bound(&decision.raw_weights, &outputs, 1)?;
    println!(
        "\nbound check (token 0, layer 0, keep top-1): loss {:.4} <= bound {:.4}",
        check.loss, check.bound
    );
    Ok(())
}
