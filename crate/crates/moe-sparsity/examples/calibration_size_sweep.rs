//! How much calibration data does the subset search need? Prune at several
//! calibration sizes and report holdout quality as a CSV table.
//!
//! ```bash
//! cargo run --example calibration_size_sweep
//! ```

use moe_sparsity::evaluation::{calib_size_sweep, sweep_csv};
use moe_sparsity::modelgen::{gen_model, DomainSpec, GenSpec};
use moe_sparsity::moe::ModelConfig;
use moe_sparsity::numerics::Vector;
use moe_sparsity::pruning::{PruneMethod, PruneSpec};

fn main() -> moe_sparsity::Result<()> {
    let spec = GenSpec::plain(ModelConfig::desk(), 1.0, 61);
    let model = gen_model(&spec)?;
    let domain = DomainSpec {
        domain_id: 0,
        mean: Vector::zeros(32),
        scale: 1.0,
        seed: 62,
    };

    let sizes = [1, 2, 4, 16, 64, 256, 1024];
    let rows = calib_size_sweep(
        &model,
        &domain,
        &sizes,
        &PruneSpec::new(PruneMethod::Exhaustive, 6),
        1024,
    )?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}
