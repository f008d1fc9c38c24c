//! Build a small synthetic MoE model and walk one token through it:
//! routing decision, expert mix, residual block, and the full stack.
//!
//! ```bash
//! cargo run --example forward_pass
//! ```

use moe_sparsity::modelgen::{gen_calib, gen_model, DomainSpec, GenSpec};
use moe_sparsity::moe::{block_forward, model_forward, route, ModelConfig};
use moe_sparsity::numerics::Vector;

fn main() -> moe_sparsity::Result<()> {
    let config = ModelConfig::uniform(4, 16, 32, 6, 2, 1e-5);
    let spec = GenSpec::plain(config, 1.0, 42);
    let model = gen_model(&spec)?;
    println!(
        "model: {} layers, d_model {}, {} experts per layer, top-{}",
        model.config.n_layers,
        model.config.d_model,
        model.config.experts_per_layer[0],
        model.config.top_k
    );

    // One token through the first layer's router.
    let domain = DomainSpec {
        domain_id: 0,
        mean: Vector::zeros(16),
        scale: 1.0,
        seed: 7,
    };
    let tokens = gen_calib(&domain, 4, 16)?;
    let x = tokens.row_vector(0);
    let decision = route(&model.layers[0], &x, model.config.top_k)?;
    println!("\nrouting of token 0 in layer 0:");
    for (j, &e) in decision.selected.iter().enumerate() {
        println!(
            "  expert {e}: softmax weight {:.4}, renormalized {:.4}",
            decision.raw_weights[j], decision.normalized_weights[j]
        );
    }

    // Residual block and whole-stack forward.
    let block_out = block_forward(&model.layers[0], &x, model.config.top_k, 1e-5, None)?;
    println!(
        "\nblock 0: |x| = {:.4} -> |x + moe(norm(x))| = {:.4}",
        x.l2_norm(),
        block_out.l2_norm()
    );

    let outputs = model_forward(&model, &tokens, None)?;
    println!("\nfull stack over {} tokens:", tokens.n_rows());
    for t in 0..outputs.n_rows() {
        let y = outputs.row_vector(t);
        println!("  token {t}: output norm {:.4}", y.l2_norm());
    }
    Ok(())
}
