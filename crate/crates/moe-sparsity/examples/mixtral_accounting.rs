//! Parameter accounting for the shipped Mixtral-8x7B reference shape:
//! expert share of the total, active parameters per token, and the
//! reduction from pruning experts.
//!
//! ```bash
//! cargo run --example mixtral_accounting
//! ```

use moe_sparsity::accounting::{count_after_prune, count_params, RefConfig};

fn main() -> moe_sparsity::Result<()> {
    let cfg = RefConfig::mixtral_8x7b();
    let rep = count_params(&cfg)?;

    let gb = 1e9;
    println!("Mixtral-8x7B shape:");
    println!("  experts    {:>7.3}e9 params", rep.expert_params as f64 / gb);
    println!("  router     {:>7.3}e6 params", rep.router_params as f64 / 1e6);
    println!("  attention  {:>7.3}e9 params", rep.attention_params as f64 / gb);
    println!("  embeddings {:>7.3}e9 params", rep.embedding_params as f64 / gb);
    println!("  norms      {:>7.3}e6 params", rep.norm_params as f64 / 1e6);
    println!("  total      {:>7.3}e9 params", rep.total_params as f64 / gb);
    println!("\n  expert share of total: {:.2}%", 100.0 * rep.expert_share);
    println!(
        "  active per token (top-{}): {:.3}e9 params",
        cfg.top_k,
        rep.active_params as f64 / gb
    );
    println!(
        "  FLOPs per token: dense {:.3}e9, active {:.3}e9",
        rep.flops_per_token_dense as f64 / gb,
        rep.flops_per_token_active as f64 / gb
    );

    println!("\nparameter reduction from expert pruning:");
    for r in (2..=7).rev() {
        let red = count_after_prune(&cfg, r)?;
        println!(
            "  r = {r}: total {:>7.3}e9, reduction {:>5.1}%",
            red.pruned.total_params as f64 / gb,
            100.0 * red.reduction
        );
    }
    Ok(())
}
