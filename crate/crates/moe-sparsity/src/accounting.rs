//! Analytic parameter and per-token FLOP accounting.
//!
//! Covers two shapes: a reference decoder configuration with grouped-query
//! attention and untied embeddings (the Mixtral-8x7B shape ships as
//! `data/mixtral-8x7b.json`), and the toy MoE stack itself. All counts are
//! exact integers; FLOPs are the parameter-bound estimate of 2 ops per matmul
//! weight element per token (embedding lookups and norms excluded, attention
//! context-length terms excluded).

use crate::calibration::RoutingStats;
use crate::error::{Error, Result};
use crate::moe::MoEModel;
use crate::numerics::Matrix;
use crate::skipping::{SkipConfig, SkipMode};
use serde::{Deserialize, Serialize};

/// Reference decoder shape for parameter accounting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefConfig {
    pub vocab: u64,
    pub n_layers: u64,
    pub d_model: u64,
    pub d_ff: u64,
    pub n_experts: u64,
    pub top_k: u64,
    pub n_heads: u64,
    pub n_kv_heads: u64,
    pub head_dim: u64,
    pub tie_embeddings: bool,
}

impl RefConfig {
    /// The published Mixtral 8x7B shape.
    pub fn mixtral_8x7b() -> Self {
        RefConfig {
            vocab: 32_000,
            n_layers: 32,
            d_model: 4096,
            d_ff: 14_336,
            n_experts: 8,
            top_k: 2,
            n_heads: 32,
            n_kv_heads: 8,
            head_dim: 128,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::InvalidConfig(format!(
                "n_heads * head_dim = {} does not equal d_model = {}",
                self.n_heads * self.head_dim,
                self.d_model
            )));
        }
        if self.n_kv_heads > self.n_heads {
            return Err(Error::InvalidConfig(
                "n_kv_heads exceeds n_heads".into(),
            ));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::InvalidConfig(format!(
                "top_k = {} outside [1, n_experts = {}]",
                self.top_k, self.n_experts
            )));
        }
        Ok(())
    }
}

/// Itemized parameter and FLOP counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub expert_params: u64,
    pub router_params: u64,
    pub attention_params: u64,
    pub embedding_params: u64,
    pub norm_params: u64,
    pub total_params: u64,
    /// Parameters touched per token: top-k experts plus all shared weights.
    pub active_params: u64,
    /// Expert fraction of the total.
    pub expert_share: f64,
    pub flops_per_token_dense: u64,
    pub flops_per_token_active: u64,
}

fn count_with_experts(cfg: &RefConfig, experts_per_layer: u64) -> CountReport {
    let l = cfg.n_layers;
    let d = cfg.d_model;
    let expert_params = l * experts_per_layer * 3 * d * cfg.d_ff;
    let router_params = l * experts_per_layer * d;
    // Grouped-query attention: Q and O at d_model^2 each, K and V at
    // d_model * n_kv_heads * head_dim each.
    let attention_params = l * (2 * d * d + 2 * d * cfg.n_kv_heads * cfg.head_dim);
    let embedding_params = cfg.vocab * d * if cfg.tie_embeddings { 1 } else { 2 };
    let norm_params = l * 2 * d + d;
    let total_params =
        expert_params + router_params + attention_params + embedding_params + norm_params;

    let active_expert_params = l * cfg.top_k * 3 * d * cfg.d_ff;
    let active_params = total_params - expert_params + active_expert_params;

    // Matmul weights only: experts + router + attention + lm head.
    let lm_head = cfg.vocab * d;
    let flops_per_token_dense = 2 * (expert_params + router_params + attention_params + lm_head);
    let flops_per_token_active =
        2 * (active_expert_params + router_params + attention_params + lm_head);

    CountReport {
        expert_params,
        router_params,
        attention_params,
        embedding_params,
        norm_params,
        total_params,
        active_params,
        expert_share: expert_params as f64 / total_params as f64,
        flops_per_token_dense,
        flops_per_token_active,
    }
}

/// Parameter accounting for a reference config.
pub fn count_params(cfg: &RefConfig) -> Result<CountReport> {
    cfg.validate()?;
    Ok(count_with_experts(cfg, cfg.n_experts))
}

/// Accounting after pruning to `r` experts per layer, with the reduction
/// fraction relative to the unpruned total.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReductionReport {
    pub r: u64,
    pub baseline: CountReport,
    pub pruned: CountReport,
    /// `1 - pruned_total / baseline_total`.
    pub reduction: f64,
}

pub fn count_after_prune(cfg: &RefConfig, r: u64) -> Result<ReductionReport> {
    cfg.validate()?;
    if r < cfg.top_k || r > cfg.n_experts {
        return Err(Error::InvalidConfig(format!(
            "r = {r} outside [top_k = {}, n_experts = {}]",
            cfg.top_k, cfg.n_experts
        )));
    }
    let baseline = count_with_experts(cfg, cfg.n_experts);
    let pruned = count_with_experts(cfg, r);
    let reduction = 1.0 - pruned.total_params as f64 / baseline.total_params as f64;
    Ok(ReductionReport {
        r,
        baseline,
        pruned,
        reduction,
    })
}

/// Tensor element count of a toy-stack model. Matches the f32 element count
/// of its `.moe` serialization exactly (norm gains, router rows, logit
/// biases, expert weights).
pub fn count_model_params(model: &MoEModel) -> u64 {
    let d = model.config.d_model as u64;
    let f = model.config.d_ff as u64;
    model
        .config
        .experts_per_layer
        .iter()
        .map(|&n| {
            let n = n as u64;
            d + n * d + n + n * (2 * f * d + d * f)
        })
        .sum()
}

/// Mean kept-expert count per token per layer when forwarding `tokens` with
/// the given skip config (k everywhere when `skip` is `None`).
pub fn expected_expert_evals(
    model: &MoEModel,
    tokens: &Matrix,
    skip: Option<&SkipConfig>,
) -> Result<Vec<f64>> {
    use std::sync::atomic::{AtomicU64, Ordering};
    let kept: Vec<AtomicU64> = (0..model.config.n_layers)
        .map(|_| AtomicU64::new(0))
        .collect();
    crate::moe::model_forward_observed(model, tokens, skip, &|tap: crate::moe::LayerTap<'_>| {
        kept[tap.layer].fetch_add(tap.decision.k() as u64, Ordering::Relaxed);
    })?;
    let t = tokens.n_rows() as f64;
    Ok(kept
        .iter()
        .map(|c| c.load(std::sync::atomic::Ordering::Relaxed) as f64 / t)
        .collect())
}

/// As [`expected_expert_evals`] but computed from recorded routing statistics
/// instead of a token stream. Supports k = 2 stats: in top2 mode an expert is
/// skipped iff its ratio sample is strictly below beta; in general mode iff
/// the tail fraction is at most beta'.
pub fn expected_expert_evals_from_stats(
    stats: &RoutingStats,
    skip: &SkipConfig,
) -> Result<Vec<f64>> {
    if stats.top_k != 2 {
        return Err(Error::InvalidConfig(format!(
            "stats-based expected evals need top-2 stats, got top-{}; use the stream form",
            stats.top_k
        )));
    }
    skip.validate(stats.layers.len())?;
    let mut out = Vec::with_capacity(stats.layers.len());
    for (l, ls) in stats.layers.iter().enumerate() {
        let beta = skip.beta[l];
        let samples = match skip.mode {
            SkipMode::Top2 => &ls.ratio_samples,
            SkipMode::General => &ls.tail_fraction_samples,
        };
        if samples.is_empty() {
            return Err(Error::Calibration(format!(
                "layer {l}: no ratio samples recorded"
            )));
        }
        let skipped = samples
            .iter()
            .filter(|&&s| match skip.mode {
                SkipMode::Top2 => s < beta,
                SkipMode::General => s <= beta,
            })
            .count();
        let rate = skipped as f64 / samples.len() as f64;
        out.push(2.0 - rate);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelgen::{gen_calib, gen_model, DomainSpec, GenSpec};
    use crate::moe::ModelConfig;
    use crate::numerics::Vector;

    #[test]
    fn mixtral_headline_numbers() {
        let rep = count_params(&RefConfig::mixtral_8x7b()).unwrap();
        assert!(
            (45.0e9..45.2e9).contains(&(rep.expert_params as f64)),
            "expert params {}",
            rep.expert_params
        );
        assert!((45.8e9..47.6e9).contains(&(rep.total_params as f64)));
        assert!((0.94..0.98).contains(&rep.expert_share));
        assert!((12.4e9..13.5e9).contains(&(rep.active_params as f64)));
    }

    #[test]
    fn accounting_identity_and_limits() {
        let cfg = RefConfig::mixtral_8x7b();
        let rep = count_params(&cfg).unwrap();
        assert_eq!(
            rep.total_params,
            rep.expert_params
                + rep.router_params
                + rep.attention_params
                + rep.embedding_params
                + rep.norm_params
        );

        // Dense limit: selecting all experts makes active = total.
        let mut dense = cfg.clone();
        dense.top_k = dense.n_experts;
        let d = count_params(&dense).unwrap();
        assert_eq!(d.active_params, d.total_params);

        // Zero layers leaves embeddings plus the final norm.
        let mut empty = cfg.clone();
        empty.n_layers = 0;
        let e = count_params(&empty).unwrap();
        assert_eq!(e.expert_params, 0);
        assert_eq!(e.total_params, e.embedding_params + e.norm_params);
        assert_eq!(e.norm_params, e.embedding_params / (2 * 32_000));
    }

    #[test]
    fn reduction_ratios() {
        let cfg = RefConfig::mixtral_8x7b();
        let r4 = count_after_prune(&cfg, 4).unwrap();
        assert!((r4.reduction - 0.48).abs() <= 0.02, "r=4: {}", r4.reduction);
        let r6 = count_after_prune(&cfg, 6).unwrap();
        assert!((r6.reduction - 0.24).abs() <= 0.02, "r=6: {}", r6.reduction);
        let r8 = count_after_prune(&cfg, 8).unwrap();
        assert_eq!(r8.reduction, 0.0);
        assert!(count_after_prune(&cfg, 1).is_err());
    }

    #[test]
    fn expert_share_monotonicity() {
        let base = RefConfig::mixtral_8x7b();
        let share = |cfg: &RefConfig| count_params(cfg).unwrap().expert_share;
        let mut more_ff = base.clone();
        more_ff.d_ff += 1024;
        assert!(share(&more_ff) > share(&base));
        let mut more_experts = base.clone();
        more_experts.n_experts += 1;
        assert!(share(&more_experts) > share(&base));
    }

    #[test]
    fn toy_counter_matches_serialized_elements() {
        let spec = GenSpec::plain(ModelConfig::uniform(2, 4, 6, 3, 2, 1e-5), 0.5, 3);
        let model = gen_model(&spec).unwrap();
        let bytes = crate::io::model_to_bytes(&model);
        // Header: magic 4 + version 4 + 4 dims * 4 + eps 8 + per-layer count 4 each.
        let header = 4 + 4 + 16 + 8 + 4 * model.config.n_layers;
        let elements = (bytes.len() - header) / 4;
        assert_eq!(count_model_params(&model), elements as u64);
    }

    #[test]
    fn expected_evals_without_skip_is_k() {
        let spec = GenSpec::plain(ModelConfig::uniform(2, 6, 8, 4, 2, 1e-5), 0.7, 19);
        let model = gen_model(&spec).unwrap();
        let tokens = gen_calib(
            &DomainSpec {
                domain_id: 0,
                mean: Vector::zeros(6),
                scale: 1.0,
                seed: 5,
            },
            32,
            6,
        )
        .unwrap();
        let evals = expected_expert_evals(&model, &tokens, None).unwrap();
        assert_eq!(evals, vec![2.0, 2.0]);

        let zero_skip = SkipConfig::zeros(SkipMode::Top2, 2);
        let evals = expected_expert_evals(&model, &tokens, Some(&zero_skip)).unwrap();
        assert_eq!(evals, vec![2.0, 2.0]);
    }
}
