//! Fidelity evaluation of pruned/skipped models against the original:
//! per-layer reconstruction losses on held-out tokens, end-to-end output
//! divergence, skip rates, retained-subset comparisons, and the
//! calibration-size sweep.
//!
//! There is no benchmark accuracy at desk scale; output divergence against
//! the unmodified model is the honest substitute and is labeled as such in
//! reports.

use crate::calibration::{run_calibration, CalibrationFingerprint};
use crate::error::{Error, Result};
use crate::io::{model_to_bytes, sha256_hex};
use crate::modelgen::{gen_calib, DomainSpec};
use crate::moe::{self, MoEModel};
use crate::numerics::{Matrix, Prng, Vector};
use crate::pruning::{
    prune_frequency, prune_model_layerwise, prune_model_progressive, prune_random, PruneMethod,
    PruneReport, PruneSpec,
};
use crate::skipping::SkipConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Fidelity report for one (original, variant, skip) triple.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// Frobenius reconstruction loss per layer: variant sublayer (with skip)
    /// vs original sublayer, both on the original model's holdout
    /// activations.
    pub per_layer_loss: Vec<f64>,
    /// Mean per-token relative L2 error between final outputs.
    pub end_to_end_rel_err: f64,
    /// Fraction of tokens per layer on which skipping dropped >= 1 expert.
    pub per_layer_skip_rate: Vec<f64>,
    /// Mean kept-expert count per token per layer.
    pub mean_active_experts: Vec<f64>,
    pub holdout: CalibrationFingerprint,
    pub original_sha256: String,
    pub variant_sha256: String,
    pub skip: Option<SkipConfig>,
}

/// Forwards both models over the holdout set and reports per-layer and
/// end-to-end divergences. The holdout should be disjoint from the
/// calibration data; the report records its fingerprint so this can be
/// checked.
pub fn eval_fidelity(
    original: &MoEModel,
    variant: &MoEModel,
    skip: Option<&SkipConfig>,
    holdout: &Matrix,
) -> Result<EvalReport> {
    if original.config.d_model != variant.config.d_model {
        return Err(Error::InvalidInput(
            "models disagree on d_model".into(),
        ));
    }
    if original.config.n_layers != variant.config.n_layers {
        return Err(Error::InvalidInput(
            "models disagree on layer count".into(),
        ));
    }
    if let Some(s) = skip {
        s.validate(variant.config.n_layers)?;
    }
    let n_layers = original.config.n_layers;
    let n_tokens = holdout.n_rows();
    let k_variant = variant.config.top_k;

    // Original activations at every sublayer boundary.
    let (orig_cache, _) = run_calibration(original, holdout)?;

    let mut per_layer_loss = Vec::with_capacity(n_layers);
    let mut per_layer_skip_rate = Vec::with_capacity(n_layers);
    let mut mean_active_experts = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let lc = &orig_cache.layers[l];
        let rule = skip.map(|s| s.layer_rule(l)).transpose()?;
        let per_token: Vec<(f64, usize)> = (0..n_tokens)
            .into_par_iter()
            .map(|t| {
                let x = lc.inputs.row_vector(t);
                let (z, decision) =
                    moe::moe_layer_forward_decided(&variant.layers[l], &x, k_variant, rule.as_ref())?;
                let mut sq = 0.0;
                for (zi, oi) in z.iter().zip(lc.outputs.row(t).iter()) {
                    let d = zi - oi;
                    sq += d * d;
                }
                Ok((sq, decision.k()))
            })
            .collect::<Result<_>>()?;
        let loss: f64 = per_token.iter().map(|(sq, _)| sq).sum::<f64>().sqrt();
        let kept: usize = per_token.iter().map(|(_, k)| k).sum();
        let skipped = per_token.iter().filter(|(_, k)| *k < k_variant).count();
        per_layer_loss.push(loss);
        if n_tokens > 0 {
            per_layer_skip_rate.push(skipped as f64 / n_tokens as f64);
            mean_active_experts.push(kept as f64 / n_tokens as f64);
        } else {
            per_layer_skip_rate.push(0.0);
            mean_active_experts.push(0.0);
        }
    }

    // End-to-end divergence over final outputs.
    let y_orig = moe::model_forward(original, holdout, None)?;
    let y_var = moe::model_forward(variant, holdout, skip)?;
    let mut rel_sum = 0.0;
    for t in 0..n_tokens {
        let o = Vector::from_vec(y_orig.row(t).to_vec());
        let v = Vector::from_vec(y_var.row(t).to_vec());
        let diff = v.sub(&o).l2_norm();
        let denom = o.l2_norm();
        rel_sum += if diff == 0.0 { 0.0 } else { diff / denom };
    }
    let end_to_end_rel_err = if n_tokens > 0 {
        rel_sum / n_tokens as f64
    } else {
        0.0
    };

    Ok(EvalReport {
        per_layer_loss,
        end_to_end_rel_err,
        per_layer_skip_rate,
        mean_active_experts,
        holdout: CalibrationFingerprint::of(holdout),
        original_sha256: sha256_hex(&model_to_bytes(original)),
        variant_sha256: sha256_hex(&model_to_bytes(variant)),
        skip: skip.cloned(),
    })
}

/// Per-layer comparison of two pruning outcomes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubsetComparison {
    /// Whether the retained sets are identical, per layer.
    pub per_layer_equal: Vec<bool>,
    /// Jaccard overlap |A n B| / |A u B| of the retained sets, per layer.
    pub per_layer_jaccard: Vec<f64>,
    pub layers_equal: usize,
    pub mean_jaccard: f64,
}

/// Compares the retained subsets of two prune reports layer by layer.
pub fn compare_subsets(a: &PruneReport, b: &PruneReport) -> Result<SubsetComparison> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::InvalidInput(format!(
            "reports cover {} vs {} layers",
            a.layers.len(),
            b.layers.len()
        )));
    }
    if a.r != b.r {
        return Err(Error::InvalidInput(format!(
            "reports prune to different r: {} vs {}",
            a.r, b.r
        )));
    }
    let mut per_layer_equal = Vec::with_capacity(a.layers.len());
    let mut per_layer_jaccard = Vec::with_capacity(a.layers.len());
    for (la, lb) in a.layers.iter().zip(b.layers.iter()) {
        let sa: std::collections::BTreeSet<usize> = la.retained.iter().copied().collect();
        let sb: std::collections::BTreeSet<usize> = lb.retained.iter().copied().collect();
        let inter = sa.intersection(&sb).count();
        let union = sa.union(&sb).count();
        per_layer_equal.push(sa == sb);
        per_layer_jaccard.push(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        });
    }
    let layers_equal = per_layer_equal.iter().filter(|&&e| e).count();
    let mean_jaccard =
        per_layer_jaccard.iter().sum::<f64>() / per_layer_jaccard.len().max(1) as f64;
    Ok(SubsetComparison {
        per_layer_equal,
        per_layer_jaccard,
        layers_equal,
        mean_jaccard,
    })
}

/// One calibration-size sweep row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub tokens: usize,
    /// Per-layer holdout reconstruction losses summed over layers.
    pub holdout_loss: f64,
    pub end_to_end_rel_err: f64,
}

/// Stream label for deriving the sweep holdout seed from the domain seed.
const SWEEP_HOLDOUT_STREAM: u64 = 0x5EED;

/// Prunes the model once per calibration size (all sizes drawn from the same
/// domain stream, so a smaller set is a prefix of a larger one) and evaluates
/// each pruned model on a fixed holdout drawn from a split stream of the same
/// domain.
pub fn calib_size_sweep(
    model: &MoEModel,
    domain: &DomainSpec,
    sizes: &[usize],
    spec: &PruneSpec,
    holdout_tokens: usize,
) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("empty size list".into()));
    }
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("sizes must be ascending".into()));
    }
    let d_model = model.config.d_model;
    let mut holdout_domain = domain.clone();
    holdout_domain.seed = Prng::new(domain.seed).split(SWEEP_HOLDOUT_STREAM).seed();
    let holdout = gen_calib(&holdout_domain, holdout_tokens, d_model)?;

    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let tokens = gen_calib(domain, size, d_model)?;
        let (pruned, _) = prune_with_method(model, &tokens, spec)?;
        let eval = eval_fidelity(model, &pruned, None, &holdout)?;
        rows.push(SweepRow {
            tokens: size,
            holdout_loss: eval.per_layer_loss.iter().sum(),
            end_to_end_rel_err: eval.end_to_end_rel_err,
        });
    }
    Ok(rows)
}

/// Runs the spec's method given raw calibration tokens, producing the pruned
/// model and its report.
pub fn prune_with_method(
    model: &MoEModel,
    tokens: &Matrix,
    spec: &PruneSpec,
) -> Result<(MoEModel, PruneReport)> {
    match spec.method {
        PruneMethod::Exhaustive => {
            let (cache, _) = run_calibration(model, tokens)?;
            prune_model_layerwise(model, &cache, spec)
        }
        PruneMethod::Progressive => prune_model_progressive(model, tokens, spec),
        PruneMethod::Random => {
            let (cache, _) = run_calibration(model, tokens)?;
            prune_random(model, spec, Some(&cache))
        }
        PruneMethod::Frequency => {
            let (cache, stats) = run_calibration(model, tokens)?;
            prune_frequency(model, &stats, spec, Some(&cache))
        }
    }
}

/// Renders sweep rows as CSV with the `tokens,holdout_loss,end_to_end_rel_err`
/// header.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("tokens,holdout_loss,end_to_end_rel_err\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            row.tokens, row.holdout_loss, row.end_to_end_rel_err
        ));
    }
    out
}
