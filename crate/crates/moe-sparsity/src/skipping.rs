//! Dynamic expert skipping: drop low-weight selected experts at inference
//! time instead of removing them from the model.
//!
//! Two rules are provided. The top-2 rule drops the runner-up expert when
//! `w1 < beta * w0` (strict, so beta = 0 never skips). The general top-k rule
//! keeps the shortest prefix of the selection whose dropped tail weight
//! fraction is at most beta'; for k = 2 the two rules coincide under
//! `beta = beta' / (1 - beta')`. Per-layer thresholds are calibrated as the
//! median of the observed weight ratios, which makes skipping fire on roughly
//! half the tokens.

use crate::calibration::RoutingStats;
use crate::error::{Error, Result};
use crate::moe::{normalize_weights, RoutingDecision};
use crate::numerics::Vector;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    Top2,
    General,
}

/// Per-layer skipping thresholds: beta (top2 mode) or beta' (general mode),
/// one entry per layer, each in `[0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipConfig {
    pub mode: SkipMode,
    pub beta: Vec<f64>,
}

impl SkipConfig {
    /// All-zero thresholds (skipping never fires).
    pub fn zeros(mode: SkipMode, n_layers: usize) -> Self {
        SkipConfig {
            mode,
            beta: vec![0.0; n_layers],
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.beta.len() != n_layers {
            return Err(Error::InvalidConfig(format!(
                "skip config has {} entries for {} layers",
                self.beta.len(),
                n_layers
            )));
        }
        if let Some(b) = self
            .beta
            .iter()
            .find(|b| !(0.0..1.0).contains(*b) || !b.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "skip threshold {b} outside [0, 1)"
            )));
        }
        Ok(())
    }

    /// The rule for one layer.
    pub fn layer_rule(&self, layer: usize) -> Result<LayerSkip> {
        let beta = *self.beta.get(layer).ok_or_else(|| {
            Error::InvalidConfig(format!("skip config has no entry for layer {layer}"))
        })?;
        Ok(LayerSkip {
            mode: self.mode,
            beta,
        })
    }
}

/// One layer's skipping rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSkip {
    pub mode: SkipMode,
    pub beta: f64,
}

/// Applies a layer rule to a routing decision.
pub fn apply(decision: RoutingDecision, rule: &LayerSkip) -> Result<RoutingDecision> {
    match rule.mode {
        SkipMode::Top2 => skip_top2(decision, rule.beta),
        SkipMode::General => Ok(skip_general(decision, rule.beta)),
    }
}

/// Top-2 rule: drop the second expert iff `w1 < beta * w0` (strict), giving
/// the kept expert weight 1. Requires a 2-expert decision.
pub fn skip_top2(decision: RoutingDecision, beta: f64) -> Result<RoutingDecision> {
    if decision.k() != 2 {
        return Err(Error::InvalidConfig(format!(
            "skip_top2 requires exactly 2 selected experts, got {}",
            decision.k()
        )));
    }
    if decision.raw_weights[1] < beta * decision.raw_weights[0] {
        Ok(RoutingDecision {
            selected: vec![decision.selected[0]],
            raw_weights: vec![decision.raw_weights[0]],
            normalized_weights: vec![1.0],
        })
    } else {
        Ok(decision)
    }
}

/// General top-k rule: keep the top-i* experts where i* is the smallest i
/// with `sum(w[i..]) <= beta' * sum(w)`, then renormalize the kept weights.
/// At least one expert is always kept.
pub fn skip_general(decision: RoutingDecision, beta_prime: f64) -> RoutingDecision {
    let k = decision.k();
    let total: f64 = decision.raw_weights.iter().sum();
    // Suffix sums computed directly (not total - prefix) so the k = 2 case
    // compares exactly w1 <= beta' * (w0 + w1).
    let mut keep = k;
    for i in 1..k {
        let tail: f64 = decision.raw_weights[i..].iter().sum();
        if tail <= beta_prime * total {
            keep = i;
            break;
        }
    }
    if keep == k {
        return decision;
    }
    let selected = decision.selected[..keep].to_vec();
    let raw_weights = decision.raw_weights[..keep].to_vec();
    // Kept raw weights are positive (they include the top weight), so
    // renormalization cannot degenerate.
    let normalized_weights =
        normalize_weights(&raw_weights).expect("kept weights include the maximum");
    RoutingDecision {
        selected,
        raw_weights,
        normalized_weights,
    }
}

/// Outcome of one skip-bound evaluation: the loss incurred by keeping only
/// the top `kept` experts and the tail-fraction bound it must respect.
#[derive(Clone, Debug, Serialize)]
pub struct BoundCheck {
    pub weights: Vec<f64>,
    #[serde(skip)]
    pub expert_outputs: Vec<Vector>,
    pub kept: usize,
    /// `|| z_hat - z ||_2` between the kept-only and full mixes.
    pub loss: f64,
    /// Maximum pairwise distance among the expert outputs.
    pub d_max: f64,
    /// `(tail weight fraction) * d_max`.
    pub bound: f64,
}

/// Evaluates the skipping reconstruction loss `L = ||z_hat - z||` for keeping
/// the top `kept` of k experts and checks it against the tail-fraction bound
/// `L <= (sum(w[kept..]) / sum(w)) * d_max`, where d_max is the maximum
/// pairwise distance among the expert outputs (the equal-distance constant D
/// in the derivation is replaced by its maximum, which preserves the
/// inequality).
pub fn check_skip_bound(
    weights: &[f64],
    expert_outputs: &[Vector],
    kept: usize,
) -> Result<BoundCheck> {
    let k = weights.len();
    if kept == 0 || kept > k {
        return Err(Error::InvalidInput(format!(
            "kept = {kept} out of range for k = {k}"
        )));
    }
    if expert_outputs.len() != k {
        return Err(Error::InvalidInput(format!(
            "{} expert outputs for {k} weights",
            expert_outputs.len()
        )));
    }
    if weights.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidInput(
            "weights must be sorted descending".into(),
        ));
    }
    if weights.iter().any(|w| *w <= 0.0 || !w.is_finite()) {
        return Err(Error::InvalidInput("weights must be positive".into()));
    }
    let d = expert_outputs[0].len();
    if expert_outputs.iter().any(|f| f.len() != d) {
        return Err(Error::InvalidInput("expert output lengths differ".into()));
    }

    let mix = |count: usize| -> Vector {
        let sum: f64 = weights[..count].iter().sum();
        let mut z = Vector::zeros(d);
        for m in 0..count {
            z.scaled_add_assign(weights[m] / sum, &expert_outputs[m]);
        }
        z
    };
    let z_full = mix(k);
    let z_kept = mix(kept);
    let loss = z_kept.sub(&z_full).l2_norm();

    let mut d_max: f64 = 0.0;
    for m in 0..k {
        for n in (m + 1)..k {
            d_max = d_max.max(expert_outputs[m].sub(&expert_outputs[n]).l2_norm());
        }
    }
    let total: f64 = weights.iter().sum();
    let tail: f64 = weights[kept..].iter().sum();
    let bound = tail / total * d_max;

    if loss > bound + 1e-9 {
        return Err(Error::InvalidInput(format!(
            "skip bound violated: loss {loss} > bound {bound}"
        )));
    }
    Ok(BoundCheck {
        weights: weights.to_vec(),
        expert_outputs: expert_outputs.to_vec(),
        kept,
        loss,
        d_max,
        bound,
    })
}

/// Median with the even-count convention (mean of the two middle values).
pub(crate) fn median(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Calibrates per-layer thresholds as the median observed ratio: w1/w0 in
/// top2 mode, the dropped-tail weight fraction at i = 1 in general mode.
pub fn calibrate_beta(stats: &RoutingStats, mode: SkipMode) -> Result<SkipConfig> {
    let mut beta = Vec::with_capacity(stats.layers.len());
    for (l, layer) in stats.layers.iter().enumerate() {
        let samples = match mode {
            SkipMode::Top2 => &layer.ratio_samples,
            SkipMode::General => &layer.tail_fraction_samples,
        };
        let m = median(samples).ok_or_else(|| {
            Error::Calibration(format!("layer {l}: no ratio samples to calibrate from"))
        })?;
        beta.push(m);
    }
    Ok(SkipConfig { mode, beta })
}
