//! MoE model types, per-token top-k routing, and the layer/stack forward
//! passes.
//!
//! A model is a stack of pre-norm residual MoE blocks: each block RMS-norms
//! the residual stream, routes the normed token to the top-k experts by
//! softmax routing weight, evaluates the selected SwiGLU experts, and adds the
//! weighted expert mix back onto the stream. There is deliberately no
//! attention sublayer: the MoE block is the unit under study here.
//!
//! Routing always runs over an explicit candidate set (all experts, or a
//! retained subset during pruning) through one shared code path, so a layer
//! restricted to a subset computes bit-for-bit what the physically pruned
//! layer computes.

use crate::error::{Error, Result};
use crate::numerics::{rmsnorm, silu, softmax_slice, Matrix, Vector};
use crate::skipping::{self, SkipConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Static shape of an MoE model. Expert counts are per-layer so pruned models
/// are just a config change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub experts_per_layer: Vec<usize>,
    pub top_k: usize,
    pub rms_eps: f64,
}

impl ModelConfig {
    /// Uniform expert count across layers.
    pub fn uniform(
        n_layers: usize,
        d_model: usize,
        d_ff: usize,
        n_experts: usize,
        top_k: usize,
        rms_eps: f64,
    ) -> Self {
        ModelConfig {
            n_layers,
            d_model,
            d_ff,
            experts_per_layer: vec![n_experts; n_layers],
            top_k,
            rms_eps,
        }
    }

    /// Default desk-scale shape: 8 layers, d_model 32, d_ff 64, 8 experts,
    /// top-2. Small enough that exhaustive subset searches run in seconds.
    pub fn desk() -> Self {
        ModelConfig::uniform(8, 32, 64, 8, 2, 1e-5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.top_k == 0 {
            return Err(Error::InvalidConfig("all dimensions must be >= 1".into()));
        }
        if self.experts_per_layer.len() != self.n_layers {
            return Err(Error::InvalidConfig(format!(
                "experts_per_layer has {} entries for {} layers",
                self.experts_per_layer.len(),
                self.n_layers
            )));
        }
        if let Some(&min) = self.experts_per_layer.iter().min() {
            if min == 0 {
                return Err(Error::InvalidConfig("layer with zero experts".into()));
            }
            if self.top_k > min {
                return Err(Error::InvalidConfig(format!(
                    "top_k {} exceeds minimum expert count {min}",
                    self.top_k
                )));
            }
        }
        if self.rms_eps <= 0.0 || !self.rms_eps.is_finite() {
            return Err(Error::InvalidConfig("rms_eps must be positive".into()));
        }
        Ok(())
    }
}

/// One SwiGLU expert: `w_down * (silu(w_gate * x) .* (w_up * x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    /// d_ff x d_model
    pub w_gate: Matrix,
    /// d_ff x d_model
    pub w_up: Matrix,
    /// d_model x d_ff
    pub w_down: Matrix,
}

/// One MoE layer: router, per-expert additive logit bias, experts, and the
/// pre-norm gain for the block around it.
#[derive(Clone, Debug, PartialEq)]
pub struct MoELayer {
    /// n_experts x d_model; row i produces expert i's routing logit.
    pub router: Matrix,
    /// Length n_experts; added to the router logits. 0 for ordinary experts,
    /// strongly negative for planted dead experts.
    pub logit_bias: Vector,
    pub experts: Vec<Expert>,
    /// Length d_model.
    pub norm_gain: Vector,
}

impl MoELayer {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// New layer keeping only the experts in `keep` (sorted, distinct);
    /// router rows and logit biases are carried over bit-identically.
    pub fn restrict(&self, keep: &[usize]) -> Result<MoELayer> {
        check_subset(keep, self.n_experts())?;
        let d_model = self.router.n_cols();
        let mut router = Matrix::zeros(keep.len(), d_model);
        let mut bias = Vec::with_capacity(keep.len());
        let mut experts = Vec::with_capacity(keep.len());
        for (new_idx, &e) in keep.iter().enumerate() {
            router.row_mut(new_idx).copy_from_slice(self.router.row(e));
            bias.push(self.logit_bias[e]);
            experts.push(self.experts[e].clone());
        }
        Ok(MoELayer {
            router,
            logit_bias: Vector::from_vec(bias),
            experts,
            norm_gain: self.norm_gain.clone(),
        })
    }
}

/// A full model: config plus one layer per entry in `experts_per_layer`.
#[derive(Clone, Debug, PartialEq)]
pub struct MoEModel {
    pub config: ModelConfig,
    pub layers: Vec<MoELayer>,
}

impl MoEModel {
    /// Checks every layer against the config shapes.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::InvalidConfig(format!(
                "{} layers for n_layers = {}",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        let (d, f) = (self.config.d_model, self.config.d_ff);
        for (l, layer) in self.layers.iter().enumerate() {
            let n = self.config.experts_per_layer[l];
            if layer.experts.len() != n
                || layer.router.n_rows() != n
                || layer.logit_bias.len() != n
            {
                return Err(Error::InvalidConfig(format!(
                    "layer {l}: expert/router/bias counts disagree with config ({n})"
                )));
            }
            if layer.router.n_cols() != d || layer.norm_gain.len() != d {
                return Err(Error::InvalidConfig(format!(
                    "layer {l}: router/norm width disagrees with d_model {d}"
                )));
            }
            for (e, ex) in layer.experts.iter().enumerate() {
                let ok = ex.w_gate.n_rows() == f
                    && ex.w_gate.n_cols() == d
                    && ex.w_up.n_rows() == f
                    && ex.w_up.n_cols() == d
                    && ex.w_down.n_rows() == d
                    && ex.w_down.n_cols() == f;
                if !ok {
                    return Err(Error::InvalidConfig(format!(
                        "layer {l} expert {e}: weight shapes disagree with config"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Outcome of routing one token: selected expert indices in descending-weight
/// order (ties broken by lower index), their softmax weights, and the weights
/// renormalized to sum to 1 over the selection.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub selected: Vec<usize>,
    pub raw_weights: Vec<f64>,
    pub normalized_weights: Vec<f64>,
}

impl RoutingDecision {
    pub fn k(&self) -> usize {
        self.selected.len()
    }
}

/// Renormalizes non-negative weights to sum to 1. All-zero input is a
/// degenerate-routing error.
pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidInput(
            "normalize_weights: weights must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return Err(Error::DegenerateRouting);
    }
    Ok(raw.iter().map(|w| w / sum).collect())
}

/// Top-k selection over softmax weights of pre-computed logits.
/// `candidates[i]` is the expert index whose logit is `logits[i]`; candidates
/// must be ascending. This is the single routing kernel shared by full
/// layers, subset evaluation during pruning, and physically pruned layers.
pub(crate) fn route_from_logits(
    candidates: &[usize],
    logits: &[f64],
    k: usize,
) -> Result<RoutingDecision> {
    if k == 0 || k > candidates.len() {
        return Err(Error::InvalidConfig(format!(
            "top_k {k} out of range for {} candidates",
            candidates.len()
        )));
    }
    let weights = softmax_slice(logits)?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .total_cmp(&weights[a])
            .then(candidates[a].cmp(&candidates[b]))
    });
    let selected: Vec<usize> = order[..k].iter().map(|&i| candidates[i]).collect();
    let raw_weights: Vec<f64> = order[..k].iter().map(|&i| weights[i]).collect();
    let normalized_weights = normalize_weights(&raw_weights)?;
    Ok(RoutingDecision {
        selected,
        raw_weights,
        normalized_weights,
    })
}

fn check_subset(subset: &[usize], n: usize) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::InvalidConfig("empty expert subset".into()));
    }
    if subset.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "expert subset must be strictly ascending".into(),
        ));
    }
    if *subset.last().unwrap() >= n {
        return Err(Error::InvalidConfig(format!(
            "expert subset index {} out of range (n = {n})",
            subset.last().unwrap()
        )));
    }
    Ok(())
}

/// Routing logit of one expert: `router_row . x + logit_bias`.
pub(crate) fn expert_logit(layer: &MoELayer, e: usize, x: &Vector) -> f64 {
    layer
        .router
        .row(e)
        .iter()
        .zip(x.iter())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        + layer.logit_bias[e]
}

/// Routes `x` among all experts of the layer.
pub fn route(layer: &MoELayer, x: &Vector, k: usize) -> Result<RoutingDecision> {
    let all: Vec<usize> = (0..layer.n_experts()).collect();
    route_restricted(layer, x, k, &all)
}

/// Routes `x` among the experts in `subset` only (ascending indices): softmax
/// is taken over the subset's logits, exactly what a layer physically pruned
/// to `subset` would compute.
pub fn route_restricted(
    layer: &MoELayer,
    x: &Vector,
    k: usize,
    subset: &[usize],
) -> Result<RoutingDecision> {
    check_subset(subset, layer.n_experts())?;
    if x.len() != layer.router.n_cols() {
        return Err(Error::InvalidInput(format!(
            "route: token length {} does not match d_model {}",
            x.len(),
            layer.router.n_cols()
        )));
    }
    let logits: Vec<f64> = subset.iter().map(|&e| expert_logit(layer, e, x)).collect();
    route_from_logits(subset, &logits, k)
}

/// SwiGLU expert evaluation: `w_down * (silu(w_gate*x) .* (w_up*x))`.
pub fn expert_eval(expert: &Expert, x: &Vector) -> Result<Vector> {
    let gate = expert.w_gate.matvec(x)?;
    let up = expert.w_up.matvec(x)?;
    let mut hidden = Vec::with_capacity(gate.len());
    for i in 0..gate.len() {
        hidden.push(silu(gate[i]) * up[i]);
    }
    expert.w_down.matvec(&Vector::from_vec(hidden))
}

/// Weighted expert mix for a decision: `sum_j w~_j * outputs[j]`, accumulated
/// in selection order. `outputs[j]` must be expert `selected[j]`'s output.
pub(crate) fn combine_outputs(
    d_model: usize,
    decision: &RoutingDecision,
    outputs: &[&Vector],
) -> Vector {
    let mut z = Vector::zeros(d_model);
    for (j, out) in outputs.iter().enumerate() {
        z.scaled_add_assign(decision.normalized_weights[j], out);
    }
    z
}

/// Layer forward for one (post-norm) token: route, optionally apply dynamic
/// skipping, then mix the selected expert outputs per the normalized weights.
pub fn moe_layer_forward(
    layer: &MoELayer,
    x: &Vector,
    k: usize,
    skip: Option<&skipping::LayerSkip>,
) -> Result<Vector> {
    let (z, _) = moe_layer_forward_decided(layer, x, k, skip)?;
    Ok(z)
}

/// As [`moe_layer_forward`] but also returns the (post-skip) routing decision.
pub fn moe_layer_forward_decided(
    layer: &MoELayer,
    x: &Vector,
    k: usize,
    skip: Option<&skipping::LayerSkip>,
) -> Result<(Vector, RoutingDecision)> {
    let mut decision = route(layer, x, k)?;
    if let Some(rule) = skip {
        decision = skipping::apply(decision, rule)?;
    }
    let outputs: Vec<Vector> = decision
        .selected
        .iter()
        .map(|&e| expert_eval(&layer.experts[e], x))
        .collect::<Result<_>>()?;
    let refs: Vec<&Vector> = outputs.iter().collect();
    Ok((combine_outputs(x.len(), &decision, &refs), decision))
}

/// Pre-norm residual block: `x + moe_layer_forward(layer, rmsnorm(x), ...)`.
pub fn block_forward(
    layer: &MoELayer,
    x: &Vector,
    k: usize,
    rms_eps: f64,
    skip: Option<&skipping::LayerSkip>,
) -> Result<Vector> {
    let normed = rmsnorm(x, &layer.norm_gain, rms_eps)?;
    let z = moe_layer_forward(layer, &normed, k, skip)?;
    Ok(x.add(&z))
}

/// Per-(layer, token) observation delivered during an observed forward pass:
/// the post-norm MoE input, the pre-residual MoE output, and the post-skip
/// routing decision.
pub struct LayerTap<'a> {
    pub layer: usize,
    pub token: usize,
    pub moe_input: &'a Vector,
    pub moe_output: &'a Vector,
    pub decision: &'a RoutingDecision,
}

/// Observer for [`model_forward_observed`]. Taps may arrive concurrently
/// across tokens (within one token they arrive in layer order); each
/// (layer, token) pair is delivered exactly once.
pub trait ForwardObserver: Sync {
    fn tap(&self, tap: LayerTap<'_>);
}

impl<F: Fn(LayerTap<'_>) + Sync> ForwardObserver for F {
    fn tap(&self, tap: LayerTap<'_>) {
        self(tap)
    }
}

fn forward_token(
    model: &MoEModel,
    token: usize,
    row: &[f64],
    skip: Option<&SkipConfig>,
    observer: Option<&dyn ForwardObserver>,
) -> Result<Vector> {
    let mut h = Vector::from_vec(row.to_vec());
    for (l, layer) in model.layers.iter().enumerate() {
        let normed = rmsnorm(&h, &layer.norm_gain, model.config.rms_eps)?;
        let rule = skip.map(|s| s.layer_rule(l)).transpose()?;
        let (z, decision) =
            moe_layer_forward_decided(layer, &normed, model.config.top_k, rule.as_ref())?;
        if let Some(obs) = observer {
            obs.tap(LayerTap {
                layer: l,
                token,
                moe_input: &normed,
                moe_output: &z,
                decision: &decision,
            });
        }
        h = h.add(&z);
    }
    Ok(h)
}

/// Applies the block stack to each token row independently. Rows are
/// processed in parallel and reassembled in token order, so the result does
/// not depend on scheduling.
pub fn model_forward(
    model: &MoEModel,
    tokens: &Matrix,
    skip: Option<&SkipConfig>,
) -> Result<Matrix> {
    model_forward_inner(model, tokens, skip, None)
}

/// As [`model_forward`], delivering a [`LayerTap`] per (layer, token) to the
/// observer.
pub fn model_forward_observed(
    model: &MoEModel,
    tokens: &Matrix,
    skip: Option<&SkipConfig>,
    observer: &dyn ForwardObserver,
) -> Result<Matrix> {
    model_forward_inner(model, tokens, skip, Some(observer))
}

fn model_forward_inner(
    model: &MoEModel,
    tokens: &Matrix,
    skip: Option<&SkipConfig>,
    observer: Option<&dyn ForwardObserver>,
) -> Result<Matrix> {
    if tokens.n_cols() != model.config.d_model {
        return Err(Error::InvalidInput(format!(
            "token width {} does not match d_model {}",
            tokens.n_cols(),
            model.config.d_model
        )));
    }
    if let Some(s) = skip {
        s.validate(model.config.n_layers)?;
    }
    let rows: Vec<Vector> = (0..tokens.n_rows())
        .into_par_iter()
        .map(|t| forward_token(model, t, tokens.row(t), skip, observer))
        .collect::<Result<_>>()?;
    let mut out = Matrix::zeros(tokens.n_rows(), tokens.n_cols());
    for (t, row) in rows.iter().enumerate() {
        out.row_mut(t).copy_from_slice(row.as_slice());
    }
    Ok(out)
}
