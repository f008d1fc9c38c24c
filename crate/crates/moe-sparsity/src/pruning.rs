//! Post-training expert pruning: exhaustive layer-wise subset search
//! minimizing the calibration reconstruction loss, a progressive variant
//! whose later layers see the already-pruned prefix, and random/frequency
//! baselines.
//!
//! The reconstruction loss of a retained subset C is the Frobenius norm of
//! the stacked difference between the restricted layer's outputs and the
//! cached original outputs over all calibration tokens (equivalently the
//! quadrature sum of per-token L2 errors). Restricting a layer means routing
//! over C's logits only, with the retained router rows, logit biases, and
//! expert weights untouched — exactly what the emitted pruned model computes,
//! bit for bit, so the search never approximates the deployed computation.

use crate::calibration::{run_calibration, CalibrationCache, CalibrationFingerprint, RoutingStats};
use crate::error::{Error, Result};
use crate::moe::{
    self, expert_eval, expert_logit, route_from_logits, MoELayer, MoEModel,
};
use crate::numerics::{rmsnorm, Matrix, Prng, Vector};
use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

/// Default enumeration guard: C(16, 8). Beyond this the exhaustive search
/// refuses to run rather than silently degrading to a heuristic.
pub const DEFAULT_MAX_ENUMERATION: u64 = 12_870;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMethod {
    Exhaustive,
    Progressive,
    Random,
    Frequency,
}

impl PruneMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PruneMethod::Exhaustive => "exhaustive",
            PruneMethod::Progressive => "progressive",
            PruneMethod::Random => "random",
            PruneMethod::Frequency => "frequency",
        }
    }
}

/// What the progressive search reconstructs against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgressiveTarget {
    /// The original model's cached layer outputs (anchors every layer to
    /// original behavior).
    #[default]
    OriginalOutputs,
    /// The full-expert layer re-evaluated on the pruned-prefix activations.
    PropagatedFull,
}

/// Pruning run parameters. `r` is the retained expert count per layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PruneSpec {
    pub method: PruneMethod,
    pub r: usize,
    /// Used by the random baseline only.
    pub seed: u64,
    #[serde(default = "default_max_enumeration")]
    pub max_enumeration: u64,
    #[serde(default)]
    pub progressive_target: ProgressiveTarget,
}

fn default_max_enumeration() -> u64 {
    DEFAULT_MAX_ENUMERATION
}

impl PruneSpec {
    pub fn new(method: PruneMethod, r: usize) -> Self {
        PruneSpec {
            method,
            r,
            seed: 0,
            max_enumeration: DEFAULT_MAX_ENUMERATION,
            progressive_target: ProgressiveTarget::default(),
        }
    }

    fn validate(&self, model: &MoEModel) -> Result<()> {
        let k = model.config.top_k;
        if self.r < k {
            return Err(Error::InvalidConfig(format!(
                "r = {} below top_k = {k}",
                self.r
            )));
        }
        if let Some(&n) = model.config.experts_per_layer.iter().min() {
            if self.r > n {
                return Err(Error::InvalidConfig(format!(
                    "r = {} exceeds layer expert count {n}",
                    self.r
                )));
            }
        }
        Ok(())
    }
}

/// One layer's pruning outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerPruneResult {
    /// Retained expert indices, ascending.
    pub retained: Vec<usize>,
    /// Reconstruction loss of the retained subset; absent for the random
    /// baseline when no calibration cache was supplied.
    pub loss: Option<f64>,
    /// Full subset -> loss map, keyed "i-j-k"; exhaustive searches only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_table: Option<BTreeMap<String, f64>>,
}

/// Full pruning report; serialized as JSON by the CLI.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: String,
    pub r: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub progressive_target: Option<ProgressiveTarget>,
    pub layers: Vec<LayerPruneResult>,
    pub calibration: Option<CalibrationFingerprint>,
    pub wall_time_secs: f64,
}

pub fn subset_key(subset: &[usize]) -> String {
    subset.iter().map(|e| e.to_string()).join("-")
}

fn binomial(n: usize, r: usize) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Per-token quantities that do not depend on the candidate subset: the full
/// routing logits and every expert's output.
struct LayerEvalCache {
    d_model: usize,
    /// `logits[t][e]`
    logits: Vec<Vec<f64>>,
    /// `outputs[t][e]`
    outputs: Vec<Vec<Vector>>,
}

impl LayerEvalCache {
    fn build(layer: &MoELayer, inputs: &Matrix) -> Result<LayerEvalCache> {
        let n = layer.n_experts();
        let per_token: Vec<(Vec<f64>, Vec<Vector>)> = (0..inputs.n_rows())
            .into_par_iter()
            .map(|t| {
                let x = inputs.row_vector(t);
                let logits: Vec<f64> = (0..n).map(|e| expert_logit(layer, e, &x)).collect();
                let outputs: Vec<Vector> = layer
                    .experts
                    .iter()
                    .map(|ex| expert_eval(ex, &x))
                    .collect::<Result<_>>()?;
                Ok((logits, outputs))
            })
            .collect::<Result<_>>()?;
        let (logits, outputs) = per_token.into_iter().unzip();
        Ok(LayerEvalCache {
            d_model: inputs.n_cols(),
            logits,
            outputs,
        })
    }

    /// Reconstruction loss of one subset against the target outputs. Runs
    /// the exact routing/mix arithmetic of the restricted layer.
    fn subset_loss(&self, subset: &[usize], targets: &Matrix, k: usize) -> Result<f64> {
        let mut acc = 0.0;
        for t in 0..self.logits.len() {
            let logits: Vec<f64> = subset.iter().map(|&e| self.logits[t][e]).collect();
            let decision = route_from_logits(subset, &logits, k)?;
            let refs: Vec<&Vector> = decision
                .selected
                .iter()
                .map(|&e| &self.outputs[t][e])
                .collect();
            let z = moe::combine_outputs(self.d_model, &decision, &refs);
            let target = targets.row(t);
            for i in 0..self.d_model {
                let d = z[i] - target[i];
                acc += d * d;
            }
        }
        Ok(acc.sqrt())
    }
}

fn check_prune_inputs(
    layer: &MoELayer,
    subset: &[usize],
    inputs: &Matrix,
    targets: &Matrix,
    k: usize,
) -> Result<()> {
    if subset.len() < k {
        return Err(Error::InvalidConfig(format!(
            "subset of {} experts cannot serve top_k = {k}",
            subset.len()
        )));
    }
    if inputs.n_rows() != targets.n_rows() || inputs.n_cols() != targets.n_cols() {
        return Err(Error::InvalidInput(
            "inputs and targets must be row-aligned".into(),
        ));
    }
    if inputs.n_cols() != layer.router.n_cols() {
        return Err(Error::InvalidInput(format!(
            "token width {} does not match d_model {}",
            inputs.n_cols(),
            layer.router.n_cols()
        )));
    }
    Ok(())
}

/// Reconstruction loss of restricting `layer` to the expert subset `C`:
/// the Frobenius norm of the stacked (restricted output - cached output)
/// difference over all cached tokens.
pub fn subset_loss(
    layer: &MoELayer,
    subset: &[usize],
    inputs: &Matrix,
    targets: &Matrix,
    k: usize,
) -> Result<f64> {
    check_prune_inputs(layer, subset, inputs, targets, k)?;
    let mut acc = 0.0;
    for t in 0..inputs.n_rows() {
        let x = inputs.row_vector(t);
        let decision = moe::route_restricted(layer, &x, k, subset)?;
        let outputs: Vec<Vector> = decision
            .selected
            .iter()
            .map(|&e| expert_eval(&layer.experts[e], &x))
            .collect::<Result<_>>()?;
        let refs: Vec<&Vector> = outputs.iter().collect();
        let z = moe::combine_outputs(x.len(), &decision, &refs);
        let target = targets.row(t);
        for i in 0..x.len() {
            let d = z[i] - target[i];
            acc += d * d;
        }
    }
    Ok(acc.sqrt())
}

/// Exhaustively searches the C(n, r) subsets of one layer (lexicographic
/// order), returning the argmin subset, its loss, and the full loss table.
/// Ties go to the lexicographically least subset, so the result does not
/// depend on evaluation scheduling.
pub fn prune_layer_exhaustive(
    layer: &MoELayer,
    inputs: &Matrix,
    targets: &Matrix,
    r: usize,
    k: usize,
    max_enumeration: u64,
) -> Result<(Vec<usize>, f64, BTreeMap<String, f64>)> {
    let n = layer.n_experts();
    if r < k || r > n {
        return Err(Error::InvalidConfig(format!(
            "r = {r} outside [top_k = {k}, n = {n}]"
        )));
    }
    let candidates = binomial(n, r);
    if candidates > max_enumeration as u128 {
        return Err(Error::EnumerationGuard {
            n,
            r,
            candidates,
            max: max_enumeration,
        });
    }
    check_prune_inputs(layer, &(0..r).collect::<Vec<_>>(), inputs, targets, k)?;

    let cache = LayerEvalCache::build(layer, inputs)?;
    let subsets: Vec<Vec<usize>> = (0..n).combinations(r).collect();
    let losses: Vec<f64> = subsets
        .par_iter()
        .map(|s| cache.subset_loss(s, targets, k))
        .collect::<Result<_>>()?;

    let mut best = 0;
    for i in 1..losses.len() {
        if losses[i] < losses[best] {
            best = i;
        }
    }
    let table: BTreeMap<String, f64> = subsets
        .iter()
        .zip(losses.iter())
        .map(|(s, &l)| (subset_key(s), l))
        .collect();
    Ok((subsets[best].clone(), losses[best], table))
}

fn restrict_model_layer(model: &MoEModel, layer: usize, retained: &[usize]) -> Result<MoELayer> {
    model.layers[layer].restrict(retained)
}

fn assemble_pruned(model: &MoEModel, retained_per_layer: &[Vec<usize>]) -> Result<MoEModel> {
    let mut config = model.config.clone();
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, retained) in retained_per_layer.iter().enumerate() {
        config.experts_per_layer[l] = retained.len();
        layers.push(restrict_model_layer(model, l, retained)?);
    }
    let pruned = MoEModel { config, layers };
    pruned.validate()?;
    Ok(pruned)
}

/// Layer-wise exhaustive pruning: each layer searched independently against
/// its own cached inputs/outputs, then the retained layers are concatenated
/// into the emitted model. Router rows and logit biases of retained experts
/// are carried over unchanged (no parameter update).
pub fn prune_model_layerwise(
    model: &MoEModel,
    cache: &CalibrationCache,
    spec: &PruneSpec,
) -> Result<(MoEModel, PruneReport)> {
    let start = Instant::now();
    spec.validate(model)?;
    if cache.layers.len() != model.config.n_layers {
        return Err(Error::InvalidInput(format!(
            "cache has {} layers for a {}-layer model",
            cache.layers.len(),
            model.config.n_layers
        )));
    }
    let k = model.config.top_k;
    let mut retained_per_layer = Vec::with_capacity(model.layers.len());
    let mut layer_results = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let lc = &cache.layers[l];
        let (retained, loss, table) =
            prune_layer_exhaustive(layer, &lc.inputs, &lc.outputs, spec.r, k, spec.max_enumeration)?;
        layer_results.push(LayerPruneResult {
            retained: retained.clone(),
            loss: Some(loss),
            loss_table: Some(table),
        });
        retained_per_layer.push(retained);
    }
    let pruned = assemble_pruned(model, &retained_per_layer)?;
    Ok((
        pruned,
        PruneReport {
            method: PruneMethod::Exhaustive.name().into(),
            r: spec.r,
            seed: None,
            progressive_target: None,
            layers: layer_results,
            calibration: Some(cache.fingerprint.clone()),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Progressive pruning: layers are searched front to back, each layer's
/// candidate inputs being the activations propagated through the already
/// pruned prefix. Targets default to the original model's cached outputs.
pub fn prune_model_progressive(
    model: &MoEModel,
    tokens: &Matrix,
    spec: &PruneSpec,
) -> Result<(MoEModel, PruneReport)> {
    let start = Instant::now();
    spec.validate(model)?;
    let (orig_cache, _) = run_calibration(model, tokens)?;
    let k = model.config.top_k;
    let eps = model.config.rms_eps;
    let n_tokens = tokens.n_rows();

    let mut stream: Vec<Vector> = (0..n_tokens).map(|t| tokens.row_vector(t)).collect();
    let mut retained_per_layer = Vec::with_capacity(model.layers.len());
    let mut layer_results = Vec::with_capacity(model.layers.len());

    for (l, layer) in model.layers.iter().enumerate() {
        let normed: Vec<Vector> = stream
            .par_iter()
            .map(|h| rmsnorm(h, &layer.norm_gain, eps))
            .collect::<Result<_>>()?;
        let mut inputs = Matrix::zeros(n_tokens, model.config.d_model);
        for (t, v) in normed.iter().enumerate() {
            inputs.row_mut(t).copy_from_slice(v.as_slice());
        }
        let targets = match spec.progressive_target {
            ProgressiveTarget::OriginalOutputs => orig_cache.layers[l].outputs.clone(),
            ProgressiveTarget::PropagatedFull => {
                let rows: Vec<Vector> = normed
                    .par_iter()
                    .map(|x| moe::moe_layer_forward(layer, x, k, None))
                    .collect::<Result<_>>()?;
                let mut m = Matrix::zeros(n_tokens, model.config.d_model);
                for (t, v) in rows.iter().enumerate() {
                    m.row_mut(t).copy_from_slice(v.as_slice());
                }
                m
            }
        };
        let (retained, loss, table) =
            prune_layer_exhaustive(layer, &inputs, &targets, spec.r, k, spec.max_enumeration)?;
        let pruned_layer = layer.restrict(&retained)?;
        // Propagate the stream through the pruned layer.
        stream = stream
            .par_iter()
            .zip(normed.par_iter())
            .map(|(h, x)| Ok(h.add(&moe::moe_layer_forward(&pruned_layer, x, k, None)?)))
            .collect::<Result<_>>()?;
        layer_results.push(LayerPruneResult {
            retained: retained.clone(),
            loss: Some(loss),
            loss_table: Some(table),
        });
        retained_per_layer.push(retained);
    }
    let pruned = assemble_pruned(model, &retained_per_layer)?;
    Ok((
        pruned,
        PruneReport {
            method: PruneMethod::Progressive.name().into(),
            r: spec.r,
            seed: None,
            progressive_target: Some(spec.progressive_target),
            layers: layer_results,
            calibration: Some(CalibrationFingerprint::of(tokens)),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Random baseline: a seeded uniform r-subset per layer. Losses are filled in
/// post hoc when a calibration cache is supplied.
pub fn prune_random(
    model: &MoEModel,
    spec: &PruneSpec,
    cache: Option<&CalibrationCache>,
) -> Result<(MoEModel, PruneReport)> {
    let start = Instant::now();
    spec.validate(model)?;
    let master = Prng::new(spec.seed);
    let mut retained_per_layer = Vec::with_capacity(model.layers.len());
    let mut layer_results = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let mut rng = master.split(l as u64);
        let retained = rng.sample_indices(layer.n_experts(), spec.r);
        let loss = match cache {
            Some(c) => Some(subset_loss(
                layer,
                &retained,
                &c.layers[l].inputs,
                &c.layers[l].outputs,
                model.config.top_k,
            )?),
            None => None,
        };
        layer_results.push(LayerPruneResult {
            retained: retained.clone(),
            loss,
            loss_table: None,
        });
        retained_per_layer.push(retained);
    }
    let pruned = assemble_pruned(model, &retained_per_layer)?;
    Ok((
        pruned,
        PruneReport {
            method: PruneMethod::Random.name().into(),
            r: spec.r,
            seed: Some(spec.seed),
            progressive_target: None,
            layers: layer_results,
            calibration: cache.map(|c| c.fingerprint.clone()),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Frequency baseline: drop the n - r least-selected experts per layer
/// (ties dropped lowest index first).
pub fn prune_frequency(
    model: &MoEModel,
    stats: &RoutingStats,
    spec: &PruneSpec,
    cache: Option<&CalibrationCache>,
) -> Result<(MoEModel, PruneReport)> {
    let start = Instant::now();
    spec.validate(model)?;
    if stats.layers.len() != model.config.n_layers {
        return Err(Error::InvalidInput(format!(
            "stats cover {} layers for a {}-layer model",
            stats.layers.len(),
            model.config.n_layers
        )));
    }
    let mut retained_per_layer = Vec::with_capacity(model.layers.len());
    let mut layer_results = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let n = layer.n_experts();
        if stats.layers[l].n_experts() != n {
            return Err(Error::InvalidInput(format!(
                "stats layer {l} covers {} experts, model has {n}",
                stats.layers[l].n_experts()
            )));
        }
        let rank = crate::calibration::frequency_rank(stats, l);
        let mut retained: Vec<usize> = rank[n - spec.r..].to_vec();
        retained.sort_unstable();
        let loss = match cache {
            Some(c) => Some(subset_loss(
                layer,
                &retained,
                &c.layers[l].inputs,
                &c.layers[l].outputs,
                model.config.top_k,
            )?),
            None => None,
        };
        layer_results.push(LayerPruneResult {
            retained: retained.clone(),
            loss,
            loss_table: None,
        });
        retained_per_layer.push(retained);
    }
    let pruned = assemble_pruned(model, &retained_per_layer)?;
    Ok((
        pruned,
        PruneReport {
            method: PruneMethod::Frequency.name().into(),
            r: spec.r,
            seed: None,
            progressive_target: None,
            layers: layer_results,
            calibration: Some(stats.fingerprint.clone()),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    ))
}
