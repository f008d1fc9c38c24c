//! Calibration pass: forward the model over a token set, caching each MoE
//! sublayer's (post-norm input, pre-residual output) pairs and tallying
//! routing statistics (selection counts, pairwise co-selection, top-weight
//! ratios).
//!
//! The cache boundary is the MoE sublayer itself: "input" is the post-RMSNorm
//! vector entering it and "output" is its value before the residual add, so
//! reconstruction losses compare like for like.

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::moe::{model_forward_observed, LayerTap, MoEModel, RoutingDecision};
use crate::numerics::{Matrix, Vector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Mutex;

/// Identity of a calibration token set: its size plus a content hash of the
/// raw f64 token matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationFingerprint {
    pub n_tokens: usize,
    pub sha256: String,
}

impl CalibrationFingerprint {
    pub fn of(tokens: &Matrix) -> Self {
        let mut bytes =
            Vec::with_capacity(16 + tokens.data().len() * 8);
        bytes.extend_from_slice(&(tokens.n_rows() as u64).to_le_bytes());
        bytes.extend_from_slice(&(tokens.n_cols() as u64).to_le_bytes());
        for v in tokens.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        CalibrationFingerprint {
            n_tokens: tokens.n_rows(),
            sha256: sha256_hex(&bytes),
        }
    }
}

/// Cached (input, output) token pairs for one MoE layer; both T x d_model.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub inputs: Matrix,
    pub outputs: Matrix,
}

/// Per-layer caches from one calibration pass, all sharing the token count.
#[derive(Clone, Debug)]
pub struct CalibrationCache {
    pub layers: Vec<LayerCache>,
    pub n_tokens: usize,
    pub fingerprint: CalibrationFingerprint,
}

/// Routing tallies for one layer.
#[derive(Clone, Debug, Serialize)]
pub struct LayerStats {
    /// Top-k membership count per expert.
    pub counts: Vec<u64>,
    /// Unordered-pair tallies, n x n symmetric, row-major; populated for
    /// k = 2 only (empty otherwise).
    pub co_selection: Vec<u64>,
    /// w1/w0 per token (k = 2 only).
    pub ratio_samples: Vec<f64>,
    /// Dropped-tail weight fraction at i = 1 per token (any k >= 2):
    /// sum(w[1..k]) / sum(w[0..k]).
    pub tail_fraction_samples: Vec<f64>,
}

impl LayerStats {
    fn new(n_experts: usize, top_k: usize) -> Self {
        LayerStats {
            counts: vec![0; n_experts],
            co_selection: if top_k == 2 {
                vec![0; n_experts * n_experts]
            } else {
                Vec::new()
            },
            ratio_samples: Vec::new(),
            tail_fraction_samples: Vec::new(),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.counts.len()
    }

    pub fn co_selection_at(&self, i: usize, j: usize) -> u64 {
        self.co_selection[i * self.n_experts() + j]
    }

    fn record(&mut self, decision: &RoutingDecision) {
        for &e in &decision.selected {
            self.counts[e] += 1;
        }
        let k = decision.k();
        if k == 2 {
            let (a, b) = (decision.selected[0], decision.selected[1]);
            let n = self.n_experts();
            self.co_selection[a * n + b] += 1;
            self.co_selection[b * n + a] += 1;
            self.ratio_samples
                .push(decision.raw_weights[1] / decision.raw_weights[0]);
        }
        if k >= 2 {
            let total: f64 = decision.raw_weights.iter().sum();
            let tail: f64 = decision.raw_weights[1..].iter().sum();
            self.tail_fraction_samples.push(tail / total);
        }
    }
}

/// Routing statistics over a full calibration pass.
#[derive(Clone, Debug, Serialize)]
pub struct RoutingStats {
    pub top_k: usize,
    pub n_tokens: usize,
    pub layers: Vec<LayerStats>,
    pub fingerprint: CalibrationFingerprint,
}

struct TapRecord {
    input: Vector,
    output: Vector,
    decision: RoutingDecision,
}

/// Forwards the model over the tokens, returning per-layer input/output
/// caches and routing statistics. Taps are gathered into per-token slots and
/// reduced in token order, so the result is identical however the forward
/// pass is scheduled.
pub fn run_calibration(
    model: &MoEModel,
    tokens: &Matrix,
) -> Result<(CalibrationCache, RoutingStats)> {
    let n_tokens = tokens.n_rows();
    let n_layers = model.config.n_layers;
    let fingerprint = CalibrationFingerprint::of(tokens);

    let slots: Vec<Mutex<Vec<TapRecord>>> =
        (0..n_tokens).map(|_| Mutex::new(Vec::new())).collect();
    model_forward_observed(model, tokens, None, &|tap: LayerTap<'_>| {
        slots[tap.token].lock().unwrap().push(TapRecord {
            input: tap.moe_input.clone(),
            output: tap.moe_output.clone(),
            decision: tap.decision.clone(),
        });
    })?;

    let d = model.config.d_model;
    let mut layer_caches: Vec<LayerCache> = (0..n_layers)
        .map(|_| LayerCache {
            inputs: Matrix::zeros(n_tokens, d),
            outputs: Matrix::zeros(n_tokens, d),
        })
        .collect();
    let mut layer_stats: Vec<LayerStats> = (0..n_layers)
        .map(|l| LayerStats::new(model.config.experts_per_layer[l], model.config.top_k))
        .collect();

    for (t, slot) in slots.into_iter().enumerate() {
        let taps = slot.into_inner().unwrap();
        if taps.len() != n_layers {
            return Err(Error::InvalidInput(format!(
                "token {t} produced {} taps for {n_layers} layers",
                taps.len()
            )));
        }
        // Within a token, taps arrive in layer order.
        for (l, rec) in taps.into_iter().enumerate() {
            layer_caches[l]
                .inputs
                .row_mut(t)
                .copy_from_slice(rec.input.as_slice());
            layer_caches[l]
                .outputs
                .row_mut(t)
                .copy_from_slice(rec.output.as_slice());
            layer_stats[l].record(&rec.decision);
        }
    }

    Ok((
        CalibrationCache {
            layers: layer_caches,
            n_tokens,
            fingerprint: fingerprint.clone(),
        },
        RoutingStats {
            top_k: model.config.top_k,
            n_tokens,
            layers: layer_stats,
            fingerprint,
        },
    ))
}

/// Expert indices of one layer ordered by ascending selection count, ties
/// broken by lower index.
pub fn frequency_rank(stats: &RoutingStats, layer: usize) -> Vec<usize> {
    let counts = &stats.layers[layer].counts;
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&e| (counts[e], e));
    order
}

/// Writes the layer's co-selection matrix normalized by the token count as an
/// n x n CSV (no header). Requires top-2 stats.
pub fn export_heatmap(stats: &RoutingStats, layer: usize, path: &Path) -> Result<()> {
    let csv = heatmap_csv(stats, layer)?;
    crate::io::write_atomic(path, csv.as_bytes())
}

/// The heatmap CSV contents; split out from [`export_heatmap`] for callers
/// that want the text directly.
pub fn heatmap_csv(stats: &RoutingStats, layer: usize) -> Result<String> {
    if stats.top_k != 2 {
        return Err(Error::InvalidConfig(format!(
            "co-selection heatmaps need top-2 stats, got top-{}",
            stats.top_k
        )));
    }
    let ls = stats
        .layers
        .get(layer)
        .ok_or_else(|| Error::InvalidInput(format!("no layer {layer} in stats")))?;
    let n = ls.n_experts();
    let t = stats.n_tokens as f64;
    let mut out = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..n)
            .map(|j| format!("{}", ls.co_selection_at(i, j) as f64 / t))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Ratio-sample quantiles for the JSON stats export.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RatioQuantiles {
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
}

fn quantiles(samples: &[f64]) -> Option<RatioQuantiles> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let at = |q: f64| -> f64 {
        let pos = q * (s.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        if lo == hi {
            s[lo]
        } else {
            s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
        }
    };
    Some(RatioQuantiles {
        min: s[0],
        p25: at(0.25),
        median: crate::skipping::median(&s).unwrap(),
        p75: at(0.75),
        max: *s.last().unwrap(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerStatsExport {
    pub counts: Vec<u64>,
    /// Absolute co-selection counts as nested rows (k = 2 only).
    pub co_selection: Vec<Vec<u64>>,
    pub ratio_quantiles: Option<RatioQuantiles>,
}

/// JSON-facing summary of [`RoutingStats`]: counts, co-selection, and ratio
/// quantiles per layer.
#[derive(Clone, Debug, Serialize)]
pub struct StatsExport {
    pub top_k: usize,
    pub n_tokens: usize,
    pub fingerprint: CalibrationFingerprint,
    pub layers: Vec<LayerStatsExport>,
}

impl StatsExport {
    pub fn from_stats(stats: &RoutingStats) -> Self {
        StatsExport {
            top_k: stats.top_k,
            n_tokens: stats.n_tokens,
            fingerprint: stats.fingerprint.clone(),
            layers: stats
                .layers
                .iter()
                .map(|ls| {
                    let n = ls.n_experts();
                    LayerStatsExport {
                        counts: ls.counts.clone(),
                        co_selection: (0..n)
                            .map(|i| (0..n).map(|j| ls.co_selection_at(i, j)).collect())
                            .collect(),
                        ratio_quantiles: quantiles(&ls.ratio_samples),
                    }
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelgen::{gen_calib, gen_model, DomainSpec, GenSpec};
    use crate::moe::{moe_layer_forward, ModelConfig};

    fn desk_model_and_tokens(n_tokens: usize) -> (MoEModel, Matrix) {
        let spec = GenSpec::plain(ModelConfig::uniform(3, 8, 12, 4, 2, 1e-5), 0.8, 33);
        let model = gen_model(&spec).unwrap();
        let domain = DomainSpec {
            domain_id: 0,
            mean: Vector::zeros(8),
            scale: 1.0,
            seed: 4,
        };
        let tokens = gen_calib(&domain, n_tokens, 8).unwrap();
        (model, tokens)
    }

    #[test]
    fn cache_fidelity_and_conservation() {
        let (model, tokens) = desk_model_and_tokens(64);
        let (cache, stats) = run_calibration(&model, &tokens).unwrap();
        assert_eq!(cache.n_tokens, 64);

        // Re-evaluating the original sublayer on each cached input reproduces
        // the cached output.
        for (l, lc) in cache.layers.iter().enumerate() {
            for t in 0..cache.n_tokens {
                let x = lc.inputs.row_vector(t);
                let z = moe_layer_forward(&model.layers[l], &x, model.config.top_k, None).unwrap();
                for (a, b) in z.iter().zip(lc.outputs.row(t).iter()) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }

        // Count conservation and pair totals.
        for ls in &stats.layers {
            let total: u64 = ls.counts.iter().sum();
            assert_eq!(total, 2 * 64);
            let mut upper = 0;
            for i in 0..ls.n_experts() {
                for j in (i + 1)..ls.n_experts() {
                    upper += ls.co_selection_at(i, j);
                }
            }
            assert_eq!(upper, 64);
            assert!(ls
                .ratio_samples
                .iter()
                .all(|r| (0.0..=1.0).contains(r)));
            assert_eq!(ls.ratio_samples.len(), 64);
        }
    }

    #[test]
    fn single_token_matches_manual_computation() {
        // 1 token, 1 layer, 2-dim model: the cached pair equals a direct
        // norm + layer evaluation.
        let spec = GenSpec::plain(ModelConfig::uniform(1, 2, 3, 2, 2, 1e-5), 0.7, 9);
        let model = gen_model(&spec).unwrap();
        let tokens = Matrix::from_vec(1, 2, vec![0.4, -1.2]).unwrap();
        let (cache, _) = run_calibration(&model, &tokens).unwrap();
        let normed = crate::numerics::rmsnorm(
            &Vector::from_vec(vec![0.4, -1.2]),
            &model.layers[0].norm_gain,
            1e-5,
        )
        .unwrap();
        assert_eq!(cache.layers[0].inputs.row(0), normed.as_slice());
        let z = moe_layer_forward(&model.layers[0], &normed, 2, None).unwrap();
        assert_eq!(cache.layers[0].outputs.row(0), z.as_slice());
    }

    #[test]
    fn frequency_rank_orders_ascending_with_ties() {
        let (model, tokens) = desk_model_and_tokens(16);
        let (_, mut stats) = run_calibration(&model, &tokens).unwrap();
        stats.layers[0].counts = vec![5, 1, 3, 1];
        assert_eq!(frequency_rank(&stats, 0), vec![1, 3, 2, 0]);
        stats.layers[0].counts = vec![2, 2, 2, 2];
        assert_eq!(frequency_rank(&stats, 0), vec![0, 1, 2, 3]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // symmetric grid checks read best indexed
    fn heatmap_is_symmetric_and_normalized() {
        let (model, tokens) = desk_model_and_tokens(32);
        let (_, stats) = run_calibration(&model, &tokens).unwrap();
        let csv = heatmap_csv(&stats, 0).unwrap();
        let grid: Vec<Vec<f64>> = csv
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        let n = grid.len();
        let mut upper_sum = 0.0;
        for i in 0..n {
            assert_eq!(grid[i].len(), n);
            assert_eq!(grid[i][i], 0.0);
            for j in 0..n {
                assert_eq!(grid[i][j], grid[j][i]);
                if j > i {
                    upper_sum += grid[i][j];
                }
            }
        }
        assert!((upper_sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn calibration_is_schedule_independent() {
        // Identical caches and stats from the default pool and from a local
        // multi-thread pool.
        let (model, tokens) = desk_model_and_tokens(64);
        let (cache_a, stats_a) = run_calibration(&model, &tokens).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let (cache_b, stats_b) = pool.install(|| run_calibration(&model, &tokens)).unwrap();
        for (a, b) in cache_a.layers.iter().zip(cache_b.layers.iter()) {
            assert_eq!(a.inputs, b.inputs);
            assert_eq!(a.outputs, b.outputs);
        }
        for (a, b) in stats_a.layers.iter().zip(stats_b.layers.iter()) {
            assert_eq!(a.counts, b.counts);
            assert_eq!(a.co_selection, b.co_selection);
            assert_eq!(a.ratio_samples, b.ratio_samples);
        }
    }

    #[test]
    fn empty_token_set_gives_empty_caches() {
        let spec = GenSpec::plain(ModelConfig::uniform(2, 4, 4, 3, 2, 1e-5), 0.5, 2);
        let model = gen_model(&spec).unwrap();
        let tokens = Matrix::zeros(0, 4);
        let (cache, stats) = run_calibration(&model, &tokens).unwrap();
        assert_eq!(cache.n_tokens, 0);
        for ls in &stats.layers {
            assert!(ls.counts.iter().all(|&c| c == 0));
            assert!(ls.ratio_samples.is_empty());
        }
    }

    #[test]
    fn wrong_token_width_is_error() {
        let (model, _) = desk_model_and_tokens(1);
        let bad = Matrix::zeros(2, 5);
        assert!(run_calibration(&model, &bad).is_err());
    }
}
