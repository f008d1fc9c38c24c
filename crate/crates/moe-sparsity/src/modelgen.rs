//! Synthetic model and calibration-data generation with planted ground truth.
//!
//! Models built here give the pruning and skipping searches verifiable
//! targets: *dead experts* carry a -50 routing logit bias (and a zeroed
//! router row) so they never win top-k, and *domain specialists* carry router
//! rows aligned with a planted domain direction so tokens drawn around that
//! direction route into the specialist set. Both plants are validated by
//! routing censuses in the tests rather than assumed.
//!
//! All sampling flows through per-tensor split [`Prng`] streams keyed by
//! (layer, tensor kind, expert), so generation is bit-reproducible and
//! independent of generation order.

use crate::error::{Error, Result};
use crate::moe::{Expert, MoELayer, MoEModel, ModelConfig};
use crate::numerics::{Matrix, Prng, Vector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Logit bias planted on dead experts; far below anything a random router
/// row can produce on a normalized token.
pub const DEAD_LOGIT_BIAS: f64 = -50.0;

/// Relative amplitude of the noise added to specialist router rows.
const SPECIALIST_NOISE: f64 = 0.01;

// Stream labels for per-tensor PRNG splitting.
const STREAM_NORM: u64 = 0;
const STREAM_ROUTER: u64 = 1;
const STREAM_GATE: u64 = 2;
const STREAM_UP: u64 = 3;
const STREAM_DOWN: u64 = 4;
const STREAM_DOMAIN_FRAME: u64 = 5;
const STREAM_DOMAIN_DATA: u64 = 6;

/// Domain-specialist plant: `specialists[layer][domain]` is the expert index
/// set aligned with that domain's direction, with logit strength `bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainPlant {
    pub n_domains: usize,
    pub specialists: Vec<BTreeMap<usize, Vec<usize>>>,
    pub bias: f64,
}

/// Full generation recipe for a synthetic model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub config: ModelConfig,
    /// Ordinary weights are i.i.d. uniform in [-weight_scale, +weight_scale].
    pub weight_scale: f64,
    /// Per-layer dead expert indices (length n_layers when present).
    #[serde(default)]
    pub dead_experts: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub domain_plant: Option<DomainPlant>,
    pub seed: u64,
}

impl GenSpec {
    /// Spec with no plants.
    pub fn plain(config: ModelConfig, weight_scale: f64, seed: u64) -> Self {
        GenSpec {
            config,
            weight_scale,
            dead_experts: None,
            domain_plant: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.weight_scale <= 0.0 || !self.weight_scale.is_finite() {
            return Err(Error::InvalidConfig("weight_scale must be positive".into()));
        }
        if let Some(dead) = &self.dead_experts {
            if dead.len() != self.config.n_layers {
                return Err(Error::InvalidConfig(format!(
                    "dead_experts has {} entries for {} layers",
                    dead.len(),
                    self.config.n_layers
                )));
            }
            for (l, indices) in dead.iter().enumerate() {
                let n = self.config.experts_per_layer[l];
                if indices.iter().any(|&e| e >= n) {
                    return Err(Error::InvalidConfig(format!(
                        "layer {l}: dead expert index out of range (n = {n})"
                    )));
                }
            }
        }
        if let Some(plant) = &self.domain_plant {
            if plant.n_domains == 0 {
                return Err(Error::InvalidConfig("n_domains must be >= 1".into()));
            }
            if plant.bias <= 0.0 || !plant.bias.is_finite() {
                return Err(Error::InvalidConfig("plant bias must be positive".into()));
            }
            if plant.specialists.len() != self.config.n_layers {
                return Err(Error::InvalidConfig(format!(
                    "specialists has {} entries for {} layers",
                    plant.specialists.len(),
                    self.config.n_layers
                )));
            }
            let frame = plant.n_domains.div_ceil(2);
            if frame > self.config.d_model {
                return Err(Error::InvalidConfig(format!(
                    "{} domains need a frame of {frame} directions but d_model is {}",
                    plant.n_domains, self.config.d_model
                )));
            }
            for (l, per_domain) in plant.specialists.iter().enumerate() {
                let n = self.config.experts_per_layer[l];
                let mut seen = vec![false; n];
                for (&dom, experts) in per_domain {
                    if dom >= plant.n_domains {
                        return Err(Error::InvalidConfig(format!(
                            "layer {l}: domain id {dom} >= n_domains {}",
                            plant.n_domains
                        )));
                    }
                    for &e in experts {
                        if e >= n {
                            return Err(Error::InvalidConfig(format!(
                                "layer {l}: specialist index {e} out of range (n = {n})"
                            )));
                        }
                        if seen[e] {
                            return Err(Error::InvalidConfig(format!(
                                "layer {l}: expert {e} claimed by two domains"
                            )));
                        }
                        seen[e] = true;
                    }
                }
            }
            if let Some(dead) = &self.dead_experts {
                for (l, per_domain) in plant.specialists.iter().enumerate() {
                    for experts in per_domain.values() {
                        if experts.iter().any(|e| dead[l].contains(e)) {
                            return Err(Error::InvalidConfig(format!(
                                "layer {l}: expert planted both dead and specialist"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// A token source: i.i.d. Gaussian token vectors around `mean` with the given
/// per-coordinate standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub mean: Vector,
    pub scale: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || !self.mean.all_finite() {
            return Err(Error::InvalidConfig("domain mean must be finite and non-empty".into()));
        }
        if self.scale < 0.0 || !self.scale.is_finite() {
            return Err(Error::InvalidConfig("domain scale must be >= 0".into()));
        }
        Ok(())
    }
}

fn fill_uniform(rng: &mut Prng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-scale, scale)).collect()
}

/// Planted unit mean direction for `domain_id`, derived from the generation
/// seed. Directions come in antipodal pairs over an orthonormal frame:
/// domains 2i and 2i+1 share frame vector i with opposite signs, so any two
/// distinct domains are separated by at least sqrt(2) and paired domains by
/// exactly 2.
pub fn planted_domain_mean(
    seed: u64,
    n_domains: usize,
    domain_id: usize,
    d_model: usize,
) -> Result<Vector> {
    if domain_id >= n_domains {
        return Err(Error::InvalidConfig(format!(
            "domain id {domain_id} >= n_domains {n_domains}"
        )));
    }
    let n_frame = n_domains.div_ceil(2);
    if n_frame > d_model {
        return Err(Error::InvalidConfig(format!(
            "{n_domains} domains need {n_frame} frame directions but d_model is {d_model}"
        )));
    }
    let master = Prng::new(seed).split(STREAM_DOMAIN_FRAME);
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(n_frame);
    for i in 0..n_frame {
        let mut rng = master.split(i as u64);
        let mut v: Vec<f64> = (0..d_model).map(|_| rng.normal(0.0, 1.0)).collect();
        // Gram-Schmidt against earlier frame vectors.
        for u in &frame {
            let proj: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u.iter()) {
                *vi -= proj * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return Err(Error::InvalidConfig(
                "degenerate domain frame draw".into(),
            ));
        }
        for vi in &mut v {
            *vi /= norm;
        }
        frame.push(v);
    }
    let base = &frame[domain_id / 2];
    let sign = if domain_id.is_multiple_of(2) { 1.0 } else { -1.0 };
    Ok(Vector::from_vec(base.iter().map(|x| sign * x).collect()))
}

/// Builds the [`DomainSpec`] matching a spec's planted domain: the planted
/// mean direction and a data seed split from the generation seed.
pub fn planted_domain_spec(spec: &GenSpec, domain_id: usize, scale: f64) -> Result<DomainSpec> {
    let plant = spec
        .domain_plant
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("spec has no domain plant".into()))?;
    let mean = planted_domain_mean(spec.seed, plant.n_domains, domain_id, spec.config.d_model)?;
    let seed = Prng::new(spec.seed)
        .split(STREAM_DOMAIN_DATA)
        .split(domain_id as u64)
        .seed();
    Ok(DomainSpec {
        domain_id,
        mean,
        scale,
        seed,
    })
}

/// Generates a model from the spec. Ordinary tensors are i.i.d. uniform in
/// [-weight_scale, +weight_scale]; norm gains are 1 (keeping post-norm tokens
/// aligned with the raw token direction, which the domain plant relies on);
/// dead experts get a zeroed router row and the [`DEAD_LOGIT_BIAS`];
/// specialist rows are `bias * mean + small noise`.
pub fn gen_model(spec: &GenSpec) -> Result<MoEModel> {
    spec.validate()?;
    let cfg = &spec.config;
    let master = Prng::new(spec.seed);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let n = cfg.experts_per_layer[l];
        let layer_rng = master.split(l as u64);
        let _ = layer_rng.split(STREAM_NORM); // reserved; gains are fixed at 1
        let norm_gain = Vector::ones(cfg.d_model);

        let dead: &[usize] = spec
            .dead_experts
            .as_ref()
            .map(|d| d[l].as_slice())
            .unwrap_or(&[]);
        let specialist_of = |e: usize| -> Option<usize> {
            spec.domain_plant.as_ref().and_then(|p| {
                p.specialists[l]
                    .iter()
                    .find(|(_, experts)| experts.contains(&e))
                    .map(|(&dom, _)| dom)
            })
        };

        let router_rng = layer_rng.split(STREAM_ROUTER);
        let mut router = Matrix::zeros(n, cfg.d_model);
        let mut logit_bias = Vector::zeros(n);
        for e in 0..n {
            let mut rng = router_rng.split(e as u64);
            let base = fill_uniform(&mut rng, cfg.d_model, spec.weight_scale);
            if dead.contains(&e) {
                logit_bias[e] = DEAD_LOGIT_BIAS;
                // Row stays zero: a dead expert's logit is the bias alone.
            } else if let Some(dom) = specialist_of(e) {
                let plant = spec.domain_plant.as_ref().unwrap();
                let mean =
                    planted_domain_mean(spec.seed, plant.n_domains, dom, cfg.d_model)?;
                let row = router.row_mut(e);
                for (i, slot) in row.iter_mut().enumerate() {
                    *slot = plant.bias * mean[i] + SPECIALIST_NOISE * base[i];
                }
            } else {
                router.row_mut(e).copy_from_slice(&base);
            }
        }

        let mut experts = Vec::with_capacity(n);
        for e in 0..n {
            let mut gate_rng = layer_rng.split(STREAM_GATE).split(e as u64);
            let mut up_rng = layer_rng.split(STREAM_UP).split(e as u64);
            let mut down_rng = layer_rng.split(STREAM_DOWN).split(e as u64);
            experts.push(Expert {
                w_gate: Matrix::from_vec(
                    cfg.d_ff,
                    cfg.d_model,
                    fill_uniform(&mut gate_rng, cfg.d_ff * cfg.d_model, spec.weight_scale),
                )?,
                w_up: Matrix::from_vec(
                    cfg.d_ff,
                    cfg.d_model,
                    fill_uniform(&mut up_rng, cfg.d_ff * cfg.d_model, spec.weight_scale),
                )?,
                w_down: Matrix::from_vec(
                    cfg.d_model,
                    cfg.d_ff,
                    fill_uniform(&mut down_rng, cfg.d_model * cfg.d_ff, spec.weight_scale),
                )?,
            });
        }
        layers.push(MoELayer {
            router,
            logit_bias,
            experts,
            norm_gain,
        });
    }
    let model = MoEModel {
        config: cfg.clone(),
        layers,
    };
    model.validate()?;
    Ok(model)
}

/// Draws `n_tokens` i.i.d. Gaussian token vectors around the domain mean.
/// Deterministic in the domain seed; with the same seed, a shorter draw is a
/// prefix of a longer one.
pub fn gen_calib(domain: &DomainSpec, n_tokens: usize, d_model: usize) -> Result<Matrix> {
    domain.validate()?;
    if n_tokens == 0 {
        return Err(Error::InvalidConfig("n_tokens must be >= 1".into()));
    }
    if domain.mean.len() != d_model {
        return Err(Error::InvalidConfig(format!(
            "domain mean length {} does not match d_model {d_model}",
            domain.mean.len()
        )));
    }
    let mut rng = Prng::new(domain.seed);
    let mut out = Matrix::zeros(n_tokens, d_model);
    for t in 0..n_tokens {
        let row = out.row_mut(t);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = domain.mean[j] + domain.scale * rng.normal(0.0, 1.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{model_forward_observed, route};

    #[test]
    fn generation_is_deterministic() {
        let spec = GenSpec::plain(ModelConfig::uniform(2, 4, 6, 3, 2, 1e-5), 0.8, 42);
        let a = gen_model(&spec).unwrap();
        let b = gen_model(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dead_expert_never_routes() {
        let mut spec = GenSpec::plain(ModelConfig::uniform(1, 8, 8, 8, 2, 1e-5), 1.0, 5);
        spec.dead_experts = Some(vec![vec![7]]);
        let model = gen_model(&spec).unwrap();
        let mut rng = Prng::new(123);
        for _ in 0..10_000 {
            let x = Vector::from_vec((0..8).map(|_| rng.normal(0.0, 1.0)).collect());
            let d = route(&model.layers[0], &x, 2).unwrap();
            assert!(!d.selected.contains(&7));
        }
    }

    #[test]
    fn domain_plant_routes_into_specialist_set() {
        let config = ModelConfig::desk();
        let specialists: Vec<BTreeMap<usize, Vec<usize>>> = (0..config.n_layers)
            .map(|_| {
                let mut m = BTreeMap::new();
                m.insert(0usize, vec![0, 1, 2, 3]);
                m.insert(1usize, vec![4, 5, 6, 7]);
                m
            })
            .collect();
        let spec = GenSpec {
            config,
            weight_scale: 0.15,
            dead_experts: None,
            domain_plant: Some(DomainPlant {
                n_domains: 2,
                specialists,
                bias: 8.0,
            }),
            seed: 21,
        };
        let model = gen_model(&spec).unwrap();
        let domain_a = planted_domain_spec(&spec, 0, 0.25).unwrap();
        let tokens = gen_calib(&domain_a, 512, 32).unwrap();

        use std::sync::atomic::{AtomicUsize, Ordering};
        let in_set = AtomicUsize::new(0);
        let total = AtomicUsize::new(0);
        model_forward_observed(&model, &tokens, None, &|tap: crate::moe::LayerTap<'_>| {
            for &e in &tap.decision.selected {
                total.fetch_add(1, Ordering::Relaxed);
                if e < 4 {
                    in_set.fetch_add(1, Ordering::Relaxed);
                }
            }
        })
        .unwrap();
        let frac = in_set.load(Ordering::Relaxed) as f64 / total.load(Ordering::Relaxed) as f64;
        assert!(frac >= 0.95, "specialist routing fraction {frac}");
    }

    #[test]
    fn antipodal_means_for_two_domains() {
        let a = planted_domain_mean(9, 2, 0, 16).unwrap();
        let b = planted_domain_mean(9, 2, 1, 16).unwrap();
        assert!((a.l2_norm() - 1.0).abs() <= 1e-12);
        let dist = a.sub(&b).l2_norm();
        assert!((dist - 2.0).abs() <= 1e-12, "separation {dist}");
    }

    #[test]
    fn gen_calib_determinism_and_degenerate_scale() {
        let domain = DomainSpec {
            domain_id: 0,
            mean: Vector::from_vec(vec![1.0, -2.0, 0.5]),
            scale: 0.0,
            seed: 3,
        };
        let a = gen_calib(&domain, 4, 3).unwrap();
        let b = gen_calib(&domain, 4, 3).unwrap();
        assert_eq!(a, b);
        for t in 0..4 {
            assert_eq!(a.row(t), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn gen_calib_sample_mean_converges() {
        let domain = DomainSpec {
            domain_id: 0,
            mean: Vector::from_vec(vec![0.5, -1.0]),
            scale: 0.3,
            seed: 17,
        };
        let n = 100_000;
        let tokens = gen_calib(&domain, n, 2).unwrap();
        let tol = 5.0 * 0.3 / (n as f64).sqrt();
        for j in 0..2 {
            let mean: f64 = (0..n).map(|t| tokens.get(t, j)).sum::<f64>() / n as f64;
            assert!(
                (mean - domain.mean[j]).abs() <= tol,
                "coordinate {j}: {mean} vs {}",
                domain.mean[j]
            );
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = GenSpec::plain(ModelConfig::uniform(1, 4, 4, 3, 2, 1e-5), 1.0, 1);
        spec.dead_experts = Some(vec![vec![3]]); // out of range
        assert!(gen_model(&spec).is_err());

        let mut spec2 = GenSpec::plain(ModelConfig::uniform(1, 4, 4, 4, 2, 1e-5), 1.0, 1);
        let mut m = BTreeMap::new();
        m.insert(0usize, vec![0, 1]);
        m.insert(1usize, vec![1, 2]); // overlap on expert 1
        spec2.domain_plant = Some(DomainPlant {
            n_domains: 2,
            specialists: vec![m],
            bias: 4.0,
        });
        assert!(gen_model(&spec2).is_err());
    }
}
