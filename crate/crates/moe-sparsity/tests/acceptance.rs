//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Run with `cargo test --test acceptance -- --nocapture`.

use moe_sparsity::accounting::{
    count_after_prune, count_params, expected_expert_evals, expected_expert_evals_from_stats,
    RefConfig,
};
use moe_sparsity::calibration::run_calibration;
use moe_sparsity::evaluation::compare_subsets;
use moe_sparsity::io;
use moe_sparsity::modelgen::{
    gen_calib, gen_model, planted_domain_spec, DomainPlant, DomainSpec, GenSpec,
};
use moe_sparsity::moe::{model_forward, ModelConfig};
use moe_sparsity::numerics::{Prng, Vector};
use moe_sparsity::pruning::{
    prune_frequency, prune_layer_exhaustive, prune_model_layerwise, prune_model_progressive,
    prune_random, PruneMethod, PruneSpec, DEFAULT_MAX_ENUMERATION,
};
use moe_sparsity::skipping::{
    calibrate_beta, check_skip_bound, skip_general, skip_top2, SkipConfig, SkipMode,
};
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

mod oracle;

fn criterion(name: &str, budget: Duration, f: impl FnOnce() -> Result<String, String>) {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    match outcome {
        Ok(detail) => {
            println!(
                "acceptance {name}: PASS ({detail}; {:.2}s)",
                elapsed.as_secs_f64()
            );
            assert!(
                elapsed <= budget,
                "{name} exceeded its {:.0}s runtime budget: {:.2}s",
                budget.as_secs_f64(),
                elapsed.as_secs_f64()
            );
        }
        Err(msg) => {
            println!("acceptance {name}: FAIL ({msg})");
            panic!("{name}: {msg}");
        }
    }
}

fn zero_mean_domain(d_model: usize, seed: u64) -> DomainSpec {
    DomainSpec {
        domain_id: 0,
        mean: Vector::zeros(d_model),
        scale: 1.0,
        seed,
    }
}

#[test]
fn acceptance_01_mixtral_accounting() {
    criterion("01 mixtral accounting", Duration::from_secs(1), || {
        let rep = count_params(&RefConfig::mixtral_8x7b()).map_err(|e| e.to_string())?;
        let total = rep.total_params as f64;
        let active = rep.active_params as f64;
        if !(0.94..=0.98).contains(&rep.expert_share) {
            return Err(format!("expert_share {} outside [0.94, 0.98]", rep.expert_share));
        }
        if !(45.8e9..=47.6e9).contains(&total) {
            return Err(format!("total {total} outside [45.8e9, 47.6e9]"));
        }
        if !(12.4e9..=13.5e9).contains(&active) {
            return Err(format!("active {active} outside [12.4e9, 13.5e9]"));
        }
        Ok(format!(
            "share {:.4}, total {:.3}e9, active {:.3}e9",
            rep.expert_share,
            total / 1e9,
            active / 1e9
        ))
    });
}

#[test]
fn acceptance_02_reduction_ratios() {
    criterion("02 reduction ratios", Duration::from_secs(1), || {
        let cfg = RefConfig::mixtral_8x7b();
        let r4 = count_after_prune(&cfg, 4).map_err(|e| e.to_string())?;
        let r6 = count_after_prune(&cfg, 6).map_err(|e| e.to_string())?;
        if (r4.reduction - 0.48).abs() > 0.02 {
            return Err(format!("r=4 reduction {} not 0.48 +/- 0.02", r4.reduction));
        }
        if (r6.reduction - 0.24).abs() > 0.02 {
            return Err(format!("r=6 reduction {} not 0.24 +/- 0.02", r6.reduction));
        }
        Ok(format!(
            "r=4 -> {:.4}, r=6 -> {:.4}",
            r4.reduction, r6.reduction
        ))
    });
}

#[test]
fn acceptance_03_oracle_equivalence() {
    criterion("03 oracle equivalence", Duration::from_secs(60), || {
        let mut checked = 0;
        for i in 0..100u64 {
            let n = 4 + (i as usize % 5); // 4..8
            let r_max = n.min(7);
            let r = 2 + (i as usize * 7 + 3) % (r_max - 1); // 2..r_max
            let d_model = [8, 12, 16][i as usize % 3];
            let t = 16 + (i as usize * 11) % 49; // 16..64
            let w_s = [0.6, 1.0, 1.4][(i as usize / 3) % 3];

            let spec = GenSpec::plain(
                ModelConfig::uniform(1, d_model, 2 * d_model, n, 2, 1e-5),
                w_s,
                0x0AC1E + i,
            );
            let model = gen_model(&spec).map_err(|e| e.to_string())?;
            let tokens = gen_calib(&zero_mean_domain(d_model, 7_000 + i), t, d_model)
                .map_err(|e| e.to_string())?;
            let (cache, _) = run_calibration(&model, &tokens).map_err(|e| e.to_string())?;
            let lc = &cache.layers[0];

            let (retained, _, _) = prune_layer_exhaustive(
                &model.layers[0],
                &lc.inputs,
                &lc.outputs,
                r,
                2,
                DEFAULT_MAX_ENUMERATION,
            )
            .map_err(|e| e.to_string())?;
            let expected = oracle::argmin_subset(&model.layers[0], &lc.inputs, &lc.outputs, r, 2);
            if retained != expected {
                return Err(format!(
                    "instance {i} (n={n}, r={r}, d={d_model}, T={t}): got {retained:?}, oracle {expected:?}"
                ));
            }
            checked += 1;
        }
        Ok(format!("{checked} instances match the brute-force oracle"))
    });
}

#[test]
fn acceptance_04_planted_dead_recovery() {
    criterion("04 planted-dead recovery", Duration::from_secs(120), || {
        for m in [1usize, 2, 4] {
            let config = ModelConfig::desk();
            let n = 8;
            let dead: Vec<Vec<usize>> = (0..config.n_layers)
                .map(|l| {
                    let mut v: Vec<usize> = (0..m).map(|j| (l + 2 * j) % n).collect();
                    v.sort_unstable();
                    v
                })
                .collect();
            let live: Vec<Vec<usize>> = dead
                .iter()
                .map(|d| (0..n).filter(|e| !d.contains(e)).collect())
                .collect();
            let spec = GenSpec {
                config,
                weight_scale: 1.0,
                dead_experts: Some(dead),
                domain_plant: None,
                seed: 0xDEAD + m as u64,
            };
            let model = gen_model(&spec).map_err(|e| e.to_string())?;
            let tokens =
                gen_calib(&zero_mean_domain(32, 400 + m as u64), 4096, 32).map_err(|e| e.to_string())?;
            let (cache, stats) = run_calibration(&model, &tokens).map_err(|e| e.to_string())?;
            let r = n - m;

            // Exhaustive search retains exactly the live set, losslessly.
            let (_, report) =
                prune_model_layerwise(&model, &cache, &PruneSpec::new(PruneMethod::Exhaustive, r))
                    .map_err(|e| e.to_string())?;
            for (l, lr) in report.layers.iter().enumerate() {
                if lr.retained != live[l] {
                    return Err(format!(
                        "m={m} layer {l}: exhaustive retained {:?}, live {:?}",
                        lr.retained, live[l]
                    ));
                }
                let loss = lr.loss.unwrap();
                if loss > 1e-9 {
                    return Err(format!("m={m} layer {l}: loss {loss} > 1e-9"));
                }
            }

            // Frequency baseline matches (dead experts have zero counts).
            let (_, freq) = prune_frequency(
                &model,
                &stats,
                &PruneSpec::new(PruneMethod::Frequency, r),
                None,
            )
            .map_err(|e| e.to_string())?;
            for (l, lr) in freq.layers.iter().enumerate() {
                if lr.retained != live[l] {
                    return Err(format!("m={m} layer {l}: frequency missed the live set"));
                }
            }

            // Random baseline fails on at least half the layers.
            let mut fails = 0usize;
            let mut total = 0usize;
            for seed in 0..100u64 {
                let mut ps = PruneSpec::new(PruneMethod::Random, r);
                ps.seed = seed;
                let (_, rep) = prune_random(&model, &ps, None).map_err(|e| e.to_string())?;
                for (l, lr) in rep.layers.iter().enumerate() {
                    total += 1;
                    if lr.retained != live[l] {
                        fails += 1;
                    }
                }
            }
            let fail_rate = fails as f64 / total as f64;
            if fail_rate < 0.5 {
                return Err(format!("m={m}: random baseline fail rate {fail_rate} < 0.5"));
            }
        }
        Ok("m in {1,2,4}: exhaustive and frequency recover the live sets, random does not".into())
    });
}

fn two_domain_spec(seed: u64) -> GenSpec {
    let config = ModelConfig::desk();
    let specialists: Vec<BTreeMap<usize, Vec<usize>>> = (0..config.n_layers)
        .map(|l| {
            let a: Vec<usize> = (0..4).map(|i| (l + i) % 8).collect();
            let b: Vec<usize> = (0..8).filter(|e| !a.contains(e)).collect();
            let mut a = a;
            a.sort_unstable();
            let mut map = BTreeMap::new();
            map.insert(0usize, a);
            map.insert(1usize, b);
            map
        })
        .collect();
    GenSpec {
        config,
        weight_scale: 0.15,
        dead_experts: None,
        domain_plant: Some(DomainPlant {
            n_domains: 2,
            specialists,
            bias: 8.0,
        }),
        seed,
    }
}

#[test]
fn acceptance_05_domain_divergence() {
    criterion("05 domain divergence", Duration::from_secs(120), || {
        let spec = two_domain_spec(0xD011A);
        let model = gen_model(&spec).map_err(|e| e.to_string())?;
        let plant = spec.domain_plant.as_ref().unwrap();

        let mut reports = Vec::new();
        for domain_id in [0usize, 1] {
            let domain = planted_domain_spec(&spec, domain_id, 0.25).map_err(|e| e.to_string())?;
            let tokens = gen_calib(&domain, 4096, 32).map_err(|e| e.to_string())?;
            let (cache, _) = run_calibration(&model, &tokens).map_err(|e| e.to_string())?;
            let (_, report) =
                prune_model_layerwise(&model, &cache, &PruneSpec::new(PruneMethod::Exhaustive, 4))
                    .map_err(|e| e.to_string())?;
            reports.push(report);
        }

        let cmp = compare_subsets(&reports[0], &reports[1]).map_err(|e| e.to_string())?;
        let n_layers = cmp.per_layer_equal.len();
        let differing = n_layers - cmp.layers_equal;
        if (differing as f64) < 0.75 * n_layers as f64 {
            return Err(format!("only {differing}/{n_layers} layers differ (< 75%)"));
        }

        let mut a_kept = 0usize;
        for (l, lr) in reports[0].layers.iter().enumerate() {
            let a_set = &plant.specialists[l][&0];
            if a_set.iter().all(|e| lr.retained.contains(e)) {
                a_kept += 1;
            }
        }
        if (a_kept as f64) < 0.9 * n_layers as f64 {
            return Err(format!(
                "A specialists fully retained in only {a_kept}/{n_layers} layers (< 90%)"
            ));
        }
        Ok(format!(
            "{differing}/{n_layers} layers differ; A specialists retained in {a_kept}/{n_layers}"
        ))
    });
}

#[test]
fn acceptance_06_skipping_identity_and_consistency() {
    criterion("06 skipping identity/consistency", Duration::from_secs(60), || {
        // beta = 0 forward is bit-identical to the no-skip forward.
        let spec = GenSpec::plain(ModelConfig::desk(), 1.0, 0x1DE47);
        let model = gen_model(&spec).map_err(|e| e.to_string())?;
        let tokens = gen_calib(&zero_mean_domain(32, 606), 256, 32).map_err(|e| e.to_string())?;
        let plain = model_forward(&model, &tokens, None).map_err(|e| e.to_string())?;
        for mode in [SkipMode::Top2, SkipMode::General] {
            let zeros = SkipConfig::zeros(mode, model.config.n_layers);
            let skipped =
                model_forward(&model, &tokens, Some(&zeros)).map_err(|e| e.to_string())?;
            for (a, b) in plain.data().iter().zip(skipped.data().iter()) {
                if a.to_bits() != b.to_bits() {
                    return Err(format!("beta=0 ({mode:?}) output differs: {a} vs {b}"));
                }
            }
        }

        // General rule at beta' agrees with the top-2 rule at beta'/(1-beta').
        let mut rng = Prng::new(0xC05157);
        let mut disagreements = 0;
        for _ in 0..10_000 {
            let w0 = rng.uniform(1e-6, 1.0);
            let w1 = rng.uniform(0.0, w0);
            let bp = rng.uniform(0.0, 1.0);
            let decision = moe_sparsity::moe::RoutingDecision {
                selected: vec![0, 1],
                raw_weights: vec![w0, w1],
                normalized_weights: vec![w0 / (w0 + w1), w1 / (w0 + w1)],
            };
            let g = skip_general(decision.clone(), bp);
            let t = skip_top2(decision, bp / (1.0 - bp)).map_err(|e| e.to_string())?;
            if g.selected != t.selected {
                disagreements += 1;
            }
        }
        if disagreements > 0 {
            return Err(format!("{disagreements} of 10000 draws disagree"));
        }
        Ok("beta=0 bit-identity holds; 10000/10000 draws agree".into())
    });
}

#[test]
fn acceptance_07_bound_soundness() {
    criterion("07 bound soundness", Duration::from_secs(60), || {
        let mut rng = Prng::new(0xB007D);
        for i in 0..10_000usize {
            let k = 2 + i % 5;
            let d = 1 + i % 8;
            let mut weights: Vec<f64> = (0..k).map(|_| rng.uniform(1e-9, 1.0)).collect();
            weights.sort_by(|a, b| b.total_cmp(a));
            let scale = rng.uniform(0.1, 10.0);
            let outputs: Vec<Vector> = (0..k)
                .map(|_| Vector::from_vec((0..d).map(|_| scale * rng.normal(0.0, 1.0)).collect()))
                .collect();
            let kept = 1 + i % k;
            check_skip_bound(&weights, &outputs, kept)
                .map_err(|e| format!("triple {i} (k={k}, d={d}, kept={kept}): {e}"))?;
        }
        Ok("10000/10000 random triples satisfy the bound at 1e-9 slack".into())
    });
}

#[test]
fn acceptance_08_median_beta_behavior() {
    criterion("08 median-beta behavior", Duration::from_secs(60), || {
        let spec = GenSpec::plain(ModelConfig::desk(), 1.0, 0xBE7A);
        let model = gen_model(&spec).map_err(|e| e.to_string())?;
        let tokens = gen_calib(&zero_mean_domain(32, 808), 4096, 32).map_err(|e| e.to_string())?;
        let (_, stats) = run_calibration(&model, &tokens).map_err(|e| e.to_string())?;
        let config = calibrate_beta(&stats, SkipMode::Top2).map_err(|e| e.to_string())?;

        // Deployed skip rates on the calibration stream.
        let evals =
            expected_expert_evals(&model, &tokens, Some(&config)).map_err(|e| e.to_string())?;
        for (l, &e) in evals.iter().enumerate() {
            let rate = 2.0 - e;
            if !(0.45..=0.55).contains(&rate) {
                return Err(format!("layer {l}: skip rate {rate} outside [0.45, 0.55]"));
            }
            if (e - 1.5).abs() > 0.05 {
                return Err(format!("layer {l}: expected evals {e} not 1.5 +/- 0.05"));
            }
        }

        // Decision-level rates from the recorded stats sit at the median
        // exactly (even count, distinct ratios).
        let from_stats =
            expected_expert_evals_from_stats(&stats, &config).map_err(|e| e.to_string())?;
        for (l, &e) in from_stats.iter().enumerate() {
            if (e - 1.5).abs() > 0.01 {
                return Err(format!("layer {l}: stats-side expected evals {e} not ~1.5"));
            }
        }
        let lo = evals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = evals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(format!("per-layer expected evals in [{lo:.3}, {hi:.3}]"))
    });
}

#[test]
fn acceptance_09_infrastructure_exactness() {
    criterion("09 infrastructure exactness", Duration::from_secs(120), || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let spec = GenSpec::plain(ModelConfig::desk(), 1.0, 0x1F7A);
        let model = gen_model(&spec).map_err(|e| e.to_string())?;
        let tokens = gen_calib(&zero_mean_domain(32, 909), 512, 32).map_err(|e| e.to_string())?;

        // Byte-identical model and calibration roundtrips.
        let m1 = dir.path().join("a.moe");
        let m2 = dir.path().join("b.moe");
        io::save_model(&model, &m1).map_err(|e| e.to_string())?;
        let loaded = io::load_model(&m1).map_err(|e| e.to_string())?;
        io::save_model(&loaded, &m2).map_err(|e| e.to_string())?;
        if std::fs::read(&m1).unwrap() != std::fs::read(&m2).unwrap() {
            return Err(".moe roundtrip changed bytes".into());
        }
        let c1 = dir.path().join("a.cal");
        let c2 = dir.path().join("b.cal");
        io::save_calib(&tokens, &c1).map_err(|e| e.to_string())?;
        let cal_loaded = io::load_calib(&c1).map_err(|e| e.to_string())?;
        io::save_calib(&cal_loaded, &c2).map_err(|e| e.to_string())?;
        if std::fs::read(&c1).unwrap() != std::fs::read(&c2).unwrap() {
            return Err(".cal roundtrip changed bytes".into());
        }

        // Co-selection totals and cache fidelity (on the f32-quantized model
        // and tokens, the same artifacts the CLI handles).
        let (cache, stats) = run_calibration(&loaded, &cal_loaded).map_err(|e| e.to_string())?;
        for (l, ls) in stats.layers.iter().enumerate() {
            let mut upper = 0u64;
            for i in 0..ls.n_experts() {
                for j in (i + 1)..ls.n_experts() {
                    upper += ls.co_selection_at(i, j);
                }
            }
            if upper != stats.n_tokens as u64 {
                return Err(format!(
                    "layer {l}: co-selection upper triangle {upper} != {}",
                    stats.n_tokens
                ));
            }
        }
        for (l, lc) in cache.layers.iter().enumerate() {
            for t in 0..cache.n_tokens {
                let x = lc.inputs.row_vector(t);
                let z = moe_sparsity::moe::moe_layer_forward(&loaded.layers[l], &x, 2, None)
                    .map_err(|e| e.to_string())?;
                for (a, b) in z.iter().zip(lc.outputs.row(t).iter()) {
                    if (a - b).abs() > 1e-12 {
                        return Err(format!("layer {l} token {t}: cache fidelity {}", a - b));
                    }
                }
            }
        }

        // Equal-seed CLI reruns produce byte-identical artifacts.
        let bin = env!("CARGO_BIN_EXE_moe-sparsity");
        let gen_spec_path = dir.path().join("gen.json");
        let small = GenSpec::plain(ModelConfig::uniform(4, 16, 24, 6, 2, 1e-5), 1.0, 77);
        std::fs::write(&gen_spec_path, serde_json::to_string(&small).unwrap())
            .map_err(|e| e.to_string())?;
        let calib_spec_path = dir.path().join("cal.json");
        std::fs::write(
            &calib_spec_path,
            serde_json::json!({
                "domain": {"domain_id": 0, "mean": vec![0.0; 16], "scale": 1.0, "seed": 5},
                "n_tokens": 128,
            })
            .to_string(),
        )
        .map_err(|e| e.to_string())?;

        let run = |args: &[&str]| -> Result<(), String> {
            let out = std::process::Command::new(bin)
                .args(args)
                .current_dir(dir.path())
                .output()
                .map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(format!(
                    "{:?} failed: {}",
                    args,
                    String::from_utf8_lossy(&out.stderr)
                ));
            }
            Ok(())
        };

        let mut artifacts: Vec<Vec<u8>> = Vec::new();
        for pass in 0..2 {
            run(&["gen-model", "--spec", "gen.json", "--out", "m.moe"])?;
            run(&["gen-calib", "--spec", "cal.json", "--out", "c.cal"])?;
            run(&[
                "prune",
                "--method",
                "exhaustive",
                "--keep",
                "4",
                "--model",
                "m.moe",
                "--calib",
                "c.cal",
                "--out",
                "p.moe",
                "--report",
                "r.json",
            ])?;
            run(&[
                "calibrate-beta",
                "--model",
                "m.moe",
                "--calib",
                "c.cal",
                "--skip-mode",
                "top2",
                "--out",
                "skip.json",
            ])?;
            let mut this_pass = Vec::new();
            for f in ["m.moe", "c.cal", "p.moe", "skip.json"] {
                this_pass.push(std::fs::read(dir.path().join(f)).map_err(|e| e.to_string())?);
            }
            if pass == 0 {
                artifacts = this_pass;
            } else if artifacts != this_pass {
                return Err("CLI rerun produced different bytes".into());
            }
        }
        Ok("roundtrips, tallies, cache fidelity, and CLI reruns are exact".into())
    });
}

#[test]
fn acceptance_10_progressive_parity_on_plants() {
    criterion("10 progressive parity", Duration::from_secs(120), || {
        let config = ModelConfig::desk();
        let dead: Vec<Vec<usize>> = (0..config.n_layers)
            .map(|l| {
                let mut v = vec![l % 8, (l + 4) % 8];
                v.sort_unstable();
                v
            })
            .collect();
        let spec = GenSpec {
            config,
            weight_scale: 1.0,
            dead_experts: Some(dead),
            domain_plant: None,
            seed: 0x9A127,
        };
        let model = gen_model(&spec).map_err(|e| e.to_string())?;
        let tokens = gen_calib(&zero_mean_domain(32, 1010), 4096, 32).map_err(|e| e.to_string())?;
        let (cache, _) = run_calibration(&model, &tokens).map_err(|e| e.to_string())?;

        let (_, flat) =
            prune_model_layerwise(&model, &cache, &PruneSpec::new(PruneMethod::Exhaustive, 6))
                .map_err(|e| e.to_string())?;
        let (_, prog) =
            prune_model_progressive(&model, &tokens, &PruneSpec::new(PruneMethod::Progressive, 6))
                .map_err(|e| e.to_string())?;
        for l in 0..flat.layers.len() {
            if flat.layers[l].retained != prog.layers[l].retained {
                return Err(format!(
                    "layer {l}: layer-wise {:?} vs progressive {:?}",
                    flat.layers[l].retained, prog.layers[l].retained
                ));
            }
            let fl = flat.layers[l].loss.unwrap();
            let pl = prog.layers[l].loss.unwrap();
            if fl > 1e-9 || pl > 1e-9 {
                return Err(format!("layer {l}: losses {fl} / {pl} above 1e-9"));
            }
        }
        Ok("layer-wise and progressive agree on every all-dead-plant layer".into())
    });
}
