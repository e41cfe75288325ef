//! End-to-end acceptance run. Prints one `[PASS]`/`[FAIL]` line per check and
//! fails if any check fails. Trains the full desk-scale pipeline, so it takes
//! several minutes on one core.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use piern::bench::{csv_without_wall_clock, MetricsRecord, AGENT, PIERN};
use piern::config::RunConfig;
use piern::datagen::{NormStats, Task};
use piern::expert::{expert_mse, expert_mse_grad, ExpertModel, ExpertSet};
use piern::nn::{Activation, Mlp};
use piern::numerics::{grad_check, Parameter, Tensor, DEFAULT_TOLERANCE};
use piern::pipeline;
use piern::router::{bce, router_ce, RouterModel};
use piern::text2comp::{
    contrastive_loss, contrastive_loss_with_grad, stage2_loss_with_grad, Aligner, AlignerConfig, Stage2Config,
};
use piern::tokenizer::NumberTokens;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(n: usize, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] {n:02} {}: {}", o.name, o.detail);
}

fn worst_of<F>(params: &mut [Parameter], f: F) -> f64
where
    F: FnMut(&mut [Parameter]) -> piern::Result<f64>,
{
    match grad_check(f, params, DEFAULT_TOLERANCE) {
        Ok(r) if r.passed => r.worst(),
        Ok(r) => r.worst().max(1.0),
        Err(_) => f64::INFINITY,
    }
}

fn toy_aligner(rng: &mut ChaCha8Rng) -> (Aligner, Vec<Vec<u32>>, Vec<f64>) {
    let stats = NormStats {
        x_mean: vec![0.0; 3],
        x_std: vec![1.0; 3],
        y_mean: 0.0,
        y_std: 1.0,
    };
    let config = AlignerConfig {
        value_rank: 2,
        key_dim: 3,
        window_before: 2,
        window_after: 1,
    };
    let numbers = NumberTokens {
        digits: vec![None, None, None, Some(3), Some(4), None],
        point: Some(5),
    };
    let mut al = Aligner::new("toy", config, numbers, 4, stats, rng);
    for p in &mut al.params {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    let ids = vec![3, 0, 3, 5, 4, 3, 1, 4];
    let seqs = vec![ids.clone(), ids.iter().rev().copied().collect(), vec![4, 3, 2, 3, 5, 3, 0, 4]];
    let hidden: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (al, seqs, hidden)
}

fn aligner_check(rng: &mut ChaCha8Rng, config: &Stage2Config) -> f64 {
    let (al, seqs, hidden) = toy_aligner(rng);
    let targets: Vec<Vec<f64>> = seqs.iter().map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut params = al.params.clone();
    worst_of(&mut params, |ps| {
        let mut m = al.clone();
        m.params = ps.to_vec();
        m.zero_grad();
        let mut preds = Vec::new();
        let mut caches = Vec::new();
        for ids in &seqs {
            let (p, c) = m.forward(ids, &hidden)?;
            preds.push(p);
            caches.push(c);
        }
        let (loss, g) = stage2_loss_with_grad(&preds, &targets, config)?;
        for (c, gi) in caches.iter().zip(&g) {
            m.backward(c, gi);
        }
        for (p, q) in ps.iter_mut().zip(&m.params) {
            p.grad = q.grad.clone();
        }
        Ok(loss)
    })
}

fn toy_experts(rng: &mut ChaCha8Rng) -> ExpertSet {
    let stats = NormStats {
        x_mean: vec![0.0; 4],
        x_std: vec![1.0; 4],
        y_mean: 0.0,
        y_std: 1.0,
    };
    let mut m = ExpertModel::new("linear", Task::Linear, Mlp::new(&[4, 3, 1], Activation::Silu, rng), stats).unwrap();
    m.freeze();
    let mut set = ExpertSet::new();
    set.register(m).unwrap();
    set
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, v: f64| {
        let e = worst.entry(k).or_insert(0.0);
        *e = e.max(v);
    };
    for _ in 0..5 {
        let net = Mlp::new(&[4, 6, 6, 1], Activation::Silu, &mut rng);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut params = net.params.clone();
        note(
            "expert mse",
            worst_of(&mut params, |ps| {
                let mut m = net.clone();
                m.params = ps.to_vec();
                let (pred, cache) = m.forward(&x, 3)?;
                let loss = expert_mse(&pred, &y, 1)?;
                m.backward(&cache, &expert_mse_grad(&pred, &y, 1), false);
                for (p, q) in ps.iter_mut().zip(&m.params) {
                    p.grad = q.grad.clone();
                }
                Ok(loss)
            }),
        );

        note("extraction mse", aligner_check(&mut rng, &Stage2Config::default()));

        let x: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut params: Vec<Parameter> = (0..4)
            .map(|_| Parameter::new(Tensor::from_vec((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())))
            .collect();
        let tau = rng.gen_range(0.3..1.0);
        note(
            "contrastive",
            worst_of(&mut params, |ps| {
                let xhat: Vec<Vec<f64>> = ps.iter().map(|p| p.value.data().to_vec()).collect();
                let (loss, g) = contrastive_loss_with_grad(&xhat, &x, tau)?;
                for (p, gi) in ps.iter_mut().zip(g) {
                    p.grad = Tensor::from_vec(gi);
                }
                Ok(loss)
            }),
        );

        let combined = Stage2Config {
            contrastive: true,
            lambda: rng.gen_range(0.1..1.0),
            tau: rng.gen_range(0.3..1.0),
            ..Stage2Config::default()
        };
        note("stage-2 objective", aligner_check(&mut rng, &combined));

        let experts = toy_experts(&mut rng);
        let router = RouterModel::new(5, 6, Activation::Gelu, &experts, &mut rng);
        let h: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..2)).collect();
        let mut params = router.net.params.clone();
        note(
            "router ce",
            worst_of(&mut params, |ps| {
                let mut r = router.clone();
                r.net.params = ps.to_vec();
                r.net.zero_grad();
                let loss = r.loss_and_grad(&h, &labels, &[1.0, 1.0])?;
                for (p, q) in ps.iter_mut().zip(&r.net.params) {
                    p.grad = q.grad.clone();
                }
                Ok(loss)
            }),
        );
    }
    let pass = worst.len() == 5 && worst.values().all(|&w| w <= DEFAULT_TOLERANCE);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome {
        name: "gradient checks, 5 instances each, rel tol 1e-4",
        pass,
        detail: format!("worst relative error: {detail}"),
    }
}

fn ce_bce() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let q: f64 = rng.gen_range(1e-9..1.0 - 1e-9);
        let y = f64::from(rng.gen_bool(0.5));
        let ce = router_ce(&[vec![1.0 - q, q]], &[vec![1.0 - y, y]]).unwrap();
        worst = worst.max((ce - bce(&[q], &[y]).unwrap()).abs());
    }
    Outcome {
        name: "one-expert cross-entropy equals binary cross-entropy",
        pass: worst <= 1e-9,
        detail: format!("max |CE - BCE| over 1000 draws = {worst:.2e}"),
    }
}

fn contrastive_identities() -> Outcome {
    let single = contrastive_loss(&[vec![0.3, -1.2, 2.0]], &[vec![1.0, 0.5, -0.7]], 0.07).unwrap();
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let pair = contrastive_loss(&eye, &eye, 1.0).unwrap();
    let want = 2.0 * (1.0 + (-1.0f64).exp()).ln();
    Outcome {
        name: "contrastive identities",
        pass: single == 0.0 && (pair - want).abs() <= 1e-9,
        detail: format!("N=1 loss {single}, N=2 loss {pair:.12} vs {want:.12}"),
    }
}

fn metric<'a>(m: &'a [MetricsRecord], system: &str, task: &str) -> &'a MetricsRecord {
    m.iter().find(|r| r.system == system && r.task == task).expect("metrics row")
}

fn hashes_of_run(cfg: &RunConfig) -> piern::Result<(BTreeMap<String, String>, String)> {
    let data = pipeline::load_data_manifest(cfg)?;
    let system = pipeline::load_system(cfg)?;
    let mut h: BTreeMap<String, String> = data.datasets.into_iter().map(|(k, e)| (format!("data {k}"), e.sha256)).collect();
    let c = system.hashes();
    h.insert("vocab".into(), c.vocab);
    h.insert("backbone".into(), c.backbone);
    h.insert("router".into(), c.router);
    h.extend(c.experts.into_iter().map(|(k, v)| (format!("expert {k}"), v)));
    h.extend(c.aligners.into_iter().map(|(k, v)| (format!("aligner {k}"), v)));
    let csv = csv_without_wall_clock(&cfg.report_dir().join("requests.csv"))?;
    Ok((h, csv))
}

fn small_config(out: &Path) -> RunConfig {
    RunConfig {
        out_dir: out.to_path_buf(),
        nonlinear_train: 600,
        nonlinear_test: 100,
        linear_train: 600,
        linear_test: 100,
        lm_texts_per_task: 100,
        lm_epochs: 2,
        expert_max_epochs: 30,
        aligner_texts: 200,
        aligner_heldout: 40,
        aligner_epochs: 5,
        aligner_restarts: 1,
        router_texts_per_task: 60,
        router_heldout_texts: 20,
        router_epochs: 2,
        requests: 20,
        ..RunConfig::default()
    }
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|d| {
            let cfg = small_config(&root.path().join(d));
            pipeline::run_all(&cfg).and_then(|_| hashes_of_run(&cfg))
        })
        .collect();
    match (&runs[0], &runs[1]) {
        (Ok((ha, ca)), Ok((hb, cb))) => {
            let differing: Vec<&String> = ha.keys().filter(|k| ha.get(*k) != hb.get(*k)).collect();
            let pass = differing.is_empty() && ha.len() == hb.len() && ca == cb;
            Outcome {
                name: "determinism of two seeded pipeline runs",
                pass,
                detail: format!(
                    "{} artifact hashes compared, differing {:?}; CSV without wall-clock {} ({} rows)",
                    ha.len(),
                    differing,
                    if ca == cb { "identical" } else { "differs" },
                    ca.lines().count().saturating_sub(1)
                ),
            }
        }
        (a, b) => Outcome {
            name: "determinism of two seeded pipeline runs",
            pass: false,
            detail: format!("run failed: {:?} / {:?}", a.as_ref().err(), b.as_ref().err()),
        },
    }
}

fn failed(name: &'static str, e: &piern::PiernError) -> Outcome {
    Outcome {
        name,
        pass: false,
        detail: format!("pipeline error: {e}"),
    }
}

const PIPELINE_CHECKS: [&str; 6] = [
    "expert accuracy",
    "freeze contract",
    "router quality",
    "end-to-end exactness",
    "success rate",
    "relative efficiency",
];

fn full_pipeline() -> Vec<Outcome> {
    let root = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out_dir: root.path().to_path_buf(),
        ..RunConfig::default()
    };
    match full_pipeline_checks(&cfg) {
        Ok(v) => v,
        Err(e) => PIPELINE_CHECKS.iter().map(|n| failed(n, &e)).collect(),
    }
}

fn full_pipeline_checks(cfg: &RunConfig) -> piern::Result<Vec<Outcome>> {
    let mut out = Vec::new();
    pipeline::gen_data(cfg)?;
    let lm = pipeline::stage_train_lm(cfg)?;
    let experts = pipeline::stage_train_experts(cfg)?;
    let expert_seconds: f64 = experts.experts.values().map(|r| r.seconds).sum();
    let lin = experts.experts["linear"].test_mse_raw;
    let non = experts.experts["nonlinear"].test_mse_raw;
    out.push(Outcome {
        name: "expert accuracy",
        pass: lin <= 1e-4 && non <= 5e-3 && expert_seconds < 900.0,
        detail: format!("raw test MSE linear {lin:.3e} (<= 1e-4), nonlinear {non:.3e} (<= 5e-3); trained in {expert_seconds:.0}s"),
    });
    let aligners = pipeline::stage_train_text2comp(cfg)?;
    let (_, backbone) = pipeline::load_backbone(cfg)?;
    let after_aligners: (String, BTreeMap<String, String>) = (
        backbone.hash(),
        pipeline::load_experts(cfg)?.models().map(|m| (m.id.clone(), m.compute_hash())).collect(),
    );
    let router = pipeline::stage_train_router(cfg)?;
    let bench_start = Instant::now();
    let bench = pipeline::stage_bench(cfg)?;
    let bench_seconds = bench_start.elapsed().as_secs_f64();

    let system = pipeline::load_system(cfg)?;
    let prompts = pipeline::bench_prompts(cfg)?;
    let all: Vec<(Task, String)> = prompts
        .iter()
        .flat_map(|(t, v)| v.iter().map(move |p| (*t, p.prompt().to_string())))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000 {
        let (_, p) = &all[i % all.len()];
        system.generate(p, cfg.max_new_tokens, cfg.decode_mode()?, &mut rng)?;
    }
    let h = system.hashes();
    let mut drift = Vec::new();
    if h.backbone != lm.backbone_hash || after_aligners.0 != lm.backbone_hash {
        drift.push("backbone".to_string());
    }
    for (id, hash) in &experts.hashes {
        if h.experts.get(id) != Some(hash) || after_aligners.1.get(id) != Some(hash) {
            drift.push(format!("expert {id}"));
        }
    }
    for (id, hash) in &aligners.hashes {
        if h.aligners.get(id) != Some(hash) {
            drift.push(format!("aligner {id}"));
        }
    }
    let frozen = system.backbone.is_frozen() && system.aligners.iter().all(|a| a.is_frozen()) && system.experts.models().all(|m| m.is_frozen());
    out.push(Outcome {
        name: "freeze contract",
        pass: drift.is_empty() && frozen,
        detail: format!(
            "backbone, {} experts and {} aligners re-hashed after all later stages and 1000 generations; changed: {:?}",
            experts.hashes.len(),
            aligners.hashes.len(),
            drift
        ),
    });

    let q = &router.train.heldout;
    out.push(Outcome {
        name: "router quality",
        pass: q.accuracy >= 0.995 && q.expert_recall == 1.0 && q.positions >= 2000,
        detail: format!(
            "held-out accuracy {:.5} over {} positions, expert recall {:.4} over {} expert positions",
            q.accuracy, q.positions, q.expert_recall, q.expert_positions
        ),
    });

    let m = &bench.metrics;
    let mut pass = true;
    let mut detail = Vec::new();
    for task in ["nonlinear", "linear"] {
        let p = metric(m, PIERN, task);
        let ok = p.requests == 200 && p.all_inserted_exact && p.anchor_digits == 0 && p.e2e_mse <= p.expert_mse + 5e-5;
        pass &= ok;
        detail.push(format!(
            "{task}: {} generations, inserted exact {}, LM anchor digits {}, e2e MSE {:.3e} vs expert {:.3e} + 5e-5",
            p.requests, p.all_inserted_exact, p.anchor_digits, p.e2e_mse, p.expert_mse
        ));
    }
    out.push(Outcome {
        name: "end-to-end exactness",
        pass,
        detail: detail.join("; "),
    });

    let sn = metric(m, PIERN, "nonlinear");
    let sl = metric(m, PIERN, "linear");
    out.push(Outcome {
        name: "success rate",
        pass: sn.success_rate == 1.0 && sl.success_rate == 1.0 && bench_seconds < 300.0,
        detail: format!(
            "nonlinear {:.4}, linear {:.4} over {} + {} prompts at max(1%, 1e-3); bench took {bench_seconds:.0}s",
            sn.success_rate, sl.success_rate, sn.requests, sl.requests
        ),
    });

    let mut pass = true;
    let mut detail = Vec::new();
    for task in ["nonlinear", "linear"] {
        let p = metric(m, PIERN, task);
        let a = metric(m, AGENT, task);
        let tok = p.tokens_avg / a.tokens_avg;
        let lat = (a.latency_avg - p.latency_avg) / a.latency_avg;
        let ok = tok <= 0.2 && p.latency_avg < a.latency_avg && p.macs_avg < a.macs_avg && lat >= 0.5;
        pass &= ok;
        detail.push(format!(
            "{task}: tokens {:.1}% of agent, latency reduction {:.1}%, MAC {:.3e} vs {:.3e}",
            100.0 * tok,
            100.0 * lat,
            p.macs_avg,
            a.macs_avg
        ));
    }
    out.push(Outcome {
        name: "relative efficiency",
        pass,
        detail: detail.join("; "),
    });
    Ok(out)
}

#[test]
fn acceptance() {
    let mut outcomes = vec![gradient_suite(), ce_bce(), contrastive_identities()];
    outcomes.extend(full_pipeline());
    outcomes.push(determinism());
    for (i, o) in outcomes.iter().enumerate() {
        report(i + 1, o);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
