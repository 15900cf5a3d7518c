//! End-to-end acceptance gate. Each criterion prints one PASS/FAIL line to
//! stderr (uncaptured) and the test fails if any criterion fails.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use hmba::context::{BatchDims, ContextConfig, Extractor, Granularity, VideoFeatures};
use hmba::costmodel::*;
use hmba::fusion::AdapterKind;
use hmba::harness::{load_run, run_ablation, save_run, train, Cell, RunConfig};
use hmba::model::{HmbaModel, ModelConfig};
use hmba::numeric::macs::count_macs;
use hmba::numeric::{Graph, Tensor, Var};
use hmba::params::Module;
use hmba::ssm::{selective_scan_parallel, selective_scan_seq, zoh_discretize, SsmParams};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, start: Instant, limit: Option<Duration>, out: Outcome) -> bool {
    let took = start.elapsed();
    let in_time = limit.is_none_or(|l| took <= l);
    let pass = out.pass && in_time;
    let budget = limit.map(|l| format!(" (limit {}s)", l.as_secs())).unwrap_or_default();
    let _ = writeln!(
        std::io::stderr(),
        "criterion {id} [{}] {name}: {} in {:.1}s{budget}",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64()
    );
    pass
}

fn scan_equivalence() -> Outcome {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let t = r.random_range(1..=512);
        let d = 2 * r.random_range(1..=4);
        let n = r.random_range(1..=8);
        let mut cfg = small_cfg(d / 2);
        cfg.d_state = n;
        let mut p = SsmParams::init(&cfg, &mut r);
        for v in p.skip.data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
        for v in p.a_log.data_mut() {
            *v = r.random_range(-2.0..1.5);
        }
        let x = Tensor::randn(&[t, d], 1.0, &mut rng(k));
        let a = selective_scan_seq(&x, &p).unwrap();
        let b = selective_scan_parallel(&x, &p).unwrap();
        worst = worst.max(a.max_rel_diff(&b, 1e-12));
    }
    Outcome {
        pass: worst <= 1e-10,
        detail: format!("max rel deviation {worst:.2e} over 200 instances"),
    }
}

fn zoh_exactness() -> Outcome {
    let (ab, bb) = zoh_discretize(&[-1.0], &[0.8], &[std::f64::consts::LN_2]).unwrap();
    let closed = (ab[0] - 0.5).abs().max((bb[0] - 0.4).abs());
    let mut r = rng(77);
    let mut quad_err: f64 = 0.0;
    for _ in 0..100 {
        let a: f64 = r.random_range(-5.0..-0.1);
        let dl: f64 = r.random_range(1e-3..1.0);
        let b: f64 = r.random_range(-2.0..2.0);
        let (_, bb) = zoh_discretize(&[a], &[b], &[dl]).unwrap();
        // composite Simpson on exp(sA) B over [0, delta]
        let m = 2000;
        let h = dl / m as f64;
        let mut acc = 0.0;
        for j in 0..=m {
            let w = if j == 0 || j == m { 1.0 } else if j % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * (a * h * j as f64).exp();
        }
        let quad = acc * h / 3.0 * b;
        quad_err = quad_err.max(((bb[0] - quad) / quad).abs());
    }
    Outcome {
        pass: closed <= 1e-14 && quad_err <= 1e-9,
        detail: format!("closed-form error {closed:.1e}, quadrature rel error {quad_err:.2e}"),
    }
}

const GRAD_SEEDS: u64 = 20;

fn gradient_suite() -> Outcome {
    let rows = hmba::gradsuite::run(GRAD_SEEDS).unwrap();
    let detail = rows
        .iter()
        .map(|r| format!("{} {:.1e}", r.block, r.worst))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome {
        pass: rows.iter().all(|r| r.passed() && r.seeds == GRAD_SEEDS),
        detail: format!("worst rel err over {GRAD_SEEDS} seeds: {detail}"),
    }
}

fn init_passthrough() -> Outcome {
    let cfg = ModelConfig::new(5, 16, 32);
    let mut worst: f64 = 0.0;
    for k in 0..50u64 {
        let model = HmbaModel::init_seeded(&cfg, k).unwrap();
        let v = VideoFeatures::new(Tensor::randn(&[5, 16, 32], 1.0, &mut rng(1000 + k)), 4).unwrap();
        let out = model.apply(&v).unwrap();
        let base = v.current();
        let gap = out.data().iter().zip(base.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(gap);
    }
    Outcome {
        pass: worst == 0.0,
        detail: format!("max |forward - base| = {worst:e} over 50 videos"),
    }
}

fn cost_table() -> Outcome {
    let cd = CostDims::new(5, 256, 1024);
    let get = |m| count_flops(m, &cd).unwrap();
    let (t, dst, jst) = (get(CostModule::TMamba), get(CostModule::DstMamba), get(CostModule::JstMamba));
    let (tr, tsf) = (get(CostModule::TemporalTransformer), get(CostModule::Timesformer));
    let order = t.flops() < tr.flops() && t.params < tr.params;
    let ratio = tsf.flops() as f64 / dst.flops() as f64;
    let within = |p: u64, want: f64| (p as f64 - want).abs() <= 0.5 * want;
    let abs_ok = within(t.params, 7.7e6) && within(jst.params, 7.7e6) && within(dst.params, 14.4e6);

    let base = CostDims::new(1, 16, 64);
    let ts: Vec<usize> = (1..=8).collect();
    let rows = sweep(&[CostModule::JointAttention, CostModule::JstMamba], &ts, &base).unwrap();
    let series = |name: &str| -> (Vec<f64>, Vec<f64>) {
        rows.iter()
            .filter(|r| r.module == name)
            .map(|r| ((r.t * r.c) as f64, r.flops as f64))
            .unzip()
    };
    let (x, y) = series("jst_mamba");
    let (_, r2_jst) = fit_through_origin(&x, &y);
    let (x, y) = series("joint_attention");
    let ([_, _, c2], r2_joint) = fit_quadratic(&x, &y);
    let (_, r2_joint_lin) = fit_through_origin(&x, &y);
    let growth = r2_jst >= 0.999 && r2_joint >= 0.999 && c2 > 0.0 && r2_joint_lin < r2_joint;
    Outcome {
        pass: order && (5.0..=20.0).contains(&ratio) && abs_ok && growth,
        detail: format!(
            "params T {:.2}M / JST {:.2}M / DST {:.2}M / Transformer {:.2}M, \
             Timesformer/DST flops {ratio:.2}, JST linear R2 {r2_jst:.5}, \
             joint quadratic R2 {r2_joint:.5} (linear {r2_joint_lin:.4})",
            t.params as f64 / 1e6,
            jst.params as f64 / 1e6,
            dst.params as f64 / 1e6,
            tr.params as f64 / 1e6,
        ),
    }
}

fn instrumented_flops() -> Outcome {
    let cd = CostDims::new(2, 4, 8);
    let bd = BatchDims {
        batch: 1,
        t: 2,
        c: 4,
        d: 8,
        current: 1,
    };
    let ctx = {
        let mut c = ContextConfig::new(2, 8);
        c.d_state = cd.mamba.d_state;
        c.d_conv = cd.mamba.d_conv;
        c.expand = cd.mamba.expand;
        c.t_max = cd.t_max;
        c
    };
    let x = Tensor::randn(&[bd.rows(), 8], 1.0, &mut rng(5));
    let mut worst: f64 = 0.0;
    let mut measure = |name: &str, analytic: u64, f: &dyn Fn(&mut Graph, Var) -> Var| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (_, n) = count_macs(|| f(&mut g, xv));
        let rel = (n as f64 - analytic as f64).abs() / analytic as f64;
        worst = worst.max(rel);
        format!("{name} {n}/{analytic}")
    };
    let mut parts = Vec::new();
    let mut r = rng(6);
    for (module, gran) in [
        (CostModule::TMamba, Granularity::T),
        (CostModule::DstMamba, Granularity::Dst),
        (CostModule::JstMamba, Granularity::Jst),
    ] {
        let ex = Extractor::init(gran, &ctx, &mut r);
        let a = count_flops(module, &cd).unwrap().macs;
        parts.push(measure(module.name(), a, &|g, xv| ex.forward(g, xv, bd).unwrap()));
    }
    let tt = hmba::baselines::TemporalTransformer::init(8, &mut r);
    let a = count_flops(CostModule::TemporalTransformer, &cd).unwrap().macs;
    parts.push(measure("transformer", a, &|g, xv| tt.forward(g, xv, bd).unwrap()));
    let tsf = hmba::baselines::Timesformer::init(8, cd.depth, &mut r);
    let a = count_flops(CostModule::Timesformer, &cd).unwrap().macs;
    parts.push(measure("timesformer", a, &|g, xv| tsf.forward(g, xv, bd).unwrap()));
    let ja = hmba::baselines::JointAttention::init(8, &mut r);
    let a = count_flops(CostModule::JointAttention, &cd).unwrap().macs;
    parts.push(measure("joint_attention", a, &|g, xv| ja.forward(g, xv, bd).unwrap()));
    let mc = ModelConfig::new(2, 4, 8);
    let model = HmbaModel::init_seeded(&mc, 7).unwrap();
    let a = model_report(&mc, 1).unwrap().macs;
    parts.push(measure("hmba", a, &|g, xv| model.logits(g, xv, bd).unwrap()));
    Outcome {
        pass: worst <= 0.01,
        detail: format!("max rel gap {worst:.2e} (measured/analytic MACs: {})", parts.join(", ")),
    }
}

fn synthetic_benefit() -> Outcome {
    let base = RunConfig::default();
    let cells = Cell::granularity_grid(AdapterKind::QMamba);
    let rows = run_ablation(&base, &cells, &[0, 1, 2]).unwrap();
    let mean = |id: &str| rows.iter().find(|r| r.id == id).unwrap().mean;
    let frame = mean("frame");
    let full = mean("t+dst+jst/qmamba");
    let singles: Vec<(&str, f64)> = ["t/qmamba", "dst/qmamba", "jst/qmamba"].iter().map(|&id| (id, mean(id))).collect();
    let beats = singles.iter().all(|(_, m)| *m >= frame + 0.10);
    let keeps = singles.iter().all(|(_, m)| full >= m - 0.02);
    let listing = rows
        .iter()
        .map(|r| format!("{} {:.3}±{:.3}", r.id, r.mean, r.std))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome {
        pass: beats && keeps,
        detail: format!("mean test accuracy over seeds 0,1,2: {listing}"),
    }
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.data.train_size = 256;
    cfg.data.test_size = 128;
    cfg.steps = 20;
    cfg.seed = 11;
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    let same_acc = a.final_acc.to_bits() == b.final_acc.to_bits() && a.log == b.log;
    let dir = tempfile::tempdir().unwrap();
    save_run(&cfg, &a, dir.path()).unwrap();
    let (back_cfg, model) = load_run(dir.path()).unwrap();
    let data = hmba::synthetic::generate_dataset(&cfg.data, cfg.seed).unwrap();
    let bitwise = data.test.iter().take(32).all(|s| {
        let x = a.model.apply(&s.video).unwrap();
        let y = model.apply(&s.video).unwrap();
        x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    let mut n_a = 0;
    let mut n_b = 0;
    a.model.visit(&mut |_, t| n_a += t.numel());
    model.visit(&mut |_, t| n_b += t.numel());
    Outcome {
        pass: same_acc && bitwise && back_cfg == cfg && n_a == n_b,
        detail: format!(
            "rerun accuracy {} == {} ({}), save/load outputs bitwise equal: {bitwise}",
            a.final_acc, b.final_acc, same_acc
        ),
    }
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let criteria: Vec<(&str, Option<Duration>, fn() -> Outcome)> = vec![
        ("scan equivalence", Some(secs(30)), scan_equivalence),
        ("ZOH exactness", None, zoh_exactness),
        ("gradient suite", Some(secs(300)), gradient_suite),
        ("init passthrough", None, init_passthrough),
        ("cost table", Some(secs(10)), cost_table),
        ("analytic vs instrumented flops", None, instrumented_flops),
        ("synthetic benefit", Some(secs(600)), synthetic_benefit),
        ("determinism and serialization", None, determinism),
    ];
    let mut failed = Vec::new();
    for (k, (name, limit, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let out = run();
        if !report(k + 1, name, start, limit, out) {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
