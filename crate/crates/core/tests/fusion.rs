mod common;

use common::*;
use hmba::fusion::*;
use hmba::numeric::{check_module, gradcheck::worst, Graph, Tensor, DEFAULT_STEP};
use hmba::optim::Optimizer;
use hmba::params::Module;
use hmba::ssm::MambaConfig;
use proptest::prelude::*;

fn maps(n: usize, c: usize, d: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n).map(|_| Tensor::randn(&[c, d], 1.0, &mut r)).collect()
}

fn mamba(d: usize) -> MambaConfig {
    small_cfg(d)
}

fn matmul(x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
    let n = w.shape()[1];
    x.iter()
        .map(|r| (0..n).map(|j| r.iter().enumerate().map(|(i, v)| v * w.data()[i * n + j]).sum()).collect())
        .collect()
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

#[test]
fn da_with_zero_weights_is_base() {
    let base = maps(1, 4, 5, 1).remove(0);
    let feats = maps(3, 4, 5, 2);
    let mut a = DaAdapter::new(3).unwrap();
    a.weights.data_mut().fill(0.0);
    assert_eq!(da_fuse(&base, &feats, &a).unwrap(), base);
}

#[test]
fn da_cancels_base() {
    let base = maps(1, 3, 4, 3).remove(0);
    let neg = Tensor::new(base.shape(), base.data().iter().map(|v| -v).collect()).unwrap();
    let mut a = DaAdapter::new(1).unwrap();
    a.weights.data_mut()[0] = 1.0;
    let out = da_fuse(&base, &[neg], &a).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn da_matches_loop_sum() {
    let (c, d) = (5, 6);
    let base = maps(1, c, d, 4).remove(0);
    let feats = maps(6, c, d, 5);
    let mut a = DaAdapter::new(6).unwrap();
    a.weights = Tensor::randn(&[6], 1.0, &mut rng(6)).into_param();
    let out = da_fuse(&base, &feats, &a).unwrap();
    for k in 0..c * d {
        let mut want = base.data()[k];
        for (i, f) in feats.iter().enumerate() {
            want += a.weights.data()[i] * f.data()[k];
        }
        assert!((out.data()[k] - want).abs() <= 1e-12);
    }
}

#[test]
fn da_is_order_invariant_and_ic_is_not() {
    let base = maps(1, 3, 4, 7).remove(0);
    let feats = maps(3, 3, 4, 8);
    let swapped = vec![feats[2].clone(), feats[1].clone(), feats[0].clone()];
    let a = DaAdapter::new(3).unwrap();
    let x = da_fuse(&base, &feats, &a).unwrap();
    let y = da_fuse(&base, &swapped, &a).unwrap();
    assert!(x.data().iter().zip(y.data()).all(|(p, q)| (p - q).abs() <= 1e-12));

    let ic = IcAdapter::init(3, 4, &mut rng(9)).unwrap();
    let x = ic_fuse(&feats, &ic).unwrap();
    let y = ic_fuse(&swapped, &ic).unwrap();
    let diff = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-3);
}

#[test]
fn ic_identity_and_zero() {
    let d = 5;
    let feats = maps(1, 3, d, 10);
    let ic = IcAdapter { fc: Tensor::eye(d).into_param() };
    assert_eq!(ic_fuse(&feats, &ic).unwrap(), feats[0]);

    let ic = IcAdapter::init(2, d, &mut rng(11)).unwrap();
    let zeros = vec![Tensor::zeros(&[3, d]), Tensor::zeros(&[3, d])];
    assert!(ic_fuse(&zeros, &ic).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn ic_block_matrix_identity() {
    let d = 4;
    let feats = maps(2, 3, d, 12);
    let m1 = Tensor::randn(&[d, d], 1.0, &mut rng(13));
    let m2 = Tensor::randn(&[d, d], 1.0, &mut rng(14));
    let fc = Tensor::new(&[2 * d, d], [m1.data(), m2.data()].concat()).unwrap();
    let ic = IcAdapter { fc: fc.into_param() };
    let out = ic_fuse(&feats, &ic).unwrap();
    let want = add(&matmul(&rows(&feats[0]), &m1), &matmul(&rows(&feats[1]), &m2));
    assert!(max_abs(&rows(&out), &want) <= 1e-12);
}

#[test]
fn adapters_reject_wrong_feature_count() {
    let base = maps(1, 2, 4, 15).remove(0);
    let feats = maps(2, 2, 4, 16);
    let a = DaAdapter::new(3).unwrap();
    assert!(da_fuse(&base, &feats, &a).is_err());
    let ic = IcAdapter::init(3, 4, &mut rng(17)).unwrap();
    assert!(ic_fuse(&feats, &ic).is_err());
    assert!(DaAdapter::new(0).is_err());
    assert!(QMambaAdapter::init(0, &mamba(4), &mut rng(18)).is_err());
    let q = QMambaAdapter::init(3, &mamba(4), &mut rng(19)).unwrap();
    assert!(q_mamba_fuse(&base, &feats, &q).is_err());
    assert!(q_mamba_fuse(&base, &[], &q).is_err());
}

#[test]
fn q_mamba_rejects_width_mismatch() {
    let q = QMambaAdapter::init(1, &mamba(4), &mut rng(20)).unwrap();
    let base = maps(1, 3, 5, 21).remove(0);
    let feats = maps(1, 3, 5, 22);
    assert!(q_mamba_fuse(&base, &feats, &q).is_err());
}

#[test]
fn q_mamba_passes_through_at_init() {
    for scope in [KvScope::Channel, KvScope::AllChannels] {
        let mut q = QMambaAdapter::init(6, &mamba(8), &mut rng(23)).unwrap();
        q.kv_scope = scope;
        let cur = maps(1, 4, 8, 24).remove(0);
        let feats = maps(6, 4, 8, 25);
        assert_eq!(q_mamba_fuse(&cur, &feats, &q).unwrap(), cur);
    }
}

/// Naive per-channel Q-Mamba with the literal single-key attention.
fn naive_q_mamba(cur: &Tensor, feats: &[Tensor], q: &QMambaAdapter) -> Vec<Vec<f64>> {
    let query = matmul(&rows(cur), &q.q_proj);
    let mut total = vec![vec![0.0; cur.cols()]; cur.rows()];
    for (i, f) in feats.iter().enumerate() {
        // one key per channel: the softmax weight is exactly 1
        let v = matmul(&rows(f), &q.v_proj[i]);
        let mut z = matmul(&v, &q.o_proj[i]);
        if q.query_residual {
            z = add(&z, &query);
        }
        let l = naive_bi(&z, &q.latent);
        let term = if q.latent_residual { add(&z, &l) } else { l };
        total = add(&total, &term);
    }
    add(&rows(cur), &matmul(&total, &q.out_gate))
}

#[test]
fn q_mamba_after_one_step_matches_loop() {
    let (c, d, n) = (4, 8, 6);
    let mut q = QMambaAdapter::init(n, &mamba(d), &mut rng(26)).unwrap();
    let cur = maps(1, c, d, 27).remove(0);
    let feats = maps(n, c, d, 28);
    let target = Tensor::randn(&[c, d], 1.0, &mut rng(29));

    let mut g = Graph::new();
    let b = g.constant(cur.clone());
    let fs: Vec<_> = feats.iter().map(|t| g.constant(t.clone())).collect();
    let y = q.forward(&mut g, b, &fs, c).unwrap();
    let t = g.constant(target);
    let loss = g.mse(y, t).unwrap();
    g.backward(loss).unwrap();
    let mut grads = Vec::new();
    q.visit(&mut |_, t| {
        if t.requires_grad {
            grads.push(g.param_grad(t));
        }
    });
    drop(g);
    Optimizer::sgd(0.1).unwrap().apply(&mut q, &grads).unwrap();

    let out = q_mamba_fuse(&cur, &feats, &q).unwrap();
    let moved = out.data().iter().zip(cur.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(moved > 1e-6, "adapter did not move: {moved}");
    let want = naive_q_mamba(&cur, &feats, &q);
    assert!(max_abs(&rows(&out), &want) <= 1e-10);
}

#[test]
fn all_channel_attention_matches_loop() {
    let (c, d) = (3, 4);
    let mut q = QMambaAdapter::init(1, &mamba(d), &mut rng(30)).unwrap();
    perturb_all(&mut q, 0.3, 31);
    q.kv_scope = KvScope::AllChannels;
    q.query_residual = false;
    q.latent_residual = false;
    let cur = maps(1, c, d, 32).remove(0);
    let f = maps(1, c, d, 33);
    let out = q_mamba_fuse(&cur, &f, &q).unwrap();

    let qm = matmul(&rows(&cur), &q.q_proj);
    let km = matmul(&rows(&f[0]), &q.k_proj[0]);
    let vm = matmul(&rows(&f[0]), &q.v_proj[0]);
    let att: Vec<Vec<f64>> = qm
        .iter()
        .map(|qr| {
            let s: Vec<f64> = km
                .iter()
                .map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..d).map(|j| e.iter().zip(&vm).map(|(w, vr)| w / z * vr[j]).sum()).collect()
        })
        .collect();
    let z = matmul(&att, &q.o_proj[0]);
    let l = naive_bi(&z, &q.latent);
    let want = add(&rows(&cur), &matmul(&l, &q.out_gate));
    assert!(max_abs(&rows(&out), &want) <= 1e-10);
}

#[test]
fn fuse_shapes_for_every_kind() {
    let (c, d, n) = (3, 4, 2);
    let base = maps(1, c, d, 34).remove(0);
    let feats = maps(n, c, d, 35);
    for kind in AdapterKind::ALL {
        let a = Adapter::init(kind, n, &mamba(d), &mut rng(36)).unwrap();
        assert_eq!(a.kind(), kind);
        assert_eq!(fuse(&base, &feats, &a).unwrap().shape(), &[c, d]);
    }
    let da = Adapter::Da(DaAdapter { weights: Tensor::zeros(&[n]).into_param() });
    assert_eq!(fuse(&base, &feats, &da).unwrap(), base);
    let qm = Adapter::init(AdapterKind::QMamba, n, &mamba(d), &mut rng(37)).unwrap();
    assert_eq!(fuse(&base, &feats, &qm).unwrap(), base);
    assert!(AdapterKind::parse("mlp").is_err());
}

#[test]
fn gradients_through_every_adapter() {
    let (c, d, n) = (3, 4, 2);
    let base = maps(1, 2 * c, d, 38).remove(0);
    let feats = maps(n, 2 * c, d, 39);
    let w = Tensor::randn(&[2 * c, d], 1.0, &mut rng(40));
    for kind in AdapterKind::ALL {
        for scope in [KvScope::Channel, KvScope::AllChannels] {
            let mut a = Adapter::init(kind, n, &mamba(d), &mut rng(41)).unwrap();
            if let Adapter::QMamba(q) = &mut a {
                q.kv_scope = scope;
            }
            perturb_all(&mut a, 0.1, 42);
            let report = check_module(
                &mut a,
                |m, g| {
                    let b = g.constant(base.clone());
                    let fs: Vec<_> = feats.iter().map(|t| g.constant(t.clone())).collect();
                    let y = m.forward(g, b, &fs, c)?;
                    let wv = g.constant(w.clone());
                    let p = g.mul(y, wv)?;
                    Ok(g.sum(p))
                },
                DEFAULT_STEP,
                4,
            )
            .unwrap();
            assert!(worst(&report) <= 1e-4, "{kind:?} {scope:?}: {report:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn da_superposition(seed in 0u64..10_000, w0 in -2.0f64..2.0, w1 in -2.0f64..2.0) {
        let base = maps(1, 2, 3, seed).remove(0);
        let f = maps(2, 2, 3, seed + 1);
        let g = maps(1, 2, 3, seed + 2).remove(0);
        let mut a = DaAdapter::new(2).unwrap();
        a.weights.data_mut().copy_from_slice(&[w0, w1]);
        let sum = Tensor::new(&[2, 3], f[0].data().iter().zip(g.data()).map(|(x, y)| x + y).collect()).unwrap();
        let lhs = da_fuse(&base, &[sum, f[1].clone()], &a).unwrap();
        let p = da_fuse(&base, &[f[0].clone(), f[1].clone()], &a).unwrap();
        let zero = Tensor::zeros(&[2, 3]);
        let q = da_fuse(&zero, &[g.clone(), zero.clone()], &a).unwrap();
        for k in 0..6 {
            prop_assert!((lhs.data()[k] - p.data()[k] - q.data()[k]).abs() <= 1e-12);
            prop_assert!((q.data()[k] - w0 * g.data()[k]).abs() <= 1e-12);
        }
    }
}
