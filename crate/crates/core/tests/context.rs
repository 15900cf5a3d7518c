mod common;

use common::*;
use hmba::context::*;
use hmba::numeric::{check_module, gradcheck::worst, Graph, Tensor, DEFAULT_STEP};
use hmba::ssm::BiMamba;

fn video(t: usize, c: usize, d: usize, seed: u64) -> VideoFeatures {
    VideoFeatures::new(Tensor::randn(&[t, c, d], 1.0, &mut rng(seed)), t - 1).unwrap()
}

fn bi(d: usize, seed: u64) -> BiMamba {
    let mut b = BiMamba::init(&small_cfg(d), &mut rng(seed));
    perturb_all(&mut b, 0.05, seed + 1);
    b
}

fn cfg(t: usize, d: usize) -> ContextConfig {
    let mut c = ContextConfig::new(t, d);
    c.d_state = 4;
    c.d_conv = 3;
    c.mamba_template = Some(small_cfg(d));
    c
}

fn frame_rows(v: &VideoFeatures, f: usize) -> Vec<Vec<f64>> {
    rows(&v.frame(f))
}

#[test]
fn resample_keeps_current_and_walks_back() {
    assert_eq!(resample_indices(5, 4, 1).unwrap(), vec![0, 1, 2, 3, 4]);
    assert_eq!(resample_indices(5, 4, 2).unwrap(), vec![0, 2, 4]);
    assert_eq!(resample_indices(8, 7, 3).unwrap(), vec![1, 4, 7]);
    assert_eq!(resample_indices(4, 3, 9).unwrap(), vec![3]);
    assert!(resample_indices(4, 3, 0).is_err());

    let v = video(5, 2, 3, 1);
    assert_eq!(temporal_resample(&v, 1).unwrap(), v);
    let r = temporal_resample(&v, 2).unwrap();
    assert_eq!(r.t(), 3);
    assert_eq!(r.current_index, 2);
    assert_eq!(r.frame(1), v.frame(2));
}

#[test]
fn t_mamba_matches_pool_scan_select() {
    let v = video(5, 3, 4, 2);
    let m = TMamba { block: bi(4, 3) };
    let got = t_mamba(&v, &m).unwrap();
    let pooled: Vec<Vec<f64>> = (0..5)
        .map(|f| {
            let fr = frame_rows(&v, f);
            (0..4).map(|j| fr.iter().map(|r| r[j]).sum::<f64>() / 3.0).collect()
        })
        .collect();
    let y = naive_bi(&pooled, &m.block);
    let want = vec![y[4].clone(); 3];
    assert_eq!(got.map.shape(), &[3, 4]);
    assert!(max_abs(&rows(&got.map), &want) <= 1e-12);

    let one = video(1, 3, 4, 4);
    let got = t_mamba(&one, &m).unwrap();
    let pooled: Vec<f64> = (0..4)
        .map(|j| frame_rows(&one, 0).iter().map(|r| r[j]).sum::<f64>() / 3.0)
        .collect();
    let y = naive_bi(&[pooled], &m.block);
    assert!(max_abs(&rows(&got.map), &vec![y[0].clone(); 3]) <= 1e-12);
}

fn naive_dst(v: &VideoFeatures, m: &DstMamba) -> Vec<Vec<f64>> {
    let mut current = Vec::new();
    for c in 0..v.c() {
        let seq: Vec<Vec<f64>> = (0..v.t()).map(|f| frame_rows(v, f)[c].clone()).collect();
        current.push(naive_bi(&seq, &m.temporal)[v.current_index].clone());
    }
    naive_bi(&current, &m.spatial)
}

#[test]
fn dst_matches_per_channel_loop() {
    let v = video(3, 4, 8, 5);
    let m = DstMamba { temporal: bi(8, 6), spatial: bi(8, 7) };
    let got = dst_mamba(&v, &m).unwrap();
    assert!(max_abs(&rows(&got.map), &naive_dst(&v, &m)) <= 1e-12);

    let single = video(4, 1, 8, 8);
    let got = dst_mamba(&single, &m).unwrap();
    assert_eq!(got.map.shape(), &[1, 8]);
    assert!(max_abs(&rows(&got.map), &naive_dst(&single, &m)) <= 1e-12);
}

#[test]
fn jst_token_order_is_frame_major() {
    let v = video(2, 3, 4, 9);
    let mut te = TemporalEmbedding::init(4, 4, &mut rng(10));
    te.table.data_mut()[0] += 0.3;
    let m = JstMamba { block: bi(4, 11), te };
    let got = jst_mamba(&v, &m).unwrap();
    let mut tokens = Vec::new();
    for f in 0..2 {
        for c in 0..3 {
            let tok: Vec<f64> = (0..4)
                .map(|j| v.frames.data()[(f * 3 + c) * 4 + j] + m.te.table.data()[f * 4 + j])
                .collect();
            tokens.push(tok);
        }
    }
    let y = naive_bi(&tokens, &m.block);
    assert!(max_abs(&rows(&got.map), &y[3..6]) <= 1e-12);
}

#[test]
fn jst_single_frame_with_zero_embedding_is_spatial_scan() {
    let v = video(1, 5, 4, 12);
    let m = JstMamba { block: bi(4, 13), te: TemporalEmbedding::zeros(3, 4) };
    let got = jst_mamba(&v, &m).unwrap();
    let want = m.block.apply(&v.current()).unwrap();
    assert_eq!(got.map, want);
}

#[test]
fn jst_rejects_too_many_frames() {
    let v = video(4, 2, 4, 14);
    let m = JstMamba { block: bi(4, 15), te: TemporalEmbedding::zeros(3, 4) };
    assert!(jst_mamba(&v, &m).is_err());
}

#[test]
fn jst_depends_on_frame_order() {
    let v = video(3, 2, 4, 16);
    let m = JstMamba { block: bi(4, 17), te: TemporalEmbedding::init(3, 4, &mut rng(18)) };
    let base = jst_mamba(&v, &m).unwrap().map;
    // swap the two earlier frames and their embeddings; current stays last
    let mut pf = v.frames.clone();
    let per = 2 * 4;
    let (a, b) = pf.data_mut().split_at_mut(per);
    a.swap_with_slice(&mut b[..per]);
    let mut pm = m.clone();
    let (ta, tb) = pm.te.table.data_mut().split_at_mut(4);
    ta.swap_with_slice(&mut tb[..4]);
    let out = jst_mamba(&VideoFeatures::new(pf, 2).unwrap(), &pm).unwrap().map;
    assert!(base.max_abs_diff(&out) > 1e-6);

    let zero = VideoFeatures::new(Tensor::zeros(&[3, 2, 4]), 2).unwrap();
    let zm = JstMamba { te: TemporalEmbedding::zeros(3, 4), ..m };
    assert!(jst_mamba(&zero, &zm).unwrap().map.data().iter().all(|x| *x == 0.0));
}

#[test]
fn dst_temporal_stage_is_channel_local() {
    let v = video(4, 3, 4, 19);
    let m = DstMamba { temporal: bi(4, 20), spatial: bi(4, 21) };
    let stage = |v: &VideoFeatures| {
        let mut g = Graph::new();
        let x = g.constant(v.tokens());
        let y = m.temporal_stage(&mut g, x, v.dims()).unwrap();
        rows(g.value(y))
    };
    let base = stage(&v);
    for c in 0..3 {
        let mut z = v.frames.clone();
        for f in 0..4 {
            for j in 0..4 {
                z.data_mut()[(f * 3 + c) * 4 + j] = 0.0;
            }
        }
        let out = stage(&VideoFeatures::new(z, 3).unwrap());
        for ch in 0..3 {
            for f in 0..4 {
                let r = ch * 4 + f;
                if ch == c {
                    assert_ne!(base[r], out[r]);
                } else {
                    assert_eq!(base[r], out[r]);
                }
            }
        }
    }
}

#[test]
fn every_context_is_c_by_d() {
    let model = ContextMamba::init(&cfg(8, 4), &mut rng(22)).unwrap();
    for t in 1..=8 {
        for stride in [1, 2, 3] {
            let mut m = model.clone();
            m.cfg.low_stride = stride;
            let feats = extract_contexts(&video(t, 3, 4, t as u64), &m).unwrap();
            assert_eq!(feats.len(), 6);
            for f in feats {
                assert_eq!(f.map.shape(), &[3, 4]);
            }
        }
    }
}

#[test]
fn zero_video_gives_zero_contexts() {
    let mut model = ContextMamba::init(&cfg(5, 4), &mut rng(23)).unwrap();
    model.visit_mut(&mut |name, t| {
        if name.ends_with(".te") {
            t.data_mut().fill(0.0);
        }
    });
    let v = VideoFeatures::new(Tensor::zeros(&[5, 3, 4]), 4).unwrap();
    for f in extract_contexts(&v, &model).unwrap() {
        assert!(f.map.data().iter().all(|x| *x == 0.0));
    }
}

use hmba::params::Module;

#[test]
fn enablement_controls_output_list() {
    let mut c = cfg(5, 4);
    c.granularities = vec![Granularity::T];
    c.branches = vec![Branch::High];
    let m = ContextMamba::init(&c, &mut rng(24)).unwrap();
    let out = extract_contexts(&video(5, 3, 4, 25), &m).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!((out[0].branch, out[0].granularity), (Branch::High, Granularity::T));

    c.granularities.clear();
    assert!(ContextMamba::init(&c, &mut rng(24)).is_err());

    let pairs = [
        vec![Granularity::T, Granularity::Jst],
        vec![Granularity::T, Granularity::Dst],
        vec![Granularity::Dst, Granularity::Jst],
    ];
    for p in pairs {
        let mut c = cfg(5, 4);
        c.granularities = p.clone();
        let m = ContextMamba::init(&c, &mut rng(26)).unwrap();
        let labels = m.labels();
        assert_eq!(labels.len(), 4);
        assert!(labels.iter().all(|(_, g)| p.contains(g)));
    }
}

#[test]
fn branches_have_independent_parameters() {
    let m = ContextMamba::init(&cfg(5, 4), &mut rng(27)).unwrap();
    let mut names = Vec::new();
    m.visit(&mut |n, _| names.push(n.to_string()));
    assert!(names.contains(&"high.t.block.in_proj".to_string()));
    assert!(names.contains(&"low.t.block.in_proj".to_string()));
    assert!(names.contains(&"high.dst.spatial.fwd.conv".to_string()));
    assert!(names.contains(&"low.jst.te".to_string()));
}

#[test]
fn batched_forward_matches_per_video() {
    let model = ContextMamba::init(&cfg(5, 4), &mut rng(28)).unwrap();
    let vids: Vec<_> = (0..3).map(|i| video(5, 3, 4, 30 + i)).collect();
    let mut data = Vec::new();
    for v in &vids {
        data.extend_from_slice(v.frames.data());
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[15 * 3, 4], data).unwrap());
    let dims = BatchDims { batch: 3, ..vids[0].dims() };
    let outs = model.forward(&mut g, x, dims).unwrap();
    for (k, v) in vids.iter().enumerate() {
        let single = extract_contexts(v, &model).unwrap();
        for (o, s) in outs.iter().zip(&single) {
            let b = g.value(*o);
            assert_eq!(&b.data()[k * 12..(k + 1) * 12], s.map.data());
        }
    }
}

#[test]
fn every_granularity_passes_gradient_check() {
    let c = cfg(3, 3);
    let v = video(3, 2, 3, 40);
    let w = Tensor::randn(&[2, 3], 1.0, &mut rng(41));
    for gran in Granularity::ALL {
        let mut ex = Extractor::init(gran, &c, &mut rng(42));
        perturb_all(&mut ex, 0.05, 43);
        let report = check_module(
            &mut ex,
            |m, g| {
                let x = g.constant(v.tokens());
                let y = m.forward(g, x, v.dims())?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                Ok(g.sum(p))
            },
            DEFAULT_STEP,
            4,
        )
        .unwrap();
        assert!(worst(&report) <= 1e-4, "{gran:?}: {report:?}");
    }
}

#[test]
fn rejects_bad_video() {
    assert!(VideoFeatures::new(Tensor::zeros(&[2, 3]), 0).is_err());
    assert!(VideoFeatures::new(Tensor::zeros(&[2, 3, 4]), 2).is_err());
    let m = TMamba { block: bi(4, 1) };
    assert!(t_mamba(&video(2, 2, 5, 1), &m).is_err());
}
