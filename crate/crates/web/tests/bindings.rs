use hmba_web::*;

#[test]
fn impulse_response_is_a_geometric_decay() {
    let (a_log, delta) = (0.3f64, 0.2);
    let a = -a_log.exp();
    let h = impulse_response(a_log, delta, 6).unwrap();
    let a_bar = (a * delta).exp();
    let b_bar = (a_bar - 1.0) / a;
    for (k, v) in h.iter().enumerate() {
        let want = a_bar.powi(k as i32) * b_bar;
        assert!((v - want).abs() <= 1e-15 * want.abs(), "{k}: {v} vs {want}");
    }
}

#[test]
fn mamba_costs_grow_linearly_with_frames() {
    for m in ["t_mamba", "dst_mamba", "jst_mamba"] {
        let ys = flops_curve(m, 256, 1024, 12).unwrap();
        assert_eq!(ys.len(), 12);
        let step = ys[1] - ys[0];
        for w in ys.windows(2) {
            assert!(((w[1] - w[0]) - step).abs() <= 1e-9 * step, "{m}");
        }
    }
    let joint = flops_curve("joint_attention", 256, 1024, 12).unwrap();
    assert!(joint[11] - joint[10] > joint[1] - joint[0]);
    assert_eq!(module_names().len(), 6);
    assert_eq!(module_params("t_mamba", 5, 256, 1024).unwrap(), 7_036_928.0);
}

#[test]
fn clips_expose_the_target_path() {
    let k = synthetic_clip(3, true, 0.0).unwrap();
    assert_eq!(k.intensity().len(), k.frames() * k.channels());
    assert_eq!(k.trace().len(), k.frames());
    let last = (k.frames() - 1) * k.channels();
    let lit: Vec<u32> = (0..k.channels() as u32).filter(|&c| k.intensity()[last + c as usize] == 1.0).collect();
    assert!(lit.contains(k.trace().last().unwrap()));
    assert!(k.distractors().iter().all(|d| lit.contains(d)));
    let s = synthetic_clip(3, false, 0.0).unwrap();
    assert!(s.trace().windows(2).all(|w| w[0] == w[1]));
}
