use std::fs;

use hmba::context::Granularity;
use hmba::fusion::AdapterKind;
use hmba::harness::*;
use hmba::params::{load_dir, save_dir, Module, MANIFEST};
use hmba::synthetic::{generate_dataset, Motion, SyntheticConfig};
use hmba::Error;

/// Small enough to train in well under a second.
fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.data = SyntheticConfig {
        frames: 3,
        channels: 6,
        d_model: 8,
        distractors: 2,
        max_speed: 1,
        train_size: 48,
        test_size: 24,
        ..SyntheticConfig::default()
    };
    c.d_state = 4;
    c.d_conv = 3;
    c.dt_rank = 1;
    c.t_max = 8;
    c.steps = 4;
    c.batch = 8;
    c
}

#[test]
fn config_text_round_trips() {
    let mut c = tiny();
    c.granularities = vec![Granularity::Dst];
    c.lr = 0.0125;
    c.eval_every = 2;
    let back = RunConfig::parse(&c.to_text()).unwrap();
    assert_eq!(back, c);
    let mut none = c.clone();
    none.granularities.clear();
    assert_eq!(RunConfig::parse(&none.to_text()).unwrap(), none);
    assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
}

#[test]
fn config_parser_handles_comments_and_rejects_junk() {
    let c = RunConfig::parse("# header\nseed = 7  # trailing\n\nlr=0.5\ngranularities = t, jst\n").unwrap();
    assert_eq!(c.seed, 7);
    assert_eq!(c.lr, 0.5);
    assert_eq!(c.granularities, vec![Granularity::T, Granularity::Jst]);
    for bad in ["seed 7", "nope = 1", "steps = -1", "adapter = lstm", "granularities = t,xst"] {
        assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
    }
    let mut c = tiny();
    c.batch = 0;
    assert!(c.validate().is_err());
    c = tiny();
    c.data.distractors = 10;
    assert!(c.validate().is_err());
}

#[test]
fn dataset_labels_match_the_target_trace() {
    let cfg = tiny().data;
    let ds = generate_dataset(&cfg, 3).unwrap();
    assert_eq!((ds.train.len(), ds.test.len()), (48, 24));
    for s in ds.train.iter().chain(&ds.test) {
        assert_eq!(s.label, *s.trace.last().unwrap());
        assert!(s.distractors.iter().all(|d| !s.trace.contains(d)));
        assert_eq!(s.distractors.len(), cfg.distractors);
        for w in s.trace.windows(2) {
            let step = (w[1] + cfg.channels - w[0]) % cfg.channels;
            assert!(step == 1 || step == cfg.channels - 1);
        }
        assert!(s.signal_margin(Motion::Moving) > 0.5);
        assert_eq!(s.video.current_index, cfg.frames - 1);
    }
    assert_eq!(generate_dataset(&cfg, 3).unwrap().checksum(), ds.checksum());
    assert_ne!(generate_dataset(&cfg, 4).unwrap().checksum(), ds.checksum());
}

#[test]
fn moving_targets_look_like_distractors_in_any_single_frame() {
    let cfg = SyntheticConfig {
        noise: 0.0,
        ..tiny().data
    };
    let ds = generate_dataset(&cfg, 5).unwrap();
    for s in &ds.train {
        let last = &s.intensity[(cfg.frames - 1) * cfg.channels..];
        assert_eq!(last[s.label], 1.0);
        for &d in &s.distractors {
            assert_eq!(last[d], 1.0);
        }
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let c = tiny();
    let a = train(&c).unwrap();
    let b = train(&c).unwrap();
    assert_eq!(a.final_acc.to_bits(), b.final_acc.to_bits());
    assert_eq!(a.log, b.log);
    let other = train(&RunConfig { seed: 1, ..c }).unwrap();
    assert_ne!(other.log, a.log);
}

#[test]
fn log_has_one_row_per_step_and_final_eval() {
    let mut c = tiny();
    c.eval_every = 2;
    c.steps = 5;
    let out = train(&c).unwrap();
    assert_eq!(out.log.len(), 5);
    let evals: Vec<_> = out.log.iter().filter_map(|r| r.eval_acc.map(|_| r.step)).collect();
    assert_eq!(evals, vec![1, 3, 4]);
    assert_eq!(out.log[4].eval_acc, Some(out.final_acc));
    let mut buf = Vec::new();
    write_log_csv(&out.log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().nth(1).unwrap().ends_with(','));
}

#[test]
fn frame_only_solves_the_static_control() {
    let mut c = RunConfig::default();
    c.data.motion = Motion::Static;
    c.data.train_size = 400;
    c.data.test_size = 200;
    c.granularities.clear();
    c.steps = 100;
    c.lr = 0.05;
    let out = train(&c).unwrap();
    assert!(out.final_acc > 0.9, "{}", out.final_acc);
}

#[test]
fn save_and_load_preserve_outputs_bitwise() {
    let c = tiny();
    let out = train(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_run(&c, &out, dir.path()).unwrap();
    for f in [CONFIG_FILE, LOG_FILE] {
        assert!(dir.path().join(f).is_file());
    }
    let (cfg, model) = load_run(dir.path()).unwrap();
    assert_eq!(cfg, c);
    let ds = generate_dataset(&c.data, c.seed).unwrap();
    for s in ds.test.iter().take(5) {
        let a = out.model.apply(&s.video).unwrap();
        let b = model.apply(&s.video).unwrap();
        let bits = |t: &hmba::numeric::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
    assert_eq!(evaluate(&model, &ds.test, 8).unwrap().to_bits(), out.final_acc.to_bits());
}

#[test]
fn damaged_parameter_files_are_rejected() {
    let c = tiny();
    let model = init_model(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dir(&model, dir.path()).unwrap();
    let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    let file = manifest.lines().next().unwrap().split_once('=').unwrap().1.trim().to_string();
    let path = dir.path().join(&file);
    let good = fs::read(&path).unwrap();

    fs::write(&path, &good[..good.len() - 3]).unwrap();
    let mut fresh = init_model(&c).unwrap();
    assert!(matches!(load_dir(&mut fresh, dir.path()), Err(Error::Corrupt(_))));

    let mut swapped = good.clone();
    swapped[..8].reverse();
    fs::write(&path, &swapped).unwrap();
    assert!(load_dir(&mut fresh, dir.path()).is_err());

    fs::write(&path, &good).unwrap();
    load_dir(&mut fresh, dir.path()).unwrap();
    let mut a = Vec::new();
    let mut b = Vec::new();
    model.visit(&mut |_, t| a.push(t.clone()));
    fresh.visit(&mut |_, t| b.push(t.clone()));
    assert_eq!(a, b);

    let mut other = tiny();
    other.granularities = vec![Granularity::T];
    let mut smaller = init_model(&other).unwrap();
    assert!(matches!(load_dir(&mut smaller, dir.path()), Err(Error::Manifest(_))));
}

#[test]
fn grids_have_the_expected_cells() {
    let ids: Vec<String> = Cell::granularity_grid(AdapterKind::QMamba).iter().map(Cell::id).collect();
    assert_eq!(ids, ["frame", "t/qmamba", "dst/qmamba", "jst/qmamba", "t+dst+jst/qmamba"]);
    let ids: Vec<String> = Cell::pair_grid(AdapterKind::Da).iter().map(Cell::id).collect();
    assert_eq!(ids, ["t+jst/da", "t+dst/da", "dst+jst/da"]);
    let ids: Vec<String> = Cell::adapter_grid().iter().map(Cell::id).collect();
    assert_eq!(ids, ["t+dst+jst/da", "t+dst+jst/ic", "t+dst+jst/qmamba"]);
    let applied = Cell::new(&[Granularity::Jst], AdapterKind::Ic).apply(&tiny());
    assert_eq!(applied.granularities, vec![Granularity::Jst]);
    assert_eq!(applied.adapter, AdapterKind::Ic);
    assert_eq!(applied.steps, tiny().steps);
}

#[test]
fn adapter_ablation_shares_datasets_across_cells() {
    let rows = run_ablation(&tiny(), &Cell::adapter_grid(), &[0, 1]).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r.dataset_checksums, rows[0].dataset_checksums);
        assert_eq!(r.seeds, vec![0, 1]);
        let (m, s) = mean_std(&r.accs);
        assert_eq!((r.mean, r.std), (m, s));
    }
    assert_ne!(rows[0].dataset_checksums[0], rows[0].dataset_checksums[1]);
    let single = train(&Cell::adapter_grid()[0].apply(&tiny())).unwrap();
    let da = rows.iter().find(|r| r.id == "t+dst+jst/da").unwrap();
    assert_eq!(da.accs[0].to_bits(), single.final_acc.to_bits());

    let mut buf = Vec::new();
    write_ablation_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), ABLATION_HEADER);
    assert!(text.lines().nth(1).unwrap().starts_with("t+dst+jst/da,2,"));
}

#[test]
fn failing_cells_are_named() {
    let mut c = tiny();
    c.lr = 1e9;
    c.optimizer = hmba::optim::OptimizerKind::Sgd;
    c.steps = 30;
    let err = run_ablation(&c, &[Cell::new(&Granularity::ALL, AdapterKind::Ic)], &[0]).unwrap_err();
    match err {
        Error::Cell { cell, source } => {
            assert_eq!(cell, "t+dst+jst/ic seed 0");
            assert!(matches!(*source, Error::Diverged { .. } | Error::NonFinite(_) | Error::NonPositiveDelta(_)), "{source}");
        }
        other => panic!("{other}"),
    }
    assert!(run_ablation(&tiny(), &[], &[0]).is_err());
}

#[test]
fn mean_std_uses_the_sample_deviation() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
    assert_eq!(m, 2.0);
    assert!((s - 1.0).abs() < 1e-15);
    assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
}
