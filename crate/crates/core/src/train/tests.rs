use super::*;
use crate::synth::{generate, SceneParams};

fn tiny_data(years: Vec<i32>, stride: u32) -> Dataset {
    let p = SceneParams { grid: 1, fine_factor: 2, years, sample_stride: stride, ..SceneParams::default() };
    Dataset::from_chips(generate(&p).unwrap())
}

fn tiny_config(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        lr_schedule: vec![Phase { epochs: 2, lr: 1e-3 }, Phase { epochs: 1, lr: 1e-4 }, Phase { epochs: 1, lr: 1e-5 }],
        batch_size: 3,
        model: kind,
        width: 2,
        hidden: 2,
        ..TrainConfig::default()
    }
}

fn scalar_rmse(p: &[f64], t: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![p.len()], p.to_vec()).unwrap());
    let b = tape.constant(Tensor::new(vec![t.len()], t.to_vec()).unwrap());
    let l = tape.rmse(a, b).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn rmse_loss_examples() {
    assert_eq!(scalar_rmse(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    assert_eq!(scalar_rmse(&[0.0; 4], &[1.0; 4]), 1.0);
    assert!((scalar_rmse(&[0.2, 0.6], &[0.0, 1.0]) - 0.1f64.sqrt()).abs() < 1e-15);
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![0]));
    let b = tape.constant(Tensor::zeros(vec![0]));
    assert!(tape.rmse(a, b).is_err());
}

fn scalar_store(x: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("x", Tensor::new(vec![1], vec![x]).unwrap());
    s
}

fn set_grad(s: &mut ParamStore, g: f64) {
    let id = s.ids().next().unwrap();
    s.grad_mut(id).data_mut()[0] = g;
}

fn value(s: &ParamStore) -> f64 {
    s.value(s.ids().next().unwrap()).data()[0]
}

fn minimise_square(kind: OptimizerKind, steps: usize) -> f64 {
    let mut s = scalar_store(1.0);
    let mut opt = OptimizerState::new(kind.into(), &s);
    for _ in 0..steps {
        let x = value(&s);
        set_grad(&mut s, 2.0 * x);
        opt.step(&mut s, 1e-2).unwrap();
    }
    value(&s)
}

#[test]
fn zero_gradient_leaves_parameters() {
    for kind in [OptimizerKind::Ranger, OptimizerKind::Adam] {
        let mut s = scalar_store(0.37);
        let mut opt = OptimizerState::new(kind.into(), &s);
        for _ in 0..20 {
            set_grad(&mut s, 0.0);
            opt.step(&mut s, 1e-2).unwrap();
        }
        assert_eq!(value(&s), 0.37);
    }
}

#[test]
fn adam_converges_on_square_in_200_steps() {
    assert!(minimise_square(OptimizerKind::Adam, 200).abs() < 0.05);
}

#[test]
fn ranger_converges_on_square() {
    // Rectification warm-up and lookahead slow Ranger down on this toy;
    // it needs about 1000 steps at lr 1e-2.
    let x200 = minimise_square(OptimizerKind::Ranger, 200);
    assert!(x200 > 0.0 && x200 < 1.0);
    assert!(minimise_square(OptimizerKind::Ranger, 1000).abs() < 0.05);
}

/// Scalar rectified-moment update, written from the published definition.
fn radam_reference(grads: &[f64], x0: f64, lr: f64) -> Vec<f64> {
    let (b1, b2, eps): (f64, f64, f64) = (0.95, 0.999, 1e-5);
    let (mut m, mut v, mut x) = (0.0, 0.0, x0);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let mut out = Vec::new();
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let rho = rho_inf - 2.0 * t as f64 * b2.powi(t) / (1.0 - b2.powi(t));
        if rho > 5.0 {
            let r = (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
            let denom = v.sqrt() + eps;
            x -= lr * r * (1.0 - b2.powi(t)).sqrt() * mhat / denom;
        } else {
            x -= lr * mhat;
        }
        out.push(x);
    }
    out
}

#[test]
fn rectified_update_matches_scalar_reference() {
    let grads: Vec<f64> = (0..40).map(|i| ((i as f64) * 0.7).sin() + 0.3).collect();
    let expect = radam_reference(&grads, 0.5, 3e-3);
    let mut s = scalar_store(0.5);
    let cfg = OptimizerConfig::Ranger(RangerParams { k: None, ..RangerParams::default() });
    let mut opt = OptimizerState::new(cfg, &s);
    for (g, e) in grads.iter().zip(&expect) {
        set_grad(&mut s, *g);
        opt.step(&mut s, 3e-3).unwrap();
        assert!((value(&s) - e).abs() < 1e-10);
    }
}

#[test]
fn lookahead_blends_every_k_steps() {
    let grads = [1.0, -0.5, 0.25, 2.0, 0.1, -1.0, 0.3];
    let fast = radam_reference(&grads[..6], 0.5, 1e-2);
    let mut s = scalar_store(0.5);
    let mut opt = OptimizerState::new(OptimizerKind::Ranger.into(), &s);
    for g in &grads[..6] {
        set_grad(&mut s, *g);
        opt.step(&mut s, 1e-2).unwrap();
    }
    let slow = 0.5 + 0.5 * (fast[5] - 0.5);
    assert!((value(&s) - slow).abs() < 1e-12);
    assert!((opt.slow[0][0] - slow).abs() < 1e-12);
}

#[test]
fn nonpositive_learning_rate_is_rejected() {
    let mut s = scalar_store(1.0);
    let mut opt = OptimizerState::new(OptimizerKind::Ranger.into(), &s);
    assert!(opt.step(&mut s, 0.0).is_err());
    assert!(opt.step(&mut s, -1e-3).is_err());
}

#[test]
fn schedule_validation() {
    let mut c = TrainConfig::default();
    assert!(c.validate().is_ok());
    assert_eq!(c.total_epochs(), 30);
    assert_eq!((c.lr_at_epoch(0), c.lr_at_epoch(19), c.lr_at_epoch(20), c.lr_at_epoch(29)), (1e-3, 1e-3, 1e-4, 1e-5));
    c.lr_schedule = vec![Phase { epochs: 2, lr: 1e-3 }, Phase { epochs: 2, lr: 1e-3 }];
    assert!(c.validate().is_err());
    c.lr_schedule = vec![Phase { epochs: 0, lr: 1e-3 }];
    assert!(c.validate().is_err());
    c.lr_schedule = vec![];
    assert!(c.validate().is_err());
}

#[test]
fn applied_rates_follow_the_phase_table() {
    let data = tiny_data(vec![2018, 2019], 12);
    let cfg = TrainConfig { leave_out_year: Some(2019), ..tiny_config(ModelKind::Baseline) };
    let out = train_fold(&cfg, &data).unwrap();
    let steps_per_epoch = data.chips.iter().filter(|c| c.year == 2018).count().div_ceil(3);
    let mut expect = Vec::new();
    for p in &cfg.lr_schedule {
        expect.extend(std::iter::repeat_n(p.lr, p.epochs * steps_per_epoch));
    }
    assert_eq!(out.lr_trace, expect);
    let logged: Vec<f64> = out.log.iter().map(|l| l.phase_lr).collect();
    assert_eq!(logged, vec![1e-3, 1e-3, 1e-4, 1e-5]);
    assert!(out.step_losses.iter().all(|l| l.is_finite()));
}

#[test]
fn validation_year_never_contributes_gradients() {
    let data = tiny_data(vec![2017, 2018, 2019], 12);
    let cfg = TrainConfig { leave_out_year: Some(2018), ..tiny_config(ModelKind::Fusion) };
    let out = train_fold(&cfg, &data).unwrap();
    assert!(!out.gradient_samples.contains_key(&2018));
    let per_year = data.chips.iter().filter(|c| c.year == 2017).count() * cfg.total_epochs();
    assert_eq!(out.gradient_samples[&2017], per_year);
    assert_eq!(out.gradient_samples[&2019], per_year);
}

#[test]
fn seeded_training_is_reproducible() {
    let data = tiny_data(vec![2018, 2019], 12);
    let cfg = TrainConfig { leave_out_year: Some(2018), ..tiny_config(ModelKind::Fusion) };
    let a = train_fold(&cfg, &data).unwrap();
    let b = train_fold(&cfg, &data).unwrap();
    assert_eq!(a.step_losses, b.step_losses);
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!((x.train_rmse, x.val_rmse), (y.train_rmse, y.val_rmse));
    }
    assert_eq!(crate::model::to_bytes(&a.network).unwrap(), crate::model::to_bytes(&b.network).unwrap());
}

#[test]
fn one_epoch_smoke_writes_loadable_checkpoint_and_log() {
    let data = tiny_data(vec![2018, 2019], 12);
    let cfg = TrainConfig {
        leave_out_year: Some(2019),
        lr_schedule: vec![Phase { epochs: 1, lr: 1e-3 }],
        ..tiny_config(ModelKind::Fusion)
    };
    let mut out = train_fold(&cfg, &data).unwrap();
    assert_eq!(out.log.len(), 1);
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    crate::model::save(&out.network, &ck).unwrap();
    let mut back = crate::model::load(&ck).unwrap();
    let x = batch_input(ModelKind::Fusion, &[&data.chips[0]]);
    assert_eq!(back.predict(x.clone()).unwrap(), out.network.predict(x).unwrap());
    let log = dir.path().join("log.csv");
    write_epoch_log(&log, &out.log).unwrap();
    assert_eq!(read_epoch_log(&log).unwrap(), out.log);
    let header = std::fs::read_to_string(&log).unwrap();
    assert!(header.starts_with("epoch,phase_lr,train_rmse,val_rmse,wall_seconds\n"));
}

#[test]
fn empty_or_single_year_splits_are_rejected() {
    let data = tiny_data(vec![2019], 12);
    let cfg = TrainConfig { leave_out_year: Some(2019), ..tiny_config(ModelKind::Baseline) };
    assert!(train_fold(&cfg, &data).is_err());
    assert!(fit(&cfg, &data.chips, &[], &[0]).is_err());
}

#[test]
fn cross_validation_emits_one_row_per_year() {
    let data = tiny_data(vec![2017, 2018, 2019], 23);
    let cfg = TrainConfig { lr_schedule: vec![Phase { epochs: 1, lr: 1e-3 }], ..tiny_config(ModelKind::Fusion) };
    let folds = run_cv(&cfg, &data, &[ModelKind::Fusion, ModelKind::Baseline]).unwrap();
    assert_eq!(folds.len(), 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cv.csv");
    write_cv_table(&path, &folds).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "year,fusion_r2,fusion_slope,fusion_spearman,fusion_rmse,baseline_r2,baseline_slope,baseline_spearman,baseline_rmse"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("2017,"));
}
