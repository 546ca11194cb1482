use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{lstm_cell, ParamId};

fn random_input(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

fn param_id(store: &ParamStore, name: &str) -> ParamId {
    store.ids().find(|&id| store.name(id) == name).unwrap_or_else(|| panic!("no parameter {name}"))
}

fn weighted_loss(net: &mut Network, input: &Tensor, r: &Tensor) -> (f64, Tape, Var) {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = net.forward(&mut tape, x, true).unwrap();
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv).unwrap();
    let loss = tape.sum(p);
    (tape.value(loss).item().unwrap(), tape, loss)
}

#[test]
fn param_counts_at_default_width() {
    let fusion = ArchSpec::fusion(128, 32);
    let baseline = ArchSpec::baseline(128);
    assert_eq!(fusion.param_count(), 460_991);
    assert_eq!(baseline.param_count(), 456_577);
    assert_eq!(Network::new(&fusion, 0).unwrap().store().num_scalars(), 460_991);
    assert_eq!(Network::new(&baseline, 0).unwrap().store().num_scalars(), 456_577);
    // No projection layer when H = 1.
    let h1 = ArchSpec::fusion(4, 1);
    assert_eq!(Network::new(&h1, 0).unwrap().store().num_scalars(), h1.param_count());
}

#[test]
fn output_shapes_and_rejected_inputs() {
    let mut fusion = Network::new(&ArchSpec::fusion(2, 3), 1).unwrap();
    let y = fusion.predict(random_input(fusion.input_shape(2), 0)).unwrap();
    assert_eq!(y.shape(), [2, 32, 32]);
    assert!(fusion.predict(random_input(vec![2, 9, 10, 32, 32], 0)).is_err());
    assert!(fusion.predict(random_input(vec![2, 10, 10, 16, 16], 0)).is_err());

    let mut base = Network::new(&ArchSpec::baseline(2), 1).unwrap();
    let y = base.predict(random_input(base.input_shape(3), 0)).unwrap();
    assert_eq!(y.shape(), [3, 32, 32]);
    assert!(base.predict(random_input(vec![3, 7, 32, 32], 0)).is_err());
    assert!(Network::new(&ArchSpec::fusion(0, 3), 0).is_err());
    assert!(Network::new(&ArchSpec::fusion(3, 0), 0).is_err());
}

#[test]
fn outputs_stay_strictly_inside_unit_interval() {
    for seed in 0..3 {
        let mut net = Network::new(&ArchSpec::fusion(3, 2), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(net.input_shape(1), |_| rng.random_range(-50.0..50.0));
        let y = net.predict(x).unwrap();
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn zero_parameters_give_one_half() {
    for arch in [ArchSpec::fusion(2, 2), ArchSpec::baseline(2)] {
        let mut net = Network::new(&arch, 3).unwrap();
        let ids: Vec<_> = net.store().ids().collect();
        for id in ids {
            net.store_mut().value_mut(id).data_mut().fill(0.0);
        }
        let y = net.predict(random_input(net.input_shape(1), 4)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn zero_head_gives_one_half_whatever_the_input() {
    let mut net = Network::new(&ArchSpec::fusion(3, 2), 5).unwrap();
    for name in ["cnn_b.weight", "cnn_b.bias"] {
        let id = param_id(net.store(), name);
        net.store_mut().value_mut(id).data_mut().fill(0.0);
    }
    let y = net.predict(random_input(net.input_shape(2), 6)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.5));
}

#[test]
fn history_order_matters() {
    let mut net = Network::new(&ArchSpec::fusion(3, 4), 7).unwrap();
    let x = random_input(net.input_shape(1), 8);
    let step = N_BANDS * HW;
    let mut rev = x.clone();
    for t in 0..SEQ_LEN - 1 {
        let src = SEQ_LEN - 2 - t;
        rev.data_mut()[t * step..(t + 1) * step].copy_from_slice(&x.data()[src * step..(src + 1) * step]);
    }
    let a = net.predict(x).unwrap();
    let b = net.predict(rev).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-9);
}

#[test]
fn lstm_is_independent_across_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (b, h) = (6, 3);
    let xs: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(vec![b, 1], |_| rng.random_range(-1.0..1.0))).collect();
    let wx = Tensor::from_fn(vec![4 * h, 1], |_| rng.random_range(-0.6..0.6));
    let wh = Tensor::from_fn(vec![4 * h, h], |_| rng.random_range(-0.6..0.6));
    let bias = Tensor::from_fn(vec![4 * h], |_| rng.random_range(-0.6..0.6));
    let perm = [3usize, 0, 5, 1, 4, 2];
    let run = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let (wx, wh, bv) = (tape.constant(wx.clone()), tape.constant(wh.clone()), tape.constant(bias.clone()));
        let mut hv = tape.constant(Tensor::zeros(vec![b, h]));
        let mut cv = tape.constant(Tensor::zeros(vec![b, h]));
        for x in xs {
            let xv = tape.constant(x.clone());
            (hv, cv) = lstm_cell(&mut tape, xv, hv, cv, wx, wh, bv).unwrap();
        }
        tape.value(hv).clone()
    };
    let base = run(&xs);
    let permuted: Vec<Tensor> = xs
        .iter()
        .map(|x| Tensor::from_fn(vec![b, 1], |i| x.data()[perm[i]]))
        .collect();
    let out = run(&permuted);
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(&out.data()[i * h..(i + 1) * h], &base.data()[p * h..(p + 1) * h]);
    }
}

#[test]
fn shared_encoder_gradient_matches_finite_differences() {
    // The encoder runs once per timestep, so its gradient is a sum over all
    // ten applications; checking it numerically covers that accumulation.
    let mut net = Network::new(&ArchSpec::fusion(2, 2), 12).unwrap();
    let x = random_input(net.input_shape(1), 13);
    let r = random_input(vec![1, 32, 32], 14);
    let (_, tape, loss) = weighted_loss(&mut net.clone(), &x, &r);
    let grads = tape.backward(loss).unwrap();
    net.store_mut().zero_grad();
    grads.accumulate_into(net.store_mut());

    // Tens of thousands of ReLU units sit downstream of the first conv; a
    // small step keeps the central difference from straddling a kink.
    let h = 1e-7;
    let probes = [
        ("cnn_a.conv0.weight", 0),
        ("cnn_a.conv0.weight", 97),
        ("cnn_a.bn2.gamma", 1),
        ("cnn_a.conv4.bias", 0),
        ("lstm.input_weights", 2),
        ("lstm.hidden_weights", 5),
        ("proj.weight", 1),
        ("deconv.weight", 4),
        ("cnn_b.weight", 13),
    ];
    for (name, idx) in probes {
        let id = param_id(net.store(), name);
        let analytic = net.store().grad(id).data()[idx];
        let eval = |delta: f64| {
            let mut n = net.clone();
            n.store_mut().value_mut(id).data_mut()[idx] += delta;
            weighted_loss(&mut n, &x, &r).0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        assert!(rel < 1e-4, "{name}[{idx}]: analytic {analytic}, numeric {numeric}");
    }
}

#[test]
fn initialisation_is_seeded() {
    let arch = ArchSpec::fusion(4, 3);
    let a = Network::new(&arch, 21).unwrap();
    let b = Network::new(&arch, 21).unwrap();
    let c = Network::new(&arch, 22).unwrap();
    let same = a.store().ids().all(|id| a.store().value(id) == b.store().value(id));
    let differ = a.store().ids().any(|id| a.store().value(id) != c.store().value(id));
    assert!(same && differ);
}

#[test]
fn conv_weight_spread_matches_he_scale() {
    let net = Network::new(&ArchSpec::baseline(128), 0).unwrap();
    let store = net.store();
    for (name, fan_in) in [("cnn_a.conv0.weight", 90), ("cnn_a.conv2.weight", 128 * 9)] {
        let w = store.value(param_id(store, name)).data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = (2.0 / fan_in as f64).sqrt();
        assert!((std / target - 1.0).abs() < 0.2, "{name}: std {std}, target {target}");
    }
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    for arch in [ArchSpec::fusion(3, 2), ArchSpec::baseline(3)] {
        let mut net = Network::new(&arch, 30).unwrap();
        // A training-mode pass moves the running statistics off their defaults.
        let x = random_input(net.input_shape(2), 31);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        net.forward(&mut tape, xv, true).unwrap();

        let bytes = to_bytes(&net).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let mut back = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        assert_eq!(back.arch(), net.arch());
        assert_eq!(back.seed(), 30);
        assert_eq!(back.predict(x.clone()).unwrap(), net.predict(x).unwrap());

        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(from_bytes(&truncated).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic).is_err());
    }
}
