mod common;

use common::{fd_jacobian, log_abs_det, randomize_scaled};
use manf_core::flow::{Bijection, Conditioning, CouplingLayer, FlowConfig, FlowMode, FlowStack, LN_2PI};
use manf_core::{ParamStore, Rng, Tape, Tensor};

fn stack(dim: usize, cond_dim: usize, mode: Conditioning, bn: bool, seed: u64, random: bool) -> (ParamStore, FlowStack) {
    let mut store = ParamStore::new();
    let cfg = FlowConfig {
        dim,
        cond_dim,
        couplings: 3,
        hidden: 24,
        conditioning: mode,
        scale_clamp: Some(2.0),
        batch_norm: bn,
    };
    let mut st = FlowStack::new(&mut store, "flow", &cfg, &mut Rng::new(seed)).unwrap();
    if random {
        randomize_scaled(&mut store, 0.8, seed + 1);
        let mut rng = Rng::new(seed + 2);
        for bn in st.batch_norms_mut() {
            bn.running_mean = (0..dim).map(|_| rng.normal()).collect();
            bn.running_var = (0..dim).map(|_| 0.5 + rng.uniform()).collect();
        }
        // keep BN scales away from zero
        for (name, t) in store.names().to_vec().iter().zip(store.tensors_mut()) {
            if name.ends_with("gamma") {
                t.data_mut().iter_mut().for_each(|g| *g = 1.0 + 0.3 * g.tanh());
            }
        }
    }
    (store, st)
}

fn coupling(dim: usize, cond_dim: usize, mode: Conditioning, clamp: Option<f64>, seed: u64) -> (ParamStore, CouplingLayer) {
    let mut store = ParamStore::new();
    let c = CouplingLayer::new(&mut store, "c", 0, dim, cond_dim, 16, mode, clamp, &mut Rng::new(seed)).unwrap();
    (store, c)
}

#[test]
fn zero_nets_are_identity() {
    let (store, c) = coupling(4, 3, Conditioning::Coupling, Some(2.0), 1);
    let mut rng = Rng::new(2);
    let z = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let cond = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let (zv, cv) = (tape.leaf(&z), tape.leaf(&cond));
    let (out, ld) = c.forward(&mut tape, &p, zv, Some(cv)).unwrap();
    assert_eq!(tape.value(out), z.data());
    assert!(tape.value(ld).iter().all(|&v| v == 0.0));
    let (back, ld) = c.inverse(&mut tape, &p, zv, Some(cv)).unwrap();
    assert_eq!(tape.value(back), z.data());
    assert!(tape.value(ld).iter().all(|&v| v == 0.0));
}

#[test]
fn constant_log2_scale_doubles_transformed_half() {
    let (mut store, c) = coupling(4, 2, Conditioning::Coupling, None, 3);
    let (_, sb) = c.s_output();
    store.get_mut(sb).data_mut().iter_mut().for_each(|v| *v = 2f64.ln());
    let z = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let cond = Tensor::from_vec(&[1, 2], vec![0.5, -0.5]).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let (zv, cv) = (tape.leaf(&z), tape.leaf(&cond));
    let (out, ld) = c.forward(&mut tape, &p, zv, Some(cv)).unwrap();
    assert_eq!(c.kept(), &[0, 2]);
    let o = tape.value(out);
    assert_eq!(o[0], 1.0);
    assert_eq!(o[2], 3.0);
    assert!((o[1] - 4.0).abs() < 1e-14 && (o[3] - 8.0).abs() < 1e-14);
    assert!((tape.item(ld) - 2.0 * 2f64.ln()).abs() < 1e-14);
}

fn coupling_map(store: &ParamStore, c: &CouplingLayer, cond: &[f64], x: &[f64], inverse: bool) -> (Vec<f64>, f64) {
    let d = x.len();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(&[1, d], x.to_vec()).unwrap();
    let cv = tape.constant(&[1, cond.len()], cond.to_vec()).unwrap();
    let (o, ld) = if inverse {
        c.inverse(&mut tape, &p, xv, Some(cv)).unwrap()
    } else {
        c.forward(&mut tape, &p, xv, Some(cv)).unwrap()
    };
    (tape.value(o).to_vec(), tape.item(ld))
}

#[test]
fn coupling_logdet_matches_fd_jacobian() {
    for mode in [Conditioning::Coupling, Conditioning::Elementwise] {
        for seed in 0..4u64 {
            let (mut store, c) = coupling(5, 3, mode, Some(2.0), seed);
            randomize_scaled(&mut store, 1.0, seed + 10);
            let mut rng = Rng::new(seed + 20);
            let x = rng.normal_vec(5);
            let cond = rng.normal_vec(3);
            for inverse in [false, true] {
                let (_, ld) = coupling_map(&store, &c, &cond, &x, inverse);
                let jac = fd_jacobian(&x, 1e-5, |v| coupling_map(&store, &c, &cond, v, inverse).0);
                let brute = log_abs_det(&jac, 5);
                let rel = (ld - brute).abs() / ld.abs().max(1e-3);
                assert!(rel <= 1e-5, "{mode:?} seed {seed} inverse={inverse}: {ld} vs {brute}");
            }
        }
    }
}

fn round_trip_err(dim: usize, mode: Conditioning, seed: u64) -> f64 {
    let (store, st) = stack(dim, 6, mode, true, seed, true);
    let mut rng = Rng::new(seed + 5);
    let n = 4;
    let x = Tensor::randn(&[n, dim], 1.0, &mut rng);
    let cond = Tensor::randn(&[n, 6], 1.0, &mut rng);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.leaf(&x);
    let cv = tape.leaf(&cond);
    let conds = [Some(cv); 3];
    let tr = st.log_prob(&mut tape, &p, xv, &conds, FlowMode::Eval).unwrap();
    let back = st.push_forward(&mut tape, &p, tr.z0, &conds).unwrap();
    tape.value(back)
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[test]
fn stack_round_trip_across_dimensions() {
    for dim in [2, 8, 137, 963, 2000] {
        for mode in [Conditioning::Coupling, Conditioning::Elementwise] {
            let err = round_trip_err(dim, mode, dim as u64);
            assert!(err <= 1e-8, "D={dim} {mode:?}: {err}");
        }
    }
}

#[test]
fn bn_train_stats_invert_exactly() {
    let (store, st) = stack(3, 2, Conditioning::Coupling, true, 4, true);
    let Bijection::BatchNorm(bn) = &st.layers[1] else { panic!() };
    let x = Tensor::randn(&[7, 3], 2.0, &mut Rng::new(1));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.leaf(&x);
    let (y, ld_f, stats) = bn.normalize(&mut tape, &p, xv, FlowMode::Train).unwrap();
    let (back, ld_b) = bn.denormalize(&mut tape, &p, y, Some(&stats)).unwrap();
    for (a, b) in tape.value(back).iter().zip(x.data()) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
    }
    for (a, b) in tape.value(ld_f).iter().zip(tape.value(ld_b)) {
        assert!((a + b).abs() < 1e-14);
    }
}

#[test]
fn identity_stack_is_standard_normal() {
    let (store, st) = stack(4, 3, Conditioning::Coupling, false, 5, false);
    let mut rng = Rng::new(3);
    let x = Tensor::randn(&[6, 4], 1.5, &mut rng);
    let cond = Tensor::randn(&[6, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let (xv, cv) = (tape.leaf(&x), tape.leaf(&cond));
    let tr = st.log_prob(&mut tape, &p, xv, &[Some(cv); 3], FlowMode::Eval).unwrap();
    for (r, lp) in tape.value(tr.log_prob).iter().enumerate() {
        let sq: f64 = x.data()[r * 4..(r + 1) * 4].iter().map(|v| v * v).sum();
        let want = -0.5 * sq - 2.0 * LN_2PI;
        assert!((lp - want).abs() < 1e-13);
    }
}

#[test]
fn log_prob_is_base_plus_logdets() {
    let (store, st) = stack(6, 4, Conditioning::Coupling, true, 6, true);
    let mut rng = Rng::new(4);
    let x = Tensor::randn(&[5, 6], 1.0, &mut rng);
    let cond = Tensor::randn(&[5, 4], 1.0, &mut rng);
    for mode in [FlowMode::Train, FlowMode::Eval] {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (xv, cv) = (tape.leaf(&x), tape.leaf(&cond));
        let tr = st.log_prob(&mut tape, &p, xv, &[Some(cv); 3], mode).unwrap();
        assert_eq!(tr.logdets.len(), 6);
        assert_eq!(tr.bn_stats.len(), 3);
        for r in 0..5 {
            let z: f64 = tape.value(tr.z0)[r * 6..(r + 1) * 6].iter().map(|v| v * v).sum();
            let mut acc = -0.5 * z - 3.0 * LN_2PI;
            for &ld in &tr.logdets {
                acc += tape.value(ld)[r];
            }
            assert!((acc - tape.value(tr.log_prob)[r]).abs() < 1e-12);
        }
    }
}

#[test]
fn stack_logdet_matches_fd_jacobian() {
    for mode in [Conditioning::Coupling, Conditioning::Elementwise] {
        let (store, st) = stack(4, 2, mode, true, 7, true);
        let mut rng = Rng::new(8);
        let x = rng.normal_vec(4);
        let cond = rng.normal_vec(2);
        let to_z = |v: &[f64]| -> (Vec<f64>, f64) {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let xv = tape.constant(&[1, 4], v.to_vec()).unwrap();
            let cv = tape.constant(&[1, 2], cond.clone()).unwrap();
            let tr = st.log_prob(&mut tape, &p, xv, &[Some(cv); 3], FlowMode::Eval).unwrap();
            let ld: f64 = tr.logdets.iter().map(|&l| tape.item(l)).sum();
            (tape.value(tr.z0).to_vec(), ld)
        };
        let (_, ld) = to_z(&x);
        let brute = log_abs_det(&fd_jacobian(&x, 1e-5, |v| to_z(v).0), 4);
        assert!((ld - brute).abs() / ld.abs().max(1e-3) <= 1e-5, "{mode:?}: {ld} vs {brute}");
    }
}

#[test]
fn one_dimensional_density_integrates_to_one() {
    let (store, st) = stack(1, 2, Conditioning::Coupling, true, 9, true);
    let cond = vec![0.4, -0.8];
    let (lo, hi, n) = (-40.0, 40.0, 80_001usize);
    let h = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).collect();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(&[n, 1], xs).unwrap();
    let cv = tape.constant(&[n, 2], cond.repeat(n)).unwrap();
    let tr = st.log_prob(&mut tape, &p, xv, &[Some(cv); 3], FlowMode::Eval).unwrap();
    let dens: Vec<f64> = tape.value(tr.log_prob).iter().map(|v| v.exp()).collect();
    // trapezoid rule
    let integral = h * (dens.iter().sum::<f64>() - 0.5 * (dens[0] + dens[n - 1]));
    assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
}

#[test]
fn identity_sampling_is_standard_normal() {
    let (store, st) = stack(3, 2, Conditioning::Coupling, false, 10, false);
    let n = 4000;
    let draw = |seed: u64| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let cv = tape.constant(&[n, 2], vec![0.3; 2 * n]).unwrap();
        let s = st.sample(&mut tape, &p, &mut Rng::new(seed), &[Some(cv); 3], n).unwrap();
        tape.value(s).to_vec()
    };
    let a = draw(11);
    assert_eq!(a, draw(11));
    for d in 0..3 {
        let mean = a.iter().skip(d).step_by(3).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 4.0 / (n as f64).sqrt(), "dim {d} mean {mean}");
    }
}

#[test]
fn samples_have_finite_log_prob() {
    for mode in [Conditioning::Coupling, Conditioning::Elementwise] {
        let (store, st) = stack(5, 3, mode, true, 12, true);
        let n = 200;
        let mut rng = Rng::new(13);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let cond = tape.constant(&[n, 3], rng.normal_vec(3 * n)).unwrap();
        let conds = [Some(cond); 3];
        let s = st.sample(&mut tape, &p, &mut rng, &conds, n).unwrap();
        let tr = st.log_prob(&mut tape, &p, s, &conds, FlowMode::Eval).unwrap();
        assert!(tape.value(tr.log_prob).iter().all(|v| v.is_finite()));
    }
}
