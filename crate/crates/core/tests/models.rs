mod common;

use common::{cast, digit_measures, randomize, reference_distance, reference_stages};
use kenn::models::{joint_batch_solve, rk4_solve, Arch, Model, ModelKind};
use kenn::nn::{grad_check, softplus_inv, Tape, Tensor, Var};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flat(items: &[&Vec<f64>]) -> Vec<f64> {
    items.iter().flat_map(|v| v.iter().copied()).collect()
}

#[test]
fn distances_match_plain_loop_recomputation() {
    let imgs = digit_measures(6, 1, 1);
    for kind in ModelKind::ALL {
        let mut m = Model::<f64>::new(kind, Arch::full(), 7);
        randomize(&mut m, 8, 1.0);
        if let Ok(t) = m.params_mut().get_mut("stage.theta") {
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                *v = 0.3 * k as f64 - 0.7;
            }
        }
        if let Ok(t) = m.params_mut().get_mut("time.theta") {
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                *v = (k as f64).sin();
            }
        }
        let xa = flat(&[&imgs[0], &imgs[1], &imgs[2]]);
        let xb = flat(&[&imgs[3], &imgs[4], &imgs[5]]);
        let got = m.distances(&xa, &xb).unwrap();
        for i in 0..3 {
            let want = reference_distance(&m, &imgs[i], &imgs[i + 3]);
            assert!(
                (got[i] - want).abs() < 1e-6 * want.max(1.0),
                "{kind} pair {i}: {} vs {want}",
                got[i]
            );
        }
    }
}

#[test]
fn encoder_stage_dims_and_zero_image() {
    let m = Model::<f64>::new(ModelKind::DeepKenn, Arch::full(), 3);
    let fs = m.encode(&[0.0; 784]).unwrap();
    assert_eq!(fs.dims(), vec![1568, 784, 288, 128, 64, 64]);
    assert_eq!(fs.dims()[..5].iter().sum::<usize>(), 2832);
    for stage in &fs.stages[..3] {
        assert!(stage.iter().all(|&v| v == 0.0));
    }
    assert!(fs.stages.iter().flatten().all(|v| v.is_finite()));
    let img = &digit_measures(1, 4, 1)[0];
    let reference = reference_stages(&m, img);
    let got = m.encode(img).unwrap();
    for k in 0..5 {
        for (a, b) in got.stages[k].iter().zip(&reference[k]) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    assert_eq!(m.encode(img).unwrap(), got);
}

#[test]
fn deepkenn_reduces_to_naive() {
    let imgs = digit_measures(2, 2, 1);
    let naive = Model::<f64>::new(ModelKind::Naive, Arch::full(), 5);
    let mut deep = Model::<f64>::new(ModelKind::DeepKenn, Arch::full(), 5);
    // same encoder and head values, then switch off every stage but the head
    for (name, t) in naive.params().iter() {
        *deep.params_mut().get_mut(name).unwrap() = t.clone();
    }
    let theta = deep.params_mut().get_mut("stage.theta").unwrap();
    for (k, v) in theta.data_mut().iter_mut().enumerate() {
        *v = if k == 5 { softplus_inv(1.0) } else { -40.0 };
    }
    let a = naive.distance(&imgs[0], &imgs[1]).unwrap();
    let b = deep.distance(&imgs[0], &imgs[1]).unwrap();
    assert!((a - b).abs() < 1e-4, "{a} vs {b}");
}

#[test]
fn odekenn_with_zero_field_is_scaled_encoder_distance() {
    let imgs = digit_measures(2, 3, 1);
    let mut m = Model::<f64>::new(ModelKind::OdeKenn, Arch::full(), 9);
    for name in ["ode.w", "ode.b"] {
        m.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let theta = m.params_mut().get_mut("time.theta").unwrap();
    for (k, v) in theta.data_mut().iter_mut().enumerate() {
        *v = 0.2 * k as f64 - 1.0;
    }
    let lam = m.lambdas().unwrap();
    let ea = m.encode(&imgs[0]).unwrap().stages[4].clone();
    let eb = m.encode(&imgs[1]).unwrap().stages[4].clone();
    let norm = ea
        .iter()
        .zip(&eb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let want = (lam.iter().sum::<f64>() * 0.1).sqrt() * norm;
    let got = m.distance(&imgs[0], &imgs[1]).unwrap();
    assert!((got - want).abs() < 1e-5, "{got} vs {want}");
}

#[test]
fn distances_symmetric_and_zero_on_diagonal() {
    let imgs = digit_measures(4, 5, 1);
    for kind in ModelKind::ALL {
        let m = Model::<f32>::new(kind, Arch::full(), 11);
        let a: Vec<f32> = cast(&flat(&[&imgs[0], &imgs[1]]));
        let b: Vec<f32> = cast(&flat(&[&imgs[2], &imgs[3]]));
        assert_eq!(m.distances(&a, &b).unwrap(), m.distances(&b, &a).unwrap());
        for d in m.distances(&a, &a).unwrap() {
            assert!(d >= 0.0 && d <= 1e-6, "{kind}: {d}");
        }
    }
}

#[test]
fn embeddings_reproduce_distances() {
    let imgs = digit_measures(5, 6, 2);
    for kind in ModelKind::ALL {
        let mut m = Model::<f64>::new(kind, Arch::for_side(14), 12);
        randomize(&mut m, 13, 1.0);
        let all = flat(&imgs.iter().collect::<Vec<_>>());
        let emb = m.embed(&all).unwrap();
        assert_eq!(emb.len(), 5);
        for i in 0..5 {
            for j in 0..5 {
                let d = m.distance(&imgs[i], &imgs[j]).unwrap();
                assert!((emb.distance(i, j) - d).abs() < 1e-9, "{kind} {i},{j}");
            }
        }
    }
}

fn odekenn_separate(m: &Model<f32>, a: &[f32], b: &[f32]) -> Vec<f32> {
    let mut tape = Tape::new();
    let vars = m.params().bind(&mut tape);
    let arch = *m.arch();
    let mut solve = |x: &[f32]| {
        let n = x.len() / arch.pixels();
        let xv = tape.input(Tensor::new(vec![n, 1, arch.side, arch.side], x.to_vec()).unwrap());
        let st = m.encode_on_tape(&mut tape, &vars, xv);
        rk4_solve(&mut tape, st[4], arch.steps, |t, h| {
            m.field_on_tape(t, &vars, h)
        })
        .unwrap()
    };
    let ta = solve(a);
    let tb = solve(b);
    let d = m.trajectory_distance(&mut tape, &vars, &ta, &tb);
    tape.value(d).data().to_vec()
}

#[test]
fn joint_batch_matches_separate_solves_bitwise() {
    let imgs = digit_measures(8, 7, 1);
    let mut m = Model::<f32>::new(ModelKind::OdeKenn, Arch::full(), 21);
    randomize(&mut m, 22, 1.0);
    for b in [1usize, 4] {
        let a: Vec<f32> = cast(&flat(&imgs[..b].iter().collect::<Vec<_>>()));
        let c: Vec<f32> = cast(&flat(&imgs[4..4 + b].iter().collect::<Vec<_>>()));
        let joint = m.distances(&a, &c).unwrap();
        let sep = odekenn_separate(&m, &a, &c);
        assert_eq!(
            joint.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            sep.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn joint_solve_with_zero_field_is_constant() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let y = tape.input(Tensor::new(vec![2, 3], vec![-1.0, 0.0, 1.0, 0.5, 0.5, 0.5]).unwrap());
    let (tx, ty) = joint_batch_solve(&mut tape, x, y, 10, |t, h| t.scale(h, 0.0)).unwrap();
    for k in 0..=10 {
        assert_eq!(tape.value(tx.states[k]).data(), tape.value(x).data());
        assert_eq!(tape.value(ty.states[k]).data(), tape.value(y).data());
    }
}

/// Rotation generator A = [[0, 1], [-1, 0]]; exp(A) rotates by one radian.
fn rotation_error(steps: usize) -> f64 {
    let mut tape = Tape::<f64>::new();
    let h0 = tape.input(Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap());
    // rows are states: h' = h A^T, stored (in, out) so W = A^T
    let w = tape.input(Tensor::new(vec![2, 2], vec![0.0, -1.0, 1.0, 0.0]).unwrap());
    let b = tape.input(Tensor::zeros(&[2]));
    let traj = rk4_solve(&mut tape, h0, steps, |t, h| t.linear(h, w, b)).unwrap();
    let end = tape.value(*traj.states.last().unwrap()).data().to_vec();
    let (c, s) = (1f64.cos(), 1f64.sin());
    let want = [c * 1.0 + s * 0.5, -s * 1.0 + c * 0.5];
    ((end[0] - want[0]).powi(2) + (end[1] - want[1]).powi(2)).sqrt()
}

#[test]
fn rk4_is_fourth_order() {
    let (e5, e10) = (rotation_error(5), rotation_error(10));
    assert!(e5 / e10 >= 12.0, "ratio {}", e5 / e10);
}

#[test]
fn rk4_exponential_decay() {
    let mut tape = Tape::<f64>::new();
    let h0 = tape.input(Tensor::scalar(1.0).reshape(vec![1, 1]).unwrap());
    let traj = rk4_solve(&mut tape, h0, 10, |t, h| t.scale(h, -1.0)).unwrap();
    let end = tape.value(traj.states[10]).data()[0];
    assert!((end - 0.367_879_4).abs() < 1e-5);
}

#[test]
fn gronwall_envelope() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..20 {
        let d = 64;
        let scale = rng.gen_range(0.05..0.4);
        let w: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-scale..scale)).collect();
        let bias: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lip = DMatrix::from_row_slice(d, d, &w).singular_values().max();
        let mut tape = Tape::<f64>::new();
        let wv = tape.input(Tensor::new(vec![d, d], w).unwrap());
        let bv = tape.input(Tensor::from_vec(bias));
        let hx = tape.input(
            Tensor::new(
                vec![1, d],
                (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap(),
        );
        let hy = tape.input(
            Tensor::new(
                vec![1, d],
                (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap(),
        );
        let field = |t: &mut Tape<f64>, h: Var| {
            let l = t.linear(h, wv, bv);
            t.tanh(l)
        };
        let (tx, ty) = joint_batch_solve(&mut tape, hx, hy, 10, field).unwrap();
        let sep = |k: usize| {
            let (a, b) = (
                tape.value(tx.states[k]).data(),
                tape.value(ty.states[k]).data(),
            );
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let d0 = sep(0);
        for k in 0..=10 {
            let bound = (lip * k as f64 * 0.1).exp() * d0 * (1.0 + 1e-3);
            assert!(sep(k) <= bound, "step {k}: {} > {bound}", sep(k));
        }
    }
}

/// Draws model parameters until no ReLU input or pooling runner-up sits
/// within 1e-3 of a kink, then checks the loss gradient.
fn tiny_grad_error(kind: ModelKind) -> f64 {
    let arch = Arch::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(kind.tag());
    for attempt in 0..200u64 {
        let mut m = Model::<f64>::new(kind, arch, attempt);
        randomize(&mut m, 1000 + attempt, 1.0);
        if let Some((name, n)) = match kind {
            ModelKind::DeepKenn => Some(("stage.theta", 6)),
            ModelKind::OdeKenn => Some(("time.theta", arch.steps)),
            ModelKind::Naive => None,
        } {
            let t = m.params_mut().get_mut(name).unwrap();
            for k in 0..n {
                t.data_mut()[k] = rng.gen_range(-1.0..1.0);
            }
        }
        let xa: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(0.0..2.0)).collect();
        let xb: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(0.0..2.0)).collect();
        let target = [0.5, 1.0, 1.5];
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let d = m.pair_distances(t, v, &xa, &xb).unwrap();
            t.mse(d, &target)
        };
        let mut probe = Tape::new();
        let vars = m.params().bind(&mut probe);
        f(&mut probe, &vars);
        if probe.kink_margin() < 1e-3 {
            continue;
        }
        return grad_check(m.params(), f, 1e-5);
    }
    panic!("no kink-free draw for {kind}");
}

#[test]
fn gradients_match_finite_differences() {
    for kind in ModelKind::ALL {
        let err = tiny_grad_error(kind);
        assert!(err < 1e-4, "{kind}: {err}");
    }
}

#[test]
fn triangle_inequality_random_params() {
    let imgs = digit_measures(60, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in ModelKind::ALL {
        let mut m = Model::<f32>::new(kind, Arch::for_side(14), 30);
        randomize(&mut m, 31, 1.0);
        let triples: Vec<[usize; 3]> = (0..200)
            .map(|_| {
                [
                    rng.gen_range(0..60),
                    rng.gen_range(0..60),
                    rng.gen_range(0..60),
                ]
            })
            .collect();
        let pick = |k: usize| -> Vec<f32> {
            cast(&flat(
                &triples.iter().map(|t| &imgs[t[k]]).collect::<Vec<_>>(),
            ))
        };
        let (x, y, z) = (pick(0), pick(1), pick(2));
        let dxy = m.distances(&x, &y).unwrap();
        let dyz = m.distances(&y, &z).unwrap();
        let dxz = m.distances(&x, &z).unwrap();
        for i in 0..triples.len() {
            assert!(dxz[i] <= dxy[i] + dyz[i] + 1e-5, "{kind} triple {i}");
        }
    }
}
