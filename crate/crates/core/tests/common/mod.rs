//! Helpers shared by the integration tests: an independent plain-loop
//! forward pass for the distance models and small data generators.
#![allow(dead_code)]

use kenn::data::synth::synth_digits;
use kenn::measures::GridMeasure;
use kenn::models::{Model, ModelKind};
use kenn::nn::{softplus, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Normalized measure weights of `n` synthetic digits at `28 / factor` resolution.
pub fn digit_measures(n: usize, seed: u64, factor: usize) -> Vec<Vec<f64>> {
    let (set, _) = synth_digits(n.div_ceil(10), seed);
    let set = if factor > 1 {
        set.downscale(factor)
    } else {
        set
    };
    (0..n)
        .map(|i| {
            GridMeasure::from_bytes(set.height, set.width, set.image(i))
                .unwrap()
                .weights()
                .to_vec()
        })
        .collect()
}

pub fn cast<T: Real>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::c(v)).collect()
}

/// Overwrites every parameter (biases included) with `U(-scale, scale)` noise,
/// keeping distance weights as they are.
pub fn randomize<T: Real>(model: &mut Model<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params().names().to_vec();
    for name in names {
        if name.ends_with(".theta") {
            continue;
        }
        let t = model.params_mut().get_mut(&name).unwrap();
        let fan = if name.ends_with(".w") {
            t.row_len().max(1) as f64
        } else {
            1.0
        };
        let s = if name.ends_with(".w") && !name.starts_with("conv") {
            scale * (3.0 / t.shape()[0] as f64).sqrt()
        } else if name.starts_with("conv") && name.ends_with(".w") {
            scale * (3.0 / fan).sqrt()
        } else {
            scale * 0.1
        };
        for v in t.data_mut() {
            *v = T::c(rng.gen_range(-s..s));
        }
    }
}

fn p(model: &Model<f64>, name: &str) -> (Vec<usize>, Vec<f64>) {
    let t = model.params().get(name).unwrap();
    (t.shape().to_vec(), t.data().to_vec())
}

fn conv_same(x: &[f64], cin: usize, s: usize, w: &[f64], shape: &[usize], b: &[f64]) -> Vec<f64> {
    let (cout, k) = (shape[0], shape[2]);
    let pad = (k / 2) as i64;
    let mut out = vec![0.0; cout * s * s];
    for co in 0..cout {
        for r in 0..s as i64 {
            for c in 0..s as i64 {
                let mut acc = b[co];
                for ci in 0..cin {
                    for i in 0..k as i64 {
                        for j in 0..k as i64 {
                            let (sr, sc) = (r + i - pad, c + j - pad);
                            if sr >= 0 && sc >= 0 && sr < s as i64 && sc < s as i64 {
                                acc += x[ci * s * s + (sr as usize) * s + sc as usize]
                                    * w[((co * cin + ci) * k + i as usize) * k + j as usize];
                            }
                        }
                    }
                }
                out[co * s * s + r as usize * s + c as usize] = acc;
            }
        }
    }
    out
}

fn pool(x: &[f64], c: usize, s: usize) -> Vec<f64> {
    let o = s / 2;
    let mut out = vec![0.0; c * o * o];
    for ch in 0..c {
        for r in 0..o {
            for col in 0..o {
                let at = |dr: usize, dc: usize| x[ch * s * s + (2 * r + dr) * s + 2 * col + dc];
                out[ch * o * o + r * o + col] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
            }
        }
    }
    out
}

fn dense(x: &[f64], w: &[f64], shape: &[usize], b: &[f64]) -> Vec<f64> {
    let (fin, fout) = (shape[0], shape[1]);
    (0..fout)
        .map(|o| b[o] + (0..fin).map(|i| x[i] * w[i * fout + o]).sum::<f64>())
        .collect()
}

/// Encoder stages conv1..fc2 computed with direct loops.
pub fn reference_stages(model: &Model<f64>, image: &[f64]) -> Vec<Vec<f64>> {
    let arch = *model.arch();
    let mut x = image.to_vec();
    let (mut cin, mut s) = (1, arch.side);
    let mut stages = Vec::new();
    for l in 0..3 {
        let (ws, w) = p(model, &format!("conv{}.w", l + 1));
        let (_, b) = p(model, &format!("conv{}.b", l + 1));
        let y: Vec<f64> = conv_same(&x, cin, s, &w, &ws, &b)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        cin = ws[0];
        x = if arch.pools[l] {
            let pooled = pool(&y, cin, s);
            s /= 2;
            pooled
        } else {
            y
        };
        stages.push(x.clone());
    }
    let (s1, w1) = p(model, "fc1.w");
    let (_, b1) = p(model, "fc1.b");
    let f1: Vec<f64> = dense(&x, &w1, &s1, &b1)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let (s2, w2) = p(model, "fc2.w");
    let (_, b2) = p(model, "fc2.b");
    let f2 = dense(&f1, &w2, &s2, &b2);
    stages.push(f1);
    stages.push(f2);
    stages
}

fn field(model: &Model<f64>, h: &[f64], name: &str) -> Vec<f64> {
    let (s, w) = p(model, &format!("{name}.w"));
    let (_, b) = p(model, &format!("{name}.b"));
    dense(h, &w, &s, &b).into_iter().map(f64::tanh).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Plain RK4 trajectory of `h0` under the model's field.
pub fn reference_trajectory(model: &Model<f64>, h0: &[f64]) -> Vec<Vec<f64>> {
    let n = model.arch().steps;
    let dt = 1.0 / n as f64;
    let mut states = vec![h0.to_vec()];
    let mut h = h0.to_vec();
    let axpy = |h: &[f64], k: &[f64], c: f64| -> Vec<f64> {
        h.iter().zip(k).map(|(a, b)| a + c * b).collect()
    };
    for _ in 0..n {
        let k1 = field(model, &h, "ode");
        let k2 = field(model, &axpy(&h, &k1, dt / 2.0), "ode");
        let k3 = field(model, &axpy(&h, &k2, dt / 2.0), "ode");
        let k4 = field(model, &axpy(&h, &k3, dt), "ode");
        h = (0..h.len())
            .map(|i| h[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        states.push(h.clone());
    }
    states
}

/// Model distance recomputed from scratch with the plain-loop forward pass.
pub fn reference_distance(model: &Model<f64>, a: &[f64], b: &[f64]) -> f64 {
    let (sa, sb) = (reference_stages(model, a), reference_stages(model, b));
    let lam: Vec<f64> = model
        .params()
        .iter()
        .find(|(n, _)| n.ends_with(".theta"))
        .map(|(_, t)| t.data().iter().map(|&v| softplus(v)).collect())
        .unwrap_or_default();
    let s = match model.kind() {
        ModelKind::Naive => sq_dist(&field(model, &sa[4], "head"), &field(model, &sb[4], "head")),
        ModelKind::DeepKenn => {
            let mut s = 0.0;
            for k in 0..5 {
                s += lam[k] * sq_dist(&sa[k], &sb[k]);
            }
            s + lam[5] * sq_dist(&field(model, &sa[4], "head"), &field(model, &sb[4], "head"))
        }
        ModelKind::OdeKenn => {
            let (ta, tb) = (
                reference_trajectory(model, &sa[4]),
                reference_trajectory(model, &sb[4]),
            );
            let dt = 1.0 / model.arch().steps as f64;
            (0..model.arch().steps)
                .map(|k| lam[k] * sq_dist(&ta[k], &tb[k]) * dt)
                .sum()
        }
    };
    (s + 1e-12).sqrt()
}
