//! Central-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients of the scalar `f` over every parameter entry in `store`.
///
/// `f` receives a fresh tape and the parameter handles (in store order) and
/// returns the scalar output node. The relative error of one entry is
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, h: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let ad = store.collect_grads(&grads, &vars);

    let mut probe = store.clone();
    let eval = |p: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut worst = 0.0f64;
    for (i, g) in ad.iter().enumerate() {
        for (e, &g_ad) in g.iter().enumerate() {
            let x = store.tensor(i).data()[e];
            probe.tensor_mut(i).data_mut()[e] = x + h;
            let up = eval(&probe);
            probe.tensor_mut(i).data_mut()[e] = x - h;
            let down = eval(&probe);
            probe.tensor_mut(i).data_mut()[e] = x;
            let g_fd = (up - down) / (2.0 * h);
            let rel = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}
