//! Fixed-step RK4 recorded on a tape.

use super::ModelError;
use crate::nn::{Real, Tape, Var};

/// States `h(t_0) .. h(t_N)` of one solve, each `batch x dim`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Var>,
    pub dt: f64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

/// Classical RK4 on `[0, 1]` with `steps` equal steps. Every stage is
/// recorded, so gradients flow through the discrete solver.
pub fn rk4_solve<T: Real>(
    tape: &mut Tape<T>,
    h0: Var,
    steps: usize,
    mut field: impl FnMut(&mut Tape<T>, Var) -> Var,
) -> Result<Trajectory, ModelError> {
    if steps == 0 {
        return Err(ModelError::NoSteps);
    }
    let dt = 1.0 / steps as f64;
    let (half, full) = (T::c(dt / 2.0), T::c(dt));
    let mut states = Vec::with_capacity(steps + 1);
    states.push(h0);
    let mut h = h0;
    for step in 1..=steps {
        let k1 = field(tape, h);
        let p = tape.add_scaled(h, k1, half);
        let k2 = field(tape, p);
        let p = tape.add_scaled(h, k2, half);
        let k3 = field(tape, p);
        let p = tape.add_scaled(h, k3, full);
        let k4 = field(tape, p);
        h = tape.rk4_combine(h, [k1, k2, k3, k4], full);
        if !tape.value(h).all_finite() {
            return Err(ModelError::TrajectoryBlowUp { step });
        }
        states.push(h);
    }
    Ok(Trajectory { states, dt })
}

/// Solves both batches as one stacked batch and splits the states back.
pub fn joint_batch_solve<T: Real>(
    tape: &mut Tape<T>,
    h0_x: Var,
    h0_y: Var,
    steps: usize,
    field: impl FnMut(&mut Tape<T>, Var) -> Var,
) -> Result<(Trajectory, Trajectory), ModelError> {
    let bx = tape.value(h0_x).rows();
    let by = tape.value(h0_y).rows();
    if bx != by {
        return Err(ModelError::BatchMismatch {
            left: bx,
            right: by,
        });
    }
    let stacked = tape.concat_rows(&[h0_x, h0_y]);
    let joint = rk4_solve(tape, stacked, steps, field)?;
    let mut xs = Vec::with_capacity(joint.states.len());
    let mut ys = Vec::with_capacity(joint.states.len());
    for (k, &s) in joint.states.iter().enumerate() {
        if k == 0 {
            xs.push(h0_x);
            ys.push(h0_y);
        } else {
            xs.push(tape.slice_rows(s, 0, bx));
            ys.push(tape.slice_rows(s, bx, 2 * bx));
        }
    }
    Ok((
        Trajectory {
            states: xs,
            dt: joint.dt,
        },
        Trajectory {
            states: ys,
            dt: joint.dt,
        },
    ))
}
