use kenn::models::{Arch, Model, ModelKind};
use kenn::nn::Tape;
use std::time::Instant;

fn main() {
    for side in [14usize, 28] {
        for kind in ModelKind::ALL {
            let m = Model::<f32>::new(kind, Arch::for_side(side), 0);
            let b = 256;
            let p = side * side;
            let xa: Vec<f32> = (0..b * p)
                .map(|i| ((i * 7919) % 13) as f32 / 13.0)
                .collect();
            let xb: Vec<f32> = (0..b * p)
                .map(|i| ((i * 104729) % 11) as f32 / 11.0)
                .collect();
            let target = vec![3.0f32; b];
            let reps = 3;
            let t0 = Instant::now();
            for _ in 0..reps {
                let mut tape = Tape::new();
                let vars = m.params().bind(&mut tape);
                let d = m.pair_distances(&mut tape, &vars, &xa, &xb).unwrap();
                let loss = tape.mse(d, &target);
                let g = tape.backward(loss);
                std::hint::black_box(m.params().collect_grads(&g, &vars));
            }
            println!(
                "side {side} {kind}: {:.1} ms/step",
                t0.elapsed().as_secs_f64() * 1e3 / reps as f64
            );
        }
    }
}
