use kenn::data::synth::synth_digits;
use kenn::measures::{ground_cost, GridMeasure};
use kenn::ot::solve;
use std::time::Instant;

fn main() {
    let (set, _) = synth_digits(10, 9);
    let cost = ground_cost(28, 28).unwrap();
    let mut times = Vec::new();
    let mut refined = 0;
    let lit: usize = (0..set.len())
        .map(|i| set.image(i).iter().filter(|&&p| p > 0).count())
        .sum();
    println!("mean lit pixels {}", lit / set.len());
    for i in 0..40 {
        let a = GridMeasure::from_bytes(28, 28, set.image(i)).unwrap();
        let b = GridMeasure::from_bytes(28, 28, set.image(i + 50)).unwrap();
        let t = Instant::now();
        let s = solve(&a, &b, &cost).unwrap();
        times.push(t.elapsed().as_secs_f64() * 1e3);
        refined += s.refined as usize;
        if i < 5 {
            println!(
                "w2 {:.4} pivots {} refined {}",
                s.distance, s.pivots, s.refined
            );
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "median {:.2} ms, max {:.2} ms, refined {}/40",
        times[20], times[39], refined
    );
}
