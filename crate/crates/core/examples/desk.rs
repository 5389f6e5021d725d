//! Reduced-scale comparison of the three models on synthetic digits.
//!
//! cargo run --release --example desk -- [seed] [epochs] [pairs_per_combo]

use kenn::data::synth::synth_digits;
use kenn::data::{label_pairs, sample_pairs, split_dataset, DatasetMeta, PairDataset, SourceFile};
use kenn::measures::GroundCost;
use kenn::models::{Model, ModelKind};
use kenn::train::{evaluate, init_seed, prepare, train_with, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let seed = args.first().copied().unwrap_or(0);
    let epochs = args.get(1).copied().unwrap_or(300) as usize;
    let ppc = args.get(2).copied().unwrap_or(100) as usize;

    let t = Instant::now();
    let (images, labels) = synth_digits(100, seed);
    let records = sample_pairs(&labels, ppc, seed).unwrap();
    let records = label_pairs(&records, &images, &GroundCost::new(28, 28).unwrap(), 0).unwrap();
    let splits = split_dataset(&records, seed).unwrap();
    let src = SourceFile {
        path: "synthetic".into(),
        sha256: String::new(),
    };
    let ds = PairDataset {
        records,
        splits,
        meta: DatasetMeta {
            seed,
            height: 28,
            width: 28,
            pairs_per_combo: ppc,
            images: src.clone(),
            labels: src,
        },
    };
    let data = prepare(&ds, &images, 2).unwrap();
    eprintln!("labeled {} pairs in {:.1?}", ds.records.len(), t.elapsed());

    for kind in ModelKind::ALL {
        let t = Instant::now();
        let cfg = TrainConfig {
            epochs,
            seed,
            eval_every: 1,
            ..TrainConfig::new(kind)
        };
        let model = Model::<f32>::new(kind, data.arch(), init_seed(seed, kind));
        let out = train_with(&cfg, &data, model, |p| {
            if p.epoch % 25 == 0 {
                eprintln!(
                    "  {kind} epoch {} train {:.3e} val {:.3e}",
                    p.epoch, p.train_mse, p.val_mse
                );
            }
        })
        .unwrap();
        let test = evaluate(&out.best, &data.bank, &data.test).unwrap();
        println!(
            "{kind}: best epoch {} val {:.4e} test mse {:.4e} rel_mae {:.4} ({:.0?})",
            out.best_epoch,
            out.best_val,
            test.mse,
            test.rel_mae,
            t.elapsed()
        );
    }
}
