use clap::{Parser, Subcommand, ValueEnum};
use kenn::data::cache::sha256_file;
use kenn::data::idx::{encode_images, encode_labels, write_idx};
use kenn::data::pairs::combos;
use kenn::data::synth::synth_digits;
use kenn::data::{
    label_pairs, load_idx_images, load_labeled, read_dataset, sample_pairs, split_dataset,
    write_dataset, DatasetMeta, ImageSet, PairDataset, PairError, PairRecord, SourceFile, Split,
};
use kenn::downstream::{
    bench_backend, isomap_embed, pairwise_matrix, Backend, DistanceMatrix, DownstreamError,
};
use kenn::measures::{GridMeasure, GroundCost};
use kenn::models::{Model, ModelKind};
use kenn::train::checkpoint::{load_model, save_model};
use kenn::train::report::{
    losses_rows, metrics_row, scatter_rows, upsert_rows, weights_rows, LOSSES_HEADER,
    METRICS_HEADER, SCATTER_HEADER, WEIGHTS_HEADER,
};
use kenn::train::{
    evaluate, export_weights, init_seed, prepare, train_with, TrainConfig, TrainData, TrainError,
};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

/// Learned Wasserstein-2 surrogates: data generation, training, evaluation
/// and pairwise-distance tooling.
#[derive(Parser)]
#[command(name = "kenn", version)]
struct Cli {
    /// Worker threads for pair labeling and pairwise matrices (0 = all cores).
    #[arg(long, global = true, env = "KENN_WORKERS", default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample class-stratified pairs and label them with exact W2.
    GenData {
        /// IDX image file.
        #[arg(long)]
        images: PathBuf,
        /// IDX label file.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 1000)]
        pairs_per_combo: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV; metadata goes to `<out>.meta`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and keep the best-validation checkpoint.
    Train {
        /// Dataset CSV written by gen-data.
        #[arg(long)]
        dataset: PathBuf,
        /// Image file; defaults to the path recorded in the dataset metadata.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: KindArg,
        #[arg(long, default_value_t = 2000)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Validate every this many epochs.
        #[arg(long, default_value_t = 5)]
        eval_every: usize,
        /// Block-average images by this factor before encoding (1 = full resolution).
        #[arg(long, default_value_t = 1)]
        downscale: usize,
        /// Output directory for `<model>.ckpt` and `losses.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Test metrics, scatter data and learned weights of a checkpoint.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output directory for `metrics.csv`, `scatter.csv` and `weights.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pairwise distance matrix over the first `count` images.
    Pairwise {
        #[arg(long)]
        items: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, value_enum, default_value_t = BackendArg::Exact)]
        backend: BackendArg,
        /// Required for the surrogate backend.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Isomap embedding of a distance matrix.
    Embed {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-pair latency of exact W2 and/or a surrogate.
    Bench {
        #[arg(long)]
        items: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, value_enum, default_value_t = BenchArg::Compare)]
        backend: BenchArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Write a synthetic digit set as IDX files (a stand-in when MNIST is unavailable).
    SynthDigits {
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_images: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Naive,
    Deepkenn,
    Odekenn,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Naive => ModelKind::Naive,
            KindArg::Deepkenn => ModelKind::DeepKenn,
            KindArg::Odekenn => ModelKind::OdeKenn,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Exact,
    Surrogate,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchArg {
    Exact,
    Surrogate,
    Compare,
}

/// Failure classes, one exit code each.
enum Fail {
    Input(String),
    Data(String),
    Numeric(String),
}

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Input(_) => 2,
            Fail::Data(_) => 3,
            Fail::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Fail::Input(m) | Fail::Data(m) | Fail::Numeric(m) => m,
        }
    }
}

fn input(e: impl std::fmt::Display) -> Fail {
    Fail::Input(e.to_string())
}

fn io_fail(path: &Path) -> impl FnOnce(std::io::Error) -> Fail + '_ {
    move |e| Fail::Input(format!("{}: {e}", path.display()))
}

fn pair_fail(e: PairError) -> Fail {
    match e {
        PairError::Solver { .. } | PairError::Pool(_) => Fail::Data(e.to_string()),
        _ => Fail::Input(e.to_string()),
    }
}

fn train_fail(e: TrainError) -> Fail {
    match e {
        TrainError::NonFinite { .. } => Fail::Numeric(e.to_string()),
        TrainError::Model(kenn::models::ModelError::TrajectoryBlowUp { .. }) => {
            Fail::Numeric(e.to_string())
        }
        _ => Fail::Input(e.to_string()),
    }
}

fn downstream_fail(e: DownstreamError) -> Fail {
    match e {
        DownstreamError::Pair { .. } => Fail::Data(e.to_string()),
        _ => Fail::Input(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
        {
            eprintln!("error: could not size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.cmd {
        Cmd::GenData {
            images,
            labels,
            pairs_per_combo,
            seed,
            out,
        } => gen_data(&images, &labels, pairs_per_combo, seed, &out),
        Cmd::Train {
            dataset,
            images,
            model,
            epochs,
            lr,
            batch,
            seed,
            eval_every,
            downscale,
            out,
        } => {
            let cfg = TrainConfig {
                kind: model.into(),
                lr,
                batch,
                epochs,
                seed,
                eval_every,
            };
            cmd_train(&dataset, images.as_deref(), &cfg, downscale, &out)
        }
        Cmd::Eval {
            dataset,
            images,
            checkpoint,
            split,
            out,
        } => cmd_eval(&dataset, images.as_deref(), &checkpoint, split, &out),
        Cmd::Pairwise {
            items,
            count,
            backend,
            checkpoint,
            out,
        } => cmd_pairwise(&items, count, backend, checkpoint.as_deref(), &out),
        Cmd::Embed {
            matrix,
            k,
            dim,
            out,
        } => cmd_embed(&matrix, k, dim, &out),
        Cmd::Bench {
            items,
            count,
            backend,
            checkpoint,
            reps,
        } => cmd_bench(&items, count, backend, checkpoint.as_deref(), reps),
        Cmd::SynthDigits {
            per_class,
            seed,
            out_images,
            out_labels,
        } => cmd_synth(per_class, seed, &out_images, &out_labels),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn gen_data(images: &Path, labels: &Path, ppc: usize, seed: u64, out: &Path) -> Result<(), Fail> {
    let start = Instant::now();
    for p in [images, labels] {
        if !p.is_file() {
            return Err(Fail::Input(format!("{}: no such file", p.display())));
        }
    }
    let (set, labs) = load_labeled(images, labels).map_err(input)?;
    let cost = GroundCost::new(set.height, set.width).map_err(input)?;
    let sampled = sample_pairs(&labs, ppc, seed).map_err(pair_fail)?;
    let mut records: Vec<PairRecord> = Vec::with_capacity(sampled.len());
    for (a, b) in combos() {
        let group: Vec<PairRecord> = sampled
            .iter()
            .filter(|r| r.combo() == (a, b))
            .copied()
            .collect();
        let t = Instant::now();
        records.extend(label_pairs(&group, &set, &cost, 0).map_err(pair_fail)?);
        eprintln!(
            "combo ({a}, {b}): {} pairs in {:.1?}",
            group.len(),
            t.elapsed()
        );
    }
    let splits = split_dataset(&records, seed).map_err(pair_fail)?;
    let source = |p: &Path| -> Result<SourceFile, Fail> {
        Ok(SourceFile {
            path: p.display().to_string(),
            sha256: sha256_file(p).map_err(input)?,
        })
    };
    let ds = PairDataset {
        records,
        splits,
        meta: DatasetMeta {
            seed,
            height: set.height,
            width: set.width,
            pairs_per_combo: ppc,
            images: source(images)?,
            labels: source(labels)?,
        },
    };
    write_dataset(out, &ds).map_err(input)?;
    eprintln!(
        "wrote {} pairs ({} train / {} val / {} test) to {} in {:.1?}",
        ds.records.len(),
        ds.count(Split::Train),
        ds.count(Split::Val),
        ds.count(Split::Test),
        out.display(),
        start.elapsed()
    );
    Ok(())
}

/// Loads a dataset and its images, checking the image file's hash.
fn load_data(dataset: &Path, images: Option<&Path>) -> Result<(PairDataset, ImageSet), Fail> {
    let ds = read_dataset(dataset).map_err(input)?;
    let path = images
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&ds.meta.images.path));
    let sha = sha256_file(&path).map_err(input)?;
    if !ds.meta.images.sha256.is_empty() && sha != ds.meta.images.sha256 {
        return Err(Fail::Input(format!(
            "{}: sha256 {sha} does not match the dataset metadata ({})",
            path.display(),
            ds.meta.images.sha256
        )));
    }
    let set = load_idx_images(&path).map_err(input)?;
    Ok((ds, set))
}

fn cmd_train(
    dataset: &Path,
    images: Option<&Path>,
    cfg: &TrainConfig,
    downscale: usize,
    out: &Path,
) -> Result<(), Fail> {
    cfg.validate().map_err(train_fail)?;
    if downscale == 0 {
        return Err(Fail::Input("--downscale must be at least 1".into()));
    }
    let (ds, set) = load_data(dataset, images)?;
    let data: TrainData = prepare(&ds, &set, downscale).map_err(train_fail)?;
    fs::create_dir_all(out).map_err(io_fail(out))?;
    let model = Model::<f32>::new(cfg.kind, data.arch(), init_seed(cfg.seed, cfg.kind));
    println!("params: {}", model.param_count());
    let start = Instant::now();
    let outcome = train_with(cfg, &data, model, |p| {
        eprintln!(
            "epoch {:>5}  train {:.4e}  val {:.4e}  ({:.0?})",
            p.epoch,
            p.train_mse,
            p.val_mse,
            start.elapsed()
        );
    })
    .map_err(train_fail)?;
    let ckpt = out.join(format!("{}.ckpt", cfg.kind));
    save_model(&ckpt, &outcome.best).map_err(input)?;
    let losses = out.join("losses.csv");
    upsert_rows(
        &losses,
        LOSSES_HEADER,
        &[(2, cfg.kind.name())],
        &losses_rows(cfg.kind, &outcome.curve),
    )
    .map_err(io_fail(&losses))?;
    println!(
        "best epoch {} (val mse {:.4e}); checkpoint {}",
        outcome.best_epoch,
        outcome.best_val,
        ckpt.display()
    );
    Ok(())
}

fn cmd_eval(
    dataset: &Path,
    images: Option<&Path>,
    checkpoint: &Path,
    split: Split,
    out: &Path,
) -> Result<(), Fail> {
    let model = load_model(checkpoint).map_err(input)?;
    let (ds, set) = load_data(dataset, images)?;
    let side = model.arch().side;
    if side == 0 || ds.meta.height % side != 0 || ds.meta.height != ds.meta.width {
        return Err(Fail::Input(format!(
            "checkpoint expects {side}x{side} inputs, dataset grid is {}x{}",
            ds.meta.height, ds.meta.width
        )));
    }
    let data = prepare(&ds, &set, ds.meta.height / side).map_err(train_fail)?;
    let report = evaluate(&model, &data.bank, data.split(split)).map_err(train_fail)?;
    fs::create_dir_all(out).map_err(io_fail(out))?;
    let kind = model.kind();
    let write = |name: &str, header: &str, key: &[(usize, &str)], body: &str| -> Result<(), Fail> {
        let p = out.join(name);
        upsert_rows(&p, header, key, body).map_err(io_fail(&p))
    };
    write(
        "metrics.csv",
        METRICS_HEADER,
        &[(0, kind.name()), (1, split.as_str())],
        &metrics_row(kind, split.as_str(), &report),
    )?;
    write(
        "scatter.csv",
        SCATTER_HEADER,
        &[(2, kind.name())],
        &scatter_rows(kind, &report),
    )?;
    if let Ok(w) = export_weights(&model) {
        write(
            "weights.csv",
            WEIGHTS_HEADER,
            &[(0, kind.name())],
            &weights_rows(kind, &w),
        )?;
    }
    println!(
        "{kind} {split}: mse {:.4e}  mae {:.4e}  rel_mae {:.2}%  ({} pairs)",
        report.mse,
        report.mae,
        100.0 * report.rel_mae,
        report.rows.len()
    );
    Ok(())
}

/// The first `count` images as measures, block-averaged by `factor`.
fn load_items(path: &Path, count: usize, factor: usize) -> Result<Vec<GridMeasure>, Fail> {
    let set = load_idx_images(path).map_err(input)?;
    if count > set.len() {
        return Err(Fail::Input(format!(
            "{} holds {} images, {count} requested",
            path.display(),
            set.len()
        )));
    }
    let set = if factor > 1 {
        set.downscale(factor)
    } else {
        set
    };
    (0..count)
        .map(|i| {
            GridMeasure::from_bytes(set.height, set.width, set.image(i))
                .map_err(|e| Fail::Input(format!("image {i}: {e}")))
        })
        .collect()
}

fn surrogate_for(checkpoint: Option<&Path>, items: &Path) -> Result<(Model<f32>, usize), Fail> {
    let path =
        checkpoint.ok_or_else(|| Fail::Input("the surrogate backend needs --checkpoint".into()))?;
    let model = load_model(path).map_err(input)?;
    let set = load_idx_images(items).map_err(input)?;
    let side = model.arch().side;
    if set.height != set.width || side == 0 || set.height % side != 0 {
        return Err(Fail::Input(format!(
            "checkpoint expects {side}x{side} inputs, images are {}x{}",
            set.height, set.width
        )));
    }
    Ok((model, set.height / side))
}

fn cmd_pairwise(
    items: &Path,
    count: usize,
    backend: BackendArg,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<(), Fail> {
    let start = Instant::now();
    let matrix = match backend {
        BackendArg::Exact => {
            let m = load_items(items, count, 1)?;
            let (h, w) = m.first().map_or((1, 1), |x| (x.height(), x.width()));
            let cost = GroundCost::new(h, w).map_err(input)?;
            pairwise_matrix(&m, &Backend::Exact(&cost)).map_err(downstream_fail)?
        }
        BackendArg::Surrogate => {
            let (model, factor) = surrogate_for(checkpoint, items)?;
            let m = load_items(items, count, factor)?;
            let id = checkpoint
                .map(|p| p.display().to_string())
                .unwrap_or_default();
            pairwise_matrix(
                &m,
                &Backend::Surrogate {
                    model: &model,
                    checkpoint: &id,
                },
            )
            .map_err(downstream_fail)?
        }
    };
    fs::write(out, matrix.to_csv()).map_err(io_fail(out))?;
    eprintln!(
        "{} distances in {:.2?}; wrote {}",
        count * count.saturating_sub(1) / 2,
        start.elapsed(),
        out.display()
    );
    Ok(())
}

fn cmd_embed(matrix: &Path, k: usize, dim: usize, out: &Path) -> Result<(), Fail> {
    let text = fs::read_to_string(matrix).map_err(io_fail(matrix))?;
    let d = DistanceMatrix::from_csv(&text)
        .map_err(|e| Fail::Input(format!("{}: {e}", matrix.display())))?;
    let e = isomap_embed(&d, k, dim).map_err(downstream_fail)?;
    if e.dim < dim {
        eprintln!(
            "only {} positive eigenvalues; embedding has {} dimensions",
            e.dim, e.dim
        );
    }
    if e.negative_mass > 0.0 {
        eprintln!(
            "dropped negative eigenvalues: {:.3}% of spectral mass",
            100.0 * e.negative_mass
        );
    }
    fs::write(out, e.to_csv()).map_err(io_fail(out))?;
    Ok(())
}

fn cmd_bench(
    items: &Path,
    count: usize,
    backend: BenchArg,
    checkpoint: Option<&Path>,
    reps: usize,
) -> Result<(), Fail> {
    let mut exact = None;
    if backend != BenchArg::Surrogate {
        let m = load_items(items, count, 1)?;
        let (h, w) = m.first().map_or((1, 1), |x| (x.height(), x.width()));
        let cost = GroundCost::new(h, w).map_err(input)?;
        let s = bench_backend(&m, &Backend::Exact(&cost), reps).map_err(downstream_fail)?;
        println!(
            "exact: median {:.3e} s/pair, p95 {:.3e} s/pair ({} pairs)",
            s.median_s, s.p95_s, s.pairs
        );
        exact = Some(s);
    }
    if backend != BenchArg::Exact {
        let (model, factor) = surrogate_for(checkpoint, items)?;
        let m = load_items(items, count, factor)?;
        let id = checkpoint
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let s = bench_backend(
            &m,
            &Backend::Surrogate {
                model: &model,
                checkpoint: &id,
            },
            reps,
        )
        .map_err(downstream_fail)?;
        println!(
            "surrogate ({}): median {:.3e} s/pair, p95 {:.3e} s/pair ({} pairs)",
            model.kind(),
            s.median_s,
            s.p95_s,
            s.pairs
        );
        if let Some(e) = exact {
            println!("speedup: {:.1}x", e.median_s / s.median_s);
        }
    }
    Ok(())
}

fn cmd_synth(
    per_class: usize,
    seed: u64,
    out_images: &Path,
    out_labels: &Path,
) -> Result<(), Fail> {
    if per_class == 0 {
        return Err(Fail::Input("--per-class must be positive".into()));
    }
    let (set, labels) = synth_digits(per_class, seed);
    write_idx(out_images, &encode_images(&set)).map_err(io_fail(out_images))?;
    write_idx(out_labels, &encode_labels(&labels)).map_err(io_fail(out_labels))?;
    eprintln!("wrote {} images to {}", set.len(), out_images.display());
    Ok(())
}
