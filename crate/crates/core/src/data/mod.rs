//! Dataset construction: IDX ingestion, class-stratified pair sampling,
//! exact W2 labeling, splits and the on-disk cache.

pub mod cache;
pub mod idx;
pub mod pairs;
pub mod synth;

pub use cache::{
    fmt_sig9, read_dataset, write_dataset, CacheError, DatasetMeta, PairDataset, SourceFile,
};
pub use idx::{load_idx_images, load_idx_labels, load_labeled, IdxError, ImageSet};
pub use pairs::{label_pairs, sample_pairs, split_dataset, PairError, PairRecord, Split};
