//! On-disk dataset cache: a CSV of labeled pairs plus a key-value sidecar.
//!
//! ```text
//! idx_a,idx_b,label_a,label_b,split,w2
//! 12,907,0,0,train,2.41763306
//! ```
//!
//! `w2` is printed with 9 significant digits. The sidecar lives next to the
//! CSV with a `.meta` suffix appended.

use super::pairs::{PairRecord, Split};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "idx_a,idx_b,label_a,label_b,split,w2";
/// How images enter both the OT solver and the encoder.
pub const NORMALIZATION: &str = "sum-to-one measure; the encoder sees the same weights";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: missing metadata key `{key}`")]
    MissingKey { path: PathBuf, key: String },
    #[error("{path}: unsupported format version {found}")]
    Version { path: PathBuf, found: u32 },
}

/// Provenance of an input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFile {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce or audit a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub pairs_per_combo: usize,
    pub images: SourceFile,
    pub labels: SourceFile,
}

/// Labeled, split pairs plus their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub records: Vec<PairRecord>,
    pub splits: Vec<Split>,
    pub meta: DatasetMeta,
}

impl PairDataset {
    /// Records of one split, in file order.
    pub fn split(&self, which: Split) -> Vec<PairRecord> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(r, _)| *r)
            .collect()
    }

    pub fn count(&self, which: Split) -> usize {
        self.splits.iter().filter(|s| **s == which).count()
    }
}

/// Hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String, CacheError> {
    let bytes = fs::read(path).map_err(|source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// `x` with 9 significant digits in the shortest of fixed or scientific
/// notation, trailing zeros removed (the C `%.9g` convention).
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..9).contains(&exp) {
        trim(&format!("{x:.*}", (8 - exp) as usize))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    }
}

pub fn meta_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// CSV body for `records`; byte-identical for identical inputs.
pub fn records_csv(records: &[PairRecord], splits: &[Split]) -> String {
    let mut out = String::with_capacity(32 * records.len() + 64);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (r, s) in records.iter().zip(splits) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.idx_a,
            r.idx_b,
            r.label_a,
            r.label_b,
            s,
            fmt_sig9(r.w2)
        );
    }
    out
}

fn meta_text(ds: &PairDataset) -> String {
    let m = &ds.meta;
    format!(
        "format_version={FORMAT_VERSION}\nseed={}\ngrid={}x{}\npairs_per_combo={}\nrecords={}\n\
         normalization={NORMALIZATION}\nimages={}\nimages_sha256={}\nlabels={}\nlabels_sha256={}\n",
        m.seed,
        m.height,
        m.width,
        m.pairs_per_combo,
        ds.records.len(),
        m.images.path,
        m.images.sha256,
        m.labels.path,
        m.labels.sha256
    )
}

/// Writes the CSV and its `.meta` sidecar.
pub fn write_dataset(path: &Path, ds: &PairDataset) -> Result<(), CacheError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| CacheError::Io { path: p, source }
    };
    fs::write(path, records_csv(&ds.records, &ds.splits)).map_err(io(path))?;
    let mp = meta_path(path);
    fs::write(&mp, meta_text(ds)).map_err(io(&mp))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CacheError {
    CacheError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_meta(path: &Path, text: &str) -> Result<DatasetMeta, CacheError> {
    let mut kv = std::collections::HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, n + 1, "expected key=value"))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| {
        kv.get(key).cloned().ok_or_else(|| CacheError::MissingKey {
            path: path.to_path_buf(),
            key: key.to_string(),
        })
    };
    let num = |key: &str| -> Result<u64, CacheError> {
        get(key)?
            .parse()
            .map_err(|_| parse_err(path, 0, format!("`{key}` is not an integer")))
    };
    let version = num("format_version")? as u32;
    if version != FORMAT_VERSION {
        return Err(CacheError::Version {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let grid = get("grid")?;
    let (h, w) = grid
        .split_once('x')
        .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
        .ok_or_else(|| parse_err(path, 0, format!("bad grid `{grid}`")))?;
    Ok(DatasetMeta {
        seed: num("seed")?,
        height: h,
        width: w,
        pairs_per_combo: num("pairs_per_combo")? as usize,
        images: SourceFile {
            path: get("images")?,
            sha256: get("images_sha256")?,
        },
        labels: SourceFile {
            path: get("labels")?,
            sha256: get("labels_sha256")?,
        },
    })
}

/// Reads a CSV and its sidecar back.
pub fn read_dataset(path: &Path) -> Result<PairDataset, CacheError> {
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|source| CacheError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let text = read(path)?;
    let mp = meta_path(path);
    let meta = parse_meta(&mp, &read(&mp)?)?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(parse_err(path, 1, format!("header must be `{CSV_HEADER}`")));
    }
    let mut records = Vec::new();
    let mut splits = Vec::new();
    for (n, line) in lines.enumerate() {
        let ln = n + 2;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(parse_err(
                path,
                ln,
                format!("expected 6 fields, found {}", f.len()),
            ));
        }
        let int = |s: &str, what: &str| -> Result<usize, CacheError> {
            s.parse()
                .map_err(|_| parse_err(path, ln, format!("bad {what} `{s}`")))
        };
        let label = |s: &str, what: &str| -> Result<u8, CacheError> {
            match s.parse::<u8>() {
                Ok(v) if v < 10 => Ok(v),
                _ => Err(parse_err(path, ln, format!("bad {what} `{s}`"))),
            }
        };
        let w2: f64 = f[5]
            .parse()
            .map_err(|_| parse_err(path, ln, format!("bad w2 `{}`", f[5])))?;
        if !(w2 >= 0.0) {
            return Err(parse_err(
                path,
                ln,
                format!("w2 must be nonnegative, got {w2}"),
            ));
        }
        let rec = PairRecord {
            idx_a: int(f[0], "idx_a")?,
            idx_b: int(f[1], "idx_b")?,
            label_a: label(f[2], "label_a")?,
            label_b: label(f[3], "label_b")?,
            w2,
        };
        if rec.idx_a == rec.idx_b || rec.label_a > rec.label_b {
            return Err(parse_err(
                path,
                ln,
                "pair must have idx_a != idx_b and label_a <= label_b",
            ));
        }
        records.push(rec);
        splits.push(f[4].parse().map_err(|e: String| parse_err(path, ln, e))?);
    }
    Ok(PairDataset {
        records,
        splits,
        meta,
    })
}
