//! Big-endian IDX containers (the MNIST distribution format).

use std::fs;
use std::io::{self, Write};
use std::path::Path;
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

/// A stack of equally sized byte images, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    pixels: Vec<u8>,
}

impl ImageSet {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len() % (height * width), 0, "partial image");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / (self.height * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Sum-pools every image by `factor x factor` blocks, rescaling so the
    /// brightest block maps to 255. Trailing rows/cols that do not fill a
    /// block are dropped.
    pub fn downscale(&self, factor: usize) -> ImageSet {
        if factor <= 1 {
            return self.clone();
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Vec::with_capacity(self.len() * h * w);
        let max = (factor * factor * 255) as f64;
        for i in 0..self.len() {
            let img = self.image(i);
            for r in 0..h {
                for c in 0..w {
                    let mut s = 0u32;
                    for dr in 0..factor {
                        for dc in 0..factor {
                            s += u32::from(img[(r * factor + dr) * self.width + c * factor + dc]);
                        }
                    }
                    out.push((f64::from(s) * 255.0 / max).round() as u8);
                }
            }
        }
        ImageSet::new(h, w, out)
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            needed: offset + 4,
            have: bytes.len(),
        })
}

pub fn parse_images(bytes: &[u8]) -> Result<ImageSet, IdxError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(IdxError::BadMagic {
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    Ok(ImageSet::new(rows, cols, bytes[16..needed].to_vec()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(IdxError::BadMagic {
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_idx_images(path: &Path) -> Result<ImageSet, IdxError> {
    parse_images(&read(path)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    parse_labels(&read(path)?)
}

/// Loads an image file and its label file, checking that the counts agree.
pub fn load_labeled(images: &Path, labels: &Path) -> Result<(ImageSet, Vec<u8>), IdxError> {
    let imgs = load_idx_images(images)?;
    let labs = load_idx_labels(labels)?;
    if imgs.len() != labs.len() {
        return Err(IdxError::CountMismatch {
            images: imgs.len(),
            labels: labs.len(),
        });
    }
    Ok((imgs, labs))
}

pub fn encode_images(set: &ImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + set.pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend_from_slice(&(set.height as u32).to_be_bytes());
    out.extend_from_slice(&(set.width as u32).to_be_bytes());
    out.extend_from_slice(&set.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ten_images() -> ImageSet {
        let pixels: Vec<u8> = (0..10 * 28 * 28).map(|i| (i % 251) as u8).collect();
        ImageSet::new(28, 28, pixels)
    }

    #[test]
    fn round_trips_ten_images() {
        let set = ten_images();
        let parsed = parse_images(&encode_images(&set)).unwrap();
        assert_eq!(parsed.len(), 10);
        assert_eq!(parsed, set);
        assert_eq!(parsed.image(3)[0], set.image(3)[0]);
    }

    #[test]
    fn header_is_big_endian() {
        let bytes = encode_labels(&[1, 2, 3]);
        assert_eq!(&bytes[..8], &[0, 0, 8, 1, 0, 0, 0, 3]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode_images(&ten_images());
        bytes[3] = 0x02;
        assert!(matches!(
            parse_images(&bytes),
            Err(IdxError::BadMagic { found: 0x802, .. })
        ));
        assert!(matches!(
            parse_labels(&encode_images(&ten_images())),
            Err(IdxError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_is_rejected() {
        let bytes = encode_images(&ten_images());
        assert!(matches!(
            parse_images(&bytes[..bytes.len() - 1]),
            Err(IdxError::Truncated { .. })
        ));
        assert!(matches!(
            parse_labels(&[0, 0]),
            Err(IdxError::Truncated { .. })
        ));
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_idx(&ip, &encode_images(&ten_images())).unwrap();
        write_idx(&lp, &encode_labels(&[0; 9])).unwrap();
        assert!(matches!(
            load_labeled(&ip, &lp),
            Err(IdxError::CountMismatch {
                images: 10,
                labels: 9
            })
        ));
    }

    #[test]
    fn downscale_sums_blocks() {
        let set = ImageSet::new(2, 2, vec![255, 255, 255, 255, 0, 0, 0, 0]);
        let d = set.downscale(2);
        assert_eq!((d.height, d.width, d.len()), (1, 1, 2));
        assert_eq!(d.pixels(), &[255, 0]);
    }
}
