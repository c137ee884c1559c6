//! Parser for the IDX binary format (the MNIST container): big-endian magic
//! `0x0000 0x08 <ndims>`, big-endian u32 dims, then raw u8 payload.

use std::io::Read;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("io error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad idx magic {0:#010x}")]
    BadMagic(u32),
    #[error("idx payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

pub const MAGIC_IMAGES: u32 = 0x0000_0803;
pub const MAGIC_LABELS: u32 = 0x0000_0801;

/// u8 images: `count` images of `rows x cols` pixels, row-major.
#[derive(Debug, Clone)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    let magic = read_be(bytes, 0)?;
    if magic != MAGIC_IMAGES {
        return Err(IdxError::BadMagic(magic));
    }
    let count = read_be(bytes, 4)? as usize;
    let rows = read_be(bytes, 8)? as usize;
    let cols = read_be(bytes, 12)? as usize;
    let expected = count * rows * cols;
    let payload = &bytes[16.min(bytes.len())..];
    if payload.len() < expected {
        return Err(IdxError::Truncated { expected, got: payload.len() });
    }
    Ok(IdxImages { count, rows, cols, pixels: payload[..expected].to_vec() })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let magic = read_be(bytes, 0)?;
    if magic != MAGIC_LABELS {
        return Err(IdxError::BadMagic(magic));
    }
    let count = read_be(bytes, 4)? as usize;
    let payload = &bytes[8.min(bytes.len())..];
    if payload.len() < count {
        return Err(IdxError::Truncated { expected: count, got: payload.len() });
    }
    Ok(payload[..count].to_vec())
}

pub fn load_pair(images_path: &Path, labels_path: &Path) -> Result<(IdxImages, Vec<u8>), IdxError> {
    let images = parse_images(&read_file(images_path)?)?;
    let labels = parse_labels(&read_file(labels_path)?)?;
    if images.count != labels.len() {
        return Err(IdxError::CountMismatch { images: images.count, labels: labels.len() });
    }
    Ok((images, labels))
}

fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| IdxError::Io { path: path.display().to_string(), source })?;
    Ok(buf)
}

fn read_be(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    if bytes.len() < at + 4 {
        return Err(IdxError::Truncated { expected: at + 4, got: bytes.len() });
    }
    Ok(u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_images(count: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
        b.extend_from_slice(&count.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        for i in 0..(count * rows * cols) {
            b.push((i % 251) as u8);
        }
        b
    }

    #[test]
    fn parses_handcrafted_ten_by_four_by_four() {
        let imgs = parse_images(&fixture_images(10, 4, 4)).unwrap();
        assert_eq!((imgs.count, imgs.rows, imgs.cols), (10, 4, 4));
        assert_eq!(imgs.pixels.len(), 10 * 16);
        assert_eq!(imgs.pixels[3], 3);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut b = fixture_images(1, 2, 2);
        b[3] = 0x99;
        assert!(matches!(parse_images(&b), Err(IdxError::BadMagic(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut b = fixture_images(2, 4, 4);
        b.truncate(b.len() - 5);
        assert!(matches!(parse_images(&b), Err(IdxError::Truncated { .. })));
    }

    #[test]
    fn labels_round_trip_and_count_mismatch() {
        let mut lb = Vec::new();
        lb.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
        lb.extend_from_slice(&3u32.to_be_bytes());
        lb.extend_from_slice(&[7, 1, 4]);
        assert_eq!(parse_labels(&lb).unwrap(), vec![7, 1, 4]);

        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("images");
        let lp = dir.path().join("labels");
        std::fs::write(&ip, fixture_images(2, 2, 2)).unwrap();
        std::fs::write(&lp, &lb).unwrap();
        assert!(matches!(
            load_pair(&ip, &lp),
            Err(IdxError::CountMismatch { images: 2, labels: 3 })
        ));
    }
}
