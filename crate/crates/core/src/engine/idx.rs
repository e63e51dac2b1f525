//! Reader for the IDX format used by MNIST-style datasets.

use std::fs;
use std::io::{self, Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};

use super::data::{Dataset, Split, Targets};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an image file and a label file into one dataset, pixels scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = fs::read(images_path.as_ref())?;
    let labels = fs::read(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (n_images, pixels_per_image, pixels) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != n_images {
        return Err(Error::Consistency(format!("{n_images} images but {} labels", labels.len())));
    }
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1).max(10);
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Dataset::new(features, pixels_per_image, Targets::Classes { labels, num_classes }, Split::Train)
}

fn read_magic(cur: &mut Cursor<&[u8]>, expected: u32) -> Result<()> {
    let magic = cur.read_u32::<BigEndian>()?;
    if magic != expected {
        return Err(Error::Format(format!("bad IDX magic 0x{magic:08x}, expected 0x{expected:08x}")));
    }
    Ok(())
}

fn parse_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut cur = Cursor::new(bytes);
    read_magic(&mut cur, IMAGES_MAGIC)?;
    let n = cur.read_u32::<BigEndian>()? as usize;
    let rows = cur.read_u32::<BigEndian>()? as usize;
    let cols = cur.read_u32::<BigEndian>()? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format("IDX image dimensions must be positive".into()));
    }
    let mut pixels = vec![0u8; n * rows * cols];
    cur.read_exact(&mut pixels).map_err(truncated)?;
    Ok((n, rows * cols, pixels))
}

fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut cur = Cursor::new(bytes);
    read_magic(&mut cur, LABELS_MAGIC)?;
    let n = cur.read_u32::<BigEndian>()? as usize;
    let mut raw = vec![0u8; n];
    cur.read_exact(&mut raw).map_err(truncated)?;
    Ok(raw.into_iter().map(usize::from).collect())
}

fn truncated(e: io::Error) -> Error {
    Error::Io(io::Error::new(e.kind(), "truncated IDX file"))
}

/// Encodes images and labels in IDX form. Used for fixtures.
pub fn encode_idx(images: &[Vec<u8>], rows: u32, cols: u32, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&rows.to_be_bytes());
    img.extend_from_slice(&cols.to_be_bytes());
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let images: Vec<Vec<u8>> = (0..4u8).map(|i| vec![i * 60; 784]).collect();
        encode_idx(&images, 28, 28, &[0, 1, 2, 9])
    }

    #[test]
    fn parses_fixture() {
        let (img, lab) = fixture();
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.n_features, 784);
        assert_eq!(ds.row(0)[0], 0.0);
        assert!((ds.row(3)[783] - 180.0 / 255.0).abs() < 1e-15);
        assert_eq!(ds.targets.output_dim(), 10);
    }

    #[test]
    fn wrong_magic() {
        let (mut img, lab) = fixture();
        img[..4].copy_from_slice(&0u32.to_be_bytes());
        assert!(matches!(parse_idx(&img, &lab), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file() {
        let (img, lab) = fixture();
        assert!(matches!(parse_idx(&img[..img.len() - 10], &lab), Err(Error::Io(_))));
        assert!(matches!(parse_idx(&img[..6], &lab), Err(Error::Io(_))));
    }

    #[test]
    fn count_mismatch() {
        let images: Vec<Vec<u8>> = (0..4u8).map(|_| vec![0; 4]).collect();
        let (img, lab) = encode_idx(&images, 2, 2, &[0, 1, 2]);
        assert!(matches!(parse_idx(&img, &lab), Err(Error::Consistency(_))));
    }

    #[test]
    fn loads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture();
        std::fs::write(dir.path().join("i.idx"), img).unwrap();
        std::fs::write(dir.path().join("l.idx"), lab).unwrap();
        let ds = load_idx(dir.path().join("i.idx"), dir.path().join("l.idx")).unwrap();
        assert_eq!(ds.len(), 4);
        assert!(load_idx(dir.path().join("missing"), dir.path().join("l.idx")).is_err());
    }
}
