//! IDX container format (the MNIST distribution format).
//!
//! Layout: a big-endian u32 magic (0x00000803 for ubyte images with 3 dims,
//! 0x00000801 for ubyte labels with 1 dim), one big-endian u32 per
//! dimension, then the raw unsigned bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use crate::data::{DataSplit, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(reader: &mut impl Read, what: &str) -> Result<u32> {
    reader.read_u32::<BigEndian>().map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::IdxTruncated(what.to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn read_payload(reader: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    reader.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::IdxTruncated(what.to_string())
        } else {
            Error::Io(e)
        }
    })?;
    Ok(buf)
}

fn read_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32(&mut r, "image magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::IdxBadMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = read_u32(&mut r, "image count")? as usize;
    let h = read_u32(&mut r, "image rows")? as usize;
    let w = read_u32(&mut r, "image cols")? as usize;
    let data = read_payload(&mut r, n * h * w, "image payload")?;
    Ok((n, h, w, data))
}

fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32(&mut r, "label magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::IdxBadMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_u32(&mut r, "label count")? as usize;
    read_payload(&mut r, n, "label payload")
}

/// Load an images/labels IDX pair into a split, scaling pixels by 1/255.
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<DataSplit> {
    let (n, h, w, pixels) = read_images(images_path)?;
    let labels = read_labels(labels_path)?;
    if labels.len() != n {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::MalformedFile(format!(
            "label {bad} out of range [0, {NUM_CLASSES})"
        )));
    }
    let data: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(DataSplit {
        images: Tensor::new(vec![n, h, w, 1], data)?,
        labels,
    })
}

/// Write a split's images back to IDX bytes (pixels rounded to u8).
pub fn write_idx_images(path: &Path, split: &DataSplit) -> Result<()> {
    let shape = split.images.shape();
    if shape[3] != 1 {
        return Err(Error::ShapeMismatch(
            "IDX image files hold single-channel images".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    w.write_u32::<BigEndian>(shape[0] as u32)?;
    w.write_u32::<BigEndian>(shape[1] as u32)?;
    w.write_u32::<BigEndian>(shape[2] as u32)?;
    let bytes: Vec<u8> = split
        .images
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<BigEndian>(LABELS_MAGIC)?;
    w.write_u32::<BigEndian>(labels.len() as u32)?;
    w.write_all(labels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, bytes: &[u8]) {
        std::fs::write(path, bytes).unwrap();
    }

    /// Hand-crafted 2-image 3x3 pair, built byte by byte from the layout.
    fn craft_pair(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let img = dir.join("imgs");
        let lbl = dir.join("lbls");
        let mut bytes = vec![0, 0, 8, 3]; // magic 0x00000803
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend((0u8..18).map(|i| i * 10));
        write_raw(&img, &bytes);

        let mut lbytes = vec![0, 0, 8, 1]; // magic 0x00000801
        lbytes.extend_from_slice(&2u32.to_be_bytes());
        lbytes.extend_from_slice(&[7u8, 1u8]);
        write_raw(&lbl, &lbytes);
        (img, lbl)
    }

    #[test]
    fn crafted_pair_round_trips_exact_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = craft_pair(dir.path());
        let split = load_idx_pair(&img, &lbl).unwrap();
        assert_eq!(split.images.shape(), &[2, 3, 3, 1]);
        assert_eq!(split.labels, vec![7, 1]);
        for (i, v) in split.images.data().iter().enumerate() {
            assert_eq!(*v, (i as u8 * 10) as f32 / 255.0);
        }
    }

    #[test]
    fn writing_and_reloading_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = craft_pair(dir.path());
        let split = load_idx_pair(&img, &lbl).unwrap();

        let img2 = dir.path().join("imgs2");
        let lbl2 = dir.path().join("lbls2");
        write_idx_images(&img2, &split).unwrap();
        write_idx_labels(&lbl2, &split.labels).unwrap();
        let reloaded = load_idx_pair(&img2, &lbl2).unwrap();
        assert_eq!(reloaded, split);
        // And the serialized bytes themselves round-trip.
        assert_eq!(std::fs::read(&img).unwrap(), std::fs::read(&img2).unwrap());
    }

    #[test]
    fn count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = craft_pair(dir.path());
        let lbl3 = dir.path().join("lbl3");
        let mut lbytes = vec![0, 0, 8, 1];
        lbytes.extend_from_slice(&3u32.to_be_bytes());
        lbytes.extend_from_slice(&[0u8, 1, 2]);
        write_raw(&lbl3, &lbytes);
        match load_idx_pair(&img, &lbl3) {
            Err(Error::IdxCountMismatch { images: 2, labels: 3 }) => {}
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty");
        write_raw(&empty, &[]);
        match load_idx_pair(&empty, &empty) {
            Err(Error::IdxTruncated(_)) => {}
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad");
        write_raw(&bad, &[0, 0, 9, 9, 0, 0, 0, 0]);
        match load_idx_pair(&bad, &bad) {
            Err(Error::IdxBadMagic { found, .. }) => assert_eq!(found, 0x0909),
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("trunc");
        let mut bytes = vec![0, 0, 8, 3];
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2, 3]); // 3 of 18 pixels
        write_raw(&img, &bytes);
        let lbl = dir.path().join("l");
        let mut lbytes = vec![0, 0, 8, 1];
        lbytes.extend_from_slice(&2u32.to_be_bytes());
        lbytes.extend_from_slice(&[0, 1]);
        write_raw(&lbl, &lbytes);
        match load_idx_pair(&img, &lbl) {
            Err(Error::IdxTruncated(_)) => {}
            other => panic!("expected truncation, got {other:?}"),
        }
    }
}
