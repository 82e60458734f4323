//! Converters producing grayscale IDX pairs from the native CIFAR-10 and
//! SVHN distribution formats, so the trainer has a single input format.
//!
//! CIFAR-10 arrives as the "binary version" (`data_batch_*.bin`,
//! `test_batch.bin`: one label byte plus 3072 channel-planar pixel bytes per
//! record). SVHN arrives as MATLAB 5 files (`train_32x32.mat`,
//! `test_32x32.mat`); a minimal MAT5 reader below handles exactly the
//! subset those files use: little-endian, optionally zlib-compressed,
//! uint8/double numeric arrays.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::data::{to_grayscale, write_idx_images, write_idx_labels, DataSplit};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Convert RGB u8 image data (already in [N, H, W, 3] row-major order) to a
/// grayscale split.
fn gray_split(rgb_bytes: &[u8], n: usize, h: usize, w: usize, labels: Vec<u8>) -> Result<DataSplit> {
    let rgb: Vec<f32> = rgb_bytes.iter().map(|&b| b as f32 / 255.0).collect();
    let gray = to_grayscale(&Tensor::new(vec![n, h, w, 3], rgb)?)?;
    Ok(DataSplit {
        images: gray,
        labels,
    })
}

fn write_split(out_dir: &Path, prefix: &str, split: &DataSplit) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    write_idx_images(&out_dir.join(format!("{prefix}-images-idx3-ubyte")), split)?;
    write_idx_labels(
        &out_dir.join(format!("{prefix}-labels-idx1-ubyte")),
        &split.labels,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CIFAR-10
// ---------------------------------------------------------------------------

const CIFAR_DIM: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_DIM * CIFAR_DIM;

/// Parse one or more concatenated CIFAR-10 binary batch files.
fn read_cifar_records(paths: &[std::path::PathBuf]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut rgb = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::MalformedFile(format!(
                "{}: length {} is not a multiple of the {}-byte record",
                path.display(),
                bytes.len(),
                CIFAR_RECORD
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0];
            if label > 9 {
                return Err(Error::MalformedFile(format!(
                    "{}: label {label} out of range",
                    path.display()
                )));
            }
            labels.push(label);
            // Channel-planar (1024 R, 1024 G, 1024 B) -> interleaved HWC.
            let planes = &rec[1..];
            for p in 0..CIFAR_DIM * CIFAR_DIM {
                rgb.push(planes[p]);
                rgb.push(planes[1024 + p]);
                rgb.push(planes[2048 + p]);
            }
        }
    }
    Ok((rgb, labels))
}

/// Convert the CIFAR-10 binary batches in `in_dir` into grayscale IDX pairs
/// under `out_dir/cifar10/`.
pub fn convert_cifar10(in_dir: &Path, out_dir: &Path) -> Result<()> {
    let train_paths: Vec<_> = (1..=5)
        .map(|i| in_dir.join(format!("data_batch_{i}.bin")))
        .filter(|p| p.exists())
        .collect();
    if train_paths.is_empty() {
        return Err(Error::MalformedFile(format!(
            "no data_batch_*.bin found in {}",
            in_dir.display()
        )));
    }
    let (train_rgb, train_labels) = read_cifar_records(&train_paths)?;
    let (test_rgb, test_labels) = read_cifar_records(&[in_dir.join("test_batch.bin")])?;

    let out = out_dir.join("cifar10");
    let n_train = train_labels.len();
    let n_test = test_labels.len();
    write_split(
        &out,
        "train",
        &gray_split(&train_rgb, n_train, CIFAR_DIM, CIFAR_DIM, train_labels)?,
    )?;
    write_split(
        &out,
        "test",
        &gray_split(&test_rgb, n_test, CIFAR_DIM, CIFAR_DIM, test_labels)?,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// SVHN (MATLAB 5 container)
// ---------------------------------------------------------------------------

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_DOUBLE: u32 = 9;
const MI_COMPRESSED: u32 = 15;
const MI_MATRIX: u32 = 14;

#[derive(Debug)]
enum MatData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

#[derive(Debug)]
struct MatArray {
    name: String,
    dims: Vec<usize>,
    data: MatData,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::MalformedFile(format!("MAT file truncated in {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    /// Read one element tag, handling the packed small-element format.
    /// Returns (type, payload, total padded length consumed).
    fn element(&mut self, what: &str) -> Result<(u32, &'a [u8])> {
        let head = self.take(4, what)?;
        let raw = LittleEndian::read_u32(head);
        if raw >> 16 != 0 {
            // Small element: size in the high half-word, data in 4 bytes.
            let ty = raw & 0xffff;
            let size = (raw >> 16) as usize;
            let data = self.take(4, what)?;
            Ok((ty, &data[..size]))
        } else {
            let size = LittleEndian::read_u32(self.take(4, what)?) as usize;
            let data = self.take(size, what)?;
            // Payloads are padded to 8-byte boundaries.
            let pad = (8 - size % 8) % 8;
            if !self.done() {
                let _ = self.take(pad.min(self.bytes.len() - self.pos), what)?;
            }
            Ok((raw, data))
        }
    }
}

fn parse_matrix(payload: &[u8]) -> Result<MatArray> {
    let mut cur = Cursor {
        bytes: payload,
        pos: 0,
    };
    let (t_flags, flags) = cur.element("array flags")?;
    if t_flags != MI_UINT32 || flags.len() < 8 {
        return Err(Error::MalformedFile("bad array flags element".into()));
    }
    let (t_dims, dim_bytes) = cur.element("dimensions")?;
    if t_dims != MI_INT32 {
        return Err(Error::MalformedFile("bad dimensions element".into()));
    }
    let dims: Vec<usize> = dim_bytes
        .chunks_exact(4)
        .map(|c| LittleEndian::read_i32(c) as usize)
        .collect();
    let (t_name, name_bytes) = cur.element("array name")?;
    if t_name != MI_INT8 {
        return Err(Error::MalformedFile("bad array name element".into()));
    }
    let name = String::from_utf8_lossy(name_bytes).to_string();
    let (t_data, data_bytes) = cur.element("array data")?;
    let data = match t_data {
        MI_UINT8 | MI_INT8 => MatData::U8(data_bytes.to_vec()),
        MI_DOUBLE => MatData::F64(
            data_bytes
                .chunks_exact(8)
                .map(LittleEndian::read_f64)
                .collect(),
        ),
        other => {
            return Err(Error::MalformedFile(format!(
                "unsupported MAT numeric type {other} in array {name:?}"
            )))
        }
    };
    Ok(MatArray { name, dims, data })
}

/// Parse the top-level arrays of a little-endian MAT5 file.
fn parse_mat(path: &Path) -> Result<Vec<MatArray>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 128 {
        return Err(Error::MalformedFile(format!(
            "{}: too short for a MAT5 header",
            path.display()
        )));
    }
    if &bytes[126..128] != b"IM" {
        return Err(Error::MalformedFile(format!(
            "{}: expected a little-endian MAT5 file",
            path.display()
        )));
    }
    let mut cur = Cursor {
        bytes: &bytes[128..],
        pos: 0,
    };
    let mut arrays = Vec::new();
    while !cur.done() {
        let (ty, payload) = cur.element("top-level element")?;
        match ty {
            MI_MATRIX => arrays.push(parse_matrix(payload)?),
            MI_COMPRESSED => {
                let mut decoded = Vec::new();
                flate2::read::ZlibDecoder::new(payload)
                    .read_to_end(&mut decoded)
                    .map_err(|e| {
                        Error::MalformedFile(format!("zlib decode failed: {e}"))
                    })?;
                let mut inner = Cursor {
                    bytes: &decoded,
                    pos: 0,
                };
                let (ity, ipayload) = inner.element("compressed element")?;
                if ity == MI_MATRIX {
                    arrays.push(parse_matrix(ipayload)?);
                }
            }
            _ => {} // skip everything else
        }
    }
    Ok(arrays)
}

/// Convert one SVHN `.mat` split (X: 32x32x3xN uint8 column-major, y: Nx1).
fn svhn_split(path: &Path) -> Result<DataSplit> {
    let arrays = parse_mat(path)?;
    let x = arrays
        .iter()
        .find(|a| a.name == "X")
        .ok_or_else(|| Error::MalformedFile(format!("{}: no array named X", path.display())))?;
    let y = arrays
        .iter()
        .find(|a| a.name == "y")
        .ok_or_else(|| Error::MalformedFile(format!("{}: no array named y", path.display())))?;

    if x.dims.len() != 4 || x.dims[2] != 3 {
        return Err(Error::MalformedFile(format!(
            "{}: X dims {:?}, expected [H, W, 3, N]",
            path.display(),
            x.dims
        )));
    }
    let (h, w, n) = (x.dims[0], x.dims[1], x.dims[3]);
    let raw = match &x.data {
        MatData::U8(v) => v,
        MatData::F64(_) => {
            return Err(Error::MalformedFile("X must be uint8".into()));
        }
    };
    if raw.len() != h * w * 3 * n {
        return Err(Error::MalformedFile(format!(
            "{}: X has {} values, dims imply {}",
            path.display(),
            raw.len(),
            h * w * 3 * n
        )));
    }

    // MATLAB arrays are column-major: index(h, w, c, n) = h + H*w + H*W*c
    // + H*W*3*n. Reorder to row-major [n][h][w][c].
    let mut rgb = vec![0u8; raw.len()];
    let plane = h * w;
    for img in 0..n {
        for y_ in 0..h {
            for x_ in 0..w {
                for c in 0..3 {
                    let src = y_ + h * x_ + plane * c + plane * 3 * img;
                    let dst = ((img * h + y_) * w + x_) * 3 + c;
                    rgb[dst] = raw[src];
                }
            }
        }
    }

    // SVHN labels digits as 1..10 with 10 meaning '0'.
    let labels: Vec<u8> = match &y.data {
        MatData::U8(v) => v.iter().map(|&l| l % 10).collect(),
        MatData::F64(v) => v.iter().map(|&l| (l as u8) % 10).collect(),
    };
    if labels.len() != n {
        return Err(Error::MalformedFile(format!(
            "{}: {} labels for {} images",
            path.display(),
            labels.len(),
            n
        )));
    }
    gray_split(&rgb, n, h, w, labels)
}

/// Convert `train_32x32.mat` / `test_32x32.mat` in `in_dir` into grayscale
/// IDX pairs under `out_dir/svhn/`.
pub fn convert_svhn(in_dir: &Path, out_dir: &Path) -> Result<()> {
    let train = svhn_split(&in_dir.join("train_32x32.mat"))?;
    let test = svhn_split(&in_dir.join("test_32x32.mat"))?;
    let out = out_dir.join("svhn");
    write_split(&out, "train", &train)?;
    write_split(&out, "test", &test)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_idx_pair;
    use std::io::Write;

    #[test]
    fn cifar_records_convert_to_gray_idx() {
        let dir = tempfile::tempdir().unwrap();
        // Two training records: solid red label 3, solid white label 9.
        let mut train = Vec::new();
        train.push(3u8);
        train.extend(std::iter::repeat_n(255u8, 1024)); // R
        train.extend(std::iter::repeat_n(0u8, 2048)); // G, B
        train.push(9u8);
        train.extend(std::iter::repeat_n(255u8, 3072));
        std::fs::write(dir.path().join("data_batch_1.bin"), &train).unwrap();
        std::fs::write(dir.path().join("test_batch.bin"), &train[..CIFAR_RECORD]).unwrap();

        let out = tempfile::tempdir().unwrap();
        convert_cifar10(dir.path(), out.path()).unwrap();
        let split = load_idx_pair(
            &out.path().join("cifar10/train-images-idx3-ubyte"),
            &out.path().join("cifar10/train-labels-idx1-ubyte"),
        )
        .unwrap();
        assert_eq!(split.images.shape(), &[2, 32, 32, 1]);
        assert_eq!(split.labels, vec![3, 9]);
        // Pure red -> 0.299; white -> 1.0 (after u8 rounding).
        let red = split.images.data()[0];
        let white = split.images.data()[1024];
        assert!((red - (0.299f32 * 255.0).round() / 255.0).abs() < 1e-6);
        assert_eq!(white, 1.0);
    }

    #[test]
    fn malformed_cifar_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data_batch_1.bin"), [0u8; 100]).unwrap();
        std::fs::write(dir.path().join("test_batch.bin"), [0u8; CIFAR_RECORD]).unwrap();
        assert!(convert_cifar10(dir.path(), dir.path()).is_err());
    }

    // -- MAT5 fixture builders -------------------------------------------

    fn mat_element(ty: u32, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&ty.to_le_bytes());
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        while out.len() % 8 != 0 {
            out.push(0);
        }
        out
    }

    fn mat_matrix(name: &str, class: u8, dims: &[i32], data_ty: u32, data: &[u8]) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend(mat_element(MI_UINT32, &{
            let mut f = vec![0u8; 8];
            f[0] = class;
            f
        }));
        let dim_bytes: Vec<u8> = dims.iter().flat_map(|d| d.to_le_bytes()).collect();
        body.extend(mat_element(MI_INT32, &dim_bytes));
        body.extend(mat_element(MI_INT8, name.as_bytes()));
        body.extend(mat_element(data_ty, data));
        mat_element(MI_MATRIX, &body)
    }

    fn mat_file(elements: &[Vec<u8>]) -> Vec<u8> {
        let mut out = vec![0u8; 128];
        out[..4].copy_from_slice(b"MATL");
        out[124] = 0x00;
        out[125] = 0x01; // version 0x0100
        out[126] = b'I';
        out[127] = b'M';
        for e in elements {
            out.extend_from_slice(e);
        }
        out
    }

    /// 2x2x3x2 X in column-major order plus double labels [1, 10].
    fn svhn_fixture(compressed: bool) -> Vec<u8> {
        let (h, w, n) = (2usize, 2usize, 2usize);
        let mut x = vec![0u8; h * w * 3 * n];
        // Image 0: R=200 everywhere, G=B=0. Image 1: all channels 100.
        let plane = h * w;
        for yy in 0..h {
            for xx in 0..w {
                x[yy + h * xx] = 200; // c=0, n=0
                for c in 0..3 {
                    x[yy + h * xx + plane * c + plane * 3] = 100;
                }
            }
        }
        let y: Vec<u8> = [1.0f64, 10.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let x_el = mat_matrix("X", 9, &[2, 2, 3, 2], MI_UINT8, &x);
        let y_el = mat_matrix("y", 6, &[2, 1], MI_DOUBLE, &y);
        if compressed {
            let compress = |raw: &[u8]| -> Vec<u8> {
                let mut enc = flate2::write::ZlibEncoder::new(
                    Vec::new(),
                    flate2::Compression::default(),
                );
                enc.write_all(raw).unwrap();
                mat_element(MI_COMPRESSED, &enc.finish().unwrap())
            };
            mat_file(&[compress(&x_el), compress(&y_el)])
        } else {
            mat_file(&[x_el, y_el])
        }
    }

    #[test]
    fn svhn_mat_converts_with_label_remap() {
        for compressed in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            let bytes = svhn_fixture(compressed);
            std::fs::write(dir.path().join("train_32x32.mat"), &bytes).unwrap();
            std::fs::write(dir.path().join("test_32x32.mat"), &bytes).unwrap();
            let out = tempfile::tempdir().unwrap();
            convert_svhn(dir.path(), out.path()).unwrap();
            let split = load_idx_pair(
                &out.path().join("svhn/train-images-idx3-ubyte"),
                &out.path().join("svhn/train-labels-idx1-ubyte"),
            )
            .unwrap();
            assert_eq!(split.images.shape(), &[2, 2, 2, 1]);
            // Label 10 means digit 0.
            assert_eq!(split.labels, vec![1, 0]);
            // Image 0: luma of (200, 0, 0).
            let expect0 = ((0.299f32 * 200.0 / 255.0) * 255.0).round() / 255.0;
            assert!((split.images.data()[0] - expect0).abs() < 1e-6);
            // Image 1: gray 100.
            let expect1 = 100.0 / 255.0;
            assert!((split.images.data()[4] - expect1).abs() < 1.5 / 255.0);
        }
    }

    #[test]
    fn truncated_mat_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train_32x32.mat"), [0u8; 64]).unwrap();
        std::fs::write(dir.path().join("test_32x32.mat"), [0u8; 64]).unwrap();
        assert!(convert_svhn(dir.path(), dir.path()).is_err());
    }
}
