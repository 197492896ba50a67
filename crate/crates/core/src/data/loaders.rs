//! IDX, CIFAR-10 binary and tensor-container ingestion.

use std::fs;
use std::path::Path;

use super::{Dataset, Normalization};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_LABELS: u32 = 0x0000_0801;
const IDX_IMAGES: u32 = 0x0000_0803;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

fn fmt_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset: offset as u64, msg: msg.into() })
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().unwrap())),
        None => fmt_err(at, "truncated IDX header"),
    }
}

/// Header of an IDX file: dimensions and the offset of the payload.
fn idx_header(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, usize)> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return fmt_err(0, format!("bad IDX magic {found:#010x}, expected {magic:#010x}"));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let need: usize = dims.iter().product();
    if bytes.len() - start < need {
        return fmt_err(bytes.len(), format!("truncated IDX payload: {} of {need} bytes", bytes.len() - start));
    }
    if bytes.len() - start > need {
        return fmt_err(start + need, "trailing bytes after IDX payload");
    }
    Ok((dims, start))
}

/// Parses an IDX image file (`n x rows x cols`, u8) and label file into a
/// single-channel dataset with pixels scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8], num_classes: usize) -> Result<Dataset> {
    let (idims, istart) = idx_header(images, IDX_IMAGES)?;
    let (ldims, lstart) = idx_header(labels, IDX_LABELS)?;
    let (n, rows, cols) = (idims[0], idims[1], idims[2]);
    if ldims[0] != n {
        return fmt_err(4, format!("label file has {} entries, image file has {n}", ldims[0]));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return fmt_err(4, "IDX file with a zero dimension");
    }
    let mut ys = Vec::with_capacity(n);
    for (i, &l) in labels[lstart..].iter().enumerate() {
        if l as usize >= num_classes {
            return fmt_err(lstart + i, format!("label {l} out of range for {num_classes} classes"));
        }
        ys.push(l as usize);
    }
    let data = images[istart..].iter().map(|&p| p as f32 / 255.0).collect();
    let x = Tensor::new(&[n, 1, rows, cols], data)?;
    Dataset::with_own_normalization(x, ys, num_classes)
}

pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    parse_idx(&fs::read(images)?, &fs::read(labels)?, num_classes)
}

/// Parses concatenated CIFAR-10 binary records (label byte + 3072
/// channel-planar pixel bytes).
pub fn parse_cifar_binary(bytes: &[u8], num_classes: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.is_empty() {
        return fmt_err(0, "empty CIFAR file");
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        let at = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return fmt_err(at, format!("truncated record: {} of {CIFAR_RECORD} bytes", bytes.len() - at));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= num_classes {
            return fmt_err(i * CIFAR_RECORD, format!("label {} out of range for {num_classes} classes", rec[0]));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P], num_classes: usize) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let path = p.as_ref();
        let (px, ls) = parse_cifar_binary(&fs::read(path)?, num_classes).map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format { offset, msg: format!("{}: {msg}", path.display()) },
            other => other,
        })?;
        pixels.extend(px);
        labels.extend(ls);
    }
    if labels.is_empty() {
        return Err(Error::Input("no CIFAR files given".into()));
    }
    let x = Tensor::new(&[labels.len(), 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::with_own_normalization(x, labels, num_classes)
}

/// Writes a dataset as a tensor container with entries `images`, `labels`,
/// `num_classes`, `norm_mean` and `norm_std`.
pub fn save_container(dataset: &Dataset, path: &Path) -> Result<()> {
    let labels = Tensor::new(&[dataset.len()], dataset.labels().iter().map(|&l| l as f32).collect())?;
    let classes = Tensor::scalar(dataset.num_classes() as f32);
    let n = dataset.normalization();
    let mean = Tensor::new(&[n.mean.len()], n.mean.clone())?;
    let std = Tensor::new(&[n.std.len()], n.std.clone())?;
    checkpoint::write_file(
        path,
        [
            ("images", dataset.images()),
            ("labels", &labels),
            ("num_classes", &classes),
            ("norm_mean", &mean),
            ("norm_std", &std),
        ],
    )
}

pub fn load_container(path: &Path) -> Result<Dataset> {
    let entries = checkpoint::read_file(path)?;
    let get = |name: &str| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Input(format!("{}: dataset container lacks {name:?}", path.display())))
    };
    let num_classes = get("num_classes")?.data()[0] as usize;
    let labels = get("labels")?.data().iter().map(|&l| l as usize).collect();
    let norm = Normalization { mean: get("norm_mean")?.data().to_vec(), std: get("norm_std")?.data().to_vec() };
    Dataset::new(get("images")?.clone(), labels, num_classes, norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_single_channel() {
        let imgs = idx_bytes(IDX_IMAGES, &[2, 28, 28], &vec![255u8; 2 * 28 * 28]);
        let labels = idx_bytes(IDX_LABELS, &[2], &[3, 9]);
        let d = parse_idx(&imgs, &labels, 10).unwrap();
        assert_eq!(d.images().shape(), &[2, 1, 28, 28]);
        assert_eq!(d.labels(), &[3, 9]);
        assert!(d.images().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn idx_errors() {
        let imgs = idx_bytes(IDX_IMAGES, &[2, 2, 2], &[0; 8]);
        let labels = idx_bytes(IDX_LABELS, &[2], &[0, 1]);
        let bad_magic = idx_bytes(0x0000_0802, &[2, 2, 2], &[0; 8]);
        assert!(matches!(parse_idx(&bad_magic, &labels, 10), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx(&imgs[..imgs.len() - 1], &labels, 10), Err(Error::Format { .. })));
        let big = idx_bytes(IDX_LABELS, &[2], &[0, 12]);
        assert!(matches!(parse_idx(&imgs, &big, 10), Err(Error::Format { offset: 9, .. })));
    }

    #[test]
    fn cifar_records() {
        let mut bytes = Vec::new();
        for label in [1u8, 7] {
            bytes.push(label);
            bytes.extend(std::iter::repeat_n(label * 10, 3072));
        }
        let (px, labels) = parse_cifar_binary(&bytes, 10).unwrap();
        assert_eq!(labels, vec![1, 7]);
        assert_eq!(px.len(), 2 * 3072);
        assert_eq!(px[3072], 70.0 / 255.0);

        match parse_cifar_binary(&bytes[..bytes.len() - 5], 10) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, CIFAR_RECORD as u64);
                assert!(msg.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
        bytes[CIFAR_RECORD] = 10;
        assert!(matches!(parse_cifar_binary(&bytes, 10), Err(Error::Format { offset: 3073, .. })));
    }

    #[test]
    fn cifar_batch_file_shape() {
        let dir = std::env::temp_dir().join(format!("cifar-test-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data_batch_1.bin");
        let mut bytes = Vec::with_capacity(10_000 * CIFAR_RECORD);
        for i in 0..10_000usize {
            bytes.push((i % 10) as u8);
            bytes.extend(std::iter::repeat_n((i % 251) as u8, 3072));
        }
        fs::write(&path, &bytes).unwrap();
        let d = load_cifar_binary(&[&path], 10).unwrap();
        assert_eq!(d.len(), 10_000);
        assert_eq!(d.image_shape(), [3, 32, 32]);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn container_round_trip() {
        let dir = std::env::temp_dir().join(format!("container-test-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.wpck");
        let x = Tensor::from_fn(&[3, 2, 2, 2], |i| i as f32 / 24.0);
        let d = Dataset::with_own_normalization(x, vec![0, 1, 1], 2).unwrap();
        save_container(&d, &path).unwrap();
        assert_eq!(load_container(&path).unwrap(), d);
        fs::remove_dir_all(&dir).ok();
    }
}
