//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! three 32×32 planes (R, G, B), row-major.

use std::fs;
use std::path::{Path, PathBuf};

use super::LabeledDataset;
use crate::error::{Error, Result};

pub const RECORD_LEN: usize = 1 + 3 * 32 * 32;
pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone)]
pub struct Cifar10 {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Decodes one batch file; `path` only labels errors.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    let whole = bytes.len() / RECORD_LEN * RECORD_LEN;
    if whole != bytes.len() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: whole as u64,
            detail: format!(
                "truncated record: {} trailing bytes, records are {RECORD_LEN} bytes",
                bytes.len() - whole
            ),
        });
    }
    let n = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (RECORD_LEN - 1));
    for (i, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: (i * RECORD_LEN) as u64,
                detail: format!("label byte {} exceeds 9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((pixels, labels))
}

/// Directory holding the batch files: `dir` itself or its
/// `cifar-10-batches-bin` child.
fn batch_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(TEST_FILE).exists() && nested.join(TEST_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn load_files(dir: &Path, names: &[&str]) -> Result<LabeledDataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (p, l) = parse_cifar_batch(&bytes, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let names = CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect();
    LabeledDataset::new((3, 32, 32), pixels, labels, names)
}

/// Reads the five training batches and the test batch.
pub fn load_cifar10(dir: &Path) -> Result<Cifar10> {
    let dir = batch_dir(dir);
    Ok(Cifar10 {
        train: load_files(&dir, &TRAIN_FILES)?,
        test: load_files(&dir, &[TEST_FILE])?,
    })
}

/// True when every batch file is present under `dir`.
pub fn cifar10_present(dir: &Path) -> bool {
    let dir = batch_dir(dir);
    TRAIN_FILES.iter().chain([&TEST_FILE]).all(|f| dir.join(f).is_file())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; RECORD_LEN];
        r[0] = label;
        r
    }

    #[test]
    fn parses_records() {
        let mut bytes = record(6, 51);
        bytes[1] = 255;
        bytes.extend(record(2, 0));
        let (pixels, labels) = parse_cifar_batch(&bytes, Path::new("b.bin")).unwrap();
        assert_eq!(labels, vec![6, 2]);
        assert_eq!(pixels[0], 1.0);
        assert_eq!(pixels[1], 0.2);
        assert_eq!(pixels.len(), 2 * 3072);
    }

    #[test]
    fn truncation_names_offset() {
        let mut bytes = record(1, 0);
        bytes.extend(&record(1, 0)[..100]);
        match parse_cifar_batch(&bytes, Path::new("b.bin")) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, RECORD_LEN as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_label_names_offset() {
        let mut bytes = record(1, 0);
        bytes.extend(record(10, 0));
        match parse_cifar_batch(&bytes, Path::new("b.bin")) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, RECORD_LEN as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_directory_is_io_error() {
        let err = load_cifar10(Path::new("/nonexistent/cifar")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
