//! CIFAR-10 binary format: records of 1 label byte + 3072 pixel bytes
//! (R, G, B planes of 32×32, row-major), 10,000 records per batch file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, NormStats, Split};
use crate::{Error, Result};

pub const RECORD: usize = 3073;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";
pub const MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileAudit {
    pub file: String,
    pub bytes: u64,
    pub records: usize,
    pub sha256: String,
}

/// One entry per file read, in load order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestAudit {
    pub files: Vec<FileAudit>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Decode raw records into (normalized CHW pixels, labels).
pub fn parse_records(bytes: &[u8], name: &str) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() != RECORD * RECORDS_PER_FILE {
        return Err(Error::Dataset(format!(
            "{name}: {} bytes, expected {}",
            bytes.len(),
            RECORD * RECORDS_PER_FILE
        )));
    }
    let mut pixels = Vec::with_capacity(RECORDS_PER_FILE * 3072);
    let mut labels = Vec::with_capacity(RECORDS_PER_FILE);
    for (r, rec) in bytes.chunks_exact(RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Dataset(format!("{name}: record {r} has label byte {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        for (i, &p) in rec[1..].iter().enumerate() {
            let c = i / 1024;
            pixels.push((p as f32 / 255.0 - MEAN[c]) / STD[c]);
        }
    }
    Ok((pixels, labels))
}

fn read_files(dir: &Path, names: &[&str], split: Split, audit: &mut IngestAudit) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let path: PathBuf = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (px, lb) = parse_records(&bytes, name)?;
        audit.files.push(FileAudit {
            file: name.to_string(),
            bytes: bytes.len() as u64,
            records: lb.len(),
            sha256: sha256_hex(&bytes),
        });
        log::info!("ingested {name}: {} records", lb.len());
        images.extend(px);
        labels.extend(lb);
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        height: 32,
        width: 32,
        num_classes: 10,
        split,
        norm: NormStats {
            mean: MEAN.to_vec(),
            std: STD.to_vec(),
        },
    })
}

/// Load the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset, IngestAudit)> {
    let mut audit = IngestAudit::default();
    let train = read_files(dir, &TRAIN_FILES, Split::Train, &mut audit)?;
    let test = read_files(dir, &[TEST_FILE], Split::Test, &mut audit)?;
    Ok((train, test, audit))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_file_is_rejected() {
        assert!(parse_records(&[0u8; RECORD * 3], "x").is_err());
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
