use std::path::{Path, PathBuf};

use super::{LabeledImageSet, Split};
use crate::error::{FedError, Result};
use crate::models::ImageShape;

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;
pub const CIFAR10_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR100_RECORD: usize = 2 + CIFAR_PIXELS;

const CIFAR10_TRAIN: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];

pub fn normalize_pixel(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn denormalize_pixel(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn check_len(bytes: &[u8], record: usize, what: &str) -> Result<usize> {
    if bytes.len() % record != 0 {
        return Err(FedError::Format(format!(
            "{what}: {} bytes is not a whole number of {record}-byte records",
            bytes.len()
        )));
    }
    Ok(bytes.len() / record)
}

/// Records of `1 label + 3072 pixels` (R, G, B planes, row-major).
pub fn parse_cifar10(bytes: &[u8], split: Split) -> Result<LabeledImageSet> {
    let n = check_len(bytes, CIFAR10_RECORD, "CIFAR-10")?;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(FedError::Format(format!(
                "record {i}: label {} > 9",
                rec[0]
            )));
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&v| normalize_pixel(v)));
    }
    LabeledImageSet::new(ImageShape::CIFAR, images, labels, None, split)
}

/// Records of `1 coarse + 1 fine label + 3072 pixels`.
pub fn parse_cifar100(bytes: &[u8], split: Split) -> Result<LabeledImageSet> {
    let n = check_len(bytes, CIFAR100_RECORD, "CIFAR-100")?;
    let mut labels = Vec::with_capacity(n);
    let mut coarse = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR100_RECORD).enumerate() {
        if rec[0] > 19 || rec[1] > 99 {
            return Err(FedError::Format(format!(
                "record {i}: labels ({}, {}) out of range",
                rec[0], rec[1]
            )));
        }
        coarse.push(rec[0] as usize);
        labels.push(rec[1] as usize);
        images.extend(rec[2..].iter().map(|&v| normalize_pixel(v)));
    }
    LabeledImageSet::new(ImageShape::CIFAR, images, labels, Some(coarse), split)
}

/// Accepts either the extracted batch directory or its parent.
fn resolve(dir: &Path, sub: &str, probe: &str) -> PathBuf {
    let nested = dir.join(sub);
    if nested.join(probe).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn expect_count(set: LabeledImageSet, want: usize, what: &str) -> Result<LabeledImageSet> {
    if set.len() != want {
        return Err(FedError::Format(format!(
            "{what}: expected {want} records, found {}",
            set.len()
        )));
    }
    Ok(set)
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<LabeledImageSet> {
    let dir = resolve(dir, "cifar-10-batches-bin", "test_batch.bin");
    let (files, want): (Vec<&str>, usize) = match split {
        Split::Train => (CIFAR10_TRAIN.to_vec(), 50_000),
        Split::Test => (vec!["test_batch.bin"], 10_000),
    };
    let mut bytes = Vec::with_capacity(want * CIFAR10_RECORD);
    for f in files {
        bytes.extend(std::fs::read(dir.join(f))?);
    }
    expect_count(parse_cifar10(&bytes, split)?, want, "CIFAR-10")
}

pub fn load_cifar100(dir: &Path, split: Split) -> Result<LabeledImageSet> {
    let dir = resolve(dir, "cifar-100-binary", "test.bin");
    let (file, want) = match split {
        Split::Train => ("train.bin", 50_000),
        Split::Test => ("test.bin", 10_000),
    };
    let bytes = std::fs::read(dir.join(file))?;
    expect_count(parse_cifar100(&bytes, split)?, want, "CIFAR-100")
}
