//! Dataset loading: CIFAR binary files and the synthetic blob generator.

use crate::config::{DatasetConfig, DatasetKind, LoadedConfig};
use crate::errors::{CliError, Result};
use gprune_core::{Dataset, TensorRec};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const CIFAR_DIM: usize = 32 * 32 * 3;
const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Train and test splits for the configured source. Deterministic given the
/// seed: the synthetic generator is seeded, CIFAR files are read in a fixed
/// order.
pub fn load(loaded: &LoadedConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let cfg = &loaded.config.dataset;
    match cfg.kind {
        DatasetKind::Synthetic => Ok(synthetic(cfg, seed)),
        DatasetKind::Cifar10 => {
            let dir = loaded.resolve(cfg.path.as_ref().expect("validated"));
            let train_files: Vec<_> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .collect();
            let train = read_cifar_files(&train_files, 10, 1, cfg.hflip)?;
            let test = read_cifar_files(&[dir.join("test_batch.bin")], 10, 1, false)?;
            Ok((train, test))
        }
        DatasetKind::Cifar100 => {
            let dir = loaded.resolve(cfg.path.as_ref().expect("validated"));
            // records carry a coarse label byte before the fine label
            let train = read_cifar_files(&[dir.join("train.bin")], 100, 2, cfg.hflip)?;
            let test = read_cifar_files(&[dir.join("test.bin")], 100, 2, false)?;
            Ok((train, test))
        }
    }
}

/// Class-conditional blob images: each class is a fixed sum of random
/// Gaussian bumps, each sample adds uniform pixel noise. Same seed, same
/// bytes.
pub fn synthetic(cfg: &DatasetConfig, seed: u64) -> (Dataset, Dataset) {
    let templates = blob_templates(cfg, seed);
    let train = synth_split(cfg, &templates, cfg.train_samples, seed ^ 0x7261_696e);
    let test = synth_split(cfg, &templates, cfg.test_samples, seed ^ 0x7465_7374);
    (train, test)
}

fn blob_templates(cfg: &DatasetConfig, seed: u64) -> Vec<Vec<f32>> {
    let (c, s) = (cfg.channels, cfg.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    (0..cfg.classes)
        .map(|_| {
            let mut img = vec![0.0f32; c * s * s];
            // three signed bumps per channel
            for ch in 0..c {
                for _ in 0..3 {
                    let cy = rng.random_range(0.0..s as f32);
                    let cx = rng.random_range(0.0..s as f32);
                    let width = rng.random_range(0.15..0.45) * s as f32;
                    let amp = rng.random_range(0.6..1.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    for y in 0..s {
                        for x in 0..s {
                            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                            img[(ch * s + y) * s + x] += amp * (-d2 / (2.0 * width * width)).exp();
                        }
                    }
                }
            }
            img
        })
        .collect()
}

fn synth_split(cfg: &DatasetConfig, templates: &[Vec<f32>], n: usize, seed: u64) -> Dataset {
    let (c, s) = (cfg.channels, cfg.image_size);
    let dim = c * s * s;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let noise = cfg.noise as f32;
    for i in 0..n {
        let class = i % cfg.classes;
        labels.push(class as u32);
        for &t in templates[class].iter().take(dim) {
            data.push(t + rng.random_range(-noise..noise));
        }
    }
    let images = TensorRec::from_vec(&[n, c, s, s], data).expect("consistent shape");
    Dataset::new(images, labels, cfg.classes).expect("labels in range by construction")
}

fn read_cifar_files(
    paths: &[std::path::PathBuf],
    classes: usize,
    label_bytes: usize,
    hflip: bool,
) -> Result<Dataset> {
    let mut images: Vec<f32> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for path in paths {
        read_cifar_file(path, classes, label_bytes, &mut images, &mut labels)?;
    }
    if hflip {
        // deterministic augmentation: append a mirrored copy of every image
        let n = labels.len();
        let mut mirrored = Vec::with_capacity(n * CIFAR_DIM);
        for i in 0..n {
            let base = i * CIFAR_DIM;
            for ch in 0..3 {
                for y in 0..32 {
                    for x in (0..32).rev() {
                        mirrored.push(images[base + (ch * 32 + y) * 32 + x]);
                    }
                }
            }
        }
        images.extend(mirrored);
        labels.extend_from_within(..n);
    }
    let n = labels.len();
    let tensor = TensorRec::from_vec(&[n, 3, 32, 32], images)
        .map_err(|e| CliError::Dataset(e.to_string()))?;
    Dataset::new(tensor, labels, classes).map_err(|e| CliError::Dataset(e.to_string()))
}

fn read_cifar_file(
    path: &Path,
    classes: usize,
    label_bytes: usize,
    images: &mut Vec<f32>,
    labels: &mut Vec<u32>,
) -> Result<()> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let record = label_bytes + CIFAR_DIM;
    if bytes.len() % record != 0 {
        let offset = (bytes.len() / record) * record;
        return Err(CliError::Dataset(format!(
            "{}: malformed record length, {} trailing bytes at byte offset {offset}",
            path.display(),
            bytes.len() - offset
        )));
    }
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        // cifar-100 records are [coarse, fine]; the fine label is last
        let label = rec[label_bytes - 1] as u32;
        if label as usize >= classes {
            return Err(CliError::Dataset(format!(
                "{}: label {label} out of range at record {i} (byte offset {})",
                path.display(),
                i * record
            )));
        }
        labels.push(label);
        for (j, &b) in rec[label_bytes..].iter().enumerate() {
            let ch = j / (32 * 32);
            images.push((b as f32 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetKind;

    fn synth_cfg() -> DatasetConfig {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            path: None,
            hflip: false,
            classes: 3,
            train_samples: 30,
            test_samples: 12,
            image_size: 8,
            channels: 2,
            noise: 0.5,
        }
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let cfg = synth_cfg();
        let (a_train, a_test) = synthetic(&cfg, 9);
        let (b_train, b_test) = synthetic(&cfg, 9);
        assert_eq!(a_train.images.data(), b_train.images.data());
        assert_eq!(a_test.images.data(), b_test.images.data());
        let (c_train, _) = synthetic(&cfg, 10);
        assert_ne!(a_train.images.data(), c_train.images.data());
        // balanced labels
        assert_eq!(a_train.labels.iter().filter(|&&l| l == 0).count(), 10);
    }

    #[test]
    fn cifar_record_parses_label_and_planes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        // two records: label 7 with all-zero pixels, label 3 with all-255
        let mut bytes = vec![7u8];
        bytes.extend(vec![0u8; CIFAR_DIM]);
        bytes.push(3u8);
        bytes.extend(vec![255u8; CIFAR_DIM]);
        std::fs::write(&path, &bytes).unwrap();
        let ds = read_cifar_files(&[path], 10, 1, false).unwrap();
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        // zero byte normalizes to -mean/std of channel 0
        let want = (0.0 - CIFAR_MEAN[0]) / CIFAR_STD[0];
        assert!((ds.images.data()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn truncated_cifar_file_names_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut bytes = vec![1u8];
        bytes.extend(vec![0u8; CIFAR_DIM]);
        bytes.extend(vec![9u8; 100]); // torn second record
        std::fs::write(&path, &bytes).unwrap();
        let err = read_cifar_files(&[path], 10, 1, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte offset 3073"), "got: {msg}");
    }

    #[test]
    fn out_of_range_label_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut bytes = vec![12u8]; // invalid for 10 classes
        bytes.extend(vec![0u8; CIFAR_DIM]);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_cifar_files(&[path], 10, 1, false).unwrap_err();
        assert!(err.to_string().contains("label 12"));
    }

    #[test]
    fn hflip_appends_mirrored_copies() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut bytes = vec![0u8];
        // pixel value = x coordinate, so the mirror is detectable
        let mut px = vec![0u8; CIFAR_DIM];
        for ch in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    px[(ch * 32 + y) * 32 + x] = x as u8;
                }
            }
        }
        bytes.extend(&px);
        std::fs::write(&path, &bytes).unwrap();
        let ds = read_cifar_files(&[path], 10, 1, true).unwrap();
        assert_eq!(ds.labels.len(), 2);
        let d = ds.images.data();
        // first pixel of the mirrored image equals the last column of the original row
        assert!((d[CIFAR_DIM] - d[31]).abs() < 1e-6);
    }
}
