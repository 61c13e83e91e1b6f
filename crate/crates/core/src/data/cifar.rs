//! CIFAR-10 binary format reader.
//!
//! Each record is 3073 bytes: one label byte followed by 3072 bytes of
//! channel-major pixel data (1024 red, 1024 green, 1024 blue bytes, each
//! row-major 32x32). Train data lives in `data_batch_1.bin` ..
//! `data_batch_5.bin`, 10000 records each. Labels are read only to balance
//! the subset; they never leave this module.

use super::Image;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_INIT};
use ndarray::Array3;
use rand::seq::SliceRandom;
use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::path::Path;

pub const CIFAR_SIDE: usize = 32;
pub const RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TRAIN_TOTAL: usize = 50_000;
const CLASSES: usize = 10;

/// A deterministic subset of the train split. `ids` are dataset indices in
/// ascending order, aligned with `images`.
#[derive(Debug, Clone)]
pub struct CifarSubset {
    pub images: Vec<Image>,
    pub ids: Vec<usize>,
}

fn records_in(path: &Path) -> Result<usize> {
    let len = std::fs::metadata(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?
        .len() as usize;
    if len == 0 || len % RECORD_BYTES != 0 {
        return Err(Error::format(
            path.display().to_string(),
            format!("file size {len} is not a multiple of the {RECORD_BYTES}-byte record"),
        ));
    }
    Ok(len / RECORD_BYTES)
}

/// Read every label from the five train batch files, in file order.
pub fn scan_labels(dir: &Path) -> Result<Vec<u8>> {
    let mut labels = Vec::new();
    for name in TRAIN_FILES {
        let path = dir.join(name);
        let count = records_in(&path)?;
        let mut reader = BufReader::new(File::open(&path)?);
        for _ in 0..count {
            let mut label = [0u8; 1];
            reader.read_exact(&mut label)?;
            if label[0] as usize >= CLASSES {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("label byte {} out of range", label[0]),
                ));
            }
            labels.push(label[0]);
            reader.seek(SeekFrom::Current((RECORD_BYTES - 1) as i64))?;
        }
    }
    Ok(labels)
}

/// Choose floor(fraction * 50000) dataset indices, optionally class-balanced,
/// deterministically from the seed. Returned ids are ascending.
pub fn select_subset_ids(
    labels: &[u8],
    fraction: f64,
    class_balanced: bool,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("fraction", "must be in (0, 1]"));
    }
    let target = (fraction * TRAIN_TOTAL as f64).floor() as usize;
    if target == 0 {
        return Err(Error::config("fraction", "selects zero images"));
    }
    if target > labels.len() {
        return Err(Error::format(
            "cifar10",
            format!("subset needs {target} records but only {} exist", labels.len()),
        ));
    }
    let mut rng = stream_rng(seed, STREAM_INIT);
    let mut ids = if class_balanced {
        if target % CLASSES != 0 {
            return Err(Error::config(
                "fraction",
                format!("balanced subset size {target} is not divisible by {CLASSES}"),
            ));
        }
        let per_class = target / CLASSES;
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CLASSES];
        for (idx, &label) in labels.iter().enumerate() {
            by_class[label as usize].push(idx);
        }
        let mut chosen = Vec::with_capacity(target);
        for (class, mut pool) in by_class.into_iter().enumerate() {
            if pool.len() < per_class {
                return Err(Error::format(
                    "cifar10",
                    format!(
                        "class {class} has {} records, need {per_class} for balance",
                        pool.len()
                    ),
                ));
            }
            pool.shuffle(&mut rng);
            chosen.extend_from_slice(&pool[..per_class]);
        }
        chosen
    } else {
        let mut pool: Vec<usize> = (0..labels.len()).collect();
        pool.shuffle(&mut rng);
        pool.truncate(target);
        pool
    };
    ids.sort_unstable();
    Ok(ids)
}

fn read_record_image(reader: &mut BufReader<File>) -> Result<Image> {
    let mut buf = vec![0u8; RECORD_BYTES - 1];
    reader.read_exact(&mut buf)?;
    let mut pixels = Array3::<f64>::zeros((3, CIFAR_SIDE, CIFAR_SIDE));
    for c in 0..3 {
        for y in 0..CIFAR_SIDE {
            for x in 0..CIFAR_SIDE {
                let byte = buf[c * CIFAR_SIDE * CIFAR_SIDE + y * CIFAR_SIDE + x];
                pixels[[c, y, x]] = byte as f64 / 255.0;
            }
        }
    }
    Image::new(pixels)
}

/// Load a deterministic subset of the CIFAR-10 train split from `dir`.
pub fn load_cifar10_subset(
    dir: &Path,
    fraction: f64,
    class_balanced: bool,
    seed: u64,
) -> Result<CifarSubset> {
    let labels = scan_labels(dir)?;
    let ids = select_subset_ids(&labels, fraction, class_balanced, seed)?;

    // Walk the batch files once, materializing selected records in order.
    let mut images = Vec::with_capacity(ids.len());
    let mut wanted = ids.iter().copied().peekable();
    let mut base = 0usize;
    for name in TRAIN_FILES {
        let path = dir.join(name);
        let count = records_in(&path)?;
        let mut reader = BufReader::new(File::open(&path)?);
        while let Some(&next) = wanted.peek() {
            if next >= base + count {
                break;
            }
            let offset = (next - base) * RECORD_BYTES + 1;
            reader.seek(SeekFrom::Start(offset as u64))?;
            images.push(read_record_image(&mut reader)?);
            wanted.next();
        }
        base += count;
    }
    if images.len() != ids.len() {
        return Err(Error::format(
            "cifar10",
            format!("resolved {} of {} selected records", images.len(), ids.len()),
        ));
    }
    Ok(CifarSubset { images, ids })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Write fake batch files with `per_file` records each; labels cycle
    /// 0..10 and pixels encode the record index.
    pub(crate) fn write_fake_cifar(dir: &Path, per_file: usize) {
        for (f, name) in TRAIN_FILES.iter().enumerate() {
            let mut bytes = Vec::with_capacity(per_file * RECORD_BYTES);
            for r in 0..per_file {
                let global = f * per_file + r;
                bytes.push((global % 10) as u8);
                for i in 0..RECORD_BYTES - 1 {
                    bytes.push(((global * 31 + i * 7) % 256) as u8);
                }
            }
            std::fs::write(dir.join(name), bytes).unwrap();
        }
    }

    #[test]
    fn balanced_selection_has_equal_class_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path(), 200);
        let labels = scan_labels(dir.path()).unwrap();
        assert_eq!(labels.len(), 1000);
        // floor(0.02 * 50000) = 1000 = all records, 100 per class.
        let ids = select_subset_ids(&labels, 0.02, true, 1).unwrap();
        assert_eq!(ids.len(), 1000);
        let mut counts = [0usize; 10];
        for &id in &ids {
            counts[labels[id] as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 100));
    }

    #[test]
    fn selection_is_deterministic_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path(), 100);
        let labels = scan_labels(dir.path()).unwrap();
        let a = select_subset_ids(&labels, 0.005, true, 9).unwrap();
        let b = select_subset_ids(&labels, 0.005, true, 9).unwrap();
        let c = select_subset_ids(&labels, 0.005, true, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn loaded_images_match_selected_ids() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path(), 40);
        let subset = load_cifar10_subset(dir.path(), 0.002, true, 4).unwrap();
        assert_eq!(subset.images.len(), 100);
        assert_eq!(subset.ids.len(), 100);
        assert!(subset.ids.windows(2).all(|w| w[0] < w[1]));
        // Spot-check pixel content against the generator formula.
        let id = subset.ids[0];
        let expected = ((id * 31 + 7) % 256) as f64 / 255.0;
        assert_eq!(subset.images[0].pixels()[[0, 0, 1]], expected);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path(), 10);
        let path = dir.path().join(TRAIN_FILES[0]);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            scan_labels(dir.path()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn bad_fraction_is_a_config_error() {
        let labels = vec![0u8; 100];
        assert!(matches!(
            select_subset_ids(&labels, 0.0, false, 0),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            select_subset_ids(&labels, 1.5, false, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn oversubscription_is_a_format_error() {
        let labels = vec![0u8; 100];
        assert!(matches!(
            select_subset_ids(&labels, 0.5, false, 0),
            Err(Error::Format { .. })
        ));
    }
}
