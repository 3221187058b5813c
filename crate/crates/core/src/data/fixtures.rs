//! Synthetic datasets in the CIFAR-10 binary layout, for tests and demos.
//!
//! Each class gets its own colour and stripe orientation; each image gets a
//! random phase, brightness and pixel noise, so images are pairwise distinct
//! while class membership remains visible.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::cifar::{Cifar10, Split, CIFAR_CLASSES, CIFAR_SIDE};
use crate::error::{Error, Result};
use crate::rng::seeded;

const PALETTE: [[f32; 3]; CIFAR_CLASSES] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.2],
    [0.2, 0.3, 0.9],
    [0.9, 0.9, 0.2],
    [0.8, 0.2, 0.8],
    [0.2, 0.8, 0.8],
    [0.95, 0.6, 0.2],
    [0.5, 0.5, 0.5],
    [0.6, 0.3, 0.1],
    [0.1, 0.1, 0.4],
];

/// One CIFAR-style record: label byte followed by 3072 channel-major pixels.
pub fn synthetic_record(class: u8, rng: &mut impl Rng) -> Vec<u8> {
    let c = class as usize % CIFAR_CLASSES;
    let angle = c as f32 * PI / CIFAR_CLASSES as f32;
    let (dx, dy) = (angle.cos(), angle.sin());
    let freq = 0.35 + 0.05 * (c % 3) as f32;
    let phase = rng.random_range(0.0..2.0 * PI);
    let gain = rng.random_range(0.7..1.0f32);
    let mut record = Vec::with_capacity(1 + 3 * CIFAR_SIDE * CIFAR_SIDE);
    record.push(c as u8);
    for ch in 0..3 {
        for y in 0..CIFAR_SIDE {
            for x in 0..CIFAR_SIDE {
                let t = (x as f32 * dx + y as f32 * dy) * freq + phase;
                let stripe = 0.5 + 0.5 * t.sin();
                let noise = rng.random_range(-0.08..0.08f32);
                let v = gain * PALETTE[c][ch] * (0.4 + 0.6 * stripe) + noise;
                record.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    record
}

fn records(n: usize, offset: usize, rng: &mut impl Rng) -> Vec<u8> {
    (0..n)
        .flat_map(|i| synthetic_record(((i + offset) % CIFAR_CLASSES) as u8, rng))
        .collect()
}

/// Write `data_batch_{1..5}.bin` (splitting `n_train` images) and
/// `test_batch.bin` into `dir`. Labels cycle through the ten classes.
pub fn write_cifar_dir(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    if n_train < 5 || n_test == 0 {
        return Err(Error::Config(
            "need at least 5 training images (one per batch file) and 1 test image".into(),
        ));
    }
    fs::create_dir_all(dir)?;
    let mut rng = seeded(seed);
    let per_file = n_train / 5;
    let mut offset = 0;
    for i in 0..5 {
        let n = if i == 4 { n_train - 4 * per_file } else { per_file };
        fs::write(
            dir.join(format!("data_batch_{}.bin", i + 1)),
            records(n, offset, &mut rng),
        )?;
        offset += n;
    }
    fs::write(dir.join("test_batch.bin"), records(n_test, 0, &mut rng))?;
    Ok(())
}

/// An in-memory synthetic split of `n` images, labels cycling through the
/// ten classes.
pub fn synthetic_split(split: Split, n: usize, seed: u64) -> Result<Cifar10> {
    let mut rng = seeded(seed);
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3 * CIFAR_SIDE * CIFAR_SIDE);
    for i in 0..n {
        let rec = synthetic_record((i % CIFAR_CLASSES) as u8, &mut rng);
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Cifar10::from_raw(split, labels, pixels)
}
