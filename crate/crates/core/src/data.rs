//! CIFAR-10 ingestion, deterministic splits and batching.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    /// Full training pool before the validation split.
    Pool,
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Pool => "pool",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Labeled images stored as raw bytes; pixels are exposed scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    pixels: Vec<u8>,
    labels: Vec<u8>,
    split: Split,
}

impl Dataset {
    pub fn new(shape: [usize; 3], pixels: Vec<u8>, labels: Vec<u8>, split: Split) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "image dimensions must be positive".into(),
            });
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} pixel bytes do not hold {} images of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                index,
                label: label as usize,
                classes: NUM_CLASSES,
            });
        }
        Ok(Dataset {
            shape,
            pixels,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn split(&self) -> Split {
        self.split
    }

    fn per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let n = self.per_image();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Image `i` as a `C×H×W` tensor in `[0, 1]`.
    pub fn image(&self, i: usize) -> Tensor {
        let data = self.raw_image(i).iter().map(|&b| f64::from(b) / 255.0).collect();
        Tensor::new(self.shape.to_vec(), data).expect("shape checked at construction")
    }

    /// Stacks the given samples into a `B×C×H×W` tensor.
    pub fn images(&self, indices: &[usize]) -> Tensor {
        let n = self.per_image();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.raw_image(i).iter().map(|&b| f64::from(b) / 255.0));
        }
        let mut shape = vec![indices.len()];
        shape.extend(self.shape);
        Tensor::new(shape, data).expect("non-empty index list")
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.per_image());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.raw_image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            shape: self.shape,
            pixels,
            labels,
            split,
        }
    }

    /// The first `n` samples (or all of them when fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }

    /// Serializes sample `i` in the CIFAR-10 record layout.
    pub fn record(&self, i: usize) -> Vec<u8> {
        encode_record(self.labels[i], self.raw_image(i))
    }
}

/// One label byte followed by the channel-major pixel bytes.
pub fn encode_record(label: u8, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + pixels.len());
    out.push(label);
    out.extend_from_slice(pixels);
    out
}

/// Parses a buffer of concatenated CIFAR-10 records.
pub fn parse_cifar_records(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD;
    let rest = bytes.len() % CIFAR_RECORD;
    if rest != 0 || bytes.is_empty() {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: (whole * CIFAR_RECORD) as u64,
            expected: (CIFAR_RECORD - rest) as u64,
        });
    }
    let mut pixels = Vec::with_capacity(whole * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(whole);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "{}: label {} at byte offset {} is outside [0, {NUM_CLASSES})",
                path.display(),
                rec[0],
                r * CIFAR_RECORD
            )));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Dataset::new(CIFAR_SHAPE, pixels, labels, split)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_files(dir: &Path, names: &[&str], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let path: PathBuf = dir.join(name);
        let part = parse_cifar_records(&read_file(&path)?, &path, split)?;
        pixels.extend(part.pixels);
        labels.extend(part.labels);
    }
    Dataset::new(CIFAR_SHAPE, pixels, labels, split)
}

/// Loads the binary-version training pool and test set from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_files(dir, &CIFAR_TRAIN_FILES, Split::Pool)?;
    let test = load_files(dir, &[CIFAR_TEST_FILE], Split::Test)?;
    Ok((train, test))
}

/// Splits off the last `val_fraction` of a seeded permutation as
/// validation data. Both parts keep ascending index order.
pub fn split(pool: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(pool.len(), val_fraction, seed)?;
    Ok((pool.subset(&train, Split::Train), pool.subset(&val, Split::Val)))
}

pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {val_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {val_fraction} leaves an empty split of {n} samples"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = order.split_off(n - n_val);
    order.sort_unstable();
    val.sort_unstable();
    Ok((order, val))
}

pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// One epoch of batches; the last batch may be short.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            images: self.data.images(&indices),
            labels: indices.iter().map(|&i| self.data.label(i)).collect(),
            indices,
        })
    }
}

pub fn batch_order(n: usize, seed: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

pub fn batches(data: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok(Batches {
        data,
        order: batch_order(data.len(), seed, shuffle),
        batch_size,
        pos: 0,
    })
}

/// Class-conditional sinusoidal gratings with noise, for exercising the
/// pipeline without the real dataset.
///
/// Class `y` uses spatial frequency `1 + y % 5` along the width for
/// `y < 5` and along the height otherwise, with a random phase per image.
pub fn synthetic_gratings(n: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % NUM_CLASSES) as u8;
        let freq = 1.0 + f64::from(y % 5);
        let along_width = y < 5;
        let offset: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for ch in 0..c {
            let amp = 0.3 + 0.1 * ch as f64 / c as f64;
            for r in 0..h {
                for col in 0..w {
                    let t = if along_width { col as f64 / w as f64 } else { r as f64 / h as f64 };
                    let noise: f64 = rng.random_range(-0.1..0.1);
                    let v = 0.5 + amp * (std::f64::consts::TAU * freq * t + offset).sin() + noise;
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        labels.push(y);
    }
    Dataset::new(shape, pixels, labels, Split::Pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn record(label: u8, f: impl Fn(usize) -> u8) -> Vec<u8> {
        let px: Vec<u8> = (0..CIFAR_RECORD - 1).map(f).collect();
        encode_record(label, &px)
    }

    #[test]
    fn red_plane_comes_first() {
        // channel index from byte position per the published layout
        let rec = record(3, |i| (i / 1024) as u8 * 100);
        let ds = parse_cifar_records(&rec, Path::new("mem"), Split::Pool).unwrap();
        let img = ds.image(0);
        assert_eq!(ds.label(0), 3);
        let plane = |c: usize| &img.data()[c * 1024..(c + 1) * 1024];
        assert!(plane(0).iter().all(|&v| v == 0.0));
        assert!(plane(1).iter().all(|&v| (v - 100.0 / 255.0).abs() < 1e-15));
        assert!(plane(2).iter().all(|&v| (v - 200.0 / 255.0).abs() < 1e-15));
        // row-major within the plane: byte 1 + 32 is row 1, column 0
        let rec = record(0, |i| if i == 32 { 255 } else { 0 });
        let img = parse_cifar_records(&rec, Path::new("mem"), Split::Pool).unwrap().image(0);
        assert_eq!(img.data()[32], 1.0);
    }

    #[test]
    fn all_255_is_all_ones() {
        let ds = parse_cifar_records(&record(9, |_| 255), Path::new("mem"), Split::Pool).unwrap();
        assert!(ds.image(0).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_buffer_reports_offset() {
        let mut bytes = record(1, |i| i as u8);
        bytes.extend(record(2, |i| i as u8));
        bytes.truncate(CIFAR_RECORD + 100);
        match parse_cifar_records(&bytes, Path::new("x.bin"), Split::Pool) {
            Err(Error::Truncated { offset, expected, path }) => {
                assert_eq!(offset, CIFAR_RECORD as u64);
                assert_eq!(expected, (CIFAR_RECORD - 100) as u64);
                assert_eq!(path, Path::new("x.bin"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_cifar_records(&[], Path::new("e"), Split::Pool).is_err());
    }

    #[test]
    fn bad_label_rejected() {
        assert!(parse_cifar_records(&record(10, |_| 0), Path::new("m"), Split::Pool).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(err.to_string().contains("data_batch_1.bin"), "{err}");
    }

    #[test]
    fn loads_directory_of_batches() {
        let dir = tempfile::tempdir().unwrap();
        for (k, name) in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]).enumerate() {
            let mut bytes = record(k as u8, |i| (i + k) as u8);
            bytes.extend(record(0, |_| 7));
            std::fs::write(dir.path().join(name), bytes).unwrap();
        }
        let (pool, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!((pool.len(), test.len()), (10, 2));
        assert_eq!(pool.label(2), 1);
        assert_eq!(test.label(0), 5);
        assert_eq!(pool.split(), Split::Pool);
    }

    #[test]
    fn split_sizes() {
        let (train, val) = split_indices(50_000, 0.1, 0).unwrap();
        assert_eq!((train.len(), val.len()), (45_000, 5_000));
        assert!(split_indices(10, 0.0, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
        assert!(split_indices(3, 0.01, 0).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        assert_eq!(split_indices(1000, 0.1, 5).unwrap(), split_indices(1000, 0.1, 5).unwrap());
        assert_ne!(split_indices(1000, 0.1, 5).unwrap(), split_indices(1000, 0.1, 6).unwrap());
    }

    #[test]
    fn batch_sizes_and_order() {
        let ds = synthetic_gratings(10, [1, 4, 4], 0).unwrap();
        let sizes: Vec<usize> = batches(&ds, 4, 0, false).unwrap().map(|b| b.indices.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let flat: Vec<usize> = batches(&ds, 4, 0, false).unwrap().flat_map(|b| b.indices).collect();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
        assert!(batches(&ds, 0, 0, false).is_err());
    }

    #[test]
    fn batch_contents_match_samples() {
        let ds = synthetic_gratings(6, [2, 4, 4], 1).unwrap();
        for b in batches(&ds, 4, 9, true).unwrap() {
            for (row, &i) in b.indices.iter().enumerate() {
                assert_eq!(b.images.row(row), ds.image(i).data());
                assert_eq!(b.labels[row], ds.label(i));
            }
        }
    }

    #[test]
    fn synthetic_is_balanced_and_in_range() {
        let ds = synthetic_gratings(50, [3, 8, 8], 2).unwrap();
        for c in 0..NUM_CLASSES {
            assert_eq!(ds.labels().iter().filter(|&&l| l == c).count(), 5);
        }
        assert!((0..50).all(|i| ds.image(i).data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    proptest! {
        #[test]
        fn record_round_trip(label in 0u8..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let px: Vec<u8> = (0..CIFAR_RECORD - 1).map(|_| rng.random()).collect();
            let rec = encode_record(label, &px);
            let ds = parse_cifar_records(&rec, Path::new("m"), Split::Pool).unwrap();
            prop_assert_eq!(ds.record(0), rec);
        }

        #[test]
        fn split_partitions_indices(n in 2usize..500, frac in 0.05f64..0.95, seed in any::<u64>()) {
            if let Ok((train, val)) = split_indices(n, frac, seed) {
                let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }

        #[test]
        fn epoch_covers_every_sample_once(n in 1usize..40, bs in 1usize..12, seed in any::<u64>()) {
            let mut seen: Vec<usize> = batch_order(n, seed, true).chunks(bs).flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(batch_order(n, seed, true), batch_order(n, seed, true));
        }

        #[test]
        fn pixels_stay_in_unit_range(seed in any::<u64>()) {
            let ds = synthetic_gratings(3, [1, 4, 4], seed).unwrap();
            let imgs = ds.images(&[0, 1, 2]);
            prop_assert!(imgs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
