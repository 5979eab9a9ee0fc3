//! Desk-scale image datasets: IDX (MNIST) and CIFAR binary loaders,
//! per-channel standardization, stratified subsets and mini-batches.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Error, Result};
use crate::rng::Xoshiro256;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Four-dimensional unsigned-byte IDX, used when writing multi-channel images.
pub const IDX_IMAGES4_MAGIC: u32 = 0x0000_0804;
pub const CIFAR_RECORD: usize = 3073;
pub const MNIST_CLASSES: usize = 10;
pub const CIFAR_CLASSES: usize = 10;

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Population statistics over `[N, C, HW]` pixels. A constant channel
    /// gets std 1 so it maps to a constant instead of NaN.
    pub fn fit(pixels: &[u8], channels: usize, plane: usize) -> Self {
        let n = if channels * plane == 0 {
            0
        } else {
            pixels.len() / (channels * plane)
        };
        let mut mean = vec![0.0; channels];
        let mut std = vec![1.0; channels];
        let count = (n * plane) as f64;
        if count == 0.0 {
            return Self { mean, std };
        }
        for c in 0..channels {
            let vals = || {
                (0..n).flat_map(move |s| {
                    let base = (s * channels + c) * plane;
                    pixels[base..base + plane].iter().map(|&p| p as f64 / 255.0)
                })
            };
            let mu = vals().sum::<f64>() / count;
            let var = vals().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
            mean[c] = mu;
            if var.sqrt() > 1e-12 {
                std[c] = var.sqrt();
            }
        }
        Self { mean, std }
    }

    fn apply<T: Scalar>(&self, pixels: &[u8], plane: usize) -> Vec<T> {
        let channels = self.mean.len();
        pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = (i / plane) % channels;
                T::from_f64_lossy((p as f64 / 255.0 - self.mean[c]) / self.std[c])
            })
            .collect()
    }
}

/// Normalized images with their labels.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    /// `[N, C, H, W]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub norm: Normalization,
}

/// Undecoded images: `[N, C, H, W]` unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub dims: [usize; 4],
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawImages {
    /// Standardizes with `norm`, or with statistics fitted on these images.
    pub fn normalize<T: Scalar>(
        &self,
        class_count: usize,
        norm: Option<&Normalization>,
    ) -> Result<Dataset<T>> {
        let [n, c, h, w] = self.dims;
        if let Some(bad) = self.labels.iter().position(|&l| l as usize >= class_count) {
            return Err(Error::Format {
                offset: bad as u64,
                msg: format!(
                    "label {} at index {bad} outside [0, {class_count})",
                    self.labels[bad]
                ),
            });
        }
        let norm = match norm {
            Some(s) if s.mean.len() != c => {
                return dim_err(format!(
                    "normalization has {} channels, images have {c}",
                    s.mean.len()
                ))
            }
            Some(s) => s.clone(),
            None => Normalization::fit(&self.pixels, c, h * w),
        };
        Ok(Dataset {
            images: Tensor::new(&[n, c, h, w], norm.apply(&self.pixels, h * w))?,
            labels: self.labels.iter().map(|&l| l as usize).collect(),
            class_count,
            norm,
        })
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            msg: format!("truncated {what} header"),
        })
}

/// Parses an IDX header; returns dims and payload offset.
fn idx_header(bytes: &[u8], magics: &[u32], what: &str) -> Result<(Vec<usize>, usize)> {
    let magic = read_u32(bytes, 0, what)?;
    if !magics.contains(&magic) {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad {what} magic {magic:#010x}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| read_u32(bytes, 4 + 4 * i, what).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let want = start + dims.iter().product::<usize>();
    if bytes.len() != want {
        return Err(Error::Format {
            offset: bytes.len().min(want) as u64,
            msg: format!(
                "{what} payload has {} bytes, header implies {}",
                bytes.len() - start.min(bytes.len()),
                want - start
            ),
        });
    }
    Ok((dims, start))
}

/// Parses in-memory IDX image and label files.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<RawImages> {
    let (idims, istart) = idx_header(images, &[IDX_IMAGES_MAGIC, IDX_IMAGES4_MAGIC], "image")?;
    let (ldims, lstart) = idx_header(labels, &[IDX_LABELS_MAGIC], "label")?;
    let dims = match idims[..] {
        [n, h, w] => [n, 1, h, w],
        [n, c, h, w] => [n, c, h, w],
        _ => unreachable!("magic fixes the rank"),
    };
    if ldims[0] != dims[0] {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{} images but {} labels", dims[0], ldims[0]),
        });
    }
    Ok(RawImages {
        dims,
        pixels: images[istart..].to_vec(),
        labels: labels[lstart..].to_vec(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Loads an IDX pair and standardizes it with its own statistics.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    load_idx_with(images_path, labels_path, None)
}

/// Loads an IDX pair, reusing `norm` when given (evaluation splits).
pub fn load_idx_with<T: Scalar>(
    images_path: &Path,
    labels_path: &Path,
    norm: Option<&Normalization>,
) -> Result<Dataset<T>> {
    parse_idx(&read(images_path)?, &read(labels_path)?)?.normalize(MNIST_CLASSES, norm)
}

/// Encodes raw images back to IDX bytes (3 dims for one channel, 4 otherwise).
pub fn to_idx_bytes(raw: &RawImages) -> (Vec<u8>, Vec<u8>) {
    let [n, c, h, w] = raw.dims;
    let mut img = Vec::with_capacity(20 + raw.pixels.len());
    let dims: Vec<usize> = if c == 1 {
        img.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        vec![n, h, w]
    } else {
        img.extend(IDX_IMAGES4_MAGIC.to_be_bytes());
        vec![n, c, h, w]
    };
    for d in dims {
        img.extend((d as u32).to_be_bytes());
    }
    img.extend(&raw.pixels);
    let mut lbl = Vec::with_capacity(8 + raw.labels.len());
    lbl.extend(IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend((n as u32).to_be_bytes());
    lbl.extend(&raw.labels);
    (img, lbl)
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Undoes the standardization, rounding back to bytes.
    pub fn to_raw(&self) -> RawImages {
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        let pixels = self
            .images
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                let p = (v.to_f64_lossy() * self.norm.std[ch] + self.norm.mean[ch]) * 255.0;
                p.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        RawImages {
            dims: [self.len(), c, h, w],
            pixels,
            labels: self.labels.iter().map(|&l| l as u8).collect(),
        }
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let src = self.images.data();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return param_err(format!("index {i} out of range for {} samples", self.len()));
            }
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        Ok(Self {
            images: Tensor::new(&[idx.len(), c, h, w], data)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            norm: self.norm.clone(),
        })
    }

    /// Per-class counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Iterates mini-batches with a forked generator; see [`Batches`].
    pub fn batches<R: RngCore + ?Sized>(
        &self,
        batch_size: usize,
        shuffle: bool,
        flip: bool,
        rng: &mut R,
    ) -> Result<Batches<'_, T>> {
        Batches::new(
            self,
            batch_size,
            shuffle,
            flip,
            Xoshiro256::seed_from_u64(rng.next_u64()),
        )
    }
}

/// Stratified subset of `n` samples, drawn round-robin over classes from
/// per-class shuffles, returned in ascending index order.
pub fn subsample<T: Scalar, R: Rng + ?Sized>(
    ds: &Dataset<T>,
    n: usize,
    rng: &mut R,
) -> Result<Dataset<T>> {
    if n > ds.len() {
        return param_err(format!("cannot take {n} samples from {}", ds.len()));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &l) in ds.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for p in &mut pools {
        p.shuffle(rng);
        p.reverse();
    }
    let mut picked = Vec::with_capacity(n);
    while picked.len() < n {
        for p in pools.iter_mut() {
            if picked.len() == n {
                break;
            }
            if let Some(i) = p.pop() {
                picked.push(i);
            }
        }
    }
    picked.sort_unstable();
    ds.select(&picked)
}

/// One mini-batch: `[b, C, H, W]` images and their labels.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Mini-batch iterator. The order is fixed up front; the final batch may
/// be short. With `flip`, each image is mirrored left-right with
/// probability one half.
pub struct Batches<'a, T: Scalar> {
    ds: &'a Dataset<T>,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    flip: bool,
    rng: Xoshiro256,
}

impl<'a, T: Scalar> Batches<'a, T> {
    pub fn new(
        ds: &'a Dataset<T>,
        batch_size: usize,
        shuffle: bool,
        flip: bool,
        mut rng: Xoshiro256,
    ) -> Result<Self> {
        if batch_size == 0 {
            return param_err("batch size must be positive");
        }
        let mut order: Vec<usize> = (0..ds.len()).collect();
        if shuffle {
            order.shuffle(&mut rng);
        }
        Ok(Self {
            ds,
            order,
            pos: 0,
            batch_size,
            flip,
            rng,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let [c, h, w] = self.ds.image_shape();
        let per = c * h * w;
        let src = self.ds.images.data();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            let img = &src[i * per..(i + 1) * per];
            if self.flip && self.rng.random_bool(0.5) {
                for row in img.chunks(w) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(img);
            }
        }
        Some(Batch {
            images: Tensor::new(&[idx.len(), c, h, w], data).expect("batch shape"),
            labels: idx.iter().map(|&i| self.ds.labels[i]).collect(),
        })
    }
}

/// Parses concatenated CIFAR records: a label byte then 1024 bytes each of
/// R, G and B.
pub fn parse_cifar(bytes: &[u8]) -> Result<RawImages> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            msg: format!(
                "file size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(RawImages {
        dims: [n, 3, 32, 32],
        pixels,
        labels,
    })
}

/// Loads one CIFAR binary batch file, checking labels against 10 classes.
pub fn load_cifar_binary<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    load_cifar_with(path, None)
}

pub fn load_cifar_with<T: Scalar>(path: &Path, norm: Option<&Normalization>) -> Result<Dataset<T>> {
    let raw = parse_cifar(&read(path)?)?;
    raw.normalize(CIFAR_CLASSES, norm).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset: offset * CIFAR_RECORD as u64,
            msg,
        },
        e => e,
    })
}

/// Train and test splits found in a data directory.
#[derive(Debug, Clone)]
pub struct Splits<T: Scalar> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

/// Loads MNIST-style IDX files (`train-images-idx3-ubyte`, ...) or, failing
/// that, CIFAR-10 binaries (`data_batch_*.bin`, `test_batch.bin`) from
/// `dir`. The test split reuses the training statistics.
pub fn load_dir<T: Scalar>(dir: &Path) -> Result<Splits<T>> {
    let p = |name: &str| dir.join(name);
    if p("train-images-idx3-ubyte").exists() {
        let train = parse_idx(
            &read(&p("train-images-idx3-ubyte"))?,
            &read(&p("train-labels-idx1-ubyte"))?,
        )?
        .normalize::<T>(MNIST_CLASSES, None)?;
        let test = load_idx_with(
            &p("t10k-images-idx3-ubyte"),
            &p("t10k-labels-idx1-ubyte"),
            Some(&train.norm),
        )?;
        return Ok(Splits { train, test });
    }
    let mut batches: Vec<PathBuf> = (1..=5)
        .map(|i| p(&format!("data_batch_{i}.bin")))
        .filter(|f| f.exists())
        .collect();
    batches.sort();
    if batches.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no IDX or CIFAR binary files in {}", dir.display()),
        )));
    }
    let mut bytes = Vec::new();
    for b in &batches {
        bytes.extend(read(b)?);
    }
    let train = parse_cifar(&bytes)?.normalize::<T>(CIFAR_CLASSES, None)?;
    let test = load_cifar_with(&p("test_batch.bin"), Some(&train.norm))?;
    Ok(Splits { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_fixture(n: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3];
        for d in [n as u32, 28, 28] {
            img.extend(d.to_be_bytes());
        }
        img.extend((0..n * 784).map(|i| (i * 7 % 256) as u8));
        let mut lbl = vec![0, 0, 8, 1];
        lbl.extend((labels.len() as u32).to_be_bytes());
        lbl.extend(labels);
        (img, lbl)
    }

    #[test]
    fn three_image_fixture() {
        let (img, lbl) = idx_fixture(3, &[1, 7, 9]);
        let ds = parse_idx(&img, &lbl)
            .unwrap()
            .normalize::<f64>(10, None)
            .unwrap();
        assert_eq!(ds.images.shape(), &[3, 1, 28, 28]);
        assert_eq!(ds.labels, vec![1, 7, 9]);
        assert_eq!(ds.image_shape(), [1, 28, 28]);
    }

    #[test]
    fn count_mismatch_is_format_error() {
        let (img, lbl) = idx_fixture(3, &[1, 7]);
        assert!(matches!(
            parse_idx(&img, &lbl),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let (mut img, lbl) = idx_fixture(2, &[0, 1]);
        img.pop();
        let e = parse_idx(&img, &lbl).unwrap_err();
        assert!(matches!(e, Error::Format { .. }), "{e}");
        assert!(matches!(
            parse_idx(&img[..6], &lbl),
            Err(Error::Format { offset: 4, .. })
        ));
        img[3] = 9;
        assert!(matches!(
            parse_idx(&img, &lbl),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn all_zero_pixels_normalize_to_constant() {
        let raw = RawImages {
            dims: [2, 1, 2, 2],
            pixels: vec![0; 8],
            labels: vec![0, 1],
        };
        let ds = raw.normalize::<f64>(10, None).unwrap();
        let want = (0.0 - ds.norm.mean[0]) / ds.norm.std[0];
        assert!(ds.images.data().iter().all(|&v| v == want));
    }

    #[test]
    fn label_out_of_range() {
        let raw = RawImages {
            dims: [1, 1, 1, 1],
            pixels: vec![3],
            labels: vec![12],
        };
        assert!(raw.normalize::<f64>(10, None).is_err());
    }

    #[test]
    fn normalization_moments() {
        let (img, lbl) = idx_fixture(5, &[0, 1, 2, 3, 4]);
        let ds = parse_idx(&img, &lbl)
            .unwrap()
            .normalize::<f64>(10, None)
            .unwrap();
        let v = ds.images.data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn idx_round_trip() {
        let (img, lbl) = idx_fixture(4, &[3, 1, 4, 1]);
        let ds = parse_idx(&img, &lbl)
            .unwrap()
            .normalize::<f64>(10, None)
            .unwrap();
        let (img2, lbl2) = to_idx_bytes(&ds.to_raw());
        assert_eq!((&img2, &lbl2), (&img, &lbl));
        let back = parse_idx(&img2, &lbl2)
            .unwrap()
            .normalize::<f64>(10, None)
            .unwrap();
        assert_eq!(back.images, ds.images);
    }

    #[test]
    fn cifar_records() {
        let mut rec = vec![6u8];
        rec.extend((0..3072).map(|i| (i % 251) as u8));
        let raw = parse_cifar(&rec).unwrap();
        assert_eq!(raw.dims, [1, 3, 32, 32]);
        let ds = raw.normalize::<f64>(10, None).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.norm.mean.len(), 3);

        let empty = parse_cifar(&[])
            .unwrap()
            .normalize::<f64>(10, None)
            .unwrap();
        assert_eq!(empty.len(), 0);

        assert!(matches!(
            parse_cifar(&rec[..3000]),
            Err(Error::Format { .. })
        ));
        rec[0] = 255;
        assert!(parse_cifar(&rec)
            .unwrap()
            .normalize::<f64>(10, None)
            .is_err());
    }

    fn balanced(n: usize) -> Dataset<f64> {
        RawImages {
            dims: [n, 1, 2, 2],
            pixels: (0..n * 4).map(|i| i as u8).collect(),
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
        }
        .normalize(10, None)
        .unwrap()
    }

    #[test]
    fn stratified_subsample() {
        let ds = balanced(100);
        let mut rng = Xoshiro256::seed_from_u64(3);
        let sub = subsample(&ds, 50, &mut rng).unwrap();
        assert_eq!(sub.class_histogram(), vec![5; 10]);
        assert!(subsample(&ds, 101, &mut rng).is_err());
        let again = subsample(&ds, 50, &mut Xoshiro256::seed_from_u64(3)).unwrap();
        assert_eq!(again.labels, sub.labels);
        assert_eq!(again.images, sub.images);
    }

    #[test]
    fn batches_are_deterministic_with_partial_tail() {
        let ds = balanced(10);
        let run = |seed| {
            let mut rng = Xoshiro256::seed_from_u64(seed);
            ds.batches(4, true, false, &mut rng)
                .unwrap()
                .map(|b| b.labels)
                .collect::<Vec<_>>()
        };
        let a = run(5);
        assert_eq!(a, run(5));
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn flip_mirrors_rows() {
        let ds = balanced(1);
        let mut seen_flip = false;
        for seed in 0..8 {
            let b = ds
                .batches(1, false, true, &mut Xoshiro256::seed_from_u64(seed))
                .unwrap()
                .next()
                .unwrap();
            let d = ds.images.data();
            let f = b.images.data();
            if f != d {
                assert_eq!(f, &[d[1], d[0], d[3], d[2]]);
                seen_flip = true;
            }
        }
        assert!(seen_flip);
    }
}
