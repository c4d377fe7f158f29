//! Dataset parsing (IDX, CIFAR-10 binary, raw MSPD container), augmentation,
//! and deterministic batch iteration.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MSPD_MAGIC: &[u8; 4] = b"MSPD";
const CIFAR_RECORD: usize = 3073;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images in [0,1] plus labels; raw, pre-normalization.
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Keeps the first n samples (deterministic subset).
    pub fn truncate(&mut self, n: usize) {
        if n >= self.len() {
            return;
        }
        let (c, h, w) = self.dims();
        let data = self.images.data()[..n * c * h * w].to_vec();
        self.images = Tensor::new(vec![n, c, h, w], data).expect("prefix keeps layout");
        self.labels.truncate(n);
    }

    fn image(&self, index: usize) -> &[f32] {
        let (c, h, w) = self.dims();
        let sz = c * h * w;
        &self.images.data()[index * sz..(index + 1) * sz]
    }
}

// ── binary readers ───────────────────────────────────────────────────────

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.offset,
                msg: format!("truncated while reading {what} ({n} bytes wanted, {} left)", self.bytes.len() - self.offset),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// IDX image file (big-endian header) to (N,1,rows,cols) pixels in [0,1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes);
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad IDX image magic {magic:#010x}, want {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = r.u32_be("count")? as usize;
    let rows = r.u32_be("rows")? as usize;
    let cols = r.u32_be("cols")? as usize;
    let px = r.take(n * rows * cols, "pixels")?;
    let data: Vec<f32> = px.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

/// IDX label file to a label vector.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader::new(bytes);
    let magic = r.u32_be("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad IDX label magic {magic:#010x}, want {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = r.u32_be("count")? as usize;
    Ok(r.take(n, "labels")?.to_vec())
}

/// CIFAR-10 binary batch: records of 1 label byte + 3072 pixels (R,G,B planes).
pub fn parse_cifar10_bin(bytes: &[u8]) -> Result<(Tensor<f32>, Vec<u8>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            offset: bytes.len() - bytes.len() % CIFAR_RECORD,
            msg: format!("file length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], data)?, labels))
}

/// Raw tensor container: "MSPD" magic, u32 LE N,C,H,W, f32 LE payload.
pub fn parse_mspd(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MSPD_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad MSPD magic {magic:?}"),
        });
    }
    let n = r.u32_le("N")? as usize;
    let c = r.u32_le("C")? as usize;
    let h = r.u32_le("H")? as usize;
    let w = r.u32_le("W")? as usize;
    let payload = r.take(n * c * h * w * 4, "payload")?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(vec![n, c, h, w], data)
}

pub fn write_mspd(path: &Path, images: &Tensor<f32>) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Contract(format!("MSPD wants (N,C,H,W), got {s:?}")));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MSPD_MAGIC)?;
    for &d in s {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in images.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Sidecar labels file: N raw bytes.
pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    std::fs::write(path, labels)?;
    Ok(())
}

// ── dataset loading by name ──────────────────────────────────────────────

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Format {
        offset: 0,
        msg: format!("cannot read {}: {e}", path.display()),
    })
}

fn check_lengths(name: &str, images: &Tensor<f32>, labels: &[u8]) -> Result<()> {
    if images.shape()[0] != labels.len() {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "{name}: {} images but {} labels",
                images.shape()[0],
                labels.len()
            ),
        });
    }
    Ok(())
}

/// Loads a dataset by canonical name from a directory of distribution files.
/// MNIST/FashionMNIST use the IDX pair, CIFAR-10 the binary batches, and
/// SVHN (or anything else) the MSPD container pair `<name>-<split>.mspd` +
/// `<name>-<split>.labels`.
pub fn load_dataset(name: &str, dir: &Path, split: Split) -> Result<Dataset> {
    let canonical = name.to_ascii_lowercase().replace(['-', '_'], "");
    let (images, labels) = match canonical.as_str() {
        "mnist" | "fashionmnist" => {
            let prefix = if split == Split::Train { "train" } else { "t10k" };
            let images = parse_idx_images(&read(&dir.join(format!("{prefix}-images-idx3-ubyte")))?)?;
            let labels = parse_idx_labels(&read(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?)?;
            (images, labels)
        }
        "cifar10" => {
            let files: Vec<String> = if split == Split::Train {
                (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
            } else {
                vec!["test_batch.bin".to_string()]
            };
            let mut all_data = Vec::new();
            let mut all_labels = Vec::new();
            let mut n = 0;
            for f in files {
                let (imgs, labels) = parse_cifar10_bin(&read(&dir.join(f))?)?;
                n += imgs.shape()[0];
                all_data.extend_from_slice(imgs.data());
                all_labels.extend(labels);
            }
            (Tensor::new(vec![n, 3, 32, 32], all_data)?, all_labels)
        }
        _ => {
            let split_name = if split == Split::Train { "train" } else { "test" };
            let images = parse_mspd(&read(&dir.join(format!("{canonical}-{split_name}.mspd")))?)?;
            let labels = read(&dir.join(format!("{canonical}-{split_name}.labels")))?;
            (images, labels)
        }
    };
    check_lengths(name, &images, &labels)?;
    let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1).max(10);
    Ok(Dataset {
        name: canonical,
        split,
        images,
        labels,
        num_classes,
    })
}

// ── augmentation ─────────────────────────────────────────────────────────

/// Per-dataset preprocessing policy. Random steps apply to the train split
/// only; resize and normalization apply to both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub resize_to: Option<usize>,
    pub rotation_deg: Option<f64>,
    pub hflip: bool,
    pub crop_pad: Option<usize>,
    pub normalize_mean: Vec<f32>,
    pub normalize_std: Vec<f32>,
}

impl AugmentPolicy {
    /// The published per-dataset recipes.
    pub fn for_dataset(name: &str) -> Result<Self> {
        let canonical = name.to_ascii_lowercase().replace(['-', '_'], "");
        match canonical.as_str() {
            "mnist" => Ok(AugmentPolicy {
                resize_to: Some(32),
                rotation_deg: Some(15.0),
                hflip: false,
                crop_pad: None,
                normalize_mean: vec![0.5],
                normalize_std: vec![0.5],
            }),
            "fashionmnist" => Ok(AugmentPolicy {
                resize_to: Some(32),
                rotation_deg: None,
                hflip: true,
                crop_pad: Some(4),
                normalize_mean: vec![0.5],
                normalize_std: vec![0.5],
            }),
            "svhn" => Ok(AugmentPolicy {
                resize_to: None,
                rotation_deg: Some(15.0),
                hflip: false,
                crop_pad: Some(4),
                normalize_mean: vec![0.5; 3],
                normalize_std: vec![0.5; 3],
            }),
            "cifar10" => Ok(AugmentPolicy {
                resize_to: None,
                rotation_deg: None,
                hflip: true,
                crop_pad: Some(4),
                normalize_mean: vec![0.4914, 0.4822, 0.4465],
                normalize_std: vec![0.2023, 0.1994, 0.2010],
            }),
            other => Err(Error::Config(format!("no augmentation policy for dataset `{other}`"))),
        }
    }

    /// Identity policy (no resizing, no randomness, no normalization shift).
    pub fn none(channels: usize) -> Self {
        AugmentPolicy {
            resize_to: None,
            rotation_deg: None,
            hflip: false,
            crop_pad: None,
            normalize_mean: vec![0.0; channels],
            normalize_std: vec![1.0; channels],
        }
    }

    /// Output spatial side for images of side `h`.
    pub fn out_hw(&self, h: usize) -> usize {
        self.resize_to.unwrap_or(h)
    }
}

fn pad_center(img: &[f32], c: usize, h: usize, w: usize, target: usize) -> Vec<f32> {
    let top = (target - h) / 2;
    let left = (target - w) / 2;
    let mut out = vec![0.0f32; c * target * target];
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * h + y) * w;
            let dst = (ch * target + top + y) * target + left;
            out[dst..dst + w].copy_from_slice(&img[src..src + w]);
        }
    }
    out
}

/// Rotation about the image center with bilinear resampling and zero fill.
fn rotate_bilinear(img: &[f32], c: usize, h: usize, w: usize, angle_deg: f64) -> Vec<f32> {
    let theta = angle_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            // inverse-rotate the output coordinate into the source image
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = cos_t * dx + sin_t * dy + cx;
            let sy = -sin_t * dx + cos_t * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let sample = |ch: usize, yy: isize, xx: isize| -> f64 {
                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                    0.0
                } else {
                    img[(ch * h + yy as usize) * w + xx as usize] as f64
                }
            };
            for ch in 0..c {
                let v = sample(ch, y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + sample(ch, y0, x0 + 1) * fx * (1.0 - fy)
                    + sample(ch, y0 + 1, x0) * (1.0 - fx) * fy
                    + sample(ch, y0 + 1, x0 + 1) * fx * fy;
                out[(ch * h + y) * w + x] = v as f32;
            }
        }
    }
    out
}

fn hflip(img: &mut [f32], c: usize, h: usize, w: usize) {
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            img[row..row + w].reverse();
        }
    }
}

fn crop_offsets(rng: &mut ChaCha8Rng, pad: usize) -> (usize, usize) {
    let oy = rng.random_range(0..=2 * pad);
    let ox = rng.random_range(0..=2 * pad);
    (oy, ox)
}

/// Zero-pad `pad` on every side, then cut the uniform-random window of the
/// original size.
fn pad_crop(img: &[f32], c: usize, h: usize, w: usize, pad: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (oy, ox) = crop_offsets(rng, pad);
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            // source row y+oy of the padded image = row y+oy-pad of the original
            let sy = y as isize + oy as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + ox as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

fn normalize(img: &mut [f32], c: usize, plane: usize, mean: &[f32], std: &[f32]) {
    for ch in 0..c {
        let (m, s) = (mean[ch], std[ch]);
        for v in &mut img[ch * plane..(ch + 1) * plane] {
            *v = (*v - m) / s;
        }
    }
}

/// Full train-split pipeline for one image: resize, rotate, flip, crop,
/// normalize. Randomness comes only from `rng`.
pub fn augment(img: &[f32], c: usize, h: usize, w: usize, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut cur: Vec<f32>;
    let (mut h, w) = (h, w);
    if let Some(target) = policy.resize_to {
        cur = pad_center(img, c, h, w, target);
        h = target;
    } else {
        cur = img.to_vec();
    }
    let hw = h; // square from here on
    debug_assert!(policy.resize_to.is_some() || h == w);
    if let Some(range) = policy.rotation_deg {
        let angle = rng.random_range(-range..=range);
        cur = rotate_bilinear(&cur, c, hw, hw, angle);
    }
    if policy.hflip && rng.random::<bool>() {
        hflip(&mut cur, c, hw, hw);
    }
    if let Some(pad) = policy.crop_pad {
        cur = pad_crop(&cur, c, hw, hw, pad, rng);
    }
    normalize(&mut cur, c, hw * hw, &policy.normalize_mean, &policy.normalize_std);
    cur
}

/// Deterministic test-split pipeline: resize and normalize only.
pub fn preprocess_eval(img: &[f32], c: usize, h: usize, w: usize, policy: &AugmentPolicy) -> Vec<f32> {
    let mut cur;
    let hw;
    if let Some(target) = policy.resize_to {
        cur = pad_center(img, c, h, w, target);
        hw = target;
    } else {
        cur = img.to_vec();
        hw = h;
    }
    normalize(&mut cur, c, hw * hw, &policy.normalize_mean, &policy.normalize_std);
    cur
}

/// Resize-only variant, for attack pipelines that keep raw [0,1] pixels.
pub fn preprocess_raw(img: &[f32], c: usize, h: usize, w: usize, policy: &AugmentPolicy) -> Vec<f32> {
    if let Some(target) = policy.resize_to {
        pad_center(img, c, h, w, target)
    } else {
        img.to_vec()
    }
}

// ── batching ─────────────────────────────────────────────────────────────

/// Independent consumers of the derived RNG streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDomain {
    Shuffle = 1,
    Augment = 2,
    Dropout = 3,
}

/// RNG substream for one (seed, a, b, domain) tuple; collision-free by
/// construction of the 32-byte seed. Streams are derived rather than
/// serialized, so resumption needs only the seeds and counters.
pub fn stream_rng(seed: u64, a: u64, b: u64, domain: StreamDomain) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24] = domain as u8;
    ChaCha8Rng::from_seed(key)
}

/// Seeded Fisher-Yates order for one epoch.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(shuffle_seed, epoch, 0, StreamDomain::Shuffle);
    order.shuffle(&mut rng);
    order
}

/// One assembled batch: normalized pixels plus labels.
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

/// Iterates an epoch in deterministic batches. Train splits shuffle
/// (seeded per epoch) and augment per item; test splits keep order and only
/// resize + normalize. The final partial batch is kept.
pub fn epoch_batches<'a>(
    dataset: &'a Dataset,
    policy: &'a AugmentPolicy,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    augment_seed: Option<u64>,
    epoch: u64,
) -> impl Iterator<Item = Batch> + 'a {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let order = match shuffle_seed {
        Some(seed) => epoch_order(dataset.len(), seed, epoch),
        None => (0..dataset.len()).collect(),
    };
    let (c, h, w) = dataset.dims();
    let out_hw = policy.out_hw(h);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|s| s.to_vec()).collect();
    chunks.into_iter().map(move |idxs| {
        let mut data = Vec::with_capacity(idxs.len() * c * out_hw * out_hw);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let img = dataset.image(i);
            let processed = match augment_seed {
                Some(seed) => {
                    let mut rng = stream_rng(seed, epoch, i as u64, StreamDomain::Augment);
                    augment(img, c, h, w, policy, &mut rng)
                }
                None => preprocess_eval(img, c, h, w, policy),
            };
            data.extend_from_slice(&processed);
            labels.push(dataset.labels[i]);
        }
        Batch {
            images: Tensor::new(vec![idxs.len(), c, out_hw, out_hw], data).expect("batch layout"),
            labels,
        }
    })
}

/// Batches of raw [0,1] pixels (resized but not normalized), in dataset
/// order. Attack pipelines normalize inside the gradient graph instead.
pub fn epoch_batches_raw<'a>(
    dataset: &'a Dataset,
    policy: &'a AugmentPolicy,
    batch_size: usize,
) -> impl Iterator<Item = Batch> + 'a {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let (c, h, w) = dataset.dims();
    let out_hw = policy.out_hw(h);
    let order: Vec<usize> = (0..dataset.len()).collect();
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|s| s.to_vec()).collect();
    chunks.into_iter().map(move |idxs| {
        let mut data = Vec::with_capacity(idxs.len() * c * out_hw * out_hw);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            data.extend_from_slice(&preprocess_raw(dataset.image(i), c, h, w, policy));
            labels.push(dataset.labels[i]);
        }
        Batch {
            images: Tensor::new(vec![idxs.len(), c, out_hw, out_hw], data).expect("batch layout"),
            labels,
        }
    })
}

/// Converts a prepared f32 batch into the model's scalar type.
pub fn batch_to<T: Scalar>(images: &Tensor<f32>) -> Tensor<T> {
    Tensor::new(
        images.shape().to_vec(),
        images.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
    .expect("same layout")
}
