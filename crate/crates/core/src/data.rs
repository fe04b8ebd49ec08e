//! Synthetic shape datasets and the `HSTD` tensor file.
//!
//! Layout of an `HSTD` file, all little-endian:
//!
//! ```text
//! "HSTD" | u32 version | u64 count | u32 C | u32 H | u32 W | u32 label_width
//! count·C·H·W f32 pixels (image-major, then channel, row, column)
//! count labels, each an unsigned integer of label_width bytes
//! ```

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HstError, Result};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"HSTD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 * 4;

/// Number of distinct shape classes the generator can draw.
pub const SHAPES: usize = 10;

/// Labelled images stored as `f32` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    images: Vec<f32>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize, images: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        if images.len() != labels.len() * channels * height * width {
            return Err(HstError::dimension(format!(
                "{} pixels do not hold {} images of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    /// Gathers the given samples into `[B, C, H, W]`.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::cast(f64::from(v))));
        }
        let shape = vec![indices.len(), self.channels, self.height, self.width];
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        (Tensor::new(shape, data).expect("sizes agree"), labels)
    }

    /// Every sample in file order.
    pub fn all<T: Element>(&self) -> (Tensor<T>, Vec<usize>) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Index batches for one epoch: a shuffle seeded by `(seed, epoch)`,
    /// cut into `batch_size` chunks with the final partial batch kept.
    pub fn batch_indices(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 || batch_size > self.len() {
            return Err(HstError::config(format!(
                "batch size {batch_size} must be in 1..={}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut epoch_rng(seed, epoch));
        Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
    }

    /// Shuffled `(images, labels)` batches for one epoch.
    pub fn batches<T: Element>(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
    ) -> Result<impl Iterator<Item = (Tensor<T>, Vec<usize>)> + '_> {
        Ok(self
            .batch_indices(batch_size, seed, epoch)?
            .into_iter()
            .map(move |idx| self.batch(&idx)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.images.len() * 4 + self.labels.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for d in [self.channels, self.height, self.width, 4] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.images {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(HstError::format(0, "bad magic, expected \"HSTD\""));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(HstError::format(4, format!("unsupported version {version}")));
        }
        let count = r.u64()?;
        let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let label_at = r.pos as u64;
        let label_width = r.u32()? as usize;
        if ![1, 2, 4, 8].contains(&label_width) {
            return Err(HstError::format(
                label_at,
                format!("label width {label_width} is not 1, 2, 4 or 8"),
            ));
        }
        let image_len = c
            .checked_mul(h)
            .and_then(|n| n.checked_mul(w))
            .ok_or_else(|| HstError::format(16, "image shape overflows"))?;
        let expected = usize::try_from(count)
            .ok()
            .and_then(|n| n.checked_mul(image_len * 4 + label_width))
            .ok_or_else(|| HstError::format(8, "sample count overflows"))?;
        let payload = bytes.len() - HEADER_LEN;
        if payload != expected {
            return Err(HstError::format(
                HEADER_LEN as u64,
                format!("payload is {payload} bytes, header implies {expected}"),
            ));
        }
        let count = count as usize;
        let images = r
            .take(count * image_len * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos as u64;
            let mut buf = [0u8; 8];
            buf[..label_width].copy_from_slice(r.take(label_width)?);
            let v = u64::from_le_bytes(buf);
            labels.push(u32::try_from(v).map_err(|_| HstError::format(at, format!("label {v} out of range")))?);
        }
        Self::new(c, h, w, images, labels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(HstError::format(
                self.pos as u64,
                format!("truncated: needed {n} more bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    rng
}

/// Parameters of the synthetic shape task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Patch size of the backbone that will consume the data.
    pub patch_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

/// Per-sample nuisance draws. Shape colour and background brightness are
/// independent of the class, so colour statistics alone carry no label
/// information; only geometry does.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub center: (f64, f64),
    pub radius: f64,
    pub color: [f64; 3],
    pub background: f64,
}

impl Jitter {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Self {
        let s = size as f64;
        let radius = s * rng.random_range(0.22..0.30);
        let margin = radius + 1.0;
        let center = (
            rng.random_range(margin..s - margin),
            rng.random_range(margin..s - margin),
        );
        let background = rng.random_range(0.1..0.5);
        // foreground stays visibly brighter than the background in at least one channel
        let color = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range((background + 0.3f64).min(1.0)..1.0),
        ];
        let mut color = color;
        color.rotate_left(rng.random_range(0..3));
        Self {
            center,
            radius,
            color,
            background,
        }
    }
}

/// Coverage of pixel `(y, x)` for shape `class`, relative to the jitter frame.
fn inside(class: usize, dy: f64, dx: f64, r: f64) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    let d = (dy * dy + dx * dx).sqrt();
    let t = (0.3 * r).max(1.5);
    match class {
        0 => ay <= 0.8 * r && ax <= 0.8 * r,
        1 => d <= r,
        2 => d <= r && d >= r - t,
        3 => ay <= r && ax <= r && (ay >= r - t || ax >= r - t),
        4 => ay <= t && ax <= r,
        5 => ax <= t && ay <= r,
        6 => (ay <= t * 0.7 && ax <= r) || (ax <= t * 0.7 && ay <= r),
        7 => ay <= r && ax <= r && ((dy - dx).abs() <= t || (dy + dx).abs() <= t),
        8 => dy <= 0.8 * r && dy >= -r && ax <= (dy + r) * 0.55,
        _ => ay <= r && ax <= r && ((dy + r) / (0.5 * r)).floor() as i64 % 2 == 0,
    }
}

/// Renders one noise-free `[3, size, size]` image.
pub fn render(class: usize, jitter: &Jitter, size: usize) -> Vec<f32> {
    let mut img = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 + 0.5 - jitter.center.0;
            let dx = x as f64 + 0.5 - jitter.center.1;
            let on = inside(class, dy, dx, jitter.radius);
            for c in 0..3 {
                let v = if on { jitter.color[c] } else { jitter.background };
                img[(c * size + y) * size + x] = v as f32;
            }
        }
    }
    img
}

/// Random stream for sample `index` of a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Deterministic balanced dataset; sample `i` has label `i % num_classes`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes < 2 || spec.num_classes > SHAPES {
        return Err(HstError::config(format!(
            "data.num_classes {} must be in 2..={SHAPES}",
            spec.num_classes
        )));
    }
    if spec.patch_size == 0 || spec.image_size < 8 || !spec.image_size.is_multiple_of(spec.patch_size) {
        return Err(HstError::config(format!(
            "image size {} is incompatible with patch size {}",
            spec.image_size, spec.patch_size
        )));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(HstError::config("data.noise_std must be non-negative"));
    }
    let size = spec.image_size;
    let count = spec.num_classes * spec.samples_per_class;
    let mut images = Vec::with_capacity(count * 3 * size * size);
    let mut labels = Vec::with_capacity(count);
    let noise = Normal::new(0.0, spec.noise_std).expect("finite std");
    for i in 0..count {
        let class = i % spec.num_classes;
        let mut rng = sample_rng(spec.seed, i);
        let jitter = Jitter::draw(&mut rng, size);
        let mut img = render(class, &jitter, size);
        if spec.noise_std > 0.0 {
            for v in &mut img {
                *v = (f64::from(*v) + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        images.extend(img);
        labels.push(class as u32);
    }
    Dataset::new(3, size, size, images, labels)
}
