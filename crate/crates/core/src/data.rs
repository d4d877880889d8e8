//! Datasets: PNG directory ingestion, the two-mode toy generator, batching,
//! and image export.

use std::collections::HashMap;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PdmError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Maps a byte to `[-1, 1]` via `x / 127.5 - 1`.
pub fn normalize_u8<S: Scalar>(v: u8) -> S {
    S::of(v as f64 / 127.5 - 1.0)
}

/// Inverse of [`normalize_u8`] after clamping to `[-1, 1]`.
pub fn to_u8<S: Scalar>(v: S) -> u8 {
    let x = v.as_f64().clamp(-1.0, 1.0);
    ((x + 1.0) * 127.5).round() as u8
}

/// Images sharing one `[C, H, W]` shape, with optional class labels.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    pub name: String,
    pub shape: [usize; 3],
    pub images: Vec<Vec<S>>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

/// A stacked minibatch.
#[derive(Clone, Debug)]
pub struct Batch<S> {
    pub images: Tensor<S>,
    pub labels: Option<Vec<usize>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<S>> {
        let items: Vec<&[S]> = indices.iter().map(|&i| self.images[i].as_slice()).collect();
        let images = Tensor::stack(&items, &self.shape)?;
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Batch { images, labels })
    }

    /// Every item, in order, as one batch.
    pub fn all(&self) -> Result<Batch<S>> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            name: self.name.clone(),
            shape: self.shape,
            images: self.images.iter().map(|im| im.iter().map(|x| T::of(x.as_f64())).collect()).collect(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// A seeded permutation of `0..n`.
pub fn shuffled_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

const TWO_MODE_DARK: f64 = -0.8;
const TWO_MODE_BRIGHT: f64 = 0.8;
const TWO_MODE_TEXTURE_STD: f64 = 0.1;

/// Toy images with a bright rectangle on the left (label 0) or right (label 1)
/// half over a dark background, plus Gaussian texture noise. Labels alternate.
pub fn synth_two_mode<S: Scalar>(n: usize, size: usize, seed: u64) -> Result<Dataset<S>> {
    if size < 8 {
        return Err(PdmError::InvalidRange(format!("two-mode images need size >= 8, got {size}")));
    }
    if n == 0 || !n.is_multiple_of(2) {
        return Err(PdmError::InvalidRange(format!("two-mode dataset needs a positive even count, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, TWO_MODE_TEXTURE_STD).expect("valid std");
    let (margin, half) = (size / 8, size / 2);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let cols = if label == 0 { margin..half } else { half..size - margin };
        let mut img = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let lit = (margin..size - margin).contains(&y) && cols.contains(&x);
                let base = if lit { TWO_MODE_BRIGHT } else { TWO_MODE_DARK };
                img.push(S::of((base + noise.sample(&mut rng)).clamp(-1.0, 1.0)));
            }
        }
        images.push(img);
        labels.push(label);
    }
    Ok(Dataset { name: "two_mode".into(), shape: [1, size, size], images, labels: Some(labels), num_classes: 2 })
}

/// Pixel-mass classifier for two-mode images: 0 if the left half is brighter.
pub fn two_mode_oracle<S: Scalar>(image: &[S], shape: [usize; 3]) -> usize {
    let [c, h, w] = shape;
    let (mut left, mut right) = (0.0, 0.0);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = image[(ch * h + y) * w + x].as_f64();
                if x < w / 2 {
                    left += v;
                } else {
                    right += v;
                }
            }
        }
    }
    usize::from(left <= right)
}

fn read_labels(path: &Path) -> Result<HashMap<String, usize>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| PdmError::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| PdmError::Data(format!("{}: {e}", path.display())))?.clone();
    if headers.len() < 2 || &headers[0] != "filename" || &headers[1] != "label" {
        return Err(PdmError::Data(format!("{}: header must be 'filename,label'", path.display())));
    }
    let mut map = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| PdmError::Data(format!("{}: {e}", path.display())))?;
        let label = rec[1]
            .trim()
            .parse::<usize>()
            .map_err(|e| PdmError::Data(format!("{} row {}: bad label '{}': {e}", path.display(), i + 2, &rec[1])))?;
        map.insert(rec[0].trim().to_string(), label);
    }
    Ok(map)
}

/// Loads every `.png` in `dir` (sorted by name), scaled to `[-1, 1]`, channel-first.
///
/// Grayscale files yield one channel; anything else is converted to RGB.
pub fn load_image_dir<S: Scalar>(dir: &Path, labels_file: Option<&Path>) -> Result<Dataset<S>> {
    let entries = std::fs::read_dir(dir).map_err(|e| PdmError::Data(format!("cannot read dataset directory {}: {e}", dir.display())))?;
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(PdmError::Data(format!("no PNG images in {}", dir.display())));
    }
    let label_map = labels_file.map(read_labels).transpose()?;

    let mut shape: Option<[usize; 3]> = None;
    let mut images = Vec::with_capacity(files.len());
    let mut labels = Vec::new();
    for path in &files {
        let img = image::open(path).map_err(|e| PdmError::Data(format!("cannot decode {}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let c = if shape.map_or(is_gray(&img), |s| s[0] == 1) { 1 } else { 3 };
        let this = [c, h, w];
        match shape {
            None => shape = Some(this),
            Some(s) if s[1] != h || s[2] != w => {
                return Err(PdmError::Data(format!(
                    "mixed resolutions: {} is {w}x{h}, expected {}x{}",
                    path.display(),
                    s[2],
                    s[1]
                )))
            }
            _ => {}
        }
        let data = pixels(&img, c);
        images.push(data);
        if let Some(map) = &label_map {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            match map.get(name) {
                Some(&l) => labels.push(l),
                None => return Err(PdmError::Data(format!("no label row for {name}"))),
            }
        }
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        name: dir.file_name().and_then(|n| n.to_str()).unwrap_or("images").to_string(),
        shape: shape.expect("at least one file"),
        images,
        labels: label_map.map(|_| labels),
        num_classes,
    })
}

fn is_gray(img: &DynamicImage) -> bool {
    matches!(img, DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_))
}

/// Channel-first `[-1, 1]` pixels of `img` with `c` (1 or 3) channels.
fn pixels<S: Scalar>(img: &DynamicImage, c: usize) -> Vec<S> {
    if c == 1 {
        return img.to_luma8().into_raw().into_iter().map(normalize_u8).collect();
    }
    let (h, w) = (img.height() as usize, img.width() as usize);
    let raw = img.to_rgb8().into_raw();
    let mut out = vec![S::zero(); 3 * h * w];
    for (p, px) in raw.chunks(3).enumerate() {
        for ch in 0..3 {
            out[ch * h * w + p] = normalize_u8(px[ch]);
        }
    }
    out
}

/// Loads one PNG as `[-1, 1]` pixels with `channels` (1 or 3) channels.
pub fn load_png<S: Scalar>(path: &Path, channels: usize) -> Result<(Vec<S>, [usize; 3])> {
    if channels != 1 && channels != 3 {
        return Err(PdmError::Data(format!("cannot load an image with {channels} channels")));
    }
    let img = image::open(path).map_err(|e| PdmError::Data(format!("cannot decode {}: {e}", path.display())))?;
    let shape = [channels, img.height() as usize, img.width() as usize];
    Ok((pixels(&img, channels), shape))
}

fn to_dynamic<S: Scalar>(image: &[S], shape: [usize; 3]) -> Result<DynamicImage> {
    let [c, h, w] = shape;
    match c {
        1 => {
            let buf: GrayImage = ImageBuffer::from_raw(w as u32, h as u32, image.iter().map(|&v| to_u8(v)).collect())
                .ok_or_else(|| PdmError::Data("image buffer size mismatch".into()))?;
            Ok(DynamicImage::ImageLuma8(buf))
        }
        3 => {
            let mut raw = vec![0u8; 3 * h * w];
            for p in 0..h * w {
                for ch in 0..3 {
                    raw[p * 3 + ch] = to_u8(image[ch * h * w + p]);
                }
            }
            let buf: RgbImage = ImageBuffer::from_raw(w as u32, h as u32, raw)
                .ok_or_else(|| PdmError::Data("image buffer size mismatch".into()))?;
            Ok(DynamicImage::ImageRgb8(buf))
        }
        _ => Err(PdmError::Data(format!("cannot export {c}-channel image"))),
    }
}

/// Writes a `[-1, 1]` channel-first image as PNG.
pub fn save_png<S: Scalar>(image: &[S], shape: [usize; 3], path: &Path) -> Result<()> {
    to_dynamic(image, shape)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| PdmError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Row-major `ceil(sqrt(n))`-column grid of images, unfilled cells black.
pub fn grid<S: Scalar>(images: &[Vec<S>], shape: [usize; 3]) -> (Vec<S>, [usize; 3]) {
    let [c, h, w] = shape;
    let n = images.len().max(1);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![-S::one(); c * gh * gw];
    for (i, im) in images.iter().enumerate() {
        let (r, col) = (i / cols, i % cols);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * gh + r * h + y) * gw + col * w + x] = im[(ch * h + y) * w + x];
                }
            }
        }
    }
    (out, [c, gh, gw])
}
