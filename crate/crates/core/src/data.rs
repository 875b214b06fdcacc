//! Synthetic digit scenes and the on-disk dataset format.
//!
//! A dataset directory holds `images/NNNNNN.png` and `labels.jsonl`, one
//! JSON object per line: `{"image": "images/000000.png", "labels": ["42"],
//! "boxes": [[x0, y0, x1, y1]]}`. Boxes are optional.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{imageops, GrayImage, ImageReader, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DatasetError, Error, Result};
use crate::tensor::Tensor;

/// Glyph rows, most significant bit leftmost.
const FONT: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];
const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
/// Brightness range of glyph pixels above the background ceiling.
const GLYPH_SPREAD: f64 = 0.2;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Numbers stacked vertically around the canvas centre.
    Centered,
    /// One number per cell of a regular grid, cells in row-major order.
    Grid,
    /// Rejection-sampled positions with disjoint vertical extents.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// `[height, width]`.
    pub canvas: [usize; 2],
    pub n_regions: usize,
    pub placement: Placement,
    /// Inclusive range of digits per number.
    pub digits: [usize; 2],
    /// Inclusive range of the integer glyph scale; a glyph is `5s x 7s`.
    pub scale: [usize; 2],
    /// Amplitude of background noise and blobs, in `[0, 1]`.
    pub noise: f64,
    /// Maximum offset in pixels from the nominal position.
    pub jitter: usize,
    /// Minimum brightness gap between glyph and background pixels.
    pub contrast: f64,
    /// Grid `[rows, cols]`; derived from `n_regions` when absent.
    pub grid: Option<[usize; 2]>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            canvas: [64, 64],
            n_regions: 1,
            placement: Placement::Centered,
            digits: [1, 2],
            scale: [2, 3],
            noise: 0.3,
            jitter: 4,
            contrast: 0.3,
            grid: None,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions == 0 {
            return Err(Error::Config("n_regions must be at least 1".into()));
        }
        if self.digits[0] == 0 || self.digits[0] > self.digits[1] {
            return Err(Error::Config(format!("invalid digit range {:?}", self.digits)));
        }
        if self.scale[0] == 0 || self.scale[0] > self.scale[1] {
            return Err(Error::Config(format!("invalid scale range {:?}", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config("noise must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0 - GLYPH_SPREAD).contains(&self.contrast) {
            return Err(Error::Config(format!("contrast must lie in [0, {}]", 1.0 - GLYPH_SPREAD)));
        }
        if let Some([r, c]) = self.grid {
            if r * c < self.n_regions {
                return Err(Error::Config(format!("a {r}x{c} grid cannot hold {} regions", self.n_regions)));
            }
        }
        Ok(())
    }

    /// Grid `[rows, cols]`: explicit, or `floor(sqrt(n))` columns.
    pub fn grid_shape(&self) -> [usize; 2] {
        self.grid.unwrap_or_else(|| {
            let cols = (self.n_regions as f64).sqrt().floor().max(1.0) as usize;
            [self.n_regions.div_ceil(cols), cols]
        })
    }

    /// Brightness ceiling of the background.
    fn background_max(&self) -> f64 {
        1.0 - GLYPH_SPREAD - self.contrast
    }
}

/// Number with its top-left corner and integer glyph scale.
#[derive(Clone, Debug)]
struct Placed {
    text: String,
    scale: usize,
    x: usize,
    y: usize,
}

impl Placed {
    fn size(text_len: usize, scale: usize) -> (usize, usize) {
        (text_len * GLYPH_W * scale + (text_len - 1) * scale, GLYPH_H * scale)
    }

    fn bounds(&self) -> [usize; 4] {
        let (w, h) = Self::size(self.text.len(), self.scale);
        [self.x, self.y, self.x + w, self.y + h]
    }
}

/// Image with labels only: what training sees.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// `[channels, height, width]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// One string per region, in region order.
    pub labels: Vec<String>,
}

/// Image, labels and ground-truth boxes. Boxes are for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub image: Tensor<f32>,
    /// One string per region: top to bottom, then left to right.
    pub labels: Vec<String>,
    /// `[x0, y0, x1, y1]` per region, exclusive ends.
    pub boxes: Option<Vec<[f64; 4]>>,
}

impl LabeledScene {
    /// The labels-only view used for training.
    pub fn training_sample(&self) -> TrainSample {
        TrainSample { image: self.image.clone(), labels: self.labels.clone() }
    }
}

fn random_text(rng: &mut ChaCha8Rng, digits: [usize; 2]) -> String {
    let n = rng.gen_range(digits[0]..=digits[1]);
    (0..n).map(|_| char::from(b'0' + rng.gen_range(0..10u8))).collect()
}

fn jittered(rng: &mut ChaCha8Rng, nominal: isize, jitter: usize, lo: isize, hi: isize) -> Option<usize> {
    let j = jitter as isize;
    let lo2 = (nominal - j).max(lo);
    let hi2 = (nominal + j).min(hi);
    (lo2 <= hi2).then(|| rng.gen_range(lo2..=hi2) as usize)
}

fn place(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Placed>> {
    let [ch, cw] = spec.canvas;
    let n = spec.n_regions;
    let draw = |rng: &mut ChaCha8Rng| {
        let text = random_text(rng, spec.digits);
        let scale = rng.gen_range(spec.scale[0]..=spec.scale[1]);
        (text, scale)
    };
    for _ in 0..MAX_ATTEMPTS {
        let items: Vec<(String, usize)> = (0..n).map(|_| draw(rng)).collect();
        let placed = match spec.placement {
            Placement::Centered => {
                let gap = spec.scale[1] * 2;
                let heights: Vec<usize> = items.iter().map(|(t, s)| Placed::size(t.len(), *s).1).collect();
                let total = heights.iter().sum::<usize>() + gap * (n - 1);
                let mut y = (ch as isize - total as isize) / 2;
                let mut out = Vec::with_capacity(n);
                let mut ok = true;
                for ((text, scale), h) in items.into_iter().zip(heights) {
                    let w = Placed::size(text.len(), scale).0;
                    let x0 = (cw as isize - w as isize) / 2;
                    let xs = jittered(rng, x0, spec.jitter, 0, cw as isize - w as isize);
                    let ys = jittered(rng, y, spec.jitter.min(gap / 2), 0, ch as isize - h as isize);
                    match (xs, ys) {
                        (Some(x), Some(yy)) => out.push(Placed { text, scale, x, y: yy }),
                        _ => ok = false,
                    }
                    y += (h + gap) as isize;
                }
                ok.then_some(out)
            }
            Placement::Grid => {
                let [rows, cols] = spec.grid_shape();
                let (cell_h, cell_w) = (ch / rows, cw / cols);
                let mut out = Vec::with_capacity(n);
                for (i, (text, scale)) in items.into_iter().enumerate() {
                    let (r, c) = (i / cols, i % cols);
                    let (w, h) = Placed::size(text.len(), scale);
                    if w > cell_w || h > cell_h {
                        break;
                    }
                    let (cx, cy) = ((c * cell_w) as isize, (r * cell_h) as isize);
                    let x = jittered(rng, cx + (cell_w - w) as isize / 2, spec.jitter, cx, cx + (cell_w - w) as isize);
                    let y = jittered(rng, cy + (cell_h - h) as isize / 2, spec.jitter, cy, cy + (cell_h - h) as isize);
                    out.push(Placed { text, scale, x: x.expect("inside cell"), y: y.expect("inside cell") });
                }
                (out.len() == n).then_some(out)
            }
            Placement::Random => {
                let mut out: Vec<Placed> = Vec::with_capacity(n);
                for (text, scale) in items {
                    let (w, h) = Placed::size(text.len(), scale);
                    if w > cw || h > ch {
                        break;
                    }
                    let x = rng.gen_range(0..=cw - w);
                    let y = rng.gen_range(0..=ch - h);
                    // vertical extents stay disjoint with a one pixel gap
                    let clash = out.iter().any(|p| {
                        let b = p.bounds();
                        y < b[3] + 1 && b[1] < y + h + 1
                    });
                    if clash {
                        break;
                    }
                    out.push(Placed { text, scale, x, y });
                }
                (out.len() == n).then(|| {
                    out.sort_by_key(|p| (p.y, p.x));
                    out
                })
            }
        };
        if let Some(p) = placed {
            return Ok(p);
        }
    }
    Err(Error::Placement(format!(
        "no valid {:?} layout of {n} numbers on a {ch}x{cw} canvas after {MAX_ATTEMPTS} attempts",
        spec.placement
    )))
}

fn render_background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [h, w] = spec.canvas;
    let top = spec.background_max();
    let base = rng.gen_range(0.0..=top * (1.0 - spec.noise));
    let mut img = vec![base; h * w];
    if spec.noise > 0.0 {
        let amp = spec.noise * top;
        let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.0..w as f64),
                    rng.gen_range(0.0..h as f64),
                    rng.gen_range(w as f64 / 8.0..w as f64 / 3.0),
                    rng.gen_range(0.0..amp),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let mut v = img[y * w + x];
                for &(bx, by, r, a) in &blobs {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    v += a * (-d2 / (2.0 * r * r)).exp();
                }
                v += rng.gen_range(-amp / 2.0..=amp / 2.0);
                img[y * w + x] = v;
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, top));
    img
}

/// 8-bit quantization so that PNG round trips are exact.
fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

/// Renders scene `index` of the family described by `spec`. The result
/// depends only on `(spec, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<LabeledScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let placed = place(spec, &mut rng)?;
    let [h, w] = spec.canvas;
    let mut img = render_background(spec, &mut rng);
    let glyph_lo = spec.background_max() + spec.contrast;
    for p in &placed {
        let level = rng.gen_range(glyph_lo..=1.0);
        for (k, ch) in p.text.bytes().enumerate() {
            let rows = FONT[(ch - b'0') as usize];
            let gx = p.x + k * (GLYPH_W + 1) * p.scale;
            for (r, bits) in rows.iter().enumerate() {
                for c in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - c) & 1 == 0 {
                        continue;
                    }
                    for dy in 0..p.scale {
                        for dx in 0..p.scale {
                            let (y, x) = (p.y + r * p.scale + dy, gx + c * p.scale + dx);
                            img[y * w + x] = level;
                        }
                    }
                }
            }
        }
    }
    let data = img.into_iter().map(quantize).collect();
    Ok(LabeledScene {
        image: Tensor::new(&[1, h, w], data)?,
        labels: placed.iter().map(|p| p.text.clone()).collect(),
        boxes: Some(placed.iter().map(|p| p.bounds().map(|v| v as f64)).collect()),
    })
}

/// Scenes `start..start + count` of a family.
pub fn generate_scenes(spec: &SceneSpec, start: u64, count: usize) -> Result<Vec<LabeledScene>> {
    (start..start + count as u64).map(|i| generate_scene(spec, i)).collect()
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    image: String,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<[f64; 4]>>,
}

/// Writes scenes in the dataset format under `dir`.
pub fn write_dataset(dir: &Path, scenes: &[LabeledScene]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let labels_path = dir.join("labels.jsonl");
    let file = File::create(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut out = BufWriter::new(file);
    for (i, s) in scenes.iter().enumerate() {
        let rel = format!("images/{i:06}.png");
        let path = dir.join(&rel);
        let (c, h, w) = match *s.image.shape() {
            [c, h, w] => (c, h, w),
            ref sh => return Err(Error::dim(format!("scene image must be [c, h, w], got {sh:?}"))),
        };
        if c != 1 {
            return Err(Error::dim("only single-channel scenes can be written"));
        }
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([to_u8(s.image.data()[y as usize * w + x as usize])])
        });
        img.save(&path).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        let line = LabelLine { image: rel, labels: s.labels.clone(), boxes: s.boxes.clone() };
        let json = serde_json::to_string(&line).expect("label line serializes");
        writeln!(out, "{json}").map_err(|e| Error::io(&labels_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&labels_path, e))
}

/// Split sizes for `count` items; the last split takes the remainder.
pub fn split_counts(count: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    let sum: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut out: Vec<usize> = fractions.iter().map(|f| (f * count as f64).round() as usize).collect();
    let head: usize = out[..out.len() - 1].iter().sum();
    let last = out.len() - 1;
    out[last] = count.checked_sub(head).ok_or_else(|| Error::Config("split rounding overflow".into()))?;
    Ok(out)
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Generates `count` scenes and writes them as `train`, `val` and `test`
/// subdirectories of `dir`. Splits take consecutive scene indices, so they
/// never share a scene. Returns the split sizes.
pub fn make_dataset(spec: &SceneSpec, count: usize, split: [f64; 3], dir: &Path) -> Result<[usize; 3]> {
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    let sizes = split_counts(count, &split)?;
    let mut start = 0u64;
    for (name, &n) in SPLIT_NAMES.iter().zip(&sizes) {
        if n > 0 {
            let scenes = generate_scenes(spec, start, n)?;
            write_dataset(&dir.join(name), &scenes)?;
        }
        start += n as u64;
    }
    Ok([sizes[0], sizes[1], sizes[2]])
}

fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    let decode_err = |reason: String| DatasetError::Decode { path: path.to_path_buf(), reason };
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(&[1, h, w], data)
}

/// Reads a single grayscale image as `[1, h, w]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    decode_image(path)
}

/// Bilinear resize of a `[1, h, w]` image to `[1, size[0], size[1]]`.
pub fn resize_image(image: &Tensor<f32>, size: [usize; 2]) -> Result<Tensor<f32>> {
    let [1, h, w] = *image.shape() else {
        return Err(Error::dim(format!("expected a [1, h, w] image, got {:?}", image.shape())));
    };
    if [h, w] == size {
        return Ok(image.clone());
    }
    let src = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(image.data()[y as usize * w + x as usize])]));
    let out = imageops::resize(&src, size[1] as u32, size[0] as u32, imageops::FilterType::Triangle);
    Tensor::new(&[1, size[0], size[1]], out.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[1, h, w]` image as RGB PNG with each `[x0, y0, x1, y1]` box
/// drawn as a 1-pixel outline. Boxes are clipped to the image.
pub fn write_annotated(path: &Path, image: &Tensor<f32>, boxes: &[[f64; 4]]) -> Result<()> {
    let [1, h, w] = *image.shape() else {
        return Err(Error::dim(format!("expected a [1, h, w] image, got {:?}", image.shape())));
    };
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = to_u8(image.data()[y as usize * w + x as usize]);
        Rgb([v, v, v])
    });
    const COLORS: [[u8; 3]; 4] = [[255, 0, 0], [0, 200, 0], [0, 96, 255], [255, 160, 0]];
    for (i, b) in boxes.iter().enumerate() {
        let color = Rgb(COLORS[i % COLORS.len()]);
        let clip = |v: f64, hi: usize| v.round().clamp(0.0, (hi - 1) as f64) as u32;
        let (x0, x1) = (clip(b[0], w), clip(b[2] - 1.0, w));
        let (y0, y1) = (clip(b[1], h), clip(b[3] - 1.0, h));
        for x in x0.min(x1)..=x0.max(x1) {
            img.put_pixel(x, y0, color);
            img.put_pixel(x, y1, color);
        }
        for y in y0.min(y1)..=y0.max(y1) {
            img.put_pixel(x0, y, color);
            img.put_pixel(x1, y, color);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Loads a dataset directory, optionally shuffled with a seeded
/// permutation. When `expect` is given, every image must be `[h, w]`.
pub fn load_dataset(dir: &Path, shuffle: Option<u64>, expect: Option<[usize; 2]>) -> Result<Vec<LabeledScene>> {
    let labels_path = dir.join("labels.jsonl");
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    if !labels_path.exists() {
        return Err(DatasetError::Empty(dir.to_path_buf()).into());
    }
    let file = File::open(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut scenes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&labels_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| DatasetError::MalformedLabel { path: labels_path.clone(), line: i + 1, reason };
        let entry: LabelLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if let Some(b) = &entry.boxes {
            if b.len() != entry.labels.len() {
                return Err(malformed(format!("{} boxes for {} labels", b.len(), entry.labels.len())).into());
            }
        }
        let image_path = dir.join(&entry.image);
        if !image_path.is_file() {
            return Err(DatasetError::MissingImage { image: image_path, labels: labels_path.clone(), line: i + 1 }.into());
        }
        let image = decode_image(&image_path)?;
        if let Some([eh, ew]) = expect {
            let (h, w) = (image.shape()[1], image.shape()[2]);
            if [h, w] != [eh, ew] {
                return Err(DatasetError::SizeMismatch {
                    path: image_path,
                    found_w: w,
                    found_h: h,
                    expected_w: ew,
                    expected_h: eh,
                }
                .into());
            }
        }
        scenes.push(LabeledScene { image, labels: entry.labels, boxes: entry.boxes });
    }
    if scenes.is_empty() {
        return Err(DatasetError::Empty(dir.to_path_buf()).into());
    }
    if let Some(seed) = shuffle {
        scenes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(scenes)
}

/// Directory of split `name` inside a dataset written by [`make_dataset`].
pub fn split_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(s: &LabeledScene, x: usize, y: usize) -> f32 {
        let w = s.image.shape()[2];
        s.image.data()[y * w + x]
    }

    #[test]
    fn centered_single_digit_without_noise() {
        let spec = SceneSpec { digits: [1, 1], scale: [3, 3], noise: 0.0, jitter: 0, ..SceneSpec::default() };
        let s = generate_scene(&spec, 0).unwrap();
        assert_eq!(s.labels.len(), 1);
        let b = s.boxes.as_ref().unwrap()[0];
        // 15 x 21 glyph centred on 64 x 64
        assert_eq!(b, [24.0, 21.0, 39.0, 42.0]);
    }

    #[test]
    fn grid_of_four_is_row_major() {
        let spec = SceneSpec { n_regions: 4, placement: Placement::Grid, scale: [2, 2], ..SceneSpec::default() };
        assert_eq!(spec.grid_shape(), [2, 2]);
        for i in 0..20 {
            let s = generate_scene(&spec, i).unwrap();
            for (k, b) in s.boxes.unwrap().iter().enumerate() {
                let (r, c) = (k / 2, k % 2);
                assert!(b[0] >= (c * 32) as f64 && b[2] <= ((c + 1) * 32) as f64);
                assert!(b[1] >= (r * 32) as f64 && b[3] <= ((r + 1) * 32) as f64);
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec { n_regions: 3, placement: Placement::Random, seed: 5, ..SceneSpec::default() };
        assert_eq!(generate_scene(&spec, 7).unwrap(), generate_scene(&spec, 7).unwrap());
        assert_ne!(generate_scene(&spec, 7).unwrap(), generate_scene(&spec, 8).unwrap());
    }

    #[test]
    fn glyphs_clear_the_background() {
        let spec = SceneSpec { noise: 1.0, ..SceneSpec::default() };
        let s = generate_scene(&spec, 3).unwrap();
        let b = s.boxes.as_ref().unwrap()[0].map(|v| v as usize);
        let bg_max = 1.0 - GLYPH_SPREAD - spec.contrast;
        let w = s.image.shape()[2];
        for (i, &v) in s.image.data().iter().enumerate() {
            let (x, y) = (i % w, i / w);
            let inside = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
            if !inside {
                assert!(v as f64 <= bg_max + 1.0 / 255.0, "({x}, {y}) = {v}");
            }
        }
        let _ = pixel(&s, 0, 0);
    }

    #[test]
    fn impossible_layout_is_an_error() {
        let spec = SceneSpec { n_regions: 6, placement: Placement::Random, scale: [3, 3], ..SceneSpec::default() };
        assert!(matches!(generate_scene(&spec, 0), Err(Error::Placement(_))));
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_counts(100, &[0.8, 0.1, 0.1]).unwrap(), vec![80, 10, 10]);
        assert!(split_counts(10, &[0.5, 0.6]).is_err());
    }
}
