//! PNG I/O, paired datasets, patch sampling and the synthetic toy corpus.
//!
//! Datasets use the layout `<root>/low/*.png` and `<root>/high/*.png` with
//! matching file names. Pairs are ordered lexicographically by file stem.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A low-light image and its reference, each `(1, 3, H, W)` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    pub low: Tensor<f32>,
    pub high: Tensor<f32>,
}

fn png_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Decodes an 8-bit RGB PNG to `(1, 3, H, W)` with values `v / 255`.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| png_err(path, e.to_string()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(
            path,
            format!(
                "expected 8-bit RGB, found {:?} at {:?} bits",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in bytes.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

/// Nearest 8-bit level of a `[0, 1]` value; out-of-range values clamp.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `(1, 3, H, W)` tensor as RGB or a `(1, 1, H, W)` tensor as
/// grayscale, 8 bits per sample.
pub fn write_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (n, c, h, w) = img.dims4()?;
    if n != 1 || (c != 3 && c != 1) {
        return Err(Error::shape(format!("cannot write {:?} as a PNG", img.shape())));
    }
    let mut bytes = vec![0u8; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            bytes[i * c + ch] = quantize(img.data()[ch * h * w + i]);
        }
    }
    let file = File::create(path).map_err(|e| png_err(path, e.to_string()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if c == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e.to_string()))?;
    writer.finish().map_err(|e| png_err(path, e.to_string()))
}

/// `*.png` files of a directory, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads every filename-matched pair under `root`.
pub fn load_pair_dataset(root: &Path) -> Result<Vec<ImagePair>> {
    let low = list_pngs(&root.join("low"))?;
    let high = list_pngs(&root.join("high"))?;
    let low_ids: Vec<String> = low.iter().map(|p| stem(p)).collect();
    let high_ids: Vec<String> = high.iter().map(|p| stem(p)).collect();
    if let Some(id) = low_ids.iter().find(|id| !high_ids.contains(id)) {
        return Err(Error::Dataset(format!("low/{id}.png has no reference in high/ (orphan \"{id}\")")));
    }
    if let Some(id) = high_ids.iter().find(|id| !low_ids.contains(id)) {
        return Err(Error::Dataset(format!("high/{id}.png has no low-light input in low/ (orphan \"{id}\")")));
    }
    let mut pairs = Vec::with_capacity(low.len());
    for (lp, id) in low.iter().zip(&low_ids) {
        let hp = &high[high_ids.iter().position(|h| h == id).expect("matched above")];
        let l = read_png(lp)?;
        let h = read_png(hp)?;
        if l.shape() != h.shape() {
            return Err(Error::Dataset(format!(
                "pair \"{id}\": low {:?} and high {:?} differ in shape",
                l.shape(),
                h.shape()
            )));
        }
        pairs.push(ImagePair {
            id: id.clone(),
            low: l,
            high: h,
        });
    }
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(pairs)
}

/// Where a patch was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchCoord {
    pub pair: usize,
    pub y: usize,
    pub x: usize,
}

pub struct PatchBatch {
    pub low: Tensor<f32>,
    pub high: Tensor<f32>,
    pub coords: Vec<PatchCoord>,
}

/// Draws `batch` random pairs and one uniform crop position for each; the
/// same window is cut from both images of a pair.
pub fn sample_patch_batch(pairs: &[ImagePair], patch: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<PatchBatch> {
    if pairs.is_empty() {
        return Err(Error::Dataset("cannot sample from an empty dataset".into()));
    }
    let mut lows = Vec::with_capacity(batch);
    let mut highs = Vec::with_capacity(batch);
    let mut coords = Vec::with_capacity(batch);
    for _ in 0..batch {
        let pair = rng.random_range(0..pairs.len());
        let p = &pairs[pair];
        let (_, _, h, w) = p.low.dims4()?;
        if patch > h || patch > w {
            return Err(Error::invalid(format!(
                "patch {patch} exceeds image \"{}\" of {h}x{w}",
                p.id
            )));
        }
        let y = rng.random_range(0..=h - patch);
        let x = rng.random_range(0..=w - patch);
        lows.push(p.low.crop(y, x, patch, patch)?);
        highs.push(p.high.crop(y, x, patch, patch)?);
        coords.push(PatchCoord { pair, y, x });
    }
    log::debug!("patch batch {coords:?}");
    Ok(PatchBatch {
        low: Tensor::stack_batch(&lows)?,
        high: Tensor::stack_batch(&highs)?,
        coords,
    })
}

// -- synthetic corpus ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "dir")]
pub enum ContentMode {
    Gradients,
    Shapes,
    /// Random crops of the PNGs found in a directory.
    TilesFromDirectory(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub count: usize,
    pub size: usize,
    pub gamma: (f64, f64),
    pub factor: (f64, f64),
    pub sigma: (f64, f64),
    pub seed: u64,
    pub content: ContentMode,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 200,
            size: 32,
            gamma: (2.0, 4.0),
            factor: (0.05, 0.3),
            sigma: (0.01, 0.05),
            seed: 0,
            content: ContentMode::Shapes,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0 <= r.1;
        if self.count == 0 || self.size == 0 {
            return Err(Error::invalid("synth count and size must be positive"));
        }
        if !ordered(self.gamma) || self.gamma.0 < 1.0 {
            return Err(Error::invalid("synth gamma range must satisfy 1 <= min <= max"));
        }
        if !ordered(self.factor) || self.factor.0 <= 0.0 || self.factor.1 > 1.0 {
            return Err(Error::invalid("synth factor range must lie in (0, 1]"));
        }
        if !ordered(self.sigma) || self.sigma.0 < 0.0 {
            return Err(Error::invalid("synth sigma range must be non-negative"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

/// `clamp(factor · ref^γ + N(0, σ²))`, elementwise.
pub fn degrade(reference: &Tensor<f32>, gamma: f64, factor: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let data = reference
        .data()
        .iter()
        .map(|&v| {
            let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (factor * f64::from(v).powf(gamma) + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    Tensor::new(reference.shape(), data)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.08..0.95), rng.random_range(0.08..0.95), rng.random_range(0.08..0.95)]
}

fn gradient_image(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (a, b) = (random_color(rng), random_color(rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut img = vec![0.0; 3 * size * size];
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f64 / s - 0.5) * dx + (y as f64 / s - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                img[(c * size + y) * size + x] = a[c] * (1.0 - t) + b[c] * t;
            }
        }
    }
    img
}

fn shapes_image(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = gradient_image(size, rng);
    let s = size as f64;
    for _ in 0..rng.random_range(2..6) {
        let color = random_color(rng);
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let r = rng.random_range(0.1 * s..0.35 * s);
        let round = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (ex, ey) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if round { ex * ex + ey * ey <= r * r } else { ex.abs() <= r && ey.abs() <= 0.6 * r };
                if inside {
                    for c in 0..3 {
                        img[(c * size + y) * size + x] = color[c];
                    }
                }
            }
        }
    }
    img
}

/// Generates `spec.count` pairs under `out/low` and `out/high`, plus
/// `manifest.json` recording the spec.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<Vec<ImagePair>> {
    spec.validate()?;
    let tiles = match &spec.content {
        ContentMode::TilesFromDirectory(dir) => {
            let srcs = list_pngs(dir)?
                .iter()
                .map(|p| read_png(p))
                .collect::<Result<Vec<_>>>()?;
            let usable: Vec<_> = srcs
                .into_iter()
                .filter(|t| t.shape()[2] >= spec.size && t.shape()[3] >= spec.size)
                .collect();
            if usable.is_empty() {
                return Err(Error::Dataset(format!(
                    "no PNG in {} is at least {}x{}",
                    dir.display(),
                    spec.size,
                    spec.size
                )));
            }
            usable
        }
        _ => Vec::new(),
    };
    fs::create_dir_all(out.join("low"))?;
    fs::create_dir_all(out.join("high"))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(spec.seed);
    let n = spec.size;
    let mut pairs = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let reference = match &spec.content {
            ContentMode::Gradients => Tensor::from_f64(&[1, 3, n, n], &gradient_image(n, &mut rng))?,
            ContentMode::Shapes => Tensor::from_f64(&[1, 3, n, n], &shapes_image(n, &mut rng))?,
            ContentMode::TilesFromDirectory(_) => {
                let t = &tiles[rng.random_range(0..tiles.len())];
                let y = rng.random_range(0..=t.shape()[2] - n);
                let x = rng.random_range(0..=t.shape()[3] - n);
                t.crop(y, x, n, n)?
            }
        };
        // Store what the PNG will hold so the returned pairs match the files.
        let reference = reference.map(|v| f32::from(quantize(v)) / 255.0);
        let gamma = uniform(&mut rng, spec.gamma);
        let factor = uniform(&mut rng, spec.factor);
        let sigma = uniform(&mut rng, spec.sigma);
        let low = degrade(&reference, gamma, factor, sigma, &mut rng)?.map(|v| f32::from(quantize(v)) / 255.0);
        let id = format!("{i:04}");
        write_png(&out.join("high").join(format!("{id}.png")), &reference)?;
        write_png(&out.join("low").join(format!("{id}.png")), &low)?;
        pairs.push(ImagePair { id, low, high: reference });
    }
    let manifest = serde_json::to_string_pretty(spec).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(out.join("manifest.json"), manifest + "\n")?;
    Ok(pairs)
}

/// Rec.601 luminance mean of a `(N, 3, H, W)` batch.
pub fn mean_luminance(img: &Tensor<f32>) -> Result<f64> {
    let (n, c, h, w) = img.dims4()?;
    if c != 3 {
        return Err(Error::shape("luminance needs RGB"));
    }
    let plane = h * w;
    let d = img.data();
    let mut acc = 0.0;
    for b in 0..n {
        let off = b * 3 * plane;
        for i in 0..plane {
            acc += 0.299 * f64::from(d[off + i]) + 0.587 * f64::from(d[off + plane + i]) + 0.114 * f64::from(d[off + 2 * plane + i]);
        }
    }
    Ok(acc / (n * plane) as f64)
}
