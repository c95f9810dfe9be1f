//! Images to token grids, normalized reconstruction targets, synthetic
//! datasets, and the binary dataset archive format.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{MapError, Result};
use crate::rng::MapRng;
use crate::tensor::{Real, Tensor};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"MAPDATA1";
pub const ARCHIVE_VERSION: u32 = 1;

/// Raw image in [0,1], stored channel-major row-major as f32 (the archive's
/// pixel type, independent of the compute precision).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), channels * height * width);
        Image {
            channels,
            height,
            width,
            pixels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub label: u32,
    pub image: Image,
}

/// Patchified image: an M x N grid of D-dimensional tokens plus the flattened
/// row-major scan sequence.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_dim: usize,
    /// [rows*cols, patch_dim], row-major scan order.
    pub tokens: Vec<Real>,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens_tensor(&self) -> Tensor {
        Tensor::from_vec(self.tokens.clone(), &[self.len(), self.patch_dim], false).unwrap()
    }
}

/// Per-token standardized pixel targets plus the statistics to undo them.
#[derive(Clone, Debug)]
pub struct ReconstructionTarget {
    /// [rows*cols, patch_dim]
    pub values: Vec<Real>,
    pub mean: Vec<Real>,
    /// sqrt(var + eps) actually used in the denominator.
    pub std: Vec<Real>,
    pub patch_dim: usize,
}

pub const TARGET_EPS: Real = 1e-6;

/// Split an image into non-overlapping patches; token (i,j) holds exactly the
/// pixels of grid cell (i,j), channel-major then row-major within the patch.
pub fn patchify(image: &Image, patch_h: usize, patch_w: usize) -> Result<TokenGrid> {
    if patch_h == 0 || patch_w == 0 || image.height % patch_h != 0 || image.width % patch_w != 0 {
        return Err(MapError::Tiling(format!(
            "image {}x{} not divisible by patch {}x{}",
            image.height, image.width, patch_h, patch_w
        )));
    }
    let m = image.height / patch_h;
    let n = image.width / patch_w;
    let d = patch_h * patch_w * image.channels;
    let mut tokens = vec![0.0 as Real; m * n * d];
    for gi in 0..m {
        for gj in 0..n {
            let tok = &mut tokens[(gi * n + gj) * d..(gi * n + gj + 1) * d];
            let mut k = 0;
            for c in 0..image.channels {
                for py in 0..patch_h {
                    for px in 0..patch_w {
                        let y = gi * patch_h + py;
                        let x = gj * patch_w + px;
                        tok[k] = image.pixels[(c * image.height + y) * image.width + x] as Real;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(TokenGrid {
        rows: m,
        cols: n,
        patch_dim: d,
        tokens,
        patch_h,
        patch_w,
        channels: image.channels,
    })
}

/// Exact inverse of `patchify`.
pub fn unpatchify(grid: &TokenGrid) -> Image {
    let h = grid.rows * grid.patch_h;
    let w = grid.cols * grid.patch_w;
    let mut pixels = vec![0.0f32; grid.channels * h * w];
    for gi in 0..grid.rows {
        for gj in 0..grid.cols {
            let tok = &grid.tokens[(gi * grid.cols + gj) * grid.patch_dim..];
            let mut k = 0;
            for c in 0..grid.channels {
                for py in 0..grid.patch_h {
                    for px in 0..grid.patch_w {
                        let y = gi * grid.patch_h + py;
                        let x = gj * grid.patch_w + px;
                        pixels[(c * h + y) * w + x] = tok[k] as f32;
                        k += 1;
                    }
                }
            }
        }
    }
    Image::new(grid.channels, h, w, pixels)
}

/// Per-token standardization of the original pixels (normalized-pixel target).
pub fn make_targets(grid: &TokenGrid) -> ReconstructionTarget {
    let d = grid.patch_dim;
    let l = grid.len();
    let mut values = vec![0.0; l * d];
    let mut mean = vec![0.0; l];
    let mut std = vec![0.0; l];
    for t in 0..l {
        let tok = &grid.tokens[t * d..(t + 1) * d];
        let mu: Real = tok.iter().sum::<Real>() / d as Real;
        let var: Real = tok.iter().map(|v| (v - mu) * (v - mu)).sum::<Real>() / d as Real;
        let sd = (var + TARGET_EPS).sqrt();
        mean[t] = mu;
        std[t] = sd;
        for j in 0..d {
            values[t * d + j] = (tok[j] - mu) / sd;
        }
    }
    ReconstructionTarget {
        values,
        mean,
        std,
        patch_dim: d,
    }
}

impl ReconstructionTarget {
    /// Undo the standardization with the stored statistics.
    pub fn denormalize(&self) -> Vec<Real> {
        let d = self.patch_dim;
        let mut out = vec![0.0; self.values.len()];
        for (t, (&mu, &sd)) in self.mean.iter().zip(&self.std).enumerate() {
            for j in 0..d {
                out[t * d + j] = self.values[t * d + j] * sd + mu;
            }
        }
        out
    }
}

/// Random shift crop with zero padding, the only augmentation in the pipeline.
pub fn random_crop(image: &Image, pad: usize, rng: &mut MapRng) -> Image {
    if pad == 0 {
        return image.clone();
    }
    let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let (c, h, w) = (image.channels, image.height, image.width);
    let mut pixels = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                pixels[(ci * h + y) * w + x] =
                    image.pixels[(ci * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Image::new(c, h, w, pixels)
}

/// Deterministic synthetic dataset. Classes are procedurally distinguishable
/// (stripe orientation, checker frequency, blob layout) and class-balanced:
/// record i gets label i % num_classes.
pub fn synth_dataset(
    seed: u64,
    count: usize,
    num_classes: usize,
    height: usize,
    width: usize,
) -> Vec<DatasetRecord> {
    assert!(count > 0 && num_classes > 0);
    let mut rng = MapRng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let label = (i % num_classes) as u32;
            let image = synth_image(label as usize, height, width, &mut rng);
            DatasetRecord { label, image }
        })
        .collect()
}

fn synth_image(class: usize, h: usize, w: usize, rng: &mut MapRng) -> Image {
    let freq_scale = 1.0 + (class / 4) as f32 * 0.7;
    let kind = class % 4;
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let freq: f32 = rng.gen_range(2.0..3.0) * freq_scale;
    let noise_amp = 0.05f32;
    let mut pixels = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let fy = y as f32 / h as f32;
            let fx = x as f32 / w as f32;
            let v = match kind {
                // horizontal stripes
                0 => (std::f32::consts::TAU * freq * fy + phase).sin(),
                // vertical stripes
                1 => (std::f32::consts::TAU * freq * fx + phase).sin(),
                // checkerboard
                2 => {
                    (std::f32::consts::TAU * freq * fy + phase).sin()
                        * (std::f32::consts::TAU * freq * fx + phase).sin()
                }
                // radial gradient
                _ => {
                    let r = ((fy - 0.5).powi(2) + (fx - 0.5).powi(2)).sqrt();
                    (1.0 - 2.4 * r).clamp(-1.0, 1.0)
                }
            };
            let noise: f32 = rng.gen_range(-noise_amp..noise_amp);
            pixels[y * w + x] = (0.5 + 0.4 * v + noise).clamp(0.0, 1.0);
        }
    }
    Image::new(1, h, w, pixels)
}

// ── Archive IO ──────────────────────────────────────────────────────────

pub fn write_archive(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(ARCHIVE_MAGIC)?;
    f.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    f.write_all(&(records.len() as u64).to_le_bytes())?;
    for rec in records {
        f.write_all(&rec.label.to_le_bytes())?;
        f.write_all(&(rec.image.channels as u32).to_le_bytes())?;
        f.write_all(&(rec.image.height as u32).to_le_bytes())?;
        f.write_all(&(rec.image.width as u32).to_le_bytes())?;
        for px in &rec.image.pixels {
            f.write_all(&px.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Single-consumer streaming reader over an archive file.
pub struct ArchiveReader<R: Read> {
    reader: R,
    remaining: u64,
}

impl ArchiveReader<std::io::BufReader<std::fs::File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        ArchiveReader::new(f)
    }
}

impl<R: Read> ArchiveReader<R> {
    pub fn new(mut reader: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact_or(&mut reader, &mut magic, "archive")?;
        if &magic != ARCHIVE_MAGIC {
            return Err(MapError::BadMagic { what: "archive" });
        }
        let version = read_u32(&mut reader, "archive")?;
        if version != ARCHIVE_VERSION {
            return Err(MapError::VersionMismatch {
                what: "archive",
                found: version,
            });
        }
        let remaining = read_u64(&mut reader, "archive")?;
        Ok(ArchiveReader { reader, remaining })
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    fn read_record(&mut self) -> Result<DatasetRecord> {
        let label = read_u32(&mut self.reader, "archive")?;
        let c = read_u32(&mut self.reader, "archive")? as usize;
        let h = read_u32(&mut self.reader, "archive")? as usize;
        let w = read_u32(&mut self.reader, "archive")? as usize;
        let mut pixels = vec![0.0f32; c * h * w];
        let mut buf = [0u8; 4];
        for px in pixels.iter_mut() {
            read_exact_or(&mut self.reader, &mut buf, "archive")?;
            *px = f32::from_le_bytes(buf);
        }
        Ok(DatasetRecord {
            label,
            image: Image::new(c, h, w, pixels),
        })
    }
}

impl<R: Read> Iterator for ArchiveReader<R> {
    type Item = Result<DatasetRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(self.read_record())
    }
}

pub fn read_archive(path: &Path) -> Result<Vec<DatasetRecord>> {
    ArchiveReader::open(path)?.collect()
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| MapError::Truncated { what })
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &'static str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}
