//! Images, bicubic resampling and training datasets.
//!
//! Images are `[1, 3, H, W]` tensors with values in `[0, 1]`. Low-resolution
//! inputs are produced by antialiased bicubic downscaling (`a = -0.5`, kernel
//! stretched by the scale factor, reflect padding at the borders).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Mirror index without repeating the edge sample (`... 2 1 0 1 2 ...`).
fn reflect(mut j: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let n = len as isize;
    loop {
        if j < 0 {
            j = -j;
        } else if j >= n {
            j = 2 * (n - 1) - j;
        } else {
            return j as usize;
        }
    }
}

/// Taps and normalized weights for each output sample of a 1-D resize.
fn resample_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = in_len as f64 / out_len as f64;
    let support = ratio.max(1.0);
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let lo = (center - 2.0 * support).floor() as isize;
            let hi = (center + 2.0 * support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|j| (reflect(j, in_len), cubic((j as f64 - center) / support)))
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let z: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= z;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize of an NCHW tensor.
pub fn bicubic_resize(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    if oh == 0 || ow == 0 {
        return Err(Error::shape("resize to an empty image"));
    }
    let th = resample_taps(h, oh);
    let tw = resample_taps(w, ow);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut rows = vec![0.0; oh * w];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..][..h * w];
        for (oy, taps) in th.iter().enumerate() {
            let row = &mut rows[oy * w..][..w];
            row.fill(0.0);
            for &(j, wt) in taps {
                for (r, s) in row.iter_mut().zip(&src[j * w..][..w]) {
                    *r += wt * s;
                }
            }
        }
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let row = &rows[oy * w..][..w];
            for (ox, taps) in tw.iter().enumerate() {
                dst[oy * ow + ox] = taps.iter().map(|&(j, wt)| wt * row[j]).sum();
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn bicubic_downscale(x: &Tensor, r: usize) -> Result<Tensor> {
    let [_, _, h, w] = x.dims4()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(format!("{h}x{w} image is not divisible by scale {r}")));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    bicubic_resize(x, h / r, w / r)
}

pub fn bicubic_upscale(x: &Tensor, r: usize) -> Result<Tensor> {
    let [_, _, h, w] = x.dims4()?;
    if r == 0 {
        return Err(Error::shape("scale must be positive"));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    bicubic_resize(x, h * r, w * r)
}

/// Concatenates `[1, C, H, W]` images along the batch axis.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::shape("stack of zero images"))?;
    let [_, c, h, w] = first.dims4()?;
    let mut data = Vec::with_capacity(images.len() * first.numel());
    let mut n = 0;
    for im in images {
        let [m, ci, hi, wi] = im.dims4()?;
        if (ci, hi, wi) != (c, h, w) {
            return Err(Error::shape(format!("cannot stack {:?} with {:?}", im.shape(), first.shape())));
        }
        n += m;
        data.extend_from_slice(im.data());
    }
    Tensor::new(vec![n, c, h, w], data)
}

/// Procedural RGB texture: a random mix of a colour gradient, a
/// checkerboard, stripes and band-limited noise, clipped to `[0, 1]`.
pub fn synthetic_texture<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor {
    let s = size as f64;
    let colour = |rng: &mut R| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];

    let (g0, g1) = (colour(rng), colour(rng));
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());

    let period = rng.random_range(2..=8) as f64;
    let (ox, oy) = (rng.random_range(0.0..period), rng.random_range(0.0..period));
    let (c0, c1) = (colour(rng), colour(rng));

    let sf = rng.random_range(0.05..0.3);
    let sphi = rng.random_range(0.0..std::f64::consts::TAU);
    let sdir = rng.random_range(0.0..std::f64::consts::TAU);
    let scol = colour(rng);

    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..6)
        .map(|_| {
            let f = rng.random_range(0.02..0.25) * std::f64::consts::TAU;
            let d = rng.random_range(0.0..std::f64::consts::TAU);
            (f * d.cos(), f * d.sin(), rng.random_range(0.0..std::f64::consts::TAU), colour(rng))
        })
        .collect();

    let mut mix = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let z: f64 = mix.iter().sum::<f64>() + 1e-9;
    for m in &mut mix {
        *m /= z;
    }

    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let t = (((xf - s / 2.0) * ct + (yf - s / 2.0) * st) / s + 0.5).clamp(0.0, 1.0);
            let check = (((xf + ox) / period).floor() + ((yf + oy) / period).floor()) as i64 % 2 == 0;
            let stripe = 0.5 + 0.5 * (std::f64::consts::TAU * sf * (xf * sdir.cos() + yf * sdir.sin()) + sphi).sin();
            for ch in 0..3 {
                let grad = g0[ch] + (g1[ch] - g0[ch]) * t;
                let chk = if check { c0[ch] } else { c1[ch] };
                let noise = 0.5
                    + waves
                        .iter()
                        .map(|(fx, fy, ph, col)| (0.5 / 6.0) * (col[ch] + 0.5) * (fx * xf + fy * yf + ph).sin())
                        .sum::<f64>();
                let v = mix[0] * grad + mix[1] * chk + mix[2] * stripe * scol[ch] + mix[3] * noise;
                data[(ch * size + y) * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![1, 3, size, size], data).expect("texture shape")
}

/// A high-resolution patch and its downscaled input.
#[derive(Clone, Debug)]
pub struct Sample {
    pub lr: Tensor,
    pub hr: Tensor,
}

impl Sample {
    pub fn from_hr(hr: Tensor, scale: usize) -> Result<Self> {
        Ok(Sample {
            lr: bicubic_downscale(&hr, scale)?,
            hr,
        })
    }
}

/// `n` seeded synthetic samples with `hr_size`-pixel HR patches.
pub fn synthetic_samples(n: usize, hr_size: usize, scale: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Sample::from_hr(synthetic_texture(hr_size, &mut rng), scale))
        .collect()
}

/// Stacked LR and HR batches for the given sample indices.
pub fn batch(samples: &[Sample], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let lr: Vec<&Tensor> = idx.iter().map(|&i| &samples[i].lr).collect();
    let hr: Vec<&Tensor> = idx.iter().map(|&i| &samples[i].hr).collect();
    Ok((stack(&lr)?, stack(&hr)?))
}

/// Shuffled index batches covering `len` samples; the last batch may be short.
pub fn shuffled_batches<R: Rng + ?Sized>(len: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Disjoint splits: `arch` drives weight-vector updates, `weights` drives
/// weight updates, `valid` is held out.
#[derive(Clone, Debug)]
pub struct Splits {
    pub arch: Vec<Sample>,
    pub weights: Vec<Sample>,
    pub valid: Vec<Sample>,
}

impl Splits {
    /// Deals `samples` in order: `n_valid` held out, the rest halved.
    pub fn new(mut samples: Vec<Sample>, n_valid: usize) -> Result<Self> {
        if samples.len() < n_valid + 2 {
            return Err(Error::config(format!(
                "{} samples cannot fill two training splits and {n_valid} validation samples",
                samples.len()
            )));
        }
        let valid = samples.split_off(samples.len() - n_valid);
        let weights = samples.split_off(samples.len() / 2);
        Ok(Splits {
            arch: samples,
            weights,
            valid,
        })
    }

    /// Both training splits, for retraining a fixed network.
    pub fn train(&self) -> Vec<Sample> {
        self.arch.iter().chain(&self.weights).cloned().collect()
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let [n, c, h, w] = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("save_png needs [1, 3, H, W], got {:?}", image.shape())));
    }
    let d = image.data();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        *px = image::Rgb([0, 1, 2].map(|ch| to_u8(d[(ch * h + y) * w + x])));
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = px[ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

/// Crop `[y, y+size) x [x, x+size)` of an image.
pub fn crop(image: &Tensor, y: usize, x: usize, size: usize) -> Result<Tensor> {
    let [_, c, h, w] = image.dims4()?;
    if y + size > h || x + size > w {
        return Err(Error::shape(format!("crop {size} at ({y}, {x}) outside {h}x{w}")));
    }
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for yy in y..y + size {
            data.extend_from_slice(&image.data()[(ch * h + yy) * w + x..][..size]);
        }
    }
    Tensor::new(vec![1, c, size, size], data)
}

/// Random HR patches from every PNG in `dir` (sorted by file name).
pub fn png_dir_samples(dir: &Path, patches_per_image: usize, hr_size: usize, scale: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no PNG files in {}", dir.display()),
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for f in files {
        let img = load_png(&f)?;
        let [_, _, h, w] = img.dims4()?;
        if h < hr_size || w < hr_size {
            log::warn!("skipping {}: smaller than {hr_size}px", f.display());
            continue;
        }
        for _ in 0..patches_per_image {
            let y = rng.random_range(0..=h - hr_size);
            let x = rng.random_range(0..=w - hr_size);
            out.push(Sample::from_hr(crop(&img, y, x, hr_size)?, scale)?);
        }
    }
    Ok(out)
}

/// Writes `hr/NNNN.png` and `lr/NNNN.png` for `n` synthetic samples.
pub fn write_synthetic_dataset(dir: &Path, n: usize, hr_size: usize, scale: usize, seed: u64) -> Result<()> {
    let samples = synthetic_samples(n, hr_size, scale, seed)?;
    std::fs::create_dir_all(dir.join("hr"))?;
    std::fs::create_dir_all(dir.join("lr"))?;
    for (i, s) in samples.iter().enumerate() {
        save_png(&s.hr, &dir.join("hr").join(format!("{i:04}.png")))?;
        save_png(&s.lr, &dir.join("lr").join(format!("{i:04}.png")))?;
    }
    Ok(())
}
