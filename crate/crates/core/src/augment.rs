//! Stochastic view generation: reflect-pad random crop, horizontal flip and
//! color distortion (brightness, contrast, grayscale). Images are CHW tensors
//! with values in `[0, 1]`; every output is clamped back into that range.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_pad: usize,
    pub flip_prob: f32,
    pub brightness_delta: f32,
    pub contrast_range: (f32, f32),
    pub grayscale_prob: f32,
}

impl AugmentConfig {
    /// Default family with the crop padding scaled from 4 px at 32 px.
    pub fn for_resolution(resolution: usize) -> Self {
        AugmentConfig {
            crop_pad: ((4 * resolution) as f32 / 32.0).round().max(1.0) as usize,
            flip_prob: 0.5,
            brightness_delta: 0.4,
            contrast_range: (0.6, 1.4),
            grayscale_prob: 0.2,
        }
    }

    pub fn identity() -> Self {
        AugmentConfig {
            crop_pad: 0,
            flip_prob: 0.0,
            brightness_delta: 0.0,
            contrast_range: (1.0, 1.0),
            grayscale_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f32| (0.0..=1.0).contains(&p);
        if !p_ok(self.flip_prob) || !p_ok(self.grayscale_prob) {
            return Err(Error::Config("augment: probabilities must lie in [0, 1]".into()));
        }
        if self.brightness_delta < 0.0
            || self.contrast_range.0 < 0.0
            || self.contrast_range.0 > self.contrast_range.1
        {
            return Err(Error::Config("augment: invalid brightness/contrast range".into()));
        }
        Ok(())
    }
}

fn chw(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2])
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Crop of the reflect-padded image whose top-left corner sits at
/// `(top, left)` in padded coordinates.
pub fn random_crop_at(x: &Tensor, pad: usize, top: usize, left: usize) -> Tensor {
    if pad == 0 {
        return x.clone();
    }
    let (c, h, w) = chw(x);
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = reflect((y + top) as isize - pad as isize, h);
            for xx in 0..w {
                let sx = reflect((xx + left) as isize - pad as isize, w);
                out[(ch * h + y) * w + xx] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Reflect-pads by `pad` and crops back at a uniformly random offset.
pub fn random_crop<R: Rng + ?Sized>(x: &Tensor, pad: usize, rng: &mut R) -> Tensor {
    let top = rng.gen_range(0..=2 * pad);
    let left = rng.gen_range(0..=2 * pad);
    random_crop_at(x, pad, top, left)
}

pub fn hflip(x: &Tensor) -> Tensor {
    let (c, h, w) = chw(x);
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for row in 0..c * h {
        for xx in 0..w {
            out[row * w + xx] = src[row * w + (w - 1 - xx)];
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Brightness shift, contrast scaling about the image mean, optional
/// grayscale, then clamp to `[0, 1]`.
pub fn color_distort_with(x: &Tensor, shift: f32, contrast: f32, grayscale: bool) -> Tensor {
    let (c, h, w) = chw(x);
    let mut out: Vec<f32> = x.data().iter().map(|&v| v + shift).collect();
    if contrast != 1.0 {
        let mean = (out.iter().map(|&v| v as f64).sum::<f64>() / out.len().max(1) as f64) as f32;
        out.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean);
    }
    if grayscale && c == 3 {
        let plane = h * w;
        for i in 0..plane {
            let l = LUMA[0] * out[i] + LUMA[1] * out[plane + i] + LUMA[2] * out[2 * plane + i];
            out[i] = l;
            out[plane + i] = l;
            out[2 * plane + i] = l;
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn color_distort<R: Rng + ?Sized>(x: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    let u: f32 = rng.gen();
    let shift = cfg.brightness_delta * (2.0 * u - 1.0);
    let u: f32 = rng.gen();
    let (lo, hi) = cfg.contrast_range;
    let contrast = lo + (hi - lo) * u;
    let gray = rng.gen::<f32>() < cfg.grayscale_prob;
    color_distort_with(x, shift, contrast, gray)
}

/// One draw `t ~ T` applied to a CHW image.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    let cropped = random_crop(x, cfg.crop_pad, rng);
    let flipped = if rng.gen::<f32>() < cfg.flip_prob {
        hflip(&cropped)
    } else {
        cropped
    };
    color_distort(&flipped, cfg, rng)
}

/// Two independent draws from the family applied to the same image.
pub fn sample_view_pair<R: Rng + ?Sized>(x: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> (Tensor, Tensor) {
    let a = augment(x, cfg, rng);
    let b = augment(x, cfg, rng);
    (a, b)
}
