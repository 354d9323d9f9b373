//! Dual style randomization.
//!
//! Foreground style randomization mixes the Fourier amplitude of the
//! smoothed-mask foreground crop with the amplitude of a randomly chosen
//! coarse superpixel region, keeping the foreground phase, and blends the
//! restyled crop back under the smoothed mask. Global style randomization
//! pushes the whole image through a random 3×3 convolution and keeps only
//! its amplitude, recombined with the original phase. Both are
//! training-time augmentations; given the same rng stream they reproduce
//! bit-identically.

use crate::config::Config;
use crate::error::{dim_err, param_err, Result};
use crate::fft::{fft2_plane, ifft2_plane};
use crate::ops::{bounding_box, resize_bilinear, smooth_mask};
use crate::rng::StreamRng;
use crate::tensor::{ImageTensor, LabelMask, Rect, SoftMask};

use num_complex::Complex64;

/// Per-channel amplitude/phase decomposition of an RGB image.
///
/// `fft2` produces nonnegative amplitudes and phases in (−π, π];
/// amplitude mixing may produce negative entries, which recombine as a
/// phase flip in `ifft2`.
#[derive(Clone, Debug)]
pub struct Spectrum {
    amplitude: Vec<f64>,
    phase: Vec<f64>,
    height: usize,
    width: usize,
}

impl Spectrum {
    pub fn from_parts(
        height: usize,
        width: usize,
        amplitude: Vec<f64>,
        phase: Vec<f64>,
    ) -> Result<Self> {
        let expect = 3 * height * width;
        if amplitude.len() != expect || phase.len() != expect {
            return Err(dim_err!("spectrum planes must both hold {expect} values"));
        }
        if amplitude.iter().chain(phase.iter()).any(|v| !v.is_finite()) {
            return Err(param_err!("spectrum values must be finite"));
        }
        Ok(Spectrum { amplitude, phase, height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn amplitude(&self) -> &[f64] {
        &self.amplitude
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn amplitude_at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.amplitude[self.idx(c, y, x)]
    }

    pub fn phase_at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.phase[self.idx(c, y, x)]
    }
}

/// Forward per-channel 2-D DFT (unnormalized): amplitude is the modulus,
/// phase the argument.
pub fn fft2(img: &ImageTensor) -> Spectrum {
    let (h, w) = (img.height(), img.width());
    let mut amplitude = Vec::with_capacity(3 * h * w);
    let mut phase = Vec::with_capacity(3 * h * w);
    for c in 0..ImageTensor::CHANNELS {
        let freq = fft2_plane(img.channel(c), h, w);
        for z in freq {
            amplitude.push(z.norm());
            // arg() returns [−π, π]; fold −π onto π.
            let mut p = z.arg();
            if p == -std::f64::consts::PI {
                p = std::f64::consts::PI;
            }
            phase.push(p);
        }
    }
    Spectrum { amplitude, phase, height: h, width: w }
}

/// Inverse transform of `A·e^{iP}`: real part, clamped to [0, 1].
pub fn ifft2(spec: &Spectrum) -> ImageTensor {
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut data = Vec::with_capacity(3 * plane);
    for c in 0..ImageTensor::CHANNELS {
        let freq: Vec<Complex64> = (0..plane)
            .map(|i| {
                let a = spec.amplitude[c * plane + i];
                let p = spec.phase[c * plane + i];
                Complex64::new(a * p.cos(), a * p.sin())
            })
            .collect();
        data.extend(ifft2_plane(&freq, h, w).into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    ImageTensor::from_raw_unchecked(h, w, data)
}

/// `ω·a_local + (1−ω)·a_fg` elementwise. Negative results are legal.
pub fn mix_amplitude(a_fg: &[f64], a_local: &[f64], omega: f64) -> Result<Vec<f64>> {
    if a_fg.len() != a_local.len() {
        return Err(dim_err!("amplitude planes differ: {} vs {}", a_fg.len(), a_local.len()));
    }
    Ok(a_fg.iter().zip(a_local).map(|(&f, &l)| omega * l + (1.0 - omega) * f).collect())
}

/// 3×3×3×3 random convolution kernel, `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RandConvKernel {
    weights: Vec<f64>,
}

impl RandConvKernel {
    pub const LEN: usize = 81;

    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.len() != Self::LEN {
            return Err(dim_err!("kernel needs {} weights, got {}", Self::LEN, weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(param_err!("kernel weights must be finite"));
        }
        Ok(RandConvKernel { weights })
    }

    pub fn zeros() -> Self {
        RandConvKernel { weights: vec![0.0; Self::LEN] }
    }

    /// Identity: center tap 1 on the matching channel, 0 elsewhere.
    pub fn delta() -> Self {
        let mut weights = vec![0.0; Self::LEN];
        for c in 0..3 {
            weights[Self::index(c, c, 1, 1)] = 1.0;
        }
        RandConvKernel { weights }
    }

    #[inline]
    pub fn index(out_c: usize, in_c: usize, ky: usize, kx: usize) -> usize {
        ((out_c * 3 + in_c) * 3 + ky) * 3 + kx
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Draw all 81 kernel weights from N(0, σ_g²) in `[out][in][ky][kx]` order.
pub fn sample_kernel(sigma_g: f64, rng: &mut StreamRng) -> RandConvKernel {
    let weights = (0..RandConvKernel::LEN).map(|_| rng.normal(0.0, sigma_g)).collect();
    RandConvKernel { weights }
}

/// 3-in/3-out 3×3 convolution, stride 1, replication padding, no bias.
/// The output is deliberately not clamped; it only feeds amplitude
/// extraction.
pub fn random_conv(img: &ImageTensor, kernel: &RandConvKernel) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut out = vec![0.0; 3 * h * w];
    for oc in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ic in 0..3 {
                    for ky in 0..3 {
                        let sy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                        for kx in 0..3 {
                            let sx =
                                (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                            let weight = kernel.weights[RandConvKernel::index(oc, ic, ky, kx)];
                            acc += weight * img.get(ic, sy, sx);
                        }
                    }
                }
                out[(oc * h + y) * w + x] = acc;
            }
        }
    }
    ImageTensor::from_raw_unchecked(h, w, out)
}

/// Foreground style randomization with the random draws resolved:
/// mixing weight `omega` and coarse superpixel region `region`.
pub fn foreground_style_with(
    img: &ImageTensor,
    fg_mask: &SoftMask,
    coarse_spx: &LabelMask,
    cfg: &Config,
    omega: f64,
    region: u32,
) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    if fg_mask.height() != h || fg_mask.width() != w {
        return Err(dim_err!("foreground mask does not match image"));
    }
    if coarse_spx.height() != h || coarse_spx.width() != w {
        return Err(dim_err!("superpixel mask does not match image"));
    }

    let smoothed = smooth_mask(fg_mask, cfg.k_smooth)?;
    let fg_rect = bounding_box(&smoothed, 0.0)?;
    let fg_crop = img.crop(fg_rect)?;

    let local_rect = coarse_spx.region_bounding_box(region)?;
    let local_crop = img.crop(local_rect)?;
    let local_resized = resize_bilinear(&local_crop, fg_rect.height(), fg_rect.width())?;

    let spec_fg = fft2(&fg_crop);
    let spec_local = fft2(&local_resized);
    let fused = mix_amplitude(spec_fg.amplitude(), spec_local.amplitude(), omega)?;
    let restyled = ifft2(&Spectrum::from_parts(
        fg_rect.height(),
        fg_rect.width(),
        fused,
        spec_fg.phase().to_vec(),
    )?);

    // Blend: outside the smoothed mask the original pixels pass through
    // bit-identically; the restyled crop is padded with zeros, which only
    // ever meet mask weight 0.
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let m = smoothed.get(y, x);
                let styled = pad_lookup(&restyled, fg_rect, c, y, x);
                out[(c * h + y) * w + x] =
                    ((1.0 - m) * img.get(c, y, x) + m * styled).clamp(0.0, 1.0);
            }
        }
    }
    Ok(ImageTensor::from_raw_unchecked(h, w, out))
}

#[inline]
fn pad_lookup(crop: &ImageTensor, rect: Rect, c: usize, y: usize, x: usize) -> f64 {
    if y >= rect.y0 && y <= rect.y1 && x >= rect.x0 && x <= rect.x1 {
        crop.get(c, y - rect.y0, x - rect.x0)
    } else {
        0.0
    }
}

/// Foreground style randomization: picks a uniform region among the labels
/// present in the coarse mask, then draws ω ~ N(0, σ_f²).
pub fn foreground_style_randomize(
    img: &ImageTensor,
    fg_mask: &SoftMask,
    coarse_spx: &LabelMask,
    cfg: &Config,
    rng: &mut StreamRng,
) -> Result<ImageTensor> {
    let present = coarse_spx.present_labels();
    let region = present[rng.below(present.len() as u64) as usize];
    let omega = rng.normal(0.0, cfg.sigma_f);
    foreground_style_with(img, fg_mask, coarse_spx, cfg, omega, region)
}

/// Global style swap with a fixed kernel: keep the convolved image's
/// amplitude, the original image's phase.
pub fn global_style_with_kernel(img: &ImageTensor, kernel: &RandConvKernel) -> ImageTensor {
    let convolved = random_conv(img, kernel);
    let spec_conv = fft2(&convolved);
    let spec_img = fft2(img);
    let recombined = Spectrum {
        amplitude: spec_conv.amplitude,
        phase: spec_img.phase,
        height: img.height(),
        width: img.width(),
    };
    ifft2(&recombined)
}

/// Global style randomization: sample Θ ~ N(0, σ_g²), swap amplitudes.
pub fn global_style_randomize(
    img: &ImageTensor,
    cfg: &Config,
    rng: &mut StreamRng,
) -> ImageTensor {
    let kernel = sample_kernel(cfg.sigma_g, rng);
    global_style_with_kernel(img, &kernel)
}

/// Dual style randomization: foreground mixing followed by the global
/// amplitude swap. Draws ω and Θ sequentially from the given stream.
pub fn dsr(
    img: &ImageTensor,
    fg_mask: &SoftMask,
    coarse_spx: &LabelMask,
    cfg: &Config,
    rng: &mut StreamRng,
) -> Result<ImageTensor> {
    let fg_styled = foreground_style_randomize(img, fg_mask, coarse_spx, cfg, rng)?;
    Ok(global_style_randomize(&fg_styled, cfg, rng))
}
