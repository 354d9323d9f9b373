//! Toy backbone, synthetic episodes and the episode-based evaluator.
//!
//! The backbone replaces a trained encoder with four seeded random 3×3
//! convolution blocks (ReLU, 2×2 average-pool striding, no biases,
//! weights scaled by 1/fan-in): two blocks to stride 4 for low-level
//! features, two more to stride 16 for high-level features. It is fixed
//! per seed, which is all the rest of the pipeline needs.
//!
//! Synthetic episodes render a jittered shape (disk, rectangle, blob) over
//! textured foreground/background colors separated by a contrast knob.
//! The ambiguity generator pulls the query background color toward the
//! foreground until the rendered episode provably confuses sign-comparison
//! segmentation (checked against the toy backbone at construction).

use crate::config::Config;
use crate::error::{param_err, Error, Result};
use crate::hsm::HsmWeights;
use crate::ops::cosine;
use crate::pcmt::{predict_episode, ThresholdMode};
use crate::proto::{final_loss, mask_at_feature_res, ssp_loss, support_prototypes, SspLoss};
use crate::rng::{stream, StreamRng};
use crate::superpix::multiscale;
use crate::tensor::{Episode, FeatureMap, ImageTensor, SoftMask};

/// Attention head count used by the seeded pipeline weights.
pub const MSA_HEADS: usize = 4;

/// Seeded random-convolution encoder: strides 4 and 16.
#[derive(Clone, Copy, Debug)]
pub struct ToyBackboneSpec {
    pub seed: u64,
    pub c_low: usize,
    pub c_high: usize,
}

impl Default for ToyBackboneSpec {
    fn default() -> Self {
        ToyBackboneSpec { seed: 0, c_low: 16, c_high: 64 }
    }
}

fn conv3x3_relu(input: &FeatureMap, weights: &[f64], out_c: usize) -> FeatureMap {
    let (h, w) = (input.height(), input.width());
    let in_c = input.channels();
    debug_assert_eq!(weights.len(), out_c * in_c * 9);
    let plane = h * w;
    let mut out = vec![0.0; out_c * plane];
    for oc in 0..out_c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ic in 0..in_c {
                    let base = (oc * in_c + ic) * 9;
                    for ky in 0..3 {
                        let sy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                        for kx in 0..3 {
                            let sx =
                                (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                            acc += weights[base + ky * 3 + kx] * input.get(ic, sy, sx);
                        }
                    }
                }
                out[(oc * h + y) * w + x] = acc.max(0.0);
            }
        }
    }
    FeatureMap::from_raw_unchecked(out_c, h, w, out)
}

fn avgpool2(input: &FeatureMap) -> FeatureMap {
    let (h, w) = (input.height() / 2, input.width() / 2);
    let c = input.channels();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sum = input.get(ch, 2 * y, 2 * x)
                    + input.get(ch, 2 * y, 2 * x + 1)
                    + input.get(ch, 2 * y + 1, 2 * x)
                    + input.get(ch, 2 * y + 1, 2 * x + 1);
                out[(ch * h + y) * w + x] = sum / 4.0;
            }
        }
    }
    FeatureMap::from_raw_unchecked(c, h, w, out)
}

fn block_weights(rng: &mut StreamRng, out_c: usize, in_c: usize) -> Vec<f64> {
    let fan_in = (in_c * 9) as f64;
    (0..out_c * in_c * 9).map(|_| rng.normal(0.0, 1.0) / fan_in).collect()
}

/// Low-level (stride 4) and high-level (stride 16) features for one image.
pub fn toy_backbone(img: &ImageTensor, spec: &ToyBackboneSpec) -> Result<(FeatureMap, FeatureMap)> {
    let (h, w) = (img.height(), img.width());
    if h % 16 != 0 || w % 16 != 0 {
        return Err(param_err!("backbone needs dimensions divisible by 16, got {h}x{w}"));
    }
    let rng = StreamRng::from_seed(spec.seed).split(stream::BACKBONE);
    let plan = [
        (3, spec.c_low),
        (spec.c_low, spec.c_low),
        (spec.c_low, spec.c_high),
        (spec.c_high, spec.c_high),
    ];
    let mut feat = FeatureMap::new(3, h, w, img.data().to_vec())?;
    let mut low = None;
    for (i, &(in_c, out_c)) in plan.iter().enumerate() {
        let mut block_rng = rng.split(i as u64);
        let weights = block_weights(&mut block_rng, out_c, in_c);
        feat = avgpool2(&conv3x3_relu(&feat, &weights, out_c));
        if i == 1 {
            low = Some(feat.clone());
        }
    }
    Ok((low.expect("two blocks produce the low-level map"), feat))
}

/// Everything segment-time inference needs besides the episode itself.
#[derive(Clone, Debug)]
pub struct PipelineWeights {
    pub backbone: ToyBackboneSpec,
    pub hsm: HsmWeights,
}

impl PipelineWeights {
    /// Derive all weights from the config seed.
    pub fn seeded(cfg: &Config) -> Result<Self> {
        let backbone = ToyBackboneSpec { seed: cfg.seed, ..ToyBackboneSpec::default() };
        let hsm = HsmWeights::seeded(backbone.c_low, backbone.c_high, MSA_HEADS, cfg.seed)?;
        Ok(PipelineWeights { backbone, hsm })
    }
}

/// Synthetic foreground shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Rectangle,
    Blob,
}

/// Synthetic region textures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    Flat,
    /// Additive Gaussian noise with the given std-dev.
    Noise(f64),
    /// Additive horizontal sine stripes with the given period in pixels.
    Stripes(usize),
}

/// Recipe for one synthetic episode.
#[derive(Clone, Debug)]
pub struct SynthEpisodeSpec {
    pub shape: Shape,
    pub fg_texture: Texture,
    pub bg_texture: Texture,
    /// Foreground/background color separation in [0, 1].
    pub contrast: f64,
    pub size: (usize, usize),
    pub seed: u64,
}

// Shapes keep a radius/half-extent of at least a quarter of the short
// side. At the minimum episode size (64) that is one full stride-16
// feature cell, so a support mask can never empty out at feature
// resolution regardless of placement.
fn shape_mask(shape: Shape, h: usize, w: usize, rng: &mut StreamRng) -> SoftMask {
    let mut mask = SoftMask::zeros(h, w);
    let min_side = h.min(w) as f64;
    match shape {
        Shape::Disk => {
            let cx = w as f64 * (0.38 + 0.24 * rng.uniform());
            let cy = h as f64 * (0.38 + 0.24 * rng.uniform());
            let r = min_side * (0.25 + 0.06 * rng.uniform());
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        mask.set(y, x, 1.0);
                    }
                }
            }
        }
        Shape::Rectangle => {
            let cx = w as f64 * (0.38 + 0.24 * rng.uniform());
            let cy = h as f64 * (0.38 + 0.24 * rng.uniform());
            let hw = w as f64 * (0.25 + 0.08 * rng.uniform());
            let hh = h as f64 * (0.25 + 0.08 * rng.uniform());
            for y in 0..h {
                for x in 0..w {
                    if (x as f64 + 0.5 - cx).abs() <= hw && (y as f64 + 0.5 - cy).abs() <= hh {
                        mask.set(y, x, 1.0);
                    }
                }
            }
        }
        Shape::Blob => {
            let lobes = 2 + rng.below(2) as usize;
            let mut centers = Vec::new();
            for _ in 0..lobes {
                let cx = w as f64 * (0.35 + 0.3 * rng.uniform());
                let cy = h as f64 * (0.35 + 0.3 * rng.uniform());
                let r = min_side * (0.26 + 0.05 * rng.uniform());
                centers.push((cx, cy, r));
            }
            for y in 0..h {
                for x in 0..w {
                    for &(cx, cy, r) in &centers {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r * r {
                            mask.set(y, x, 1.0);
                            break;
                        }
                    }
                }
            }
        }
    }
    mask
}

fn texture_offset(tex: &Texture, x: usize, phase: f64, rng: &mut StreamRng) -> f64 {
    match tex {
        Texture::Flat => 0.0,
        Texture::Noise(sigma) => rng.normal(0.0, *sigma),
        Texture::Stripes(period) => {
            0.1 * (std::f64::consts::TAU * (x as f64 + phase) / *period as f64).sin()
        }
    }
}

fn render_image(
    shape: Shape,
    fg_color: f64,
    bg_color: f64,
    fg_texture: &Texture,
    bg_texture: &Texture,
    h: usize,
    w: usize,
    rng: &mut StreamRng,
) -> (ImageTensor, SoftMask) {
    let mut shape_rng = rng.split(stream::SHAPE);
    let mask = shape_mask(shape, h, w, &mut shape_rng);
    let mut tex_rng = rng.split(stream::TEXTURE);
    let fg_phase = tex_rng.uniform() * 32.0;
    let bg_phase = tex_rng.uniform() * 32.0;
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let fg = mask.get(y, x) > 0.5;
            let (base, tex, phase) = if fg {
                (fg_color, fg_texture, fg_phase)
            } else {
                (bg_color, bg_texture, bg_phase)
            };
            let value = (base + texture_offset(tex, x, phase, &mut tex_rng)).clamp(0.0, 1.0);
            for c in 0..3 {
                data[(c * h + y) * w + x] = value;
            }
        }
    }
    (ImageTensor::from_raw_unchecked(h, w, data), mask)
}

/// Render `k_shot` support pairs plus a query, all the same class
/// (shape and texture family), jittered per image.
pub fn make_episode(spec: &SynthEpisodeSpec, k_shot: usize) -> Result<Episode> {
    if !(0.0..=1.0).contains(&spec.contrast) {
        return Err(param_err!("contrast must lie in [0, 1]"));
    }
    if k_shot == 0 {
        return Err(param_err!("k_shot must be at least 1"));
    }
    let (h, w) = spec.size;
    let fg_color = 0.5 * (1.0 + spec.contrast);
    let bg_color = 0.5 * (1.0 - spec.contrast);
    let root = StreamRng::from_seed(spec.seed);
    let mut images = Vec::with_capacity(k_shot + 1);
    for i in 0..=k_shot {
        let mut img_rng = root.split(stream::IMAGE).split(i as u64);
        images.push(render_image(
            spec.shape,
            fg_color,
            bg_color,
            &spec.fg_texture,
            &spec.bg_texture,
            h,
            w,
            &mut img_rng,
        ));
    }
    let (query_image, query_mask) = images.pop().expect("k_shot+1 images rendered");
    Episode::new(images, query_image, query_mask, spec.seed)
}

/// Mean cosine of the masked query feature columns against a prototype.
fn mean_cosine_to(proto: &[f64], feat: &FeatureMap, mask: &SoftMask) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..feat.height() {
        for x in 0..feat.width() {
            if mask.get(y, x) > 0.5 {
                total += cosine(proto, &feat.column(y, x));
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// True when the query background is closer to the support foreground
/// prototype than to the support background prototype — the failure mode
/// sign-comparison segmentation cannot handle.
pub fn ambiguity_predicate(episode: &Episode, backbone: &ToyBackboneSpec) -> Result<bool> {
    let (s_img, s_mask) = &episode.supports[0];
    let (_, f_s) = toy_backbone(s_img, backbone)?;
    let (_, f_q) = toy_backbone(&episode.query_image, backbone)?;
    let (fg_proto, bg_proto, _) = support_prototypes(&[(f_s, s_mask.clone())])?;
    let q_fg_mask = mask_at_feature_res(&episode.query_mask, &f_q)?;
    let q_bg_mask = SoftMask::new(
        q_fg_mask.height(),
        q_fg_mask.width(),
        q_fg_mask.data().iter().map(|v| 1.0 - v).collect(),
    )?;
    let bg_to_fg = mean_cosine_to(&fg_proto, &f_q, &q_bg_mask);
    let bg_to_bg = mean_cosine_to(&bg_proto, &f_q, &q_bg_mask);
    Ok(bg_to_fg > bg_to_bg)
}

/// How well the toy backbone separates the query classes: the smaller of
/// the two class-wise cosine gaps (own prototype minus other prototype).
/// Positive means both classes prefer their own support prototype.
pub fn separability_margin(episode: &Episode, backbone: &ToyBackboneSpec) -> Result<f64> {
    let (s_img, s_mask) = &episode.supports[0];
    let (_, f_s) = toy_backbone(s_img, backbone)?;
    let (_, f_q) = toy_backbone(&episode.query_image, backbone)?;
    let (fg_proto, bg_proto, _) = support_prototypes(&[(f_s, s_mask.clone())])?;
    let q_fg_mask = mask_at_feature_res(&episode.query_mask, &f_q)?;
    let q_bg_mask = SoftMask::new(
        q_fg_mask.height(),
        q_fg_mask.width(),
        q_fg_mask.data().iter().map(|v| 1.0 - v).collect(),
    )?;
    let fg_gap = mean_cosine_to(&fg_proto, &f_q, &q_fg_mask)
        - mean_cosine_to(&bg_proto, &f_q, &q_fg_mask);
    let bg_gap = mean_cosine_to(&bg_proto, &f_q, &q_bg_mask)
        - mean_cosine_to(&fg_proto, &f_q, &q_bg_mask);
    Ok(fg_gap.min(bg_gap))
}

/// Both classes of the query must prefer their own support prototype.
pub fn separability_predicate(episode: &Episode, backbone: &ToyBackboneSpec) -> Result<bool> {
    Ok(separability_margin(episode, backbone)? > 0.0)
}

const MAX_CONSTRUCTION_ATTEMPTS: usize = 100;

/// High-contrast support, query background pulled toward the foreground
/// color; resampled until [`ambiguity_predicate`] holds (at most 100
/// attempts, then a degeneracy error).
pub fn make_ambiguous_episode(
    seed: u64,
    backbone: &ToyBackboneSpec,
    size: (usize, usize),
) -> Result<Episode> {
    let root = StreamRng::from_seed(seed).split(stream::ATTEMPT);
    for attempt in 0..MAX_CONSTRUCTION_ATTEMPTS {
        let mut rng = root.split(attempt as u64);
        let support_fg = 0.85 + 0.1 * rng.uniform();
        let support_bg = 0.05 + 0.1 * rng.uniform();
        let query_fg = support_fg - 0.02 * rng.uniform();
        // The knob that manufactures ambiguity: query background sits just
        // below the query foreground instead of near the support background.
        let query_bg = query_fg - 0.06 - 0.06 * rng.uniform();
        // Heavy texture noise keeps the random features decorrelated enough
        // that cosine comparisons carry signal at all.
        let noise = Texture::Noise(0.3);

        let mut s_rng = rng.split(stream::IMAGE).split(0);
        let (s_img, s_mask) =
            render_image(Shape::Disk, support_fg, support_bg, &noise, &noise, size.0, size.1, &mut s_rng);
        let mut q_rng = rng.split(stream::IMAGE).split(1);
        let (q_img, q_mask) =
            render_image(Shape::Disk, query_fg, query_bg, &noise, &noise, size.0, size.1, &mut q_rng);
        let episode = Episode::new(vec![(s_img, s_mask)], q_img, q_mask, seed)?;
        if ambiguity_predicate(&episode, backbone)? {
            return Ok(episode);
        }
    }
    Err(Error::Degenerate(format!(
        "no ambiguous episode found for seed {seed} in {MAX_CONSTRUCTION_ATTEMPTS} attempts"
    )))
}

/// Cosine-gap margin the contrast suite demands at construction. Random
/// ReLU features compress cosines toward 1, so the workable gaps are small;
/// this floor keeps only episodes where sign comparison is solidly correct.
pub const SEPARABILITY_MARGIN: f64 = 0.01;

/// High-contrast episode resampled until the toy backbone separates the
/// classes with a margin (construction-verified, at most 100 attempts).
pub fn make_contrast_episode(
    seed: u64,
    min_contrast: f64,
    backbone: &ToyBackboneSpec,
    size: (usize, usize),
    k_shot: usize,
) -> Result<Episode> {
    let root = StreamRng::from_seed(seed).split(stream::ATTEMPT);
    for attempt in 0..MAX_CONSTRUCTION_ATTEMPTS {
        let mut rng = root.split(attempt as u64 ^ 0x5A5A);
        let spec = SynthEpisodeSpec {
            shape: match rng.below(3) {
                0 => Shape::Disk,
                1 => Shape::Rectangle,
                _ => Shape::Blob,
            },
            fg_texture: Texture::Noise(0.15 + 0.1 * rng.uniform()),
            bg_texture: Texture::Noise(0.15 + 0.1 * rng.uniform()),
            contrast: min_contrast + (1.0 - min_contrast) * rng.uniform(),
            size,
            seed: rng.next_u64(),
        };
        let episode = make_episode(&spec, k_shot)?;
        if separability_margin(&episode, backbone)? >= SEPARABILITY_MARGIN {
            return Ok(episode);
        }
    }
    Err(Error::Degenerate(format!(
        "no separable episode found for seed {seed} in {MAX_CONSTRUCTION_ATTEMPTS} attempts"
    )))
}

/// Mixed-recipe episode for the evaluation protocol.
pub fn eval_episode(cfg: &Config, seed: u64, index: usize) -> Result<Episode> {
    let mut rng = StreamRng::from_seed(seed).split(stream::EPISODE).split(index as u64);
    let shape = match rng.below(3) {
        0 => Shape::Disk,
        1 => Shape::Rectangle,
        _ => Shape::Blob,
    };
    let fg_texture = if rng.below(2) == 0 {
        Texture::Noise(0.08 + 0.1 * rng.uniform())
    } else {
        Texture::Stripes(6 + rng.below(6) as usize)
    };
    let bg_texture = match rng.below(3) {
        0 => Texture::Flat,
        1 => Texture::Noise(0.08 + 0.1 * rng.uniform()),
        _ => Texture::Stripes(6 + rng.below(6) as usize),
    };
    let contrast = 0.55 + 0.45 * rng.uniform();
    let spec = SynthEpisodeSpec {
        shape,
        fg_texture,
        bg_texture,
        contrast,
        size: cfg.image_size,
        seed: rng.next_u64(),
    };
    make_episode(&spec, 1)
}

/// Intersection over union of two binary masks (> 0.5 is foreground).
/// Two empty masks count as a perfect match.
pub fn iou(pred: &SoftMask, gt: &SoftMask) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(crate::error::dim_err!("prediction and ground truth sizes differ"));
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let p = *p > 0.5;
        let g = *g > 0.5;
        if p && g {
            intersection += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(intersection as f64 / union as f64)
}

/// Per-episode evaluation record.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeResult {
    pub seed: u64,
    pub index: usize,
    pub iou_pcmt: f64,
    pub iou_fixed0: f64,
    pub iou_otsu: f64,
    pub threshold: f64,
    pub confidence: f64,
    pub weight: f64,
}

/// Aggregated evaluation over `episodes_per_seed · |seeds|` episodes.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub mode: ThresholdMode,
    pub episodes_per_seed: usize,
    pub seeds: Vec<u64>,
    pub config_hash: u64,
    pub results: Vec<EpisodeResult>,
    pub seed_means: Vec<(u64, f64)>,
    pub mean_iou: f64,
    pub mean_iou_pcmt: f64,
    pub mean_iou_fixed0: f64,
    pub mean_iou_otsu: f64,
}

impl EvalReport {
    /// Plain-text key=value rendering; byte-stable for fixed inputs.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("mode={}\n", self.mode));
        out.push_str(&format!("episodes_per_seed={}\n", self.episodes_per_seed));
        let seeds =
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        out.push_str(&format!("seeds={seeds}\n"));
        out.push_str(&format!("config_hash={:016x}\n", self.config_hash));
        out.push_str(&format!("episodes_total={}\n", self.results.len()));
        out.push_str(&format!("mean_iou={:.6}\n", self.mean_iou));
        out.push_str(&format!("mean_iou_pcmt={:.6}\n", self.mean_iou_pcmt));
        out.push_str(&format!("mean_iou_fixed0={:.6}\n", self.mean_iou_fixed0));
        out.push_str(&format!("mean_iou_otsu={:.6}\n", self.mean_iou_otsu));
        for (seed, mean) in &self.seed_means {
            out.push_str(&format!("seed_{seed}_mean_iou={mean:.6}\n"));
        }
        out
    }

    /// Per-episode CSV (all three strategies plus diagnostics).
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("seed,index,iou_pcmt,iou_fixed0,iou_otsu,threshold,confidence,weight\n");
        for r in &self.results {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.seed, r.index, r.iou_pcmt, r.iou_fixed0, r.iou_otsu, r.threshold, r.confidence,
                r.weight
            ));
        }
        out
    }
}

fn mode_iou(result: &EpisodeResult, mode: ThresholdMode) -> f64 {
    match mode {
        ThresholdMode::Pcmt => result.iou_pcmt,
        ThresholdMode::Fixed0 => result.iou_fixed0,
        ThresholdMode::Otsu => result.iou_otsu,
    }
}

/// Evaluate one episode under all three threshold strategies.
pub fn evaluate_episode(
    episode: &Episode,
    weights: &PipelineWeights,
    cfg: &Config,
    seed: u64,
    index: usize,
) -> Result<EpisodeResult> {
    let prediction = predict_episode(episode, weights, cfg)?;
    let gt = &episode.query_mask;
    Ok(EpisodeResult {
        seed,
        index,
        iou_pcmt: iou(&prediction.mask(ThresholdMode::Pcmt), gt)?,
        iou_fixed0: iou(&prediction.mask(ThresholdMode::Fixed0), gt)?,
        iou_otsu: iou(&prediction.mask(ThresholdMode::Otsu), gt)?,
        threshold: prediction.otsu.threshold,
        confidence: prediction.confidence,
        weight: prediction.weight,
    })
}

/// Run the episode protocol: `episodes_per_seed` fresh episodes per seed,
/// every threshold strategy scored on each. Episodes are independent and
/// evaluated in parallel when the `parallel` feature is on; results are
/// reduced in (seed, index) order, so reports are identical either way.
pub fn evaluate(
    episodes_per_seed: usize,
    seeds: &[u64],
    cfg: &Config,
    mode: ThresholdMode,
) -> Result<EvalReport> {
    if episodes_per_seed == 0 || seeds.is_empty() {
        return Err(param_err!("need at least one seed and one episode"));
    }
    cfg.validate()?;
    let weights = PipelineWeights::seeded(cfg)?;
    let jobs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&s| (0..episodes_per_seed).map(move |i| (s, i)))
        .collect();

    let run = |&(seed, index): &(u64, usize)| -> Result<EpisodeResult> {
        let episode = eval_episode(cfg, seed, index)?;
        evaluate_episode(&episode, &weights, cfg, seed, index)
    };

    #[cfg(feature = "parallel")]
    let results: Result<Vec<EpisodeResult>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Result<Vec<EpisodeResult>> = jobs.iter().map(run).collect();
    let results = results?;

    let mut seed_means = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let ious: Vec<f64> =
            results.iter().filter(|r| r.seed == seed).map(|r| mode_iou(r, mode)).collect();
        seed_means.push((seed, ious.iter().sum::<f64>() / ious.len() as f64));
    }
    let total = results.len() as f64;
    let mean_of = |m: ThresholdMode| results.iter().map(|r| mode_iou(r, m)).sum::<f64>() / total;
    Ok(EvalReport {
        mode,
        episodes_per_seed,
        seeds: seeds.to_vec(),
        config_hash: cfg.content_hash(),
        mean_iou: mean_of(mode),
        mean_iou_pcmt: mean_of(ThresholdMode::Pcmt),
        mean_iou_fixed0: mean_of(ThresholdMode::Fixed0),
        mean_iou_otsu: mean_of(ThresholdMode::Otsu),
        results,
        seed_means,
    })
}

/// Loss decomposition for one episode.
#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    /// BCE over hierarchy-enhanced features.
    pub l_final: f64,
    /// SSP terms over raw high-level features.
    pub ssp: SspLoss,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.l_final + self.ssp.total()
    }
}

/// Forward losses: the final BCE on hierarchy-enhanced features plus the
/// SSP auxiliary terms on raw high-level features.
pub fn episode_loss(
    episode: &Episode,
    weights: &PipelineWeights,
    cfg: &Config,
) -> Result<LossReport> {
    cfg.validate()?;
    let mut enhanced_support = Vec::with_capacity(episode.k_shot());
    let mut raw_support = Vec::with_capacity(episode.k_shot());
    for (img, mask) in &episode.supports {
        let stack = multiscale(img, cfg)?;
        let (f_low, f_high) = toy_backbone(img, &weights.backbone)?;
        let enhanced = crate::hsm::hsm_enhance(&f_low, &f_high, &stack, &weights.hsm, cfg)?;
        enhanced_support.push((enhanced, mask.clone()));
        raw_support.push((f_high, mask.clone()));
    }
    let stack_q = multiscale(&episode.query_image, cfg)?;
    let (f_low_q, f_high_q) = toy_backbone(&episode.query_image, &weights.backbone)?;
    let enhanced_q =
        crate::hsm::hsm_enhance(&f_low_q, &f_high_q, &stack_q, &weights.hsm, cfg)?;

    let l_final = final_loss(&enhanced_support, &enhanced_q, &episode.query_mask, cfg)?;
    let ssp = ssp_loss(&raw_support, &f_high_q, &episode.query_mask, cfg)?;
    Ok(LossReport { l_final, ssp })
}
