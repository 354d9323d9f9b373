//! Class prototypes and the BCE loss heads.
//!
//! Support prototypes come from masked average pooling at feature
//! resolution; query prototypes are self-mined from the pixels whose cosine
//! to the support prototype clears a confidence threshold, with a fallback
//! to the support prototype when no pixel qualifies. Fused prototypes drive
//! the dense similarity maps used both for segmentation and for the loss.
//!
//! The BCE head turns the two cosine maps into a pixelwise two-way softmax
//! at temperature `softmax_temp`; `ln 2` at equal maps anchors the scale.

use crate::config::Config;
use crate::error::{dim_err, param_err, Error, Result};
use crate::ops::{
    area_downsample_mask, binarize, cosine_similarity_map, masked_average_pool,
    resize_bilinear_feature,
};
use crate::tensor::{FeatureMap, Grid, SoftMask};

/// Default support/query fusion weight.
pub const FUSE_WEIGHT: f64 = 0.5;

/// Foreground/background prototypes for one episode: support, self-mined
/// query, and their fusion, with flags for degenerate sources.
#[derive(Clone, Debug)]
pub struct ClassPrototypes {
    pub fg_support: Vec<f64>,
    pub bg_support: Vec<f64>,
    pub fg_query: Vec<f64>,
    pub bg_query: Vec<f64>,
    pub fg_fused: Vec<f64>,
    pub bg_fused: Vec<f64>,
    /// No shot had background pixels at feature resolution.
    pub bg_support_empty: bool,
    /// Query self-mining found no confident pixels and fell back.
    pub fg_query_fallback: bool,
    pub bg_query_fallback: bool,
}

impl ClassPrototypes {
    /// Full prototype extraction for an episode's feature maps.
    pub fn compute(
        support: &[(FeatureMap, SoftMask)],
        f_query: &FeatureMap,
        cfg: &Config,
    ) -> Result<ClassPrototypes> {
        let (fg_s, bg_s, bg_empty) = support_prototypes(support)?;
        let (fg_q, bg_q, fg_fb, bg_fb) = self_support_prototypes(f_query, &fg_s, &bg_s, cfg)?;
        let fg_fused = fuse_class_prototypes(&fg_s, &fg_q, FUSE_WEIGHT);
        let bg_fused = fuse_class_prototypes(&bg_s, &bg_q, FUSE_WEIGHT);
        Ok(ClassPrototypes {
            fg_support: fg_s,
            bg_support: bg_s,
            fg_query: fg_q,
            bg_query: bg_q,
            fg_fused,
            bg_fused,
            bg_support_empty: bg_empty,
            fg_query_fallback: fg_fb,
            bg_query_fallback: bg_fb,
        })
    }
}

/// Carry an image-resolution annotation onto the feature grid:
/// area-average then binarize at 0.5.
pub fn mask_at_feature_res(mask: &SoftMask, feat: &FeatureMap) -> Result<SoftMask> {
    let down = area_downsample_mask(mask, feat.height(), feat.width())?;
    Ok(binarize(&down, 0.5))
}

/// Per-shot foreground/background MAP, averaged over the shots whose mask
/// is nonempty at feature resolution. Errors if every shot has an empty
/// foreground; an all-foreground episode yields a zero background
/// prototype with its empty flag set.
pub fn support_prototypes(
    support: &[(FeatureMap, SoftMask)],
) -> Result<(Vec<f64>, Vec<f64>, bool)> {
    if support.is_empty() {
        return Err(param_err!("at least one support shot required"));
    }
    let channels = support[0].0.channels();
    let mut fg_sum = vec![0.0; channels];
    let mut bg_sum = vec![0.0; channels];
    let mut fg_shots = 0usize;
    let mut bg_shots = 0usize;
    for (feat, mask) in support {
        if feat.channels() != channels {
            return Err(dim_err!("support shots disagree on channel count"));
        }
        let fg_mask = mask_at_feature_res(mask, feat)?;
        let bg_mask = SoftMask::new(
            fg_mask.height(),
            fg_mask.width(),
            fg_mask.data().iter().map(|&v| 1.0 - v).collect(),
        )?;
        let (fg, fg_empty) = masked_average_pool(feat, &fg_mask)?;
        let (bg, bg_empty) = masked_average_pool(feat, &bg_mask)?;
        if !fg_empty {
            fg_shots += 1;
            for (s, v) in fg_sum.iter_mut().zip(&fg) {
                *s += v;
            }
        }
        if !bg_empty {
            bg_shots += 1;
            for (s, v) in bg_sum.iter_mut().zip(&bg) {
                *s += v;
            }
        }
    }
    if fg_shots == 0 {
        return Err(Error::EmptyForeground);
    }
    for v in fg_sum.iter_mut() {
        *v /= fg_shots as f64;
    }
    if bg_shots > 0 {
        for v in bg_sum.iter_mut() {
            *v /= bg_shots as f64;
        }
    }
    Ok((fg_sum, bg_sum, bg_shots == 0))
}

/// Self-support mining: MAP over the query pixels whose cosine to the
/// support prototype exceeds the configured threshold. Falls back to the
/// support prototype (flagged) when no pixel is confident.
pub fn self_support_prototypes(
    f_query: &FeatureMap,
    fg_support: &[f64],
    bg_support: &[f64],
    cfg: &Config,
) -> Result<(Vec<f64>, Vec<f64>, bool, bool)> {
    let mine = |proto: &[f64], thresh: f64| -> Result<(Vec<f64>, bool)> {
        let sim = cosine_similarity_map(proto, f_query)?;
        let selected: Vec<f64> =
            sim.data().iter().map(|&v| if v > thresh { 1.0 } else { 0.0 }).collect();
        let mask = SoftMask::new(f_query.height(), f_query.width(), selected)?;
        let (mined, empty) = masked_average_pool(f_query, &mask)?;
        if empty {
            Ok((proto.to_vec(), true))
        } else {
            Ok((mined, false))
        }
    };
    let (fg, fg_fallback) = mine(fg_support, cfg.ssp_fg_thresh)?;
    let (bg, bg_fallback) = mine(bg_support, cfg.ssp_bg_thresh)?;
    Ok((fg, bg, fg_fallback, bg_fallback))
}

/// `w·support + (1−w)·query`.
pub fn fuse_class_prototypes(support: &[f64], query: &[f64], w_fuse: f64) -> Vec<f64> {
    support.iter().zip(query).map(|(&s, &q)| w_fuse * s + (1.0 - w_fuse) * q).collect()
}

/// Bilinearly upsample the query features to `target` and compare every
/// pixel against the fused prototypes.
pub fn similarity_maps(
    protos: &ClassPrototypes,
    f_query: &FeatureMap,
    target: (usize, usize),
) -> Result<(Grid, Grid)> {
    if target.0 < f_query.height() || target.1 < f_query.width() {
        return Err(param_err!("similarity target must be at least the feature size"));
    }
    let up = resize_bilinear_feature(f_query, target.0, target.1);
    let m_fg = cosine_similarity_map(&protos.fg_fused, &up)?;
    let m_bg = cosine_similarity_map(&protos.bg_fused, &up)?;
    Ok((m_fg, m_bg))
}

const LOG_CLAMP: f64 = 1e-12;

/// `min(−ln σ(−u), −ln LOG_CLAMP)`: the clamped cross-entropy of one
/// branch, computed through ln(1+e^u) so saturated probabilities lose no
/// precision.
#[inline]
fn clamped_softplus(u: f64) -> f64 {
    let sp = if u > 0.0 { u + (-u).exp().ln_1p() } else { u.exp().ln_1p() };
    sp.min(-LOG_CLAMP.ln())
}

/// Pixelwise two-way softmax BCE over temperature-scaled similarity maps:
/// `p_fg = σ(temp·(m_fg − m_bg))`, `−mean[gt·ln p + (1−gt)·ln(1−p)]` with
/// log arguments clamped at 1e-12. `−ln p` and `−ln(1−p)` are evaluated as
/// softplus(∓z), which is the same function without cancellation.
pub fn bce_head(m_fg: &Grid, m_bg: &Grid, gt: &SoftMask, temp: f64) -> Result<f64> {
    let (h, w) = (m_fg.height(), m_fg.width());
    if m_bg.height() != h || m_bg.width() != w || gt.height() != h || gt.width() != w {
        return Err(dim_err!("similarity maps and ground truth must share a shape"));
    }
    let n = (h * w) as f64;
    let mut total = 0.0;
    for i in 0..h * w {
        let z = temp * (m_fg.data()[i] - m_bg.data()[i]);
        let g = gt.data()[i];
        total += g * clamped_softplus(-z) + (1.0 - g) * clamped_softplus(z);
    }
    Ok(total / n)
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Analytic gradient of [`bce_head`] with respect to both similarity maps.
/// Matches the implemented loss exactly, including the log clamps (whose
/// saturated regions contribute zero gradient through the clamped branch).
pub fn bce_head_grad(
    m_fg: &Grid,
    m_bg: &Grid,
    gt: &SoftMask,
    temp: f64,
) -> Result<(Grid, Grid)> {
    let (h, w) = (m_fg.height(), m_fg.width());
    if m_bg.height() != h || m_bg.width() != w || gt.height() != h || gt.width() != w {
        return Err(dim_err!("similarity maps and ground truth must share a shape"));
    }
    let n = (h * w) as f64;
    let mut d_fg = vec![0.0; h * w];
    let mut d_bg = vec![0.0; h * w];
    for i in 0..h * w {
        let z = temp * (m_fg.data()[i] - m_bg.data()[i]);
        let p = sigmoid(z);
        let g = gt.data()[i];
        let mut dl_dz = 0.0;
        if p > LOG_CLAMP {
            dl_dz -= g * (1.0 - p);
        }
        if 1.0 - p > LOG_CLAMP {
            dl_dz += (1.0 - g) * p;
        }
        d_fg[i] = temp * dl_dz / n;
        d_bg[i] = -temp * dl_dz / n;
    }
    Ok((Grid::new(h, w, d_fg)?, Grid::new(h, w, d_bg)?))
}

/// Chain-rule gradient of a loss through a cosine map back to its
/// prototype: given `∂L/∂map`, returns `∂L/∂prototype`.
pub fn cosine_map_grad_wrt_prototype(
    prototype: &[f64],
    feat: &FeatureMap,
    upstream: &Grid,
) -> Result<Vec<f64>> {
    if upstream.height() != feat.height() || upstream.width() != feat.width() {
        return Err(dim_err!("upstream gradient does not match features"));
    }
    if prototype.len() != feat.channels() {
        return Err(dim_err!("prototype size does not match features"));
    }
    let plane = feat.height() * feat.width();
    let c = feat.channels();
    let p_norm_sq: f64 = prototype.iter().map(|v| v * v).sum();
    let mut grad = vec![0.0; c];
    if p_norm_sq == 0.0 {
        return Ok(grad);
    }
    let p_norm = p_norm_sq.sqrt();
    for i in 0..plane {
        let up = upstream.data()[i];
        if up == 0.0 {
            continue;
        }
        let mut dot = 0.0;
        let mut f_norm_sq = 0.0;
        for ch in 0..c {
            let f = feat.data()[ch * plane + i];
            dot += prototype[ch] * f;
            f_norm_sq += f * f;
        }
        if f_norm_sq == 0.0 {
            continue;
        }
        let f_norm = f_norm_sq.sqrt();
        let cos = dot / (p_norm * f_norm);
        for ch in 0..c {
            let f = feat.data()[ch * plane + i];
            let d = f / (p_norm * f_norm) - cos * prototype[ch] / p_norm_sq;
            grad[ch] += up * d;
        }
    }
    Ok(grad)
}

/// Worst per-element relative error between two gradients. Components far
/// below the gradient's own scale are measured against that scale (‖g‖_∞),
/// since finite differences cannot resolve them relatively.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(scale))
        .fold(0.0, f64::max)
}

/// Central finite differences of a scalar function, one entry at a time.
pub fn finite_diff_grad<F>(f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(eps > 0.0, "step must be positive");
    let mut perturbed = point.to_vec();
    let mut grads = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        perturbed[i] = point[i] + eps;
        let plus = f(&perturbed);
        perturbed[i] = point[i] - eps;
        let minus = f(&perturbed);
        perturbed[i] = point[i];
        grads.push((plus - minus) / (2.0 * eps));
    }
    grads
}

/// Worst-case gradient errors from one randomized verification trial.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckTrial {
    /// Analytic vs central-difference error on ∂loss/∂(similarity maps).
    pub map_error: f64,
    /// Analytic vs central-difference error on ∂loss/∂(fused prototypes).
    pub prototype_error: f64,
}

/// One randomized gradient verification: random features, prototypes and
/// binary ground truth; the analytic gradients of the BCE head (direct and
/// chained through the cosine maps) are compared against central finite
/// differences.
pub fn gradient_check_trial(seed: u64) -> Result<GradCheckTrial> {
    let mut rng = crate::rng::StreamRng::from_seed(seed);
    let (c, h, w) = (6, 8, 8);
    let feat = FeatureMap::new(
        c,
        h,
        w,
        (0..c * h * w).map(|_| rng.uniform() * 2.0 - 1.0).collect(),
    )?;
    let p_fg: Vec<f64> = (0..c).map(|_| rng.uniform() + 0.1).collect();
    let p_bg: Vec<f64> = (0..c).map(|_| rng.uniform() + 0.1).collect();
    let gt = SoftMask::new(
        h,
        w,
        (0..h * w).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).collect(),
    )?;
    let temp = 10.0;
    let eps = 1e-6;

    let m_fg = cosine_similarity_map(&p_fg, &feat)?;
    let m_bg = cosine_similarity_map(&p_bg, &feat)?;
    let (d_fg, d_bg) = bce_head_grad(&m_fg, &m_bg, &gt, temp)?;

    let fd_fg = finite_diff_grad(
        |v| {
            let m = Grid::new(h, w, v.to_vec()).unwrap();
            bce_head(&m, &m_bg, &gt, temp).unwrap()
        },
        m_fg.data(),
        eps,
    );
    let fd_bg = finite_diff_grad(
        |v| {
            let m = Grid::new(h, w, v.to_vec()).unwrap();
            bce_head(&m_fg, &m, &gt, temp).unwrap()
        },
        m_bg.data(),
        eps,
    );
    let map_error = max_relative_error(d_fg.data(), &fd_fg)
        .max(max_relative_error(d_bg.data(), &fd_bg));

    let d_pfg = cosine_map_grad_wrt_prototype(&p_fg, &feat, &d_fg)?;
    let d_pbg = cosine_map_grad_wrt_prototype(&p_bg, &feat, &d_bg)?;
    let loss_of = |pf: &[f64], pb: &[f64]| {
        let a = cosine_similarity_map(pf, &feat).unwrap();
        let b = cosine_similarity_map(pb, &feat).unwrap();
        bce_head(&a, &b, &gt, temp).unwrap()
    };
    let fd_pfg = finite_diff_grad(|v| loss_of(v, &p_bg), &p_fg, eps);
    let fd_pbg = finite_diff_grad(|v| loss_of(&p_fg, v), &p_bg, eps);
    let prototype_error = max_relative_error(&d_pfg, &fd_pfg)
        .max(max_relative_error(&d_pbg, &fd_pbg));

    Ok(GradCheckTrial { map_error, prototype_error })
}

/// The three SSP loss terms over high-level features.
#[derive(Clone, Copy, Debug)]
pub struct SspLoss {
    /// BCE of fused-prototype maps against the query mask.
    pub fused_term: f64,
    /// BCE of query self-prototype maps against the query mask.
    pub query_term: f64,
    /// BCE of support-prototype maps against the support masks, averaged
    /// over shots (weighted by λ in the total).
    pub support_term: f64,
    pub lambda: f64,
}

impl SspLoss {
    pub fn total(&self) -> f64 {
        self.fused_term + self.query_term + self.lambda * self.support_term
    }
}

/// BCE of the fused-prototype similarity maps against the query mask,
/// at the mask's resolution.
pub fn final_loss(
    support: &[(FeatureMap, SoftMask)],
    f_query: &FeatureMap,
    gt_query: &SoftMask,
    cfg: &Config,
) -> Result<f64> {
    let protos = ClassPrototypes::compute(support, f_query, cfg)?;
    let (m_fg, m_bg) =
        similarity_maps(&protos, f_query, (gt_query.height(), gt_query.width()))?;
    bce_head(&m_fg, &m_bg, &binarize(gt_query, 0.5), cfg.softmax_temp)
}

/// The SSP auxiliary loss over raw high-level features: fused-prototype
/// and query-prototype BCE against the query mask, plus λ times the
/// support-prototype BCE against the support masks.
pub fn ssp_loss(
    support: &[(FeatureMap, SoftMask)],
    f_query: &FeatureMap,
    gt_query: &SoftMask,
    cfg: &Config,
) -> Result<SspLoss> {
    let protos = ClassPrototypes::compute(support, f_query, cfg)?;
    let target = (gt_query.height(), gt_query.width());
    let gt_bin = binarize(gt_query, 0.5);

    let (m_fg, m_bg) = similarity_maps(&protos, f_query, target)?;
    let fused_term = bce_head(&m_fg, &m_bg, &gt_bin, cfg.softmax_temp)?;

    let up_q = resize_bilinear_feature(f_query, target.0, target.1);
    let q_fg = cosine_similarity_map(&protos.fg_query, &up_q)?;
    let q_bg = cosine_similarity_map(&protos.bg_query, &up_q)?;
    let query_term = bce_head(&q_fg, &q_bg, &gt_bin, cfg.softmax_temp)?;

    let mut support_term = 0.0;
    for (feat, mask) in support {
        let shot = [(feat.clone(), mask.clone())];
        let (fg_s, bg_s, _) = support_prototypes(&shot)?;
        let up_s = resize_bilinear_feature(feat, mask.height(), mask.width());
        let s_fg = cosine_similarity_map(&fg_s, &up_s)?;
        let s_bg = cosine_similarity_map(&bg_s, &up_s)?;
        support_term += bce_head(&s_fg, &s_bg, &binarize(mask, 0.5), cfg.softmax_temp)?;
    }
    support_term /= support.len() as f64;

    Ok(SspLoss { fused_term, query_term, support_term, lambda: cfg.lambda_ssp })
}
