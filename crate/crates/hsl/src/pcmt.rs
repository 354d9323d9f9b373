//! Prototype confidence-modulated thresholding (test-time segmentation).
//!
//! The query foreground confidence map is the difference of the fused
//! foreground and background similarity maps. An Otsu threshold `t` over
//! its histogram adapts to ambiguous episodes; the cross-view prototype
//! confidence `C` gates how much of `t` is applied:
//! `θ = t / (1 + e^{β(C+γ)})`, and a pixel is foreground iff its
//! confidence strictly exceeds θ. A saturated-high `C` collapses the rule
//! to plain sign comparison.

use crate::config::Config;
use crate::error::{dim_err, param_err, Result};
use crate::harness::{toy_backbone, PipelineWeights};
use crate::hsm::hsm_enhance;
use crate::ops::cosine;
use crate::proto::{similarity_maps, ClassPrototypes};
use crate::superpix::multiscale;
use crate::tensor::{Episode, FeatureMap, Grid, SoftMask};

/// Histogram resolution for the adaptive threshold.
pub const HISTOGRAM_BINS: usize = 256;

/// Difference of two cosine maps, bounded in [−2, 2].
#[derive(Clone, Debug)]
pub struct ConfidenceMap {
    grid: Grid,
}

impl ConfidenceMap {
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.data().iter().any(|&v| !(-2.0 - 1e-9..=2.0 + 1e-9).contains(&v)) {
            return Err(param_err!("confidence values must lie in [-2, 2]"));
        }
        Ok(ConfidenceMap { grid })
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn data(&self) -> &[f64] {
        self.grid.data()
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.grid.get(y, x)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
}

/// Thresholding hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct PcmtParams {
    pub beta: f64,
    pub gamma: f64,
    pub histogram_bins: usize,
}

impl PcmtParams {
    pub fn from_config(cfg: &Config) -> Self {
        PcmtParams { beta: cfg.beta, gamma: cfg.gamma, histogram_bins: HISTOGRAM_BINS }
    }

    pub fn validate(&self) -> Result<()> {
        if self.histogram_bins < 2 {
            return Err(param_err!("histogram needs at least 2 bins"));
        }
        if !self.beta.is_finite() || !self.gamma.is_finite() {
            return Err(param_err!("beta and gamma must be finite"));
        }
        Ok(())
    }
}

/// `M^fg − M^bg` elementwise.
pub fn confidence_map(m_fg: &Grid, m_bg: &Grid) -> Result<ConfidenceMap> {
    if m_fg.height() != m_bg.height() || m_fg.width() != m_bg.width() {
        return Err(dim_err!("similarity maps disagree on shape"));
    }
    let data = m_fg.data().iter().zip(m_bg.data()).map(|(&f, &b)| f - b).collect();
    ConfidenceMap::new(Grid::new(m_fg.height(), m_fg.width(), data)?)
}

/// Adaptive threshold with a degeneracy flag for constant maps.
#[derive(Clone, Copy, Debug)]
pub struct OtsuResult {
    pub threshold: f64,
    pub degenerate: bool,
}

/// Histogram Otsu threshold over the map's [min, max] range: the bin upper
/// edge maximizing the inter-class variance ω₀ω₁(μ₀−μ₁)², ties broken
/// toward the lowest edge. The comparison is done in exact integer
/// arithmetic over bin indices (valid for maps up to ~400×400 pixels), so
/// the winner never depends on accumulation order.
pub fn otsu_threshold(map: &ConfidenceMap, bins: usize) -> Result<OtsuResult> {
    if bins < 2 {
        return Err(param_err!("histogram needs at least 2 bins"));
    }
    let lo = map.grid.min();
    let hi = map.grid.max();
    if lo == hi {
        return Ok(OtsuResult { threshold: lo, degenerate: true });
    }
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0u64; bins];
    for &v in map.data() {
        let idx = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        hist[idx.min(bins - 1)] += 1;
    }
    let total: u64 = hist.iter().sum();
    let weighted_total: u64 = hist.iter().enumerate().map(|(i, &h)| i as u64 * h).sum();

    let mut best_num: u128 = 0;
    let mut best_den: u128 = 1;
    let mut best_k = 0usize;
    let mut initialized = false;
    let mut n0: u64 = 0;
    let mut s0: u64 = 0;
    for k in 0..bins - 1 {
        n0 += hist[k];
        s0 += k as u64 * hist[k];
        let n1 = total - n0;
        let s1 = weighted_total - s0;
        let (num, den) = if n0 == 0 || n1 == 0 {
            (0u128, 1u128)
        } else {
            let diff = s0 as i128 * n1 as i128 - s1 as i128 * n0 as i128;
            (diff.unsigned_abs().pow(2), n0 as u128 * n1 as u128)
        };
        // variance_k > variance_best  <=>  num·best_den > best_num·den
        if !initialized || num * best_den > best_num * den {
            initialized = true;
            best_num = num;
            best_den = den;
            best_k = k;
        }
    }
    Ok(OtsuResult { threshold: lo + (best_k + 1) as f64 * width, degenerate: false })
}

/// Cross-view prototype confidence:
/// `cos(fg_q, fg_s) − [cos(fg_q, bg_s) + cos(fg_s, bg_q)] / 2` in [−2, 2].
pub fn prototype_confidence(protos: &ClassPrototypes) -> f64 {
    let agree = cosine(&protos.fg_query, &protos.fg_support);
    let cross_q = cosine(&protos.fg_query, &protos.bg_support);
    let cross_s = cosine(&protos.fg_support, &protos.bg_query);
    agree - (cross_q + cross_s) / 2.0
}

/// Sigmoid gate on the adaptive threshold: 1/(1 + e^{β(C+γ)}).
pub fn sigmoid_weight(confidence: f64, beta: f64, gamma: f64) -> f64 {
    1.0 / (1.0 + (beta * (confidence + gamma)).exp())
}

/// Foreground where the confidence strictly exceeds `t` scaled by the
/// confidence gate. Applies the formula literally, including negative `t`.
pub fn modulated_segment(
    conf: &ConfidenceMap,
    t: f64,
    confidence: f64,
    params: &PcmtParams,
) -> SoftMask {
    let theta = t * sigmoid_weight(confidence, params.beta, params.gamma);
    let data = conf.data().iter().map(|&v| if v > theta { 1.0 } else { 0.0 }).collect();
    SoftMask::from_raw_unchecked(conf.height(), conf.width(), data)
}

/// Threshold strategy for query segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdMode {
    /// Confidence-gated Otsu threshold.
    Pcmt,
    /// Plain sign comparison (threshold 0).
    Fixed0,
    /// Raw Otsu threshold.
    Otsu,
}

impl std::str::FromStr for ThresholdMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcmt" => Ok(ThresholdMode::Pcmt),
            "fixed0" => Ok(ThresholdMode::Fixed0),
            "otsu" => Ok(ThresholdMode::Otsu),
            other => Err(param_err!("unknown threshold mode `{other}`")),
        }
    }
}

impl std::fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdMode::Pcmt => write!(f, "pcmt"),
            ThresholdMode::Fixed0 => write!(f, "fixed0"),
            ThresholdMode::Otsu => write!(f, "otsu"),
        }
    }
}

/// Everything the thresholding stage needs, computed once per episode;
/// the three strategies then differ only in the threshold applied.
#[derive(Clone, Debug)]
pub struct EpisodePrediction {
    pub conf: ConfidenceMap,
    pub otsu: OtsuResult,
    pub confidence: f64,
    pub weight: f64,
}

impl EpisodePrediction {
    /// Threshold actually applied in the given mode. A degenerate Otsu
    /// result falls back to 0.
    pub fn effective_threshold(&self, mode: ThresholdMode) -> f64 {
        match mode {
            ThresholdMode::Fixed0 => 0.0,
            ThresholdMode::Otsu => {
                if self.otsu.degenerate {
                    0.0
                } else {
                    self.otsu.threshold
                }
            }
            ThresholdMode::Pcmt => {
                if self.otsu.degenerate {
                    0.0
                } else {
                    self.otsu.threshold * self.weight
                }
            }
        }
    }

    pub fn mask(&self, mode: ThresholdMode) -> SoftMask {
        let theta = self.effective_threshold(mode);
        let data = self.conf.data().iter().map(|&v| if v > theta { 1.0 } else { 0.0 }).collect();
        SoftMask::from_raw_unchecked(self.conf.height(), self.conf.width(), data)
    }
}

/// Per-episode scalars reported alongside a prediction.
#[derive(Clone, Copy, Debug)]
pub struct SegmentDiagnostics {
    pub threshold: f64,
    pub confidence: f64,
    pub weight: f64,
    pub otsu_degenerate: bool,
}

fn enhanced_features(
    img: &crate::tensor::ImageTensor,
    weights: &PipelineWeights,
    cfg: &Config,
) -> Result<FeatureMap> {
    let stack = multiscale(img, cfg)?;
    let (f_low, f_high) = toy_backbone(img, &weights.backbone)?;
    hsm_enhance(&f_low, &f_high, &stack, &weights.hsm, cfg)
}

/// Run the full test-time pipeline up to the confidence map and the
/// thresholding scalars. The three threshold strategies share this work.
pub fn predict_episode(
    episode: &Episode,
    weights: &PipelineWeights,
    cfg: &Config,
) -> Result<EpisodePrediction> {
    cfg.validate()?;
    let mut support = Vec::with_capacity(episode.k_shot());
    for (img, mask) in &episode.supports {
        support.push((enhanced_features(img, weights, cfg)?, mask.clone()));
    }
    let f_query = enhanced_features(&episode.query_image, weights, cfg)?;
    let protos = ClassPrototypes::compute(&support, &f_query, cfg)?;
    let (m_fg, m_bg) =
        similarity_maps(&protos, &f_query, (episode.height(), episode.width()))?;
    let conf = confidence_map(&m_fg, &m_bg)?;
    let otsu = otsu_threshold(&conf, HISTOGRAM_BINS)?;
    let confidence = prototype_confidence(&protos);
    let weight = sigmoid_weight(confidence, cfg.beta, cfg.gamma);
    Ok(EpisodePrediction { conf, otsu, confidence, weight })
}

/// Segment one episode under the chosen threshold strategy.
pub fn segment_episode(
    episode: &Episode,
    weights: &PipelineWeights,
    cfg: &Config,
    mode: ThresholdMode,
) -> Result<(SoftMask, SegmentDiagnostics)> {
    let prediction = predict_episode(episode, weights, cfg)?;
    let mask = prediction.mask(mode);
    Ok((
        mask,
        SegmentDiagnostics {
            threshold: prediction.otsu.threshold,
            confidence: prediction.confidence,
            weight: prediction.weight,
            otsu_degenerate: prediction.otsu.degenerate,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn conf_from(data: Vec<f64>, h: usize, w: usize) -> ConfidenceMap {
        ConfidenceMap::new(Grid::new(h, w, data).unwrap()).unwrap()
    }

    #[test]
    fn confidence_map_is_elementwise_difference() {
        let a = Grid::new(1, 3, vec![0.5, -0.25, 1.0]).unwrap();
        let b = Grid::new(1, 3, vec![0.5, 0.75, -1.0]).unwrap();
        let conf = confidence_map(&a, &b).unwrap();
        assert_eq!(conf.data(), &[0.0, -1.0, 2.0]);

        let mut rng = StreamRng::from_seed(1);
        let x: Vec<f64> = (0..24).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let y: Vec<f64> = (0..24).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let gx = Grid::new(4, 6, x.clone()).unwrap();
        let gy = Grid::new(4, 6, y.clone()).unwrap();
        let conf = confidence_map(&gx, &gy).unwrap();
        for i in 0..24 {
            assert_eq!(conf.data()[i], x[i] - y[i]);
            assert!(conf.data()[i].abs() <= 2.0 + 1e-9);
        }
    }

    #[test]
    fn confidence_map_rejects_shape_mismatch() {
        let a = Grid::filled(2, 2, 0.0);
        let b = Grid::filled(2, 3, 0.0);
        assert!(confidence_map(&a, &b).is_err());
    }

    #[test]
    fn otsu_separates_two_clusters() {
        let mut data = vec![0.1; 50];
        data.extend(vec![0.9; 50]);
        let conf = conf_from(data, 10, 10);
        let result = otsu_threshold(&conf, 256).unwrap();
        assert!(!result.degenerate);
        assert!(result.threshold > 0.1 && result.threshold < 0.9);
        let below = conf.data().iter().filter(|&&v| v <= result.threshold).count();
        assert_eq!(below, 50);
    }

    #[test]
    fn otsu_constant_map_is_degenerate() {
        let conf = conf_from(vec![0.4; 16], 4, 4);
        let result = otsu_threshold(&conf, 256).unwrap();
        assert!(result.degenerate);
        assert_eq!(result.threshold, 0.4);
    }

    /// From-scratch maximizer recomputing class means per candidate edge.
    fn otsu_bruteforce(values: &[f64], bins: usize) -> f64 {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let mut hist = vec![0u64; bins];
        for &v in values {
            let idx = (((v - lo) / (hi - lo)) * bins as f64) as usize;
            hist[idx.min(bins - 1)] += 1;
        }
        let mut best_var = f64::NEG_INFINITY;
        let mut best_k = 0usize;
        for k in 0..bins - 1 {
            let n0: u64 = hist[..=k].iter().sum();
            let n1: u64 = hist[k + 1..].iter().sum();
            if n0 == 0 || n1 == 0 {
                if 0.0 > best_var {
                    best_var = 0.0;
                    best_k = k;
                }
                continue;
            }
            let mu0 = hist[..=k].iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum::<f64>()
                / n0 as f64;
            let mu1 = hist[k + 1..]
                .iter()
                .enumerate()
                .map(|(i, &h)| (k + 1 + i) as f64 * h as f64)
                .sum::<f64>()
                / n1 as f64;
            let var = n0 as f64 * n1 as f64 * (mu0 - mu1) * (mu0 - mu1);
            if var > best_var {
                best_var = var;
                best_k = k;
            }
        }
        lo + (best_k + 1) as f64 * width
    }

    #[test]
    fn otsu_matches_bruteforce_on_random_maps() {
        let mut rng = StreamRng::from_seed(5);
        for trial in 0..200 {
            let n = 16 + (rng.below(48) as usize) * 8;
            let data: Vec<f64> = (0..n * 8).map(|_| rng.uniform() * 3.0 - 1.5).collect();
            let conf = conf_from(data.clone(), 8, n);
            let got = otsu_threshold(&conf, 256).unwrap();
            let want = otsu_bruteforce(&data, 256);
            assert_eq!(got.threshold, want, "trial {trial}");
        }
    }

    #[test]
    fn prototype_confidence_anchors() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        // All identical: 1 − (1+1)/2 = 0.
        let protos = ClassPrototypes {
            fg_support: e1.clone(),
            bg_support: e1.clone(),
            fg_query: e1.clone(),
            bg_query: e1.clone(),
            fg_fused: e1.clone(),
            bg_fused: e1.clone(),
            bg_support_empty: false,
            fg_query_fallback: false,
            bg_query_fallback: false,
        };
        assert!((prototype_confidence(&protos) - 0.0).abs() < 1e-12);
        // Clean separation: 1 − 0 = 1.
        let protos = ClassPrototypes {
            fg_support: e1.clone(),
            bg_support: e2.clone(),
            fg_query: e1.clone(),
            bg_query: e2.clone(),
            fg_fused: e1.clone(),
            bg_fused: e2.clone(),
            bg_support_empty: false,
            fg_query_fallback: false,
            bg_query_fallback: false,
        };
        assert!((prototype_confidence(&protos) - 1.0).abs() < 1e-12);
        // Crossed: 0 − (1+1)/2 = −1.
        let protos = ClassPrototypes {
            fg_support: e1.clone(),
            bg_support: e2.clone(),
            fg_query: e2.clone(),
            bg_query: e1.clone(),
            fg_fused: e1,
            bg_fused: e2,
            bg_support_empty: false,
            fg_query_fallback: false,
            bg_query_fallback: false,
        };
        assert!((prototype_confidence(&protos) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn prototype_confidence_scale_invariant() {
        let mut rng = StreamRng::from_seed(7);
        let vecs: Vec<Vec<f64>> =
            (0..4).map(|_| (0..6).map(|_| rng.uniform() - 0.5).collect()).collect();
        let make = |scale: f64| ClassPrototypes {
            fg_support: vecs[0].iter().map(|v| v * scale).collect(),
            bg_support: vecs[1].clone(),
            fg_query: vecs[2].clone(),
            bg_query: vecs[3].clone(),
            fg_fused: vecs[0].clone(),
            bg_fused: vecs[1].clone(),
            bg_support_empty: false,
            fg_query_fallback: false,
            bg_query_fallback: false,
        };
        let c1 = prototype_confidence(&make(1.0));
        let c2 = prototype_confidence(&make(17.0));
        assert!((c1 - c2).abs() < 1e-12);
        assert!(c1.abs() <= 2.0 + 1e-9);
    }

    #[test]
    fn sigmoid_weight_anchors() {
        // C = −γ is the sigmoid midpoint.
        assert_eq!(sigmoid_weight(-0.1, 40.0, 0.1), 0.5);
        // C = 1 saturates low.
        assert!(sigmoid_weight(1.0, 40.0, 0.1) < 1e-12);
        // C = −1 saturates high.
        assert!(sigmoid_weight(-1.0, 40.0, 0.1) > 1.0 - 1e-12);
    }

    #[test]
    fn modulated_segment_saturated_equals_sign_comparison() {
        let mut rng = StreamRng::from_seed(9);
        let params = PcmtParams { beta: 40.0, gamma: 0.1, histogram_bins: 256 };
        let data: Vec<f64> = (0..64).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let conf = conf_from(data.clone(), 8, 8);
        // weight underflows to exactly zero, so θ = 0 exactly.
        let got = modulated_segment(&conf, 0.37, 18.0, &params);
        for (m, &v) in got.data().iter().zip(&data) {
            assert_eq!(*m, if v > 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn modulated_segment_midpoint_halves_threshold() {
        let params = PcmtParams { beta: 40.0, gamma: 0.1, histogram_bins: 256 };
        let conf = conf_from(vec![0.3, 0.45, 0.6, 0.9], 2, 2);
        // C = −γ: θ = t/2 = 0.4.
        let mask = modulated_segment(&conf, 0.8, -0.1, &params);
        assert_eq!(mask.data(), &[0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn modulated_segment_low_confidence_applies_full_threshold() {
        let params = PcmtParams { beta: 40.0, gamma: 0.1, histogram_bins: 256 };
        let conf = conf_from(vec![0.3, 0.45, 0.6, 0.9], 2, 2);
        let mask = modulated_segment(&conf, 0.5, -1.0, &params);
        // θ ≈ t = 0.5.
        assert_eq!(mask.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn mask_monotone_in_confidence_for_positive_t() {
        let mut rng = StreamRng::from_seed(11);
        let params = PcmtParams { beta: 40.0, gamma: 0.1, histogram_bins: 256 };
        let data: Vec<f64> = (0..36).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let conf = conf_from(data, 6, 6);
        let t = 0.6;
        let mut prev_weight = f64::INFINITY;
        let mut prev_area = 0usize;
        let mut first = true;
        for c in [-1.0, -0.5, -0.1, 0.2, 1.0] {
            let w = sigmoid_weight(c, params.beta, params.gamma);
            assert!(w < prev_weight || (w - prev_weight).abs() < 1e-300);
            prev_weight = w;
            let area = modulated_segment(&conf, t, c, &params).area();
            if !first {
                assert!(area >= prev_area, "mask must not shrink as C rises (t > 0)");
            }
            prev_area = area;
            first = false;
        }
    }

    #[test]
    fn mask_monotonicity_reverses_for_negative_t() {
        let params = PcmtParams { beta: 40.0, gamma: 0.1, histogram_bins: 256 };
        let conf = conf_from(vec![-0.8, -0.45, -0.2, -0.05], 2, 2);
        let t = -0.5;
        let mut prev_area = usize::MAX;
        for c in [-1.0, -0.1, 1.0] {
            let area = modulated_segment(&conf, t, c, &params).area();
            assert!(area <= prev_area, "literal formula shrinks the mask as C rises (t < 0)");
            prev_area = area;
        }
    }
}
