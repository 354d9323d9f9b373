//! Hierarchical semantic mining.
//!
//! Per superpixel scale: region prototypes are pooled from projected
//! low-level features and from high-level features, the low-level set is
//! passed through two multi-head self-attention layers, both are fused
//! with weight α, and the fused prototypes are broadcast back onto the
//! feature grid (RMAP). Summing the per-scale broadcasts onto the
//! high-level features yields the hierarchy-enhanced map.
//!
//! The attention layers are minimal: scaled dot-product heads, output
//! projection, residual addition — no normalization, feed-forward block or
//! positional terms, so the operator is permutation-equivariant over
//! regions.

use crate::config::Config;
use crate::error::{dim_err, param_err, Result};
use crate::ops::{downsample_labels_nearest, masked_average_pool, resize_bilinear_feature};
use crate::rng::{stream, StreamRng};
use crate::superpix::{region_binary_masks, SuperpixelStack};
use crate::tensor::{FeatureMap, SoftMask};

/// Region prototypes for one superpixel scale. Regions that vanish at
/// feature resolution carry the zero vector and an empty flag; they stay
/// in the sequence so region indices keep their meaning.
#[derive(Clone, Debug)]
pub struct RegionPrototypes {
    pub scale_index: usize,
    pub vectors: Vec<Vec<f64>>,
    pub empty_flags: Vec<bool>,
}

impl RegionPrototypes {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

/// 1×1 convolution lifting low-level channels to the high-level width:
/// `out = W·f + b` per pixel, row-major `W` of shape (c_out, c_in).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub c_out: usize,
    pub c_in: usize,
}

impl ProjectionWeights {
    pub fn new(c_out: usize, c_in: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != c_out * c_in || bias.len() != c_out {
            return Err(dim_err!("projection weights must be ({c_out}x{c_in}, {c_out})"));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(param_err!("projection weights must be finite"));
        }
        Ok(ProjectionWeights { weight, bias, c_out, c_in })
    }

    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        ProjectionWeights { weight: vec![0.0; c_out * c_in], bias: vec![0.0; c_out], c_out, c_in }
    }

    pub fn identity(c: usize) -> Self {
        let mut weight = vec![0.0; c * c];
        for i in 0..c {
            weight[i * c + i] = 1.0;
        }
        ProjectionWeights { weight, bias: vec![0.0; c], c_out: c, c_in: c }
    }
}

/// One attention layer: query/key/value projections plus output projection,
/// all (c, c) row-major, applied as `out = W·x`.
#[derive(Clone, Debug, PartialEq)]
pub struct MsaLayer {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
}

impl MsaLayer {
    pub fn zeros(c: usize) -> Self {
        MsaLayer { wq: vec![0.0; c * c], wk: vec![0.0; c * c], wv: vec![0.0; c * c], wo: vec![0.0; c * c] }
    }
}

/// Two attention layers sharing a head count.
#[derive(Clone, Debug, PartialEq)]
pub struct MsaWeights {
    pub layers: [MsaLayer; 2],
    pub heads: usize,
    pub dim: usize,
}

impl MsaWeights {
    pub fn new(layers: [MsaLayer; 2], heads: usize, dim: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(param_err!("model dim {dim} must be divisible by {heads} heads"));
        }
        for layer in &layers {
            for w in [&layer.wq, &layer.wk, &layer.wv, &layer.wo] {
                if w.len() != dim * dim {
                    return Err(dim_err!("attention matrices must be {dim}x{dim}"));
                }
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(param_err!("attention weights must be finite"));
                }
            }
        }
        Ok(MsaWeights { layers, heads, dim })
    }

    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        MsaWeights::new([MsaLayer::zeros(dim), MsaLayer::zeros(dim)], heads, dim)
    }
}

/// Projection plus attention weights for the whole mining stage.
#[derive(Clone, Debug, PartialEq)]
pub struct HsmWeights {
    pub projection: ProjectionWeights,
    pub msa: MsaWeights,
}

impl HsmWeights {
    /// Seeded initializer: every matrix entry ~ N(0, 0.02²), biases zero.
    /// Draw order: projection weight, then per layer wq, wk, wv, wo.
    pub fn seeded(c_low: usize, c_high: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut rng = StreamRng::from_seed(seed).split(stream::HSM_WEIGHTS);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.normal(0.0, 0.02)).collect()
        };
        let projection =
            ProjectionWeights::new(c_high, c_low, draw(c_high * c_low), vec![0.0; c_high])?;
        let mut layers = Vec::with_capacity(2);
        for _ in 0..2 {
            layers.push(MsaLayer {
                wq: draw(c_high * c_high),
                wk: draw(c_high * c_high),
                wv: draw(c_high * c_high),
                wo: draw(c_high * c_high),
            });
        }
        let msa = MsaWeights::new([layers.remove(0), layers.remove(0)], heads, c_high)?;
        Ok(HsmWeights { projection, msa })
    }

    pub fn zeros(c_low: usize, c_high: usize, heads: usize) -> Result<Self> {
        Ok(HsmWeights {
            projection: ProjectionWeights::zeros(c_high, c_low),
            msa: MsaWeights::zeros(c_high, heads)?,
        })
    }

    /// Flatten to a single vector: projection weight, projection bias,
    /// then wq/wk/wv/wo for each layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.projection.weight);
        out.extend_from_slice(&self.projection.bias);
        for layer in &self.msa.layers {
            out.extend_from_slice(&layer.wq);
            out.extend_from_slice(&layer.wk);
            out.extend_from_slice(&layer.wv);
            out.extend_from_slice(&layer.wo);
        }
        out
    }

    pub fn flat_len(c_low: usize, c_high: usize) -> usize {
        c_high * c_low + c_high + 8 * c_high * c_high
    }

    pub fn from_flat(c_low: usize, c_high: usize, heads: usize, data: &[f64]) -> Result<Self> {
        let expect = Self::flat_len(c_low, c_high);
        if data.len() != expect {
            return Err(dim_err!(
                "weight blob holds {} values, expected {expect} for c_l={c_low} c_h={c_high}",
                data.len()
            ));
        }
        let mut at = 0;
        let mut take = |len: usize| -> Vec<f64> {
            let out = data[at..at + len].to_vec();
            at += len;
            out
        };
        let projection =
            ProjectionWeights::new(c_high, c_low, take(c_high * c_low), take(c_high))?;
        let sq = c_high * c_high;
        let mut layers = Vec::with_capacity(2);
        for _ in 0..2 {
            layers.push(MsaLayer { wq: take(sq), wk: take(sq), wv: take(sq), wo: take(sq) });
        }
        let msa = MsaWeights::new([layers.remove(0), layers.remove(0)], heads, c_high)?;
        Ok(HsmWeights { projection, msa })
    }
}

#[inline]
fn mat_vec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)) {
        let mut acc = 0.0;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

/// Per-pixel linear lift of low-level features followed by bilinear
/// resampling to the high-level grid.
pub fn project_low(
    f_low: &FeatureMap,
    weights: &ProjectionWeights,
    target: (usize, usize),
) -> Result<FeatureMap> {
    if f_low.channels() != weights.c_in {
        return Err(dim_err!(
            "feature map has {} channels, projection expects {}",
            f_low.channels(),
            weights.c_in
        ));
    }
    let (h, w) = (f_low.height(), f_low.width());
    let plane = h * w;
    let mut lifted = vec![0.0; weights.c_out * plane];
    let mut column = vec![0.0; weights.c_in];
    let mut out_col = vec![0.0; weights.c_out];
    for i in 0..plane {
        for (c, slot) in column.iter_mut().enumerate() {
            *slot = f_low.data()[c * plane + i];
        }
        mat_vec(&weights.weight, &column, &mut out_col);
        for (c, v) in out_col.iter().enumerate() {
            lifted[c * plane + i] = v + weights.bias[c];
        }
    }
    let lifted = FeatureMap::new(weights.c_out, h, w, lifted)?;
    Ok(resize_bilinear_feature(&lifted, target.0, target.1))
}

/// Masked average pooling per region mask.
pub fn region_prototypes(
    feat: &FeatureMap,
    masks: &[SoftMask],
    scale_index: usize,
) -> Result<RegionPrototypes> {
    let mut vectors = Vec::with_capacity(masks.len());
    let mut empty_flags = Vec::with_capacity(masks.len());
    for mask in masks {
        let (proto, empty) = masked_average_pool(feat, mask)?;
        vectors.push(proto);
        empty_flags.push(empty);
    }
    Ok(RegionPrototypes { scale_index, vectors, empty_flags })
}

fn attention_layer(tokens: &[Vec<f64>], layer: &MsaLayer, heads: usize) -> Vec<Vec<f64>> {
    let n = tokens.len();
    let dim = tokens[0].len();
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut q = vec![vec![0.0; dim]; n];
    let mut k = vec![vec![0.0; dim]; n];
    let mut v = vec![vec![0.0; dim]; n];
    for (i, x) in tokens.iter().enumerate() {
        mat_vec(&layer.wq, x, &mut q[i]);
        mat_vec(&layer.wk, x, &mut k[i]);
        mat_vec(&layer.wv, x, &mut v[i]);
    }

    let mut context = vec![vec![0.0; dim]; n];
    let mut scores = vec![0.0; n];
    for i in 0..n {
        for h in 0..heads {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            let mut max_score = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for d in lo..hi {
                    dot += q[i][d] * k[j][d];
                }
                *s = dot * scale;
                max_score = max_score.max(*s);
            }
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max_score).exp();
                denom += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let attn = s / denom;
                for d in lo..hi {
                    context[i][d] += attn * v[j][d];
                }
            }
        }
    }

    let mut out = vec![vec![0.0; dim]; n];
    let mut projected = vec![0.0; dim];
    for i in 0..n {
        mat_vec(&layer.wo, &context[i], &mut projected);
        for d in 0..dim {
            out[i][d] = tokens[i][d] + projected[d];
        }
    }
    out
}

/// Two multi-head self-attention layers with residual connections over the
/// region-prototype sequence. Empty flags pass through untouched.
pub fn msa_enhance(protos: &RegionPrototypes, weights: &MsaWeights) -> Result<RegionPrototypes> {
    if protos.is_empty() {
        return Err(param_err!("attention needs at least one prototype"));
    }
    if protos.dim() != weights.dim {
        return Err(dim_err!(
            "prototypes have dim {}, attention expects {}",
            protos.dim(),
            weights.dim
        ));
    }
    if weights.dim % weights.heads != 0 {
        return Err(param_err!("dim not divisible by head count"));
    }
    let mut tokens = protos.vectors.clone();
    for layer in &weights.layers {
        tokens = attention_layer(&tokens, layer, weights.heads);
    }
    Ok(RegionPrototypes {
        scale_index: protos.scale_index,
        vectors: tokens,
        empty_flags: protos.empty_flags.clone(),
    })
}

/// `α·low + (1−α)·high` per region.
pub fn fuse_prototypes(
    low: &RegionPrototypes,
    high: &RegionPrototypes,
    alpha: f64,
) -> Result<RegionPrototypes> {
    if low.len() != high.len() {
        return Err(dim_err!("prototype counts differ: {} vs {}", low.len(), high.len()));
    }
    let mut vectors = Vec::with_capacity(low.len());
    let mut empty_flags = Vec::with_capacity(low.len());
    for j in 0..low.len() {
        if low.vectors[j].len() != high.vectors[j].len() {
            return Err(dim_err!("prototype dims differ at region {j}"));
        }
        vectors.push(
            low.vectors[j]
                .iter()
                .zip(&high.vectors[j])
                .map(|(&l, &h)| alpha * l + (1.0 - alpha) * h)
                .collect(),
        );
        empty_flags.push(low.empty_flags[j] && high.empty_flags[j]);
    }
    Ok(RegionPrototypes { scale_index: high.scale_index, vectors, empty_flags })
}

/// Inverse of MAP: broadcast each region's prototype onto its mask.
/// With a partition this is the piecewise-constant expansion.
pub fn rmap(protos: &RegionPrototypes, masks: &[SoftMask]) -> Result<FeatureMap> {
    if protos.len() != masks.len() {
        return Err(dim_err!("{} prototypes but {} masks", protos.len(), masks.len()));
    }
    if masks.is_empty() {
        return Err(param_err!("rmap needs at least one region"));
    }
    let (h, w) = (masks[0].height(), masks[0].width());
    let c = protos.dim();
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for (proto, mask) in protos.vectors.iter().zip(masks) {
        if mask.height() != h || mask.width() != w {
            return Err(dim_err!("region masks disagree on size"));
        }
        for (i, &m) in mask.data().iter().enumerate() {
            if m != 0.0 {
                for (ch, &p) in proto.iter().enumerate() {
                    out[ch * plane + i] += p * m;
                }
            }
        }
    }
    Ok(FeatureMap::from_raw_unchecked(c, h, w, out))
}

/// Full mining stage: per scale, pool region prototypes from the projected
/// low-level and the high-level features, attention-enhance the low set,
/// fuse, broadcast, and add every scale's broadcast onto `f_high`.
pub fn hsm_enhance(
    f_low: &FeatureMap,
    f_high: &FeatureMap,
    stack: &SuperpixelStack,
    weights: &HsmWeights,
    cfg: &Config,
) -> Result<FeatureMap> {
    if stack.masks.len() != cfg.scale_count {
        return Err(param_err!(
            "superpixel stack has {} scales, config wants {}",
            stack.masks.len(),
            cfg.scale_count
        ));
    }
    let (hh, hw) = (f_high.height(), f_high.width());
    let lifted = project_low(f_low, &weights.projection, (hh, hw))?;

    let per_scale = |(i, labels): (usize, &crate::tensor::LabelMask)| -> Result<FeatureMap> {
        let at_feature_res = downsample_labels_nearest(labels, hh, hw);
        let masks = region_binary_masks(&at_feature_res);
        let low = region_prototypes(&lifted, &masks, i)?;
        let low = msa_enhance(&low, &weights.msa)?;
        let high = region_prototypes(f_high, &masks, i)?;
        let fused = fuse_prototypes(&low, &high, cfg.alpha)?;
        rmap(&fused, &masks)
    };

    #[cfg(feature = "parallel")]
    let broadcasts: Result<Vec<FeatureMap>> = {
        use rayon::prelude::*;
        stack.masks.par_iter().enumerate().map(per_scale).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let broadcasts: Result<Vec<FeatureMap>> = stack.masks.iter().enumerate().map(per_scale).collect();

    let mut out = f_high.clone();
    for broadcast in broadcasts? {
        let data = out.data_mut();
        for (o, b) in data.iter_mut().zip(broadcast.data()) {
            *o += b;
        }
    }
    Ok(out)
}
