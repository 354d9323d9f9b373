//! Pooling, similarity and resampling primitives used by every stage.

use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::{FeatureMap, Grid, ImageTensor, LabelMask, Rect, SoftMask};

/// Masked average pooling: per channel, the mask-weighted mean of the
/// feature values. Returns the prototype and an empty-region flag; an
/// all-zero mask yields the zero vector with the flag set.
///
/// The mean is accumulated incrementally (`m += w·(x−m)/W`), so a region of
/// constant value pools to exactly that value; this keeps MAP∘RMAP a
/// bit-exact fixed point on piecewise-constant maps.
pub fn masked_average_pool(feat: &FeatureMap, mask: &SoftMask) -> Result<(Vec<f64>, bool)> {
    if mask.height() != feat.height() || mask.width() != feat.width() {
        return Err(dim_err!(
            "mask {}x{} vs feature {}x{}",
            mask.height(),
            mask.width(),
            feat.height(),
            feat.width()
        ));
    }
    let plane = feat.height() * feat.width();
    let mut proto = vec![0.0; feat.channels()];
    let mut empty = true;
    for (c, out) in proto.iter_mut().enumerate() {
        let values = feat.channel(c);
        let mut mean = 0.0;
        let mut weight_sum = 0.0;
        for i in 0..plane {
            let w = mask.data()[i];
            if w > 0.0 {
                weight_sum += w;
                mean += w * (values[i] - mean) / weight_sum;
            }
        }
        if weight_sum > 0.0 {
            empty = false;
            *out = mean;
        }
    }
    Ok((proto, empty))
}

/// Cosine of two equal-length vectors; zero if either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Per-pixel cosine between a prototype and each feature column.
pub fn cosine_similarity_map(prototype: &[f64], feat: &FeatureMap) -> Result<Grid> {
    if prototype.len() != feat.channels() {
        return Err(dim_err!(
            "prototype has {} entries, feature map has {} channels",
            prototype.len(),
            feat.channels()
        ));
    }
    let (h, w) = (feat.height(), feat.width());
    let plane = h * w;
    let proto_norm = prototype.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = vec![0.0; plane];
    if proto_norm == 0.0 {
        return Grid::new(h, w, out);
    }
    let data = feat.data();
    for (i, cell) in out.iter_mut().enumerate() {
        let mut dot = 0.0;
        let mut norm = 0.0;
        for (c, &p) in prototype.iter().enumerate() {
            let v = data[c * plane + i];
            dot += p * v;
            norm += v * v;
        }
        if norm > 0.0 {
            *cell = dot / (proto_norm * norm.sqrt());
        }
    }
    Grid::new(h, w, out)
}

#[inline]
fn clamp_idx(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Max pooling followed by average pooling, both K×K stride 1 with
/// replication padding. K must be odd. Dilates then feathers the mask so
/// foreground edges blend smoothly.
pub fn smooth_mask(mask: &SoftMask, k_smooth: usize) -> Result<SoftMask> {
    if k_smooth == 0 || k_smooth % 2 == 0 {
        return Err(param_err!("smoothing kernel must be odd, got {k_smooth}"));
    }
    let (h, w) = (mask.height(), mask.width());
    let r = (k_smooth / 2) as isize;
    let mut maxed = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::NEG_INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sy = clamp_idx(y as isize + dy, h);
                    let sx = clamp_idx(x as isize + dx, w);
                    m = m.max(mask.get(sy, sx));
                }
            }
            maxed[y * w + x] = m;
        }
    }
    let norm = (k_smooth * k_smooth) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sy = clamp_idx(y as isize + dy, h);
                    let sx = clamp_idx(x as isize + dx, w);
                    sum += maxed[sy * w + sx];
                }
            }
            // Guard against summation rounding nudging past 1.
            out[y * w + x] = (sum / norm).clamp(0.0, 1.0);
        }
    }
    SoftMask::new(h, w, out)
}

/// Tightest rectangle containing every cell strictly above `tol`.
pub fn bounding_box(mask: &SoftMask, tol: f64) -> Result<Rect> {
    let (mut x0, mut y0) = (usize::MAX, usize::MAX);
    let (mut x1, mut y1) = (0usize, 0usize);
    let mut any = false;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) > tol {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if !any {
        return Err(Error::EmptyForeground);
    }
    Ok(Rect { x0, y0, x1, y1 })
}

/// Bilinear resampling of one plane with corner-aligned sampling.
/// A singleton output axis samples the source center.
pub fn resize_bilinear_plane(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    debug_assert_eq!(src.len(), src_h * src_w);
    let map = |d: usize, dst_len: usize, src_len: usize| -> f64 {
        if dst_len == 1 {
            (src_len - 1) as f64 / 2.0
        } else {
            d as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64
        }
    };
    let mut out = vec![0.0; dst_h * dst_w];
    for y in 0..dst_h {
        let sy = map(y, dst_h, src_h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let fy = sy - y0 as f64;
        for x in 0..dst_w {
            let sx = map(x, dst_w, src_w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let fx = sx - x0 as f64;
            let v00 = src[y0 * src_w + x0];
            let v01 = src[y0 * src_w + x1];
            let v10 = src[y1 * src_w + x0];
            let v11 = src[y1 * src_w + x1];
            out[y * dst_w + x] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    }
    out
}

/// Bilinear image resize, clamped back to [0, 1].
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(param_err!("resize target must be positive"));
    }
    let mut data = Vec::with_capacity(ImageTensor::CHANNELS * height * width);
    for c in 0..ImageTensor::CHANNELS {
        let plane = resize_bilinear_plane(img.channel(c), img.height(), img.width(), height, width);
        data.extend(plane.into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(ImageTensor::from_raw_unchecked(height, width, data))
}

/// Channel-wise bilinear resize of a feature map (no clamping).
pub fn resize_bilinear_feature(feat: &FeatureMap, height: usize, width: usize) -> FeatureMap {
    let mut data = Vec::with_capacity(feat.channels() * height * width);
    for c in 0..feat.channels() {
        data.extend(resize_bilinear_plane(
            feat.channel(c),
            feat.height(),
            feat.width(),
            height,
            width,
        ));
    }
    FeatureMap::from_raw_unchecked(feat.channels(), height, width, data)
}

/// Source index for nearest-neighbor resampling of pixel centers.
#[inline]
pub fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let mapped = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64) as usize;
    mapped.min(src_len - 1)
}

/// Area-average downsampling of a mask (box filter with fractional
/// coverage), used to carry image-resolution masks onto feature grids.
pub fn area_downsample_mask(mask: &SoftMask, height: usize, width: usize) -> Result<SoftMask> {
    if height == 0 || width == 0 {
        return Err(param_err!("downsample target must be positive"));
    }
    let (sh, sw) = (mask.height(), mask.width());
    let ry = sh as f64 / height as f64;
    let rx = sw as f64 / width as f64;
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let sy0 = y as f64 * ry;
        let sy1 = (y + 1) as f64 * ry;
        for x in 0..width {
            let sx0 = x as f64 * rx;
            let sx1 = (x + 1) as f64 * rx;
            let mut acc = 0.0;
            let y_lo = sy0.floor() as usize;
            let y_hi = (sy1.ceil() as usize).min(sh);
            let x_lo = sx0.floor() as usize;
            let x_hi = (sx1.ceil() as usize).min(sw);
            for sy in y_lo..y_hi {
                let wy = (sy1.min((sy + 1) as f64) - sy0.max(sy as f64)).max(0.0);
                for sx in x_lo..x_hi {
                    let wx = (sx1.min((sx + 1) as f64) - sx0.max(sx as f64)).max(0.0);
                    acc += wy * wx * mask.get(sy, sx);
                }
            }
            out[y * width + x] = (acc / (ry * rx)).clamp(0.0, 1.0);
        }
    }
    SoftMask::new(height, width, out)
}

/// Threshold a soft mask into {0, 1} at `thresh` (foreground at >= thresh).
pub fn binarize(mask: &SoftMask, thresh: f64) -> SoftMask {
    let data = mask.data().iter().map(|&v| if v >= thresh { 1.0 } else { 0.0 }).collect();
    SoftMask::from_raw_unchecked(mask.height(), mask.width(), data)
}

/// Nearest-neighbor resampling of a label field; the partition property is
/// preserved, though labels may vanish at coarse resolutions.
pub fn downsample_labels_nearest(labels: &LabelMask, height: usize, width: usize) -> LabelMask {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = nearest_index(y, height, labels.height());
        for x in 0..width {
            let sx = nearest_index(x, width, labels.width());
            out.push(labels.get(sy, sx));
        }
    }
    LabelMask::new(height, width, out, labels.region_count()).expect("resampled labels in range")
}
