//! File formats: binary PPM/PGM images, the `HSLT` tensor container,
//! config files and on-disk episode directories.
//!
//! `HSLT` layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "HSLT"
//! version u16      1
//! dtype   u8       0 = f64, 1 = u32
//! ndim    u8
//! dims    ndim × u64
//! payload row-major values, little-endian
//! ```

use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::{Episode, FeatureMap, ImageTensor, LabelMask, SoftMask};

const MAGIC: &[u8; 4] = b"HSLT";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_U32: u8 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

// ---------------------------------------------------------------------------
// HSLT tensors
// ---------------------------------------------------------------------------

fn encode_header(dtype: u8, dims: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * dims.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

struct Header {
    dtype: u8,
    dims: Vec<usize>,
    payload_at: usize,
}

fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 8 {
        return Err(format_err("tensor file shorter than its header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err("bad magic, expected HSLT"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(format!("unsupported tensor version {version}")));
    }
    let dtype = bytes[6];
    if dtype != DTYPE_F64 && dtype != DTYPE_U32 {
        return Err(format_err(format!("unknown dtype {dtype}")));
    }
    let ndim = bytes[7] as usize;
    let payload_at = 8 + 8 * ndim;
    if bytes.len() < payload_at {
        return Err(format_err("truncated dims"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&bytes[8 + 8 * i..16 + 8 * i]);
        dims.push(u64::from_le_bytes(raw) as usize);
    }
    Ok(Header { dtype, dims, payload_at })
}

pub fn encode_tensor_f64(dims: &[usize], data: &[f64]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = encode_header(DTYPE_F64, dims);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor_f64(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let header = decode_header(bytes)?;
    if header.dtype != DTYPE_F64 {
        return Err(format_err("expected an f64 tensor"));
    }
    let count: usize = header.dims.iter().product();
    let payload = &bytes[header.payload_at..];
    if payload.len() != 8 * count {
        return Err(format_err(format!(
            "payload of {} bytes does not match {count} f64 values",
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((header.dims, data))
}

pub fn encode_tensor_u32(dims: &[usize], data: &[u32]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = encode_header(DTYPE_U32, dims);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor_u32(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u32>)> {
    let header = decode_header(bytes)?;
    if header.dtype != DTYPE_U32 {
        return Err(format_err("expected a u32 tensor"));
    }
    let count: usize = header.dims.iter().product();
    let payload = &bytes[header.payload_at..];
    if payload.len() != 4 * count {
        return Err(format_err(format!(
            "payload of {} bytes does not match {count} u32 values",
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        data.push(u32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((header.dims, data))
}

pub fn write_tensor_f64(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    fs::write(path, encode_tensor_f64(dims, data))?;
    Ok(())
}

pub fn read_tensor_f64(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    decode_tensor_f64(&fs::read(path)?)
}

pub fn write_tensor_u32(path: &Path, dims: &[usize], data: &[u32]) -> Result<()> {
    fs::write(path, encode_tensor_u32(dims, data))?;
    Ok(())
}

pub fn read_tensor_u32(path: &Path) -> Result<(Vec<usize>, Vec<u32>)> {
    decode_tensor_u32(&fs::read(path)?)
}

pub fn write_feature(path: &Path, feat: &FeatureMap) -> Result<()> {
    write_tensor_f64(path, &[feat.channels(), feat.height(), feat.width()], feat.data())
}

pub fn read_feature(path: &Path) -> Result<FeatureMap> {
    let (dims, data) = read_tensor_f64(path)?;
    if dims.len() != 3 {
        return Err(format_err(format!("feature tensor must be 3-D, got {}-D", dims.len())));
    }
    FeatureMap::new(dims[0], dims[1], dims[2], data)
}

/// Labels as a 2-D u32 tensor; the region count is the highest label + 1.
pub fn write_labels(path: &Path, labels: &LabelMask) -> Result<()> {
    write_tensor_u32(path, &[labels.height(), labels.width()], labels.labels())
}

pub fn read_labels(path: &Path) -> Result<LabelMask> {
    let (dims, data) = read_tensor_u32(path)?;
    if dims.len() != 2 {
        return Err(format_err(format!("label tensor must be 2-D, got {}-D", dims.len())));
    }
    let region_count = data.iter().copied().max().map_or(1, |m| m + 1);
    LabelMask::new(dims[0], dims[1], data, region_count)
}

// ---------------------------------------------------------------------------
// PPM / PGM
// ---------------------------------------------------------------------------

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(img.get(c, y, x)));
            }
        }
    }
    out
}

pub fn encode_pgm(mask: &SoftMask) -> Vec<u8> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.push(quantize(mask.get(y, x)));
        }
    }
    out
}

/// Parse a PNM header: magic, three whitespace-separated integers
/// (with `#` comments allowed), then a single whitespace before payload.
fn parse_pnm_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[0..2] != magic.as_bytes() {
        return Err(format_err(format!("expected {magic} magic")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("malformed header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| format_err("header field out of range"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err("missing separator before payload"));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(format_err(format!("only maxval 255 supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(format_err("degenerate image dimensions"));
    }
    Ok((w, h, &bytes[pos..]))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let (w, h, payload) = parse_pnm_header(bytes, "P6")?;
    if payload.len() != 3 * w * h {
        return Err(format_err(format!(
            "payload of {} bytes does not match {w}x{h} rgb",
            payload.len()
        )));
    }
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = payload[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    ImageTensor::new(h, w, data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<SoftMask> {
    let (w, h, payload) = parse_pnm_header(bytes, "P5")?;
    if payload.len() != w * h {
        return Err(format_err(format!(
            "payload of {} bytes does not match {w}x{h} gray",
            payload.len()
        )));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    SoftMask::new(h, w, data)
}

pub fn write_ppm(path: &Path, img: &ImageTensor) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_pgm(path: &Path, mask: &SoftMask) -> Result<()> {
    fs::write(path, encode_pgm(mask))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<SoftMask> {
    decode_pgm(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Config and episode directories
// ---------------------------------------------------------------------------

pub fn read_config(path: &Path) -> Result<Config> {
    Config::parse(&fs::read_to_string(path)?)
}

pub fn write_config(path: &Path, cfg: &Config) -> Result<()> {
    fs::write(path, cfg.render())?;
    Ok(())
}

/// Write an episode as `episode.txt` plus PPM/PGM files:
/// `support_<i>.ppm`, `support_<i>_mask.pgm`, `query.ppm`, `query_mask.pgm`.
pub fn write_episode(dir: &Path, episode: &Episode) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = format!(
        "k_shot={}\nseed={}\nheight={}\nwidth={}\n",
        episode.k_shot(),
        episode.seed,
        episode.height(),
        episode.width()
    );
    fs::write(dir.join("episode.txt"), meta)?;
    for (i, (img, mask)) in episode.supports.iter().enumerate() {
        write_ppm(&dir.join(format!("support_{i}.ppm")), img)?;
        write_pgm(&dir.join(format!("support_{i}_mask.pgm")), mask)?;
    }
    write_ppm(&dir.join("query.ppm"), &episode.query_image)?;
    write_pgm(&dir.join("query_mask.pgm"), &episode.query_mask)?;
    Ok(())
}

pub fn read_episode(dir: &Path) -> Result<Episode> {
    let meta = fs::read_to_string(dir.join("episode.txt"))?;
    let mut k_shot = None;
    let mut seed = 0u64;
    for line in meta.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| format_err("episode.txt expects key=value"))?;
        match key.trim() {
            "k_shot" => {
                k_shot = Some(
                    value.trim().parse::<usize>().map_err(|_| format_err("bad k_shot value"))?,
                )
            }
            "seed" => {
                seed = value.trim().parse().map_err(|_| format_err("bad seed value"))?;
            }
            "height" | "width" => {}
            other => return Err(format_err(format!("unknown episode key `{other}`"))),
        }
    }
    let k_shot = k_shot.ok_or_else(|| format_err("episode.txt missing k_shot"))?;
    let mut supports = Vec::with_capacity(k_shot);
    for i in 0..k_shot {
        let img = read_ppm(&dir.join(format!("support_{i}.ppm")))?;
        let mask = read_pgm(&dir.join(format!("support_{i}_mask.pgm")))?;
        supports.push((img, mask));
    }
    let query_image = read_ppm(&dir.join("query.ppm"))?;
    let query_mask = read_pgm(&dir.join("query_mask.pgm"))?;
    Episode::new(supports, query_image, query_mask, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn tensor_f64_round_trips_exactly() {
        let mut rng = StreamRng::from_seed(1);
        let data: Vec<f64> = (0..24).map(|_| rng.uniform() * 10.0 - 5.0).collect();
        let bytes = encode_tensor_f64(&[2, 3, 4], &data);
        let (dims, back) = decode_tensor_f64(&bytes).unwrap();
        assert_eq!(dims, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn tensor_u32_round_trips_exactly() {
        let data = vec![0u32, 1, u32::MAX, 42];
        let bytes = encode_tensor_u32(&[4], &data);
        let (dims, back) = decode_tensor_u32(&bytes).unwrap();
        assert_eq!(dims, vec![4]);
        assert_eq!(back, data);
    }

    #[test]
    fn scalar_tensor_byte_layout() {
        let bytes = encode_tensor_f64(&[1, 1, 1], &[0.5]);
        let mut expected = Vec::new();
        expected.extend_from_slice(b"HSLT");
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(0); // dtype f64
        expected.push(3); // ndim
        for _ in 0..3 {
            expected.extend_from_slice(&1u64.to_le_bytes());
        }
        expected.extend_from_slice(&0.5f64.to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn tensor_rejects_bad_magic_and_truncation() {
        let mut bytes = encode_tensor_f64(&[2], &[1.0, 2.0]);
        let mut broken = bytes.clone();
        broken[0] = b'X';
        assert!(matches!(decode_tensor_f64(&broken), Err(Error::Format(_))));
        bytes.pop();
        assert!(matches!(decode_tensor_f64(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn tensor_rejects_dtype_mismatch() {
        let bytes = encode_tensor_u32(&[1], &[7]);
        assert!(decode_tensor_f64(&bytes).is_err());
    }

    #[test]
    fn ppm_round_trip_is_quantization_exact() {
        let mut rng = StreamRng::from_seed(2);
        let data: Vec<f64> = (0..3 * 4 * 5).map(|_| rng.uniform()).collect();
        let img = ImageTensor::new(4, 5, data).unwrap();
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        for (v, b) in img.data().iter().zip(back.data()) {
            let expected = (v * 255.0).round() / 255.0;
            assert!((b - expected).abs() < 1e-12);
        }
        // A second round trip is bitwise stable.
        let twice = decode_ppm(&encode_ppm(&back)).unwrap();
        assert_eq!(twice.data(), back.data());
    }

    #[test]
    fn pgm_round_trip_is_quantization_exact() {
        let mut rng = StreamRng::from_seed(3);
        let data: Vec<f64> = (0..30).map(|_| rng.uniform()).collect();
        let mask = SoftMask::new(5, 6, data).unwrap();
        let back = decode_pgm(&encode_pgm(&mask)).unwrap();
        let twice = decode_pgm(&encode_pgm(&back)).unwrap();
        assert_eq!(twice.data(), back.data());
    }

    #[test]
    fn pnm_rejects_malformed_input() {
        assert!(decode_ppm(b"P5\n2 2\n255\n????").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\nxx").is_err());
        assert!(decode_pgm(b"P5\n2 2\n65535\n____").is_err());
    }

    #[test]
    fn pnm_header_comments_are_skipped() {
        let bytes = b"P5\n# a comment\n2 1\n255\nab";
        let mask = decode_pgm(bytes).unwrap();
        assert_eq!(mask.width(), 2);
    }

    #[test]
    fn episode_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageTensor::zeros(16, 16);
        img.set(0, 3, 3, 1.0);
        let mut mask = SoftMask::zeros(16, 16);
        mask.set(3, 3, 1.0);
        let episode = Episode::new(
            vec![(img.clone(), mask.clone())],
            img.clone(),
            mask.clone(),
            99,
        )
        .unwrap();
        write_episode(dir.path(), &episode).unwrap();
        let back = read_episode(dir.path()).unwrap();
        assert_eq!(back.k_shot(), 1);
        assert_eq!(back.seed, 99);
        assert_eq!(back.query_mask.get(3, 3), 1.0);
    }

    #[test]
    fn labels_round_trip_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMask::new(2, 3, vec![0, 1, 2, 2, 1, 0], 3).unwrap();
        let path = dir.path().join("labels.hslt");
        write_labels(&path, &labels).unwrap();
        let back = read_labels(&path).unwrap();
        assert_eq!(back.labels(), labels.labels());
        assert_eq!(back.region_count(), 3);
    }
}
