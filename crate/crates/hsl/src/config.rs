//! Pipeline hyperparameters and the plain-text `key=value` config file.

use crate::error::{param_err, Error, Result};

/// All tunable pipeline parameters.
///
/// `full_scale()` carries the full-resolution operating point (400×400
/// inputs, four superpixel scales 5²..20², σ_f = 0.25, K = 9, α = 0.2,
/// β = 40, γ = 0.1, λ = 0.2). `desk()` keeps the same constants but shrinks
/// images to 64×64 and the superpixel scales to {1, 4, 9, 16} so that the
/// stride-16 superpixel working resolution fits inside the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    /// Number of superpixel scales L. File key `L`.
    pub scale_count: usize,
    /// Region counts n_i per scale, strictly increasing perfect squares.
    pub superpixels_per_scale: Vec<usize>,
    /// Std-dev of the foreground amplitude mixing weight ω.
    pub sigma_f: f64,
    /// Std-dev of random convolution kernel entries.
    pub sigma_g: f64,
    /// Mask smoothing kernel size (odd). File key `K_smooth`.
    pub k_smooth: usize,
    /// Low/high prototype fusion weight.
    pub alpha: f64,
    /// Confidence sigmoid sharpness.
    pub beta: f64,
    /// Confidence sigmoid offset.
    pub gamma: f64,
    /// Weight of the support-self BCE term.
    pub lambda_ssp: f64,
    /// Temperature of the two-way softmax in the BCE head.
    pub softmax_temp: f64,
    /// Cosine threshold selecting confident query foreground pixels.
    pub ssp_fg_thresh: f64,
    /// Cosine threshold selecting confident query background pixels.
    pub ssp_bg_thresh: f64,
    /// Episode image size (H, W). File value `H,W`.
    pub image_size: (usize, usize),
    pub seed: u64,
}

impl Config {
    /// Full-resolution operating point; its superpixel scales need
    /// images of at least 320×320.
    pub fn full_scale() -> Self {
        Config {
            scale_count: 4,
            superpixels_per_scale: vec![25, 100, 225, 400],
            sigma_f: 0.25,
            sigma_g: 0.1,
            k_smooth: 9,
            alpha: 0.2,
            beta: 40.0,
            gamma: 0.1,
            lambda_ssp: 0.2,
            softmax_temp: 10.0,
            ssp_fg_thresh: 0.7,
            ssp_bg_thresh: 0.6,
            image_size: (400, 400),
            seed: 0,
        }
    }

    /// Desk-scale operating point: 64×64 episodes, superpixel scales that
    /// fit the stride-16 working resolution.
    pub fn desk() -> Self {
        Config {
            scale_count: 4,
            superpixels_per_scale: vec![1, 4, 9, 16],
            image_size: (64, 64),
            ..Config::full_scale()
        }
    }

    /// The scale with the fewest regions (used for local style sampling).
    pub fn coarsest_scale(&self) -> usize {
        self.superpixels_per_scale[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_count != self.superpixels_per_scale.len() {
            return Err(param_err!(
                "L={} but {} superpixel scales given",
                self.scale_count,
                self.superpixels_per_scale.len()
            ));
        }
        if self.superpixels_per_scale.is_empty() {
            return Err(param_err!("at least one superpixel scale required"));
        }
        if self.superpixels_per_scale.windows(2).any(|p| p[0] >= p[1]) {
            return Err(param_err!("superpixel scales must be strictly increasing"));
        }
        if self.superpixels_per_scale[0] == 0 {
            return Err(param_err!("superpixel scales must be positive"));
        }
        if self.k_smooth == 0 || self.k_smooth % 2 == 0 {
            return Err(param_err!("K_smooth must be odd, got {}", self.k_smooth));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("ssp_fg_thresh", self.ssp_fg_thresh),
            ("ssp_bg_thresh", self.ssp_bg_thresh),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(param_err!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.sigma_f < 0.0 || self.sigma_g < 0.0 || self.lambda_ssp < 0.0 {
            return Err(param_err!("standard deviations and loss weights must be nonnegative"));
        }
        if self.softmax_temp <= 0.0 {
            return Err(param_err!("softmax_temp must be positive"));
        }
        if !self.beta.is_finite() || !self.gamma.is_finite() {
            return Err(param_err!("beta and gamma must be finite"));
        }
        if self.image_size.0 < 16 || self.image_size.1 < 16 {
            return Err(param_err!("image_size must be at least 16x16"));
        }
        Ok(())
    }

    /// Parse `key=value` lines; keys must match config field names exactly.
    /// Missing keys keep their desk defaults; unknown keys are an error.
    /// Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::desk();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "L" => cfg.scale_count = parse_num(key, value)?,
                "superpixels_per_scale" => {
                    cfg.superpixels_per_scale = value
                        .split(',')
                        .map(|s| parse_num(key, s.trim()))
                        .collect::<Result<Vec<usize>>>()?;
                }
                "sigma_f" => cfg.sigma_f = parse_num(key, value)?,
                "sigma_g" => cfg.sigma_g = parse_num(key, value)?,
                "K_smooth" => cfg.k_smooth = parse_num(key, value)?,
                "alpha" => cfg.alpha = parse_num(key, value)?,
                "beta" => cfg.beta = parse_num(key, value)?,
                "gamma" => cfg.gamma = parse_num(key, value)?,
                "lambda_ssp" => cfg.lambda_ssp = parse_num(key, value)?,
                "softmax_temp" => cfg.softmax_temp = parse_num(key, value)?,
                "ssp_fg_thresh" => cfg.ssp_fg_thresh = parse_num(key, value)?,
                "ssp_bg_thresh" => cfg.ssp_bg_thresh = parse_num(key, value)?,
                "image_size" => {
                    let (h, w) = value
                        .split_once(',')
                        .ok_or_else(|| Error::Format("image_size expects H,W".into()))?;
                    cfg.image_size = (parse_num("image_size", h.trim())?, parse_num("image_size", w.trim())?);
                }
                "seed" => cfg.seed = parse_num(key, value)?,
                other => return Err(Error::Format(format!("unknown config key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization; `parse(render())` round-trips exactly.
    pub fn render(&self) -> String {
        let scales =
            self.superpixels_per_scale.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "L={}\nsuperpixels_per_scale={}\nsigma_f={}\nsigma_g={}\nK_smooth={}\nalpha={}\n\
             beta={}\ngamma={}\nlambda_ssp={}\nsoftmax_temp={}\nssp_fg_thresh={}\n\
             ssp_bg_thresh={}\nimage_size={},{}\nseed={}\n",
            self.scale_count,
            scales,
            self.sigma_f,
            self.sigma_g,
            self.k_smooth,
            self.alpha,
            self.beta,
            self.gamma,
            self.lambda_ssp,
            self.softmax_temp,
            self.ssp_fg_thresh,
            self.ssp_bg_thresh,
            self.image_size.0,
            self.image_size.1,
            self.seed
        )
    }

    /// FNV-1a hash of the canonical serialization, for report provenance.
    pub fn content_hash(&self) -> u64 {
        let mut hash: u64 = 0xCBF2_9CE4_8422_2325;
        for byte in self.render().bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
        }
        hash
    }
}

impl Default for Config {
    fn default() -> Self {
        Config::desk()
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Format(format!("invalid value `{value}` for key `{key}`")))
}
