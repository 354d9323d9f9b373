//! Hierarchical semantic learning for cross-domain few-shot segmentation.
//!
//! The crate implements a deterministic, seedable inference and augmentation
//! pipeline built from five stages:
//!
//! * [`styler`] — dual style randomization: foreground style mixing in the
//!   Fourier amplitude domain plus a random-convolution global style swap.
//! * [`superpix`] — multi-scale superpixel masks via grid initialization,
//!   a 9-neighborhood relation map and iterative probability/argmax refinement.
//! * [`hsm`] — hierarchical semantic mining: multi-scale region prototypes
//!   from low/high-level features, self-attention enhancement, weighted
//!   fusion and broadcast back onto the feature grid.
//! * [`proto`] — class prototype extraction (support, self-support query,
//!   fused), dense similarity maps and the BCE-based loss heads.
//! * [`pcmt`] — prototype-confidence-modulated thresholding of the query
//!   foreground confidence map, with an Otsu adaptive threshold.
//!
//! [`harness`] provides a seeded toy backbone, synthetic episode generators
//! and an episode-based mean-IoU evaluator. Everything is pure `f64`
//! arithmetic over flat row-major buffers; all randomness flows through the
//! counter-based [`rng::StreamRng`], so a `(config, seed)` pair fully
//! determines every output.
//!
//! With the default `parallel` feature, episode evaluation and multi-scale
//! segmentation fan out over a rayon pool; results are reduced in index
//! order, so outputs are identical to the sequential fallback
//! (`--no-default-features`).

pub mod config;
pub mod error;
pub mod fft;
pub mod harness;
pub mod hsm;
pub mod io;
pub mod ops;
pub mod pcmt;
pub mod proto;
pub mod rng;
pub mod styler;
pub mod superpix;
pub mod tensor;

pub use config::Config;
pub use error::{Error, Result};
pub use rng::StreamRng;
pub use tensor::{Episode, FeatureMap, Grid, ImageTensor, LabelMask, SoftMask};

/// Cap the worker pool used for episodes and superpixel scales. Without
/// the `parallel` feature everything runs sequentially and this is a no-op.
#[cfg(feature = "parallel")]
pub fn configure_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_threads: usize) -> Result<()> {
    Ok(())
}
