//! The random-convolution augmentation engine.
//!
//! Each augmentation draws a filter size from a pool, samples a fresh
//! convolution filter bank with the variance rule sigma = 1/sqrt(c_in*k*k),
//! and either replaces the image with the convolution output or blends the
//! two with a uniform mixing weight. With whitened inputs the rule keeps the
//! output distribution close to the input distribution, so augmented images
//! can be fed to a network unchanged.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabeledDataset};
use crate::rng::stream;

/// Stream-id namespace for filters shared across a batch.
const SHARED_FILTER_STREAM: u64 = u64::MAX;

/// One sampled convolution filter bank.
///
/// Weights are stored as `[c_out][ky][kx][c_in]`, so the taps of one filter
/// row form a contiguous run of `k * c_in` values that lines up with the
/// channel-fastest image layout.
#[derive(Debug, Clone)]
pub struct FilterBank {
    k: usize,
    c_in: usize,
    c_out: usize,
    sigma: f64,
    weights: Vec<f64>,
}

impl FilterBank {
    /// Build from an explicit tap function; used by tests to inject identity
    /// or zero filters.
    pub fn from_fn(
        k: usize,
        c_in: usize,
        c_out: usize,
        mut tap: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        validate_filter_size(k)?;
        if c_in == 0 || c_out == 0 {
            return Err(Error::InvalidArgument("zero channel count".into()));
        }
        let mut weights = Vec::with_capacity(k * k * c_in * c_out);
        for co in 0..c_out {
            for ky in 0..k {
                for kx in 0..k {
                    for ci in 0..c_in {
                        weights.push(tap(ky, kx, ci, co));
                    }
                }
            }
        }
        let sigma = 1.0 / ((c_in * k * k) as f64).sqrt();
        Ok(Self { k, c_in, c_out, sigma, weights })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    /// Standard deviation used when the bank was sampled.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, ky: usize, kx: usize, ci: usize, co: usize) -> f64 {
        self.weights[((co * self.k + ky) * self.k + kx) * self.c_in + ci]
    }
}

fn validate_filter_size(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("filter size {k} must be odd and positive")));
    }
    Ok(())
}

/// Draw a filter bank with i.i.d. N(0, sigma^2) taps, sigma = 1/sqrt(c_in*k*k).
///
/// There is no bias term.
pub fn sample_filter(
    rng: &mut impl Rng,
    k: usize,
    c_in: usize,
    c_out: usize,
) -> Result<FilterBank> {
    validate_filter_size(k)?;
    if c_in == 0 || c_out == 0 {
        return Err(Error::InvalidArgument("zero channel count".into()));
    }
    let sigma = 1.0 / ((c_in * k * k) as f64).sqrt();
    let weights = (0..k * k * c_in * c_out)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(FilterBank { k, c_in, c_out, sigma, weights })
}

/// Same-size 2D cross-correlation with zero padding of (k-1)/2 per side.
///
/// Every output channel sums contributions from all input channels.
pub fn conv2d_same(img: &ImageTensor, filt: &FilterBank) -> Result<ImageTensor> {
    if img.channels() != filt.c_in {
        return Err(Error::ChannelMismatch { expected: filt.c_in, got: img.channels() });
    }
    let (h, w) = (img.height(), img.width());
    let (k, c_in, c_out) = (filt.k, filt.c_in, filt.c_out);
    let pad = (k - 1) / 2;
    let input = img.as_slice();
    let row_span = k * c_in;
    let mut out = vec![0.0f64; h * w * c_out];

    for y in 0..h {
        let ky_lo = pad.saturating_sub(y);
        let ky_hi = k.min(h + pad - y);
        for x in 0..w {
            let kx_lo = pad.saturating_sub(x);
            let kx_hi = k.min(w + pad - x);
            let out_base = (y * w + x) * c_out;
            if kx_lo == 0 && kx_hi == k {
                // Full filter rows: contiguous dot products.
                let x0 = (x - pad) * c_in;
                for co in 0..c_out {
                    let mut acc = 0.0;
                    for ky in ky_lo..ky_hi {
                        let iy = y + ky - pad;
                        let a = &input[iy * w * c_in + x0..iy * w * c_in + x0 + row_span];
                        let b = &filt.weights[(co * k + ky) * row_span..(co * k + ky + 1) * row_span];
                        for i in 0..row_span {
                            acc += a[i] * b[i];
                        }
                    }
                    out[out_base + co] = acc;
                }
            } else {
                // Horizontal border: out-of-bounds taps read zero.
                for co in 0..c_out {
                    let mut acc = 0.0;
                    for ky in ky_lo..ky_hi {
                        let iy = y + ky - pad;
                        for kx in kx_lo..kx_hi {
                            let ix = x + kx - pad;
                            let in_off = (iy * w + ix) * c_in;
                            let w_off = ((co * k + ky) * k + kx) * c_in;
                            for ci in 0..c_in {
                                acc += input[in_off + ci] * filt.weights[w_off + ci];
                            }
                        }
                    }
                    out[out_base + co] = acc;
                }
            }
        }
    }
    ImageTensor::new(h, w, c_out, out)
}

/// Augmentation policy.
#[derive(Debug, Clone)]
pub struct RandConvConfig {
    /// Candidate filter sizes, drawn uniformly per augmentation.
    pub pool: Vec<usize>,
    /// Probability of passing the original image through (non-mix mode only).
    pub p: f64,
    /// Blend the convolution output with the original instead of replacing it.
    pub mix: bool,
    /// Root seed recorded alongside the policy.
    pub seed: u64,
    /// Augmented variants produced per image.
    pub samples_per_image: usize,
    /// Reuse one filter per sample index across a whole batch instead of
    /// resampling per image. Off by default; trades augmentation diversity
    /// for throughput.
    pub share_filters_in_batch: bool,
}

impl Default for RandConvConfig {
    fn default() -> Self {
        Self {
            pool: vec![1, 3, 5, 7],
            p: 0.5,
            mix: false,
            seed: 0,
            samples_per_image: 3,
            share_filters_in_batch: false,
        }
    }
}

impl RandConvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool.is_empty() {
            return Err(Error::InvalidConfig("filter pool is empty".into()));
        }
        for &k in &self.pool {
            if k == 0 || k % 2 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "filter pool contains {k}; sizes must be odd and positive"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidConfig(format!("p = {} outside [0,1]", self.p)));
        }
        if self.samples_per_image == 0 {
            return Err(Error::InvalidConfig("samples_per_image must be positive".into()));
        }
        Ok(())
    }
}

/// One augmented variant of an image.
#[derive(Debug, Clone)]
pub struct AugmentSample {
    pub image: ImageTensor,
    /// Mix coefficient; present only in mix mode.
    pub alpha: Option<f64>,
    /// Filter size used; absent when the original was passed through.
    pub k_used: Option<usize>,
    pub was_original: bool,
}

impl AugmentSample {
    fn original(img: &ImageTensor) -> Self {
        Self { image: img.clone(), alpha: None, k_used: None, was_original: true }
    }
}

fn sample_pool_filter(
    rng: &mut impl Rng,
    pool: &[usize],
    channels: usize,
) -> Result<(usize, FilterBank)> {
    let k = pool[rng.gen_range(0..pool.len())];
    let filt = sample_filter(rng, k, channels, channels)?;
    Ok((k, filt))
}

/// Apply one augmentation draw to a (whitened) image.
///
/// Non-mix mode returns the original with probability `p`, otherwise the
/// convolution output. Mix mode always convolves and returns the blend
/// `alpha*I + (1-alpha)*(I conv Theta)` with `alpha ~ U(0,1)`; the
/// original-probability branch does not apply there.
pub fn randconv_augment(
    img: &ImageTensor,
    cfg: &RandConvConfig,
    rng: &mut impl Rng,
) -> Result<AugmentSample> {
    cfg.validate()?;
    if !cfg.mix {
        let p0: f64 = rng.gen();
        if p0 < cfg.p {
            return Ok(AugmentSample::original(img));
        }
        let (k, filt) = sample_pool_filter(rng, &cfg.pool, img.channels())?;
        let out = conv2d_same(img, &filt)?;
        Ok(AugmentSample { image: out, alpha: None, k_used: Some(k), was_original: false })
    } else {
        let (k, filt) = sample_pool_filter(rng, &cfg.pool, img.channels())?;
        let conv = conv2d_same(img, &filt)?;
        let alpha: f64 = rng.gen();
        let image = img.lerp_with(&conv, alpha, 1.0 - alpha)?;
        Ok(AugmentSample { image, alpha: Some(alpha), k_used: Some(k), was_original: false })
    }
}

/// Like [`randconv_augment`] but with the filter fixed by the caller; the
/// per-image stream still decides the original/augment branch and alpha.
fn augment_with_filter(
    img: &ImageTensor,
    cfg: &RandConvConfig,
    k: usize,
    filt: &FilterBank,
    rng: &mut impl Rng,
) -> Result<AugmentSample> {
    if !cfg.mix {
        let p0: f64 = rng.gen();
        if p0 < cfg.p {
            return Ok(AugmentSample::original(img));
        }
        let out = conv2d_same(img, filt)?;
        Ok(AugmentSample { image: out, alpha: None, k_used: Some(k), was_original: false })
    } else {
        let conv = conv2d_same(img, filt)?;
        let alpha: f64 = rng.gen();
        let image = img.lerp_with(&conv, alpha, 1.0 - alpha)?;
        Ok(AugmentSample { image, alpha: Some(alpha), k_used: Some(k), was_original: false })
    }
}

/// Produce `samples_per_image` augmented variants for every image.
///
/// Each (image, sample) pair draws from its own stream derived from
/// `(seed, image index, sample index)`, so the result is deterministic for a
/// given seed and dataset order no matter how the work is scheduled.
pub fn augment_batch(
    ds: &LabeledDataset,
    cfg: &RandConvConfig,
    seed: u64,
) -> Result<Vec<Vec<AugmentSample>>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let shared: Option<Vec<(usize, FilterBank)>> = if cfg.share_filters_in_batch {
        let channels = ds.images[0].channels();
        Some(
            (0..cfg.samples_per_image)
                .map(|j| {
                    let mut rng = stream(seed, &[SHARED_FILTER_STREAM, j as u64]);
                    sample_pool_filter(&mut rng, &cfg.pool, channels)
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    ds.images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            (0..cfg.samples_per_image)
                .map(|j| {
                    let mut rng = stream(seed, &[i as u64, j as u64]);
                    match &shared {
                        Some(filters) => {
                            let (k, filt) = &filters[j];
                            augment_with_filter(img, cfg, *k, filt, &mut rng)
                        }
                        None => randconv_augment(img, cfg, &mut rng),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}
