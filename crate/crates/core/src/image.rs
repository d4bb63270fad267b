//! Image tensors, per-channel whitening, labeled datasets, and PNG I/O.
//!
//! Pixels are stored row-major with the channel index fastest, so the
//! `k*channels` values under one filter row are contiguous in memory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Floor applied to whitening standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Dense H×W×C image with values stored as `f64`.
///
/// Layout: `data[(y * width + x) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidTensor(format!(
                "zero dimension: {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidTensor(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!("non-finite value {v}")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// Elementwise `a*self + b*other`; shapes must match.
    pub fn lerp_with(&self, other: &ImageTensor, a: f64, b: f64) -> Result<ImageTensor> {
        if self.height != other.height || self.width != other.width || self.channels != other.channels
        {
            return Err(Error::DimensionMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        ImageTensor::new(self.height, self.width, self.channels, data)
    }
}

/// Per-channel mean and standard deviation over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl WhiteningStats {
    /// Identity stats (mean 0, std 1) for the given channel count.
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Collapse per-channel stats to a single scalar mean/std shared by all
    /// channels (the scalar-whitening fallback).
    pub fn to_scalar(&self) -> Self {
        let n = self.mean.len() as f64;
        let mean = self.mean.iter().sum::<f64>() / n;
        let var = self.std.iter().map(|s| s * s).sum::<f64>() / n;
        let std = var.sqrt().max(STD_FLOOR);
        Self { mean: vec![mean; self.mean.len()], std: vec![std; self.std.len()] }
    }
}

/// Images plus class labels from a single texture domain.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub domain_tag: String,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<ImageTensor>,
        labels: Vec<usize>,
        num_classes: usize,
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} images vs {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self { images, labels, num_classes, domain_tag: domain_tag.into() })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Load an 8-bit PNG as an H×W×3 tensor with values in [0,1].
///
/// Grayscale files are replicated to three channels; an RGBA alpha channel is
/// dropped. 16-bit files are rejected.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let reader = image::ImageReader::open(path)
        .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let decoded = reader
        .decode()
        .map_err(|e| Error::ImageDecode { path: path.to_path_buf(), message: e.to_string() })?;

    use image::DynamicImage;
    let rgb = match decoded {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => decoded.to_rgb8(),
        other => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                reason: format!("unsupported bit depth or color type {:?}", other.color()),
            })
        }
    };

    let (width, height) = rgb.dimensions();
    if width == 0 || height == 0 {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: "zero-dimension image".into(),
        });
    }
    let data = rgb.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageTensor::new(height as usize, width as usize, 3, data)
}

/// Write a tensor as an 8-bit PNG.
///
/// With `rescale` the values are affinely mapped from `[min,max]` to `[0,255]`
/// per image (a constant image writes mid-gray); without it they are clamped
/// to [0,1] and scaled. Only 1- or 3-channel tensors are accepted; single
/// channels are replicated to RGB.
pub fn save_image(img: &ImageTensor, path: &Path, rescale: bool) -> Result<()> {
    if img.channels() != 1 && img.channels() != 3 {
        return Err(Error::ChannelMismatch { expected: 3, got: img.channels() });
    }

    let quantize: Box<dyn Fn(f64) -> u8> = if rescale {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in img.as_slice() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo < 1e-12 {
            Box::new(|_| 128u8)
        } else {
            let scale = 255.0 / (hi - lo);
            Box::new(move |v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8)
        }
    } else {
        Box::new(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
    };

    let mut bytes = Vec::with_capacity(img.height() * img.width() * 3);
    for y in 0..img.height() {
        for x in 0..img.width() {
            for c in 0..3 {
                let cc = if img.channels() == 1 { 0 } else { c };
                bytes.push(quantize(img.get(y, x, cc)));
            }
        }
    }
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .expect("buffer size matches dimensions");
    buf.save(path)
        .map_err(|e| Error::ImageEncode { path: path.to_path_buf(), message: e.to_string() })
}

/// Per-channel mean/std over all pixels of all images, std floored at 1e-6.
///
/// Single pass per channel via Welford's update; the tests check it against a
/// plain two-pass computation.
pub fn compute_whitening(ds: &LabeledDataset) -> Result<WhiteningStats> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let channels = ds.images[0].channels();
    let mut count = vec![0u64; channels];
    let mut mean = vec![0.0f64; channels];
    let mut m2 = vec![0.0f64; channels];
    for img in &ds.images {
        if img.channels() != channels {
            return Err(Error::ChannelMismatch { expected: channels, got: img.channels() });
        }
        for (i, &v) in img.as_slice().iter().enumerate() {
            let c = i % channels;
            count[c] += 1;
            let delta = v - mean[c];
            mean[c] += delta / count[c] as f64;
            m2[c] += delta * (v - mean[c]);
        }
    }
    let std = m2
        .iter()
        .zip(&count)
        .map(|(&m2c, &n)| (m2c / n as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(WhiteningStats { mean, std })
}

/// `(value - mean) / std` per channel.
pub fn whiten(img: &ImageTensor, stats: &WhiteningStats) -> Result<ImageTensor> {
    if stats.channels() != img.channels() {
        return Err(Error::ChannelMismatch { expected: img.channels(), got: stats.channels() });
    }
    let channels = img.channels();
    let data = img
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % channels;
            (v - stats.mean[c]) / stats.std[c]
        })
        .collect();
    ImageTensor::new(img.height(), img.width(), channels, data)
}

/// Inverse of [`whiten`]: `value * std + mean` per channel.
pub fn unwhiten(img: &ImageTensor, stats: &WhiteningStats) -> Result<ImageTensor> {
    if stats.channels() != img.channels() {
        return Err(Error::ChannelMismatch { expected: img.channels(), got: stats.channels() });
    }
    let channels = img.channels();
    let data = img
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % channels;
            v * stats.std[c] + stats.mean[c]
        })
        .collect();
    ImageTensor::new(img.height(), img.width(), channels, data)
}

/// Apply [`whiten`] with the same stats to every image of a dataset.
pub fn whiten_dataset(ds: &LabeledDataset, stats: &WhiteningStats) -> Result<LabeledDataset> {
    let images = ds.images.iter().map(|img| whiten(img, stats)).collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(images, ds.labels.clone(), ds.num_classes, ds.domain_tag.clone())
}

/// Write a dataset as `<root>/<domain_tag>/<class_index>/<name>.png`.
pub fn save_dataset(ds: &LabeledDataset, root: &Path) -> Result<()> {
    let mut per_class_counter = vec![0usize; ds.num_classes];
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        let dir = root.join(&ds.domain_tag).join(label.to_string());
        std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
        let name = format!("img_{:04}.png", per_class_counter[label]);
        per_class_counter[label] += 1;
        save_image(img, &dir.join(name), false)?;
    }
    Ok(())
}

/// Load a dataset previously written by [`save_dataset`].
///
/// Class subdirectories must be named by their class index; `num_classes` is
/// one past the largest index found.
pub fn load_dataset(root: &Path, domain_tag: &str) -> Result<LabeledDataset> {
    let dir = root.join(domain_tag);
    let mut class_dirs: Vec<(usize, PathBuf)> = Vec::new();
    let entries =
        std::fs::read_dir(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
    for entry in entries {
        let entry = entry.map_err(|source| Error::Io { path: dir.clone(), source })?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        if let Some(idx) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse().ok()) {
            class_dirs.push((idx, path));
        }
    }
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let num_classes = class_dirs.iter().map(|(i, _)| i + 1).max().unwrap();

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, class_dir) in class_dirs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&class_dir)
            .map_err(|source| Error::Io { path: class_dir.clone(), source })?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map_or(false, |e| e == "png"))
            .collect();
        files.sort();
        for file in files {
            images.push(load_image(&file)?);
            labels.push(label);
        }
    }
    LabeledDataset::new(images, labels, num_classes, domain_tag)
}

/// All PNG files directly under a directory, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| Error::Io { path: dir.to_path_buf(), source })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |e| e == "png"))
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset_of(images: Vec<ImageTensor>) -> LabeledDataset {
        let n = images.len();
        LabeledDataset::new(images, vec![0; n], 1, "test").unwrap()
    }

    #[test]
    fn tensor_rejects_bad_length_and_nonfinite() {
        assert!(ImageTensor::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(ImageTensor::new(0, 2, 3, vec![]).is_err());
        assert!(ImageTensor::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn constant_dataset_hits_std_floor() {
        let img = ImageTensor::new(2, 2, 3, vec![0.5; 12]).unwrap();
        let stats = compute_whitening(&dataset_of(vec![img])).unwrap();
        for c in 0..3 {
            assert!((stats.mean[c] - 0.5).abs() < 1e-12);
            assert_eq!(stats.std[c], STD_FLOOR);
        }
    }

    #[test]
    fn two_point_distribution_stats() {
        // Channel values split evenly between 0 and 1: mean 0.5, std 0.5.
        let mut data = vec![0.0; 2 * 2 * 3];
        for x in 0..2 {
            for c in 0..3 {
                data[(0 * 2 + x) * 3 + c] = 0.0;
                data[(1 * 2 + x) * 3 + c] = 1.0;
            }
        }
        let img = ImageTensor::new(2, 2, 3, data).unwrap();
        let stats = compute_whitening(&dataset_of(vec![img])).unwrap();
        for c in 0..3 {
            assert!((stats.mean[c] - 0.5).abs() < 1e-12);
            assert!((stats.std[c] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn whiten_centering_and_identity() {
        let img = ImageTensor::new(1, 2, 3, vec![0.3, 0.6, 0.9, 0.3, 0.6, 0.9]).unwrap();
        let stats =
            WhiteningStats { mean: vec![0.3, 0.6, 0.9], std: vec![1.0, 2.0, 0.5] };
        let w = whiten(&img, &stats).unwrap();
        assert!(w.as_slice().iter().all(|&v| v == 0.0));

        let idstats = WhiteningStats::identity(3);
        let w = whiten(&img, &idstats).unwrap();
        assert_eq!(w.as_slice(), img.as_slice());
    }

    #[test]
    fn whiten_unwhiten_round_trip() {
        let mut rng = crate::rng::stream(11, &[0]);
        use rand::Rng;
        let data: Vec<f64> = (0..4 * 5 * 3).map(|_| rng.gen::<f64>()).collect();
        let img = ImageTensor::new(4, 5, 3, data).unwrap();
        let stats = WhiteningStats {
            mean: vec![0.2, 0.5, 0.7],
            std: vec![0.1, 0.9, 2.5],
        };
        let back = unwhiten(&whiten(&img, &stats).unwrap(), &stats).unwrap();
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
        }
    }

    #[test]
    fn whiten_channel_mismatch_is_error() {
        let img = ImageTensor::new(1, 1, 3, vec![0.0; 3]).unwrap();
        let stats = WhiteningStats::identity(2);
        assert!(matches!(whiten(&img, &stats), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn empty_dataset_is_error() {
        let ds = LabeledDataset::new(vec![], vec![], 1, "empty").unwrap();
        assert!(matches!(compute_whitening(&ds), Err(Error::EmptyDataset)));
    }

    #[test]
    fn save_constant_rescale_writes_mid_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let img = ImageTensor::new(2, 2, 3, vec![3.7; 12]).unwrap();
        save_image(&img, &path, true).unwrap();
        let back = load_image(&path).unwrap();
        for &v in back.as_slice() {
            assert!((v - 128.0 / 255.0).abs() < 1e-9);
        }
    }

    #[test]
    fn save_endpoints_without_rescale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.png");
        let img = ImageTensor::new(1, 2, 3, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        save_image(&img, &path, false).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(&back.as_slice()[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&back.as_slice()[3..], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn load_missing_file_reports_path() {
        let err = load_image(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("x.png"));
    }

    #[test]
    fn dataset_round_trip_preserves_labels_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut rng = crate::rng::stream(3, &[9]);
        use rand::Rng;
        for i in 0..6 {
            let data: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.gen::<f64>()).collect();
            images.push(ImageTensor::new(8, 8, 3, data).unwrap());
            labels.push(i % 3);
        }
        let ds = LabeledDataset::new(images, labels, 3, "dom").unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path(), "dom").unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(back.num_classes, 3);
        let mut counts = vec![0; 3];
        for &l in &back.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, vec![2, 2, 2]);
    }
}
