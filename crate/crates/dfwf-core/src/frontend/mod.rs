//! LFCC feature extraction.
//!
//! Raw mono audio becomes a duration-normalized cepstral feature matrix:
//! framing with a Hamming window, power spectrum, a linearly spaced
//! triangular filterbank, log compression, an orthonormal DCT-II, and
//! optional delta / delta-delta stacking. With the default configuration the
//! output is 60 rows by 320 frames.

mod cache;
mod wav;

pub use cache::{read_feature_cache, write_feature_cache};
pub use wav::{load_wav, write_wav};

use std::f64::consts::PI;

use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono audio with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("waveform"));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample_rate must be > 0".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Front-end configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LfccConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_bins: usize,
    pub num_filters: usize,
    pub num_ceps: usize,
    pub include_deltas: bool,
    pub log_floor: f64,
    pub delta_width: usize,
    /// First-order pre-emphasis coefficient; disabled by default.
    pub pre_emphasis: Option<f64>,
    /// Cepstral mean normalization over the static coefficients; off by default.
    pub cepstral_mean_norm: bool,
}

impl Default for LfccConfig {
    fn default() -> Self {
        LfccConfig {
            window_ms: 25.0,
            hop_ms: 10.0,
            fft_bins: 512,
            num_filters: 20,
            num_ceps: 20,
            include_deltas: true,
            log_floor: 1e-10,
            delta_width: 2,
            pre_emphasis: None,
            cepstral_mean_norm: false,
        }
    }
}

impl LfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_ms <= 0.0 || self.hop_ms <= 0.0 {
            return Err(Error::InvalidConfig("window_ms and hop_ms must be > 0".into()));
        }
        if self.num_ceps == 0 || self.num_filters == 0 {
            return Err(Error::InvalidConfig("num_ceps and num_filters must be > 0".into()));
        }
        if self.num_ceps > self.num_filters {
            return Err(Error::InvalidConfig(format!(
                "num_ceps ({}) must not exceed num_filters ({})",
                self.num_ceps, self.num_filters
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::InvalidConfig("log_floor must be > 0".into()));
        }
        if self.delta_width == 0 {
            return Err(Error::InvalidConfig("delta_width must be > 0".into()));
        }
        Ok(())
    }

    /// Rows of the produced feature matrix.
    pub fn feature_dim(&self) -> usize {
        if self.include_deltas {
            3 * self.num_ceps
        } else {
            self.num_ceps
        }
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }
}

/// Number of frames used to normalize every utterance's duration.
pub const TARGET_FRAMES: usize = 320;

/// Row-major feature matrix: `rows` feature channels over `cols` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch {
                context: "FeatureMatrix::new",
                expected: format!("{} values for {rows}x{cols}", rows * cols),
                got: format!("{}", data.len()),
            });
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Frames of a waveform after windowing: `num_frames` rows of `window_len`.
#[derive(Debug, Clone)]
pub struct Frames {
    pub num_frames: usize,
    pub window_len: usize,
    pub data: Vec<f64>,
}

impl Frames {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.window_len..(i + 1) * self.window_len]
    }
}

/// Symmetric Hamming window.
pub fn hamming_window(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Slice the waveform into Hamming-windowed frames.
///
/// `num_frames = 1 + floor((N - win) / hop)`; fails if the signal is shorter
/// than one window.
pub fn frame_and_window(w: &Waveform, cfg: &LfccConfig) -> Result<Frames> {
    cfg.validate()?;
    let win = cfg.window_samples(w.sample_rate);
    let hop = cfg.hop_samples(w.sample_rate);
    if win == 0 || hop == 0 {
        return Err(Error::InvalidConfig("window/hop shorter than one sample".into()));
    }
    if w.samples.len() < win {
        return Err(Error::Data(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            w.samples.len()
        )));
    }
    let num_frames = 1 + (w.samples.len() - win) / hop;
    let window = hamming_window(win);
    let mut data = Vec::with_capacity(num_frames * win);
    for f in 0..num_frames {
        let start = f * hop;
        data.extend(
            w.samples[start..start + win]
                .iter()
                .zip(&window)
                .map(|(s, h)| s * h),
        );
    }
    Ok(Frames { num_frames, window_len: win, data })
}

/// Triangular filterbank linearly spaced from 0 to Nyquist with 50% overlap.
/// Returns the `num_filters x (fft_bins/2 + 1)` weight matrix and the filter
/// center frequencies.
pub fn linear_filterbank(cfg: &LfccConfig, sample_rate: u32) -> (Vec<Vec<f64>>, Vec<f64>) {
    let nyquist = sample_rate as f64 / 2.0;
    let n_bins = cfg.fft_bins / 2 + 1;
    let n_edges = cfg.num_filters + 2;
    let edges: Vec<f64> = (0..n_edges)
        .map(|i| nyquist * i as f64 / (n_edges - 1) as f64)
        .collect();
    let bin_hz = sample_rate as f64 / cfg.fft_bins as f64;

    let mut bank = Vec::with_capacity(cfg.num_filters);
    for m in 0..cfg.num_filters {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut filt = vec![0.0; n_bins];
        for (k, slot) in filt.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            if f > left && f < center {
                *slot = (f - left) / (center - left);
            } else if (f - center).abs() < 1e-12 {
                *slot = 1.0;
            } else if f > center && f < right {
                *slot = (right - f) / (right - center);
            }
        }
        bank.push(filt);
    }
    let centers = edges[1..=cfg.num_filters].to_vec();
    (bank, centers)
}

/// Orthonormal DCT-II matrix of `num_ceps x num_filters`.
pub fn dct_matrix(num_ceps: usize, num_filters: usize) -> Vec<Vec<f64>> {
    let n = num_filters as f64;
    (0..num_ceps)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            (0..num_filters)
                .map(|j| scale * (PI * (j as f64 + 0.5) * k as f64 / n).cos())
                .collect()
        })
        .collect()
}

/// Full cepstral extraction: power spectrum, filterbank, log, DCT, and
/// optional delta stacking. Row count equals `cfg.feature_dim()`.
pub fn lfcc(w: &Waveform, cfg: &LfccConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let win = cfg.window_samples(w.sample_rate);
    if cfg.fft_bins < win {
        return Err(Error::InvalidConfig(format!(
            "fft_bins ({}) must cover the {win}-sample window",
            cfg.fft_bins
        )));
    }

    let source = match cfg.pre_emphasis {
        Some(coef) => {
            let mut out = Vec::with_capacity(w.samples.len());
            out.push(w.samples[0]);
            for i in 1..w.samples.len() {
                out.push(w.samples[i] - coef * w.samples[i - 1]);
            }
            Waveform { samples: out, sample_rate: w.sample_rate }
        }
        None => w.clone(),
    };

    let frames = frame_and_window(&source, cfg)?;
    let (bank, _) = linear_filterbank(cfg, w.sample_rate);
    let dct = dct_matrix(cfg.num_ceps, cfg.num_filters);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_bins);
    let n_bins = cfg.fft_bins / 2 + 1;

    let t = frames.num_frames;
    let mut statics = FeatureMatrix::zeros(cfg.num_ceps, t);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_bins];
    let mut power = vec![0.0; n_bins];
    let mut log_energy = vec![0.0; cfg.num_filters];
    for fi in 0..t {
        for c in buf.iter_mut() {
            *c = Complex::new(0.0, 0.0);
        }
        for (c, &s) in buf.iter_mut().zip(frames.frame(fi)) {
            c.re = s;
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (m, filt) in bank.iter().enumerate() {
            let energy: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            log_energy[m] = energy.max(cfg.log_floor).ln();
        }
        for (k, dct_row) in dct.iter().enumerate() {
            let c: f64 = dct_row.iter().zip(&log_energy).map(|(d, e)| d * e).sum();
            statics.set(k, fi, c);
        }
    }

    if cfg.cepstral_mean_norm {
        for r in 0..statics.rows() {
            let mean: f64 = statics.row(r).iter().sum::<f64>() / t as f64;
            for c in 0..t {
                let v = statics.at(r, c) - mean;
                statics.set(r, c, v);
            }
        }
    }

    if !cfg.include_deltas {
        return Ok(statics);
    }
    let d1 = delta(&statics, cfg.delta_width)?;
    let d2 = delta(&d1, cfg.delta_width)?;
    let mut data = Vec::with_capacity(3 * cfg.num_ceps * t);
    data.extend_from_slice(statics.data());
    data.extend_from_slice(d1.data());
    data.extend_from_slice(d2.data());
    FeatureMatrix::new(3 * cfg.num_ceps, t, data)
}

/// Regression deltas over `width` neighbor frames with replicated edge
/// padding: `Δ_t = Σ_n n (c_{t+n} - c_{t-n}) / (2 Σ_n n²)`.
pub fn delta(features: &FeatureMatrix, width: usize) -> Result<FeatureMatrix> {
    if features.cols() == 0 {
        return Err(Error::EmptyInput("delta features"));
    }
    let t = features.cols();
    let denom: f64 = 2.0 * (1..=width).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = FeatureMatrix::zeros(features.rows(), t);
    for r in 0..features.rows() {
        let row = features.row(r);
        for c in 0..t {
            let mut acc = 0.0;
            for n in 1..=width {
                let fwd = row[(c + n).min(t - 1)];
                let bwd = row[c.saturating_sub(n)];
                acc += n as f64 * (fwd - bwd);
            }
            out.set(r, c, acc / denom);
        }
    }
    Ok(out)
}

/// Normalize the frame count to `target`: shorter matrices are tiled along
/// time and truncated; longer ones yield a contiguous random slice drawn from
/// `rng`; exact-length input is returned unchanged.
pub fn normalize_duration(
    f: &FeatureMatrix,
    target: usize,
    rng: &mut impl Rng,
) -> Result<FeatureMatrix> {
    if f.cols() == 0 {
        return Err(Error::EmptyInput("feature matrix frames"));
    }
    if target == 0 {
        return Err(Error::InvalidConfig("target frame count must be > 0".into()));
    }
    let t = f.cols();
    if t == target {
        return Ok(f.clone());
    }
    let mut out = FeatureMatrix::zeros(f.rows(), target);
    if t < target {
        for r in 0..f.rows() {
            for c in 0..target {
                out.set(r, c, f.at(r, c % t));
            }
        }
    } else {
        let start = rng.gen_range(0..=t - target);
        for r in 0..f.rows() {
            for c in 0..target {
                out.set(r, c, f.at(r, start + c));
            }
        }
    }
    Ok(out)
}

/// `lfcc` followed by `normalize_duration`: the trainer-facing entry point.
pub fn extract_features(
    w: &Waveform,
    cfg: &LfccConfig,
    target: usize,
    rng: &mut impl Rng,
) -> Result<FeatureMatrix> {
    let feats = lfcc(w, cfg)?;
    normalize_duration(&feats, target, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, n: usize, sr: u32) -> Waveform {
        let samples = (0..n)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn framing_single_frame_edge() {
        let w = Waveform::new(vec![0.1; 400], 16000).unwrap();
        let frames = frame_and_window(&w, &LfccConfig::default()).unwrap();
        assert_eq!(frames.num_frames, 1);
        assert_eq!(frames.window_len, 400);
    }

    #[test]
    fn framing_second_frame_starts_at_hop() {
        let mut samples = vec![0.0; 560];
        samples[160] = 1.0;
        let w = Waveform::new(samples, 16000).unwrap();
        let frames = frame_and_window(&w, &LfccConfig::default()).unwrap();
        assert_eq!(frames.num_frames, 2);
        // the impulse at sample 160 is the first sample of frame 2
        let window = hamming_window(400);
        assert_eq!(frames.frame(1)[0], window[0]);
        assert_eq!(frames.frame(0)[160], window[160]);
    }

    #[test]
    fn framing_constant_signal_yields_window() {
        let w = Waveform::new(vec![1.0; 400], 16000).unwrap();
        let frames = frame_and_window(&w, &LfccConfig::default()).unwrap();
        let window = hamming_window(400);
        assert_eq!(frames.frame(0), window.as_slice());
    }

    #[test]
    fn framing_rejects_short_input() {
        let w = Waveform::new(vec![0.0; 399], 16000).unwrap();
        assert!(frame_and_window(&w, &LfccConfig::default()).is_err());
    }

    #[test]
    fn lfcc_shape_and_finiteness() {
        let w = tone(440.0, 4000, 16000);
        let f = lfcc(&w, &LfccConfig::default()).unwrap();
        assert_eq!(f.rows(), 60);
        assert!(f.all_finite());
    }

    #[test]
    fn lfcc_silence_is_column_constant() {
        let w = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        let f = lfcc(&w, &LfccConfig::default()).unwrap();
        for r in 0..f.rows() {
            for c in 1..f.cols() {
                assert!(
                    (f.at(r, c) - f.at(r, 0)).abs() < 1e-12,
                    "row {r} col {c} differs"
                );
            }
        }
        // deltas of a constant sequence vanish
        for r in 20..60 {
            assert!(f.at(r, 0).abs() < 1e-12);
        }
    }

    #[test]
    fn filterbank_centers_are_linear() {
        let cfg = LfccConfig::default();
        let (bank, centers) = linear_filterbank(&cfg, 16000);
        assert_eq!(bank.len(), 20);
        let spacing = centers[1] - centers[0];
        for i in 1..centers.len() {
            assert!(centers[i] > centers[i - 1]);
            assert!((centers[i] - centers[i - 1] - spacing).abs() < 1e-9);
        }
        for row in &bank {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn dct_is_orthonormal() {
        let d = dct_matrix(20, 20);
        for i in 0..20 {
            for j in 0..20 {
                let dot: f64 = (0..20).map(|k| d[i][k] * d[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "D·Dᵀ[{i}][{j}] = {dot}");
            }
        }
    }

    #[test]
    fn delta_of_constant_is_zero() {
        let f = FeatureMatrix::new(2, 5, vec![3.0; 10]).unwrap();
        let d = delta(&f, 2).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_of_single_frame_is_zero() {
        let f = FeatureMatrix::new(3, 1, vec![1.0, -2.0, 0.5]).unwrap();
        let d = delta(&f, 2).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_identity_on_exact_length() {
        let f = FeatureMatrix::new(2, 320, (0..640).map(|v| v as f64).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = normalize_duration(&f, 320, &mut rng).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn normalize_tiles_short_input() {
        let f = FeatureMatrix::new(1, 100, (0..100).map(|v| v as f64).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = normalize_duration(&f, 320, &mut rng).unwrap();
        assert_eq!(out.cols(), 320);
        for c in 0..320 {
            assert_eq!(out.at(0, c), (c % 100) as f64);
        }
    }

    #[test]
    fn normalize_slices_deterministically() {
        let f = FeatureMatrix::new(1, 400, (0..400).map(|v| v as f64).collect()).unwrap();
        let a = normalize_duration(&f, 320, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = normalize_duration(&f, 320, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cols(), 320);
        // contiguity: consecutive values differ by exactly one
        for c in 1..320 {
            assert_eq!(a.at(0, c) - a.at(0, c - 1), 1.0);
        }
    }
}
