//! Acoustic front end: log-mel filterbank features, context splicing and
//! frame subsampling.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::checkpoint::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLE_RATE: f64 = 16_000.0;
pub const N_MELS: usize = 40;
pub const FRAME_LEN_MS: f64 = 25.0;
pub const FRAME_SHIFT_MS: f64 = 10.0;
pub const SPLICE_CONTEXT: [isize; 5] = [-2, -1, 0, 1, 2];
pub const SUBSAMPLE: usize = 3;
pub const LOG_FLOOR: f64 = 1e-10;
pub const MEL_LOW_HZ: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if !(sample_rate > 0.0) {
            return Err(Error::Config(format!("sample rate must be positive, got {sample_rate}")));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Input("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `T×F` feature frames with their framing metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    frames: usize,
    dim: usize,
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("feature dimension must be positive".into()));
        }
        if data.len() != frames * dim {
            return Err(Error::Dimension(format!(
                "{frames}×{dim} features need {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix contains non-finite values".into()));
        }
        Ok(Self {
            data,
            frames,
            dim,
            frame_len_ms: FRAME_LEN_MS,
            frame_shift_ms: FRAME_SHIFT_MS,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("ragged feature rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.frames == 0 {
            return Err(Error::EmptyFeatures("no frames to convert".into()));
        }
        Tensor::new(vec![self.frames, self.dim], self.data.clone())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the mel scale from `MEL_LOW_HZ` to
/// Nyquist, evaluated at FFT bin frequencies.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels × (n_fft/2 + 1)`
    weights: Vec<f64>,
    n_bins: usize,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: f64) -> Result<Self> {
        if n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        let nyquist = sample_rate / 2.0;
        if nyquist <= MEL_LOW_HZ {
            return Err(Error::Config(format!("sample rate {sample_rate} too low")));
        }
        let n_bins = n_fft / 2 + 1;
        let lo = hz_to_mel(MEL_LOW_HZ);
        let hi = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate / n_fft as f64;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        Ok(Self {
            weights,
            n_bins,
            centers_hz: edges[1..=n_mels].to_vec(),
        })
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let w = &self.weights[m * self.n_bins..(m + 1) * self.n_bins];
            *o = w.iter().zip(power).map(|(a, b)| a * b).sum();
        }
    }
}

/// Framing parameters of [`logmel`] in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    pub frame_samples: usize,
    pub shift_samples: usize,
    pub n_fft: usize,
}

impl Framing {
    pub fn new(sample_rate: f64, frame_len_ms: f64, shift_ms: f64) -> Result<Self> {
        if !(sample_rate > 0.0) {
            return Err(Error::Config(format!("sample rate must be positive, got {sample_rate}")));
        }
        let frame_samples = (sample_rate * frame_len_ms / 1000.0).round() as usize;
        let shift_samples = (sample_rate * shift_ms / 1000.0).round() as usize;
        if frame_samples == 0 || shift_samples == 0 {
            return Err(Error::Config("frame length and shift must span at least one sample".into()));
        }
        Ok(Self {
            frame_samples,
            shift_samples,
            n_fft: frame_samples.next_power_of_two(),
        })
    }

    pub fn num_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.frame_samples {
            0
        } else {
            1 + (n_samples - self.frame_samples) / self.shift_samples
        }
    }
}

/// Log-mel filterbank features: Hann window, power spectrum, triangular mel
/// filters, `ln(x + 1e-10)`.
pub fn logmel(
    wave: &Waveform,
    n_mels: usize,
    frame_len_ms: f64,
    shift_ms: f64,
) -> Result<FeatureMatrix> {
    let framing = Framing::new(wave.sample_rate, frame_len_ms, shift_ms)?;
    let frames = framing.num_frames(wave.len());
    if frames == 0 {
        return Err(Error::EmptyFeatures(format!(
            "{} samples is shorter than one {}-sample frame",
            wave.len(),
            framing.frame_samples
        )));
    }
    let bank = MelFilterbank::new(n_mels, framing.n_fft, wave.sample_rate)?;
    let fs = framing.frame_samples;
    let window: Vec<f64> = (0..fs)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (fs.max(2) - 1) as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(framing.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); framing.n_fft];
    let mut power = vec![0.0; framing.n_fft / 2 + 1];
    let mut data = vec![0.0; frames * n_mels];
    for t in 0..frames {
        let start = t * framing.shift_samples;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < fs {
                Complex::new(wave.samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        let row = &mut data[t * n_mels..(t + 1) * n_mels];
        bank.apply(&power, row);
        row.iter_mut().for_each(|v| *v = (*v + LOG_FLOOR).ln());
    }
    let mut out = FeatureMatrix::new(frames, n_mels, data)?;
    out.frame_len_ms = frame_len_ms;
    out.frame_shift_ms = shift_ms;
    Ok(out)
}

/// Concatenates each frame with its neighbours at the given offsets, clamping
/// out-of-range indices to the first/last frame.
pub fn splice(feat: &FeatureMatrix, context: &[isize]) -> Result<FeatureMatrix> {
    let t_len = feat.num_frames();
    if t_len == 0 {
        return Err(Error::EmptyFeatures("cannot splice zero frames".into()));
    }
    if context.is_empty() {
        return Err(Error::Config("splice context is empty".into()));
    }
    let f = feat.dim();
    let mut data = Vec::with_capacity(t_len * f * context.len());
    for t in 0..t_len {
        for &c in context {
            let src = (t as isize + c).clamp(0, t_len as isize - 1) as usize;
            data.extend_from_slice(feat.row(src));
        }
    }
    let mut out = FeatureMatrix::new(t_len, f * context.len(), data)?;
    out.frame_len_ms = feat.frame_len_ms;
    out.frame_shift_ms = feat.frame_shift_ms;
    Ok(out)
}

/// Keeps frames `0, factor, 2·factor, …`.
pub fn subsample(feat: &FeatureMatrix, factor: usize) -> Result<FeatureMatrix> {
    if factor < 1 {
        return Err(Error::Config("subsampling factor must be at least 1".into()));
    }
    if feat.num_frames() == 0 {
        return Err(Error::EmptyFeatures("cannot subsample zero frames".into()));
    }
    let kept: Vec<usize> = (0..feat.num_frames()).step_by(factor).collect();
    let mut data = Vec::with_capacity(kept.len() * feat.dim());
    for &t in &kept {
        data.extend_from_slice(feat.row(t));
    }
    let mut out = FeatureMatrix::new(kept.len(), feat.dim(), data)?;
    out.frame_len_ms = feat.frame_len_ms;
    out.frame_shift_ms = feat.frame_shift_ms * factor as f64;
    Ok(out)
}

/// Number of encoder frames produced from `frames` input frames.
pub fn output_frames(frames: usize, factor: usize) -> usize {
    frames.div_ceil(factor)
}

/// Splice with the default context, then subsample by the default factor.
pub fn encoder_input(feat: &FeatureMatrix) -> Result<FeatureMatrix> {
    subsample(&splice(feat, &SPLICE_CONTEXT)?, SUBSAMPLE)
}

pub const FEAT_MAGIC: &[u8; 5] = b"FEAT1";

/// `"FEAT1" | T (u32) | F (u32) | T·F f32 cells`, little-endian.
pub fn encode_features(feat: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + feat.data.len() * 4);
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&(feat.frames as u32).to_le_bytes());
    out.extend_from_slice(&(feat.dim as u32).to_le_bytes());
    for &v in &feat.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut r = Reader::new(bytes);
    r.expect_magic(FEAT_MAGIC)?;
    let frames = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut data = Vec::with_capacity(frames * dim);
    for _ in 0..frames * dim {
        data.push(f64::from(r.f32()?));
    }
    r.finish()?;
    FeatureMatrix::new(frames, dim, data)
}

pub fn write_features(feat: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_features(feat))?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    decode_features(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, f: usize) -> FeatureMatrix {
        FeatureMatrix::new(t, f, (0..t * f).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let w = Waveform::new(vec![0.1; 16_000], 16_000.0).unwrap();
        let f = logmel(&w, N_MELS, FRAME_LEN_MS, FRAME_SHIFT_MS).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.dim(), 40);
    }

    #[test]
    fn silence_hits_the_floor() {
        let w = Waveform::new(vec![0.0; 800], 16_000.0).unwrap();
        let f = logmel(&w, N_MELS, FRAME_LEN_MS, FRAME_SHIFT_MS).unwrap();
        assert!(f.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn short_signal_and_bad_rate() {
        let w = Waveform::new(vec![0.0; 399], 16_000.0).unwrap();
        assert!(matches!(
            logmel(&w, N_MELS, FRAME_LEN_MS, FRAME_SHIFT_MS),
            Err(Error::EmptyFeatures(_))
        ));
        assert!(matches!(Waveform::new(vec![0.0], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn splice_single_frame_repeats() {
        let f = ramp(1, 40);
        let s = splice(&f, &SPLICE_CONTEXT).unwrap();
        assert_eq!(s.dim(), 200);
        for b in 0..5 {
            assert_eq!(&s.row(0)[b * 40..(b + 1) * 40], f.row(0));
        }
    }

    #[test]
    fn splice_clamps_at_edges() {
        let f = ramp(3, 40);
        let s = splice(&f, &SPLICE_CONTEXT).unwrap();
        let blocks: Vec<&[f64]> = s.row(0).chunks(40).collect();
        assert_eq!(blocks[0], f.row(0));
        assert_eq!(blocks[1], f.row(0));
        assert_eq!(blocks[2], f.row(0));
        assert_eq!(blocks[3], f.row(1));
        assert_eq!(blocks[4], f.row(2));
        assert_eq!(&s.row(1)[80..120], f.row(1));
    }

    #[test]
    fn splice_rejects_empty() {
        let f = FeatureMatrix::new(0, 40, vec![]).unwrap();
        assert!(matches!(splice(&f, &SPLICE_CONTEXT), Err(Error::EmptyFeatures(_))));
    }

    #[test]
    fn subsample_examples() {
        let f = ramp(9, 2);
        let s = subsample(&f, 3).unwrap();
        assert_eq!(s.num_frames(), 3);
        assert_eq!(s.row(1), f.row(3));
        assert_eq!(s.row(2), f.row(6));
        assert_eq!(subsample(&ramp(10, 2), 3).unwrap().num_frames(), 4);
        assert_eq!(subsample(&f, 1).unwrap(), {
            let mut g = f.clone();
            g.frame_shift_ms = f.frame_shift_ms;
            g
        });
        assert!(matches!(subsample(&f, 0), Err(Error::Config(_))));
    }

    #[test]
    fn feature_file_round_trip() {
        let f = FeatureMatrix::new(2, 3, vec![0.5, -1.25, 3.0, 0.0, 1e-3, 7.5]).unwrap();
        let bytes = encode_features(&f);
        assert_eq!(&bytes[..5], b"FEAT1");
        assert_eq!(bytes.len(), 5 + 8 + 6 * 4);
        let g = decode_features(&bytes).unwrap();
        assert_eq!(g.num_frames(), 2);
        for (a, b) in f.data().iter().zip(g.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(decode_features(&bytes[..bytes.len() - 2]).is_err());
    }
}
