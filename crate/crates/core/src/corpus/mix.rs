//! Weighted mixing, SNR-controlled mixing with interference tiling, and
//! concatenation of feature streams (or raw waveforms).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{FeatureMatrix, Waveform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    Mix,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    CrossSpeaker,
    SameSpeaker,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPolicy {
    /// `w1, w2 ~ U[0.1, 0.9]` independently.
    Uniform,
    Fixed(f64, f64),
    SnrDb(f64),
}

/// Where the keyword-bearing stream sits: first/second in time for
/// concatenation, first/second operand for weighted mixing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPosition {
    First,
    Second,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub mode: MixMode,
    pub pairing: Pairing,
    pub weight_policy: WeightPolicy,
    pub target_position: TargetPosition,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        match self.weight_policy {
            WeightPolicy::Fixed(a, b) => {
                if !(a > 0.0 && a <= 1.0 && b > 0.0 && b <= 1.0) {
                    return Err(Error::Config(format!("fixed weights ({a}, {b}) not in (0, 1]")));
                }
            }
            WeightPolicy::SnrDb(s) if !s.is_finite() => {
                return Err(Error::Config(format!("snr {s} is not finite")));
            }
            _ => {}
        }
        Ok(())
    }
}

/// A two-stream feature mixture and where the target stream lives in it.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub features: FeatureMatrix,
    /// First frame of the target stream.
    pub target_offset: usize,
    /// Gain applied to the target stream.
    pub target_gain: f64,
    /// Gain applied to the other stream.
    pub other_gain: f64,
}

pub const UNIFORM_WEIGHT_RANGE: (f64, f64) = (0.1, 0.9);

/// Mean squared value.
pub fn energy(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Repeats `x` (rows of width `dim`) until it covers `frames` rows, then
/// truncates.
fn tile_rows(x: &[f64], dim: usize, frames: usize) -> Vec<f64> {
    let src_frames = x.len() / dim;
    let mut out = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        let s = t % src_frames;
        out.extend_from_slice(&x[s * dim..(s + 1) * dim]);
    }
    out
}

pub fn tile(x: &FeatureMatrix, frames: usize) -> Result<FeatureMatrix> {
    if x.num_frames() == 0 {
        return Err(Error::DegenerateInput("cannot tile an empty stream".into()));
    }
    FeatureMatrix::new(frames, x.dim(), tile_rows(x.data(), x.dim(), frames))
}

/// Gain for the interference so that `10·log10(E_t / (g²·E_i)) = snr_db`.
pub fn snr_gain(target_energy: f64, interf_energy: f64, snr_db: f64) -> Result<f64> {
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("snr {snr_db} is not finite")));
    }
    if !(interf_energy > 0.0) {
        return Err(Error::DegenerateInput("interference has zero energy".into()));
    }
    if !(target_energy > 0.0) {
        return Err(Error::DegenerateInput("target has zero energy".into()));
    }
    Ok((target_energy / (interf_energy * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Achieved SNR in dB between a target and an already-scaled interference.
pub fn snr_db_of(target: &[f64], scaled_interf: &[f64]) -> f64 {
    10.0 * (energy(target) / energy(scaled_interf)).log10()
}

fn check_dims(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "feature dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `w1·a + w2·b` frame by frame; the shorter stream is zero-padded at the tail.
pub fn mix_weighted_with(a: &FeatureMatrix, b: &FeatureMatrix, w1: f64, w2: f64) -> Result<FeatureMatrix> {
    check_dims(a, b)?;
    let dim = a.dim();
    let frames = a.num_frames().max(b.num_frames());
    let mut data = vec![0.0; frames * dim];
    for (o, v) in data.iter_mut().zip(a.data()) {
        *o += w1 * v;
    }
    for (o, v) in data.iter_mut().zip(b.data()) {
        *o += w2 * v;
    }
    FeatureMatrix::new(frames, dim, data)
}

/// Weighted mixture with `w1, w2 ~ U[0.1, 0.9]`.
pub fn mix_weighted(
    a: &FeatureMatrix,
    b: &FeatureMatrix,
    rng: &mut impl Rng,
) -> Result<(FeatureMatrix, f64, f64)> {
    let (lo, hi) = UNIFORM_WEIGHT_RANGE;
    let w1 = rng.random_range(lo..=hi);
    let w2 = rng.random_range(lo..=hi);
    Ok((mix_weighted_with(a, b, w1, w2)?, w1, w2))
}

/// `target + g·tile(interf)` over the target's length, with `g` chosen so the
/// mixture has the requested SNR over that region.
pub fn mix_snr(target: &FeatureMatrix, interf: &FeatureMatrix, snr_db: f64) -> Result<Mixture> {
    check_dims(target, interf)?;
    if target.num_frames() == 0 {
        return Err(Error::DegenerateInput("empty target".into()));
    }
    let tiled = tile(interf, target.num_frames())?;
    let g = snr_gain(energy(target.data()), energy(tiled.data()), snr_db)?;
    let data = target
        .data()
        .iter()
        .zip(tiled.data())
        .map(|(t, i)| t + g * i)
        .collect();
    Ok(Mixture {
        features: FeatureMatrix::new(target.num_frames(), target.dim(), data)?,
        target_offset: 0,
        target_gain: 1.0,
        other_gain: g,
    })
}

/// Stacks `a` (the target) and `gain_b·b` in time, in the given order.
pub fn concat(a: &FeatureMatrix, b: &FeatureMatrix, order: TargetPosition, gain_b: f64) -> Result<Mixture> {
    check_dims(a, b)?;
    let scaled: Vec<f64> = b.data().iter().map(|v| v * gain_b).collect();
    let (data, offset) = match order {
        TargetPosition::First => ([a.data(), &scaled].concat(), 0),
        TargetPosition::Second => ([&scaled, a.data()].concat(), b.num_frames()),
    };
    Ok(Mixture {
        features: FeatureMatrix::new(a.num_frames() + b.num_frames(), a.dim(), data)?,
        target_offset: offset,
        target_gain: 1.0,
        other_gain: gain_b,
    })
}

/// Signal-domain counterpart of [`mix_snr`] for raw audio.
pub fn mix_snr_waveform(target: &Waveform, interf: &Waveform, snr_db: f64) -> Result<(Waveform, f64)> {
    if target.sample_rate != interf.sample_rate {
        return Err(Error::Config("sample rates differ".into()));
    }
    if target.is_empty() || interf.is_empty() {
        return Err(Error::DegenerateInput("empty waveform".into()));
    }
    let tiled = tile_rows(&interf.samples, 1, target.len());
    let g = snr_gain(energy(&target.samples), energy(&tiled), snr_db)?;
    let samples = target.samples.iter().zip(&tiled).map(|(t, i)| t + g * i).collect();
    Ok((Waveform::new(samples, target.sample_rate)?, g))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn fm(frames: usize, dim: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(frames, dim, (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn unit_and_zero_weight_reproduces_first_stream() {
        let a = fm(10, 4, 1);
        let b = fm(7, 4, 2);
        let m = mix_weighted_with(&a, &b, 1.0, 0.0).unwrap();
        assert_eq!(m.data(), a.data());
    }

    #[test]
    fn weighted_mix_is_linear_and_pads() {
        let a = fm(5, 3, 1);
        let b = fm(8, 3, 2);
        let m = mix_weighted_with(&a, &b, 0.3, 0.6).unwrap();
        assert_eq!(m.num_frames(), 8);
        for t in 0..5 {
            for j in 0..3 {
                let r = m.row(t)[j] - 0.3 * a.row(t)[j] - 0.6 * b.row(t)[j];
                assert!(r.abs() < 1e-15);
            }
        }
        for t in 5..8 {
            for j in 0..3 {
                assert!((m.row(t)[j] - 0.6 * b.row(t)[j]).abs() < 1e-15);
            }
        }
        assert!(mix_weighted_with(&a, &fm(3, 2, 0), 0.5, 0.5).is_err());
    }

    #[test]
    fn snr_gain_closed_forms() {
        assert!((snr_gain(2.0, 2.0, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((snr_gain(2.0, 2.0, 3.0).unwrap() - 0.707_945_784_4).abs() < 1e-9);
        assert!(matches!(snr_gain(1.0, 0.0, 0.0), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn interference_is_tiled_over_target() {
        let target = fm(100, 2, 1);
        let interf = fm(30, 2, 2);
        let m = mix_snr(&target, &interf, 0.0).unwrap();
        assert_eq!(m.features.num_frames(), 100);
        for t in [0, 29, 30, 95, 99] {
            for j in 0..2 {
                let expect = target.row(t)[j] + m.other_gain * interf.row(t % 30)[j];
                assert!((m.features.row(t)[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn silent_interference_is_rejected() {
        let target = fm(10, 2, 1);
        let silent = FeatureMatrix::new(4, 2, vec![0.0; 8]).unwrap();
        assert!(matches!(mix_snr(&target, &silent, 0.0), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn concat_orders() {
        let a = fm(6, 2, 1);
        let b = fm(4, 2, 2);
        let m = concat(&a, &b, TargetPosition::First, 1.0).unwrap();
        assert_eq!(m.features.num_frames(), 10);
        assert_eq!(&m.features.data()[..12], a.data());
        let m = concat(&a, &b, TargetPosition::Second, 1.0).unwrap();
        assert_eq!(m.target_offset, 4);
        assert_eq!(&m.features.data()[8..], a.data());
    }

    #[test]
    fn waveform_mix_hits_requested_snr() {
        let t = Waveform::new((0..1000).map(|i| (i as f64 * 0.05).sin() * 0.5).collect(), 16000.0).unwrap();
        let i = Waveform::new((0..300).map(|i| (i as f64 * 0.31).cos() * 0.2).collect(), 16000.0).unwrap();
        let (m, g) = mix_snr_waveform(&t, &i, -3.0).unwrap();
        let tiled = tile_rows(&i.samples, 1, 1000);
        let scaled: Vec<f64> = tiled.iter().map(|v| v * g).collect();
        assert!((snr_db_of(&t.samples, &scaled) + 3.0).abs() < 1e-9);
        assert_eq!(m.len(), 1000);
    }
}
