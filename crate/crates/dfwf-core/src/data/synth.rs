//! Seeded waveform synthesis for genuine voices and spoof transforms.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::Waveform;
use crate::metrics::Label;

pub const SAMPLE_RATE: u32 = 16_000;
const MIN_SECONDS: f64 = 2.0;
const MAX_SECONDS: f64 = 4.0;

/// A labeled synthetic utterance.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub utt_id: String,
    pub label: Label,
    /// Spoof type id, or `-` for genuine speech.
    pub type_id: String,
    pub wave: Waveform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpoofFamily {
    SynthesisLike,
    ReplayLike,
}

impl SpoofFamily {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "synthesis_like" => Ok(SpoofFamily::SynthesisLike),
            "replay_like" => Ok(SpoofFamily::ReplayLike),
            other => Err(Error::InvalidConfig(format!("unknown spoof family {other:?}"))),
        }
    }
}

/// The per-type fixed transform applied to a genuine-like base voice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpoofTransform {
    /// Degenerate control: the spoof equals its genuine base.
    Identity,
    /// Re-draw all partial phases every `segment_ms`, smearing the spectrum
    /// with broadband discontinuities.
    PhaseRandomize { segment_ms: f64 },
    /// Shift partial `k` to `k·f0·(1 + factor·k)` and append extra detuned
    /// partials above the voice's natural stack.
    HarmonicDetune { factor: f64, extra_partials: usize },
    /// Boost partial amplitudes under a Gaussian bump around `center_hz` and
    /// inject narrowband noise there.
    FormantShift { center_hz: f64, bandwidth_hz: f64, gain: f64 },
    /// Playback channel: two-pass one-pole lowpass, feedforward echo taps,
    /// then tanh level compression.
    ReplayChannel { lowpass_hz: f64, echo_delay_ms: f64, echo_gain: f64, drive: f64 },
}

/// One spoof type: an id, its family, and its fixed transform parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpoofTypeSpec {
    pub type_id: String,
    pub family: SpoofFamily,
    pub transform: SpoofTransform,
}

/// The four synthesis-like type presets.
pub fn synthesis_presets() -> Vec<SpoofTypeSpec> {
    vec![
        SpoofTypeSpec {
            type_id: "S1".into(),
            family: SpoofFamily::SynthesisLike,
            transform: SpoofTransform::PhaseRandomize { segment_ms: 20.0 },
        },
        SpoofTypeSpec {
            type_id: "S2".into(),
            family: SpoofFamily::SynthesisLike,
            transform: SpoofTransform::HarmonicDetune { factor: 0.08, extra_partials: 3 },
        },
        SpoofTypeSpec {
            type_id: "S3".into(),
            family: SpoofFamily::SynthesisLike,
            transform: SpoofTransform::FormantShift {
                center_hz: 3200.0,
                bandwidth_hz: 700.0,
                gain: 4.0,
            },
        },
        SpoofTypeSpec {
            type_id: "S4".into(),
            family: SpoofFamily::SynthesisLike,
            transform: SpoofTransform::FormantShift {
                center_hz: 5400.0,
                bandwidth_hz: 1100.0,
                gain: 3.0,
            },
        },
    ]
}

/// The four replay-like type presets.
pub fn replay_presets() -> Vec<SpoofTypeSpec> {
    vec![
        SpoofTypeSpec {
            type_id: "R1".into(),
            family: SpoofFamily::ReplayLike,
            transform: SpoofTransform::ReplayChannel {
                lowpass_hz: 1200.0,
                echo_delay_ms: 40.0,
                echo_gain: 0.55,
                drive: 3.0,
            },
        },
        SpoofTypeSpec {
            type_id: "R2".into(),
            family: SpoofFamily::ReplayLike,
            transform: SpoofTransform::ReplayChannel {
                lowpass_hz: 2000.0,
                echo_delay_ms: 80.0,
                echo_gain: 0.45,
                drive: 2.0,
            },
        },
        SpoofTypeSpec {
            type_id: "R3".into(),
            family: SpoofFamily::ReplayLike,
            transform: SpoofTransform::ReplayChannel {
                lowpass_hz: 800.0,
                echo_delay_ms: 25.0,
                echo_gain: 0.65,
                drive: 4.0,
            },
        },
        SpoofTypeSpec {
            type_id: "R4".into(),
            family: SpoofFamily::ReplayLike,
            transform: SpoofTransform::ReplayChannel {
                lowpass_hz: 1600.0,
                echo_delay_ms: 60.0,
                echo_gain: 0.5,
                drive: 2.5,
            },
        },
    ]
}

/// Look up a preset by type id.
pub fn preset(type_id: &str) -> Result<SpoofTypeSpec> {
    synthesis_presets()
        .into_iter()
        .chain(replay_presets())
        .find(|s| s.type_id == type_id)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown spoof type {type_id:?}")))
}

struct VoiceParams {
    duration: usize,
    f0: f64,
    amps: Vec<f64>,
    phases: Vec<f64>,
    attack: f64,
    release: f64,
    lfo_rate: f64,
    lfo_depth: f64,
    noise_level: f64,
    peak: f64,
}

/// One fixed global distribution for all tasks: the genuine class stays
/// consistent wherever it appears.
fn draw_voice(rng: &mut ChaCha8Rng) -> VoiceParams {
    let duration =
        (SAMPLE_RATE as f64 * rng.gen_range(MIN_SECONDS..MAX_SECONDS)).round() as usize;
    let f0 = rng.gen_range(100.0..300.0);
    let n_harmonics = rng.gen_range(3..=6usize);
    let falloff = rng.gen_range(0.8..1.2);
    let amps: Vec<f64> = (1..=n_harmonics)
        .map(|k| (1.0 / (k as f64).powf(falloff)) * rng.gen_range(0.85..1.15))
        .collect();
    let phases: Vec<f64> = (0..n_harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    VoiceParams {
        duration,
        f0,
        amps,
        phases,
        attack: rng.gen_range(0.05..0.15),
        release: rng.gen_range(0.05..0.15),
        lfo_rate: rng.gen_range(0.5..2.0),
        lfo_depth: rng.gen_range(0.1..0.3),
        noise_level: 0.003,
        peak: rng.gen_range(0.4..0.8),
    }
}

fn envelope(t: f64, total: f64, p: &VoiceParams) -> f64 {
    let edge = if t < p.attack {
        t / p.attack
    } else if t > total - p.release {
        ((total - t) / p.release).max(0.0)
    } else {
        1.0
    };
    edge * (1.0 + p.lfo_depth * (2.0 * PI * p.lfo_rate * t).sin())
}

fn synthesize(p: &VoiceParams, transform: &SpoofTransform, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let total = p.duration as f64 / sr;

    // partial table: (frequency, amplitude, initial phase)
    let mut partials: Vec<(f64, f64, f64)> = p
        .amps
        .iter()
        .zip(&p.phases)
        .enumerate()
        .map(|(i, (&a, &ph))| ((i + 1) as f64 * p.f0, a, ph))
        .collect();

    match transform {
        SpoofTransform::HarmonicDetune { factor, extra_partials } => {
            let base = partials.clone();
            partials.clear();
            for (i, (f, a, ph)) in base.iter().enumerate() {
                let k = (i + 1) as f64;
                partials.push((f * (1.0 + factor * k), *a, *ph));
            }
            let last_amp = base.last().map(|p| p.1).unwrap_or(0.2);
            for e in 0..*extra_partials {
                let k = (base.len() + e + 1) as f64;
                let f = k * p.f0 * (1.0 + factor * k);
                if f < sr / 2.0 - 200.0 {
                    partials.push((f, 0.4 * last_amp, rng.gen_range(0.0..2.0 * PI)));
                }
            }
        }
        SpoofTransform::FormantShift { center_hz, bandwidth_hz, gain } => {
            for (f, a, _) in partials.iter_mut() {
                let bump = (-((*f - center_hz) / bandwidth_hz).powi(2)).exp();
                *a *= 1.0 + gain * bump;
            }
        }
        _ => {}
    }

    let segment = match transform {
        SpoofTransform::PhaseRandomize { segment_ms } => {
            ((segment_ms / 1000.0) * sr).round().max(1.0) as usize
        }
        _ => usize::MAX,
    };

    let mut samples = vec![0.0; p.duration];
    let mut phases: Vec<f64> = partials.iter().map(|p| p.2).collect();
    for n in 0..p.duration {
        if segment != usize::MAX && n % segment == 0 && n > 0 {
            for ph in phases.iter_mut() {
                *ph = rng.gen_range(0.0..2.0 * PI);
            }
        }
        let t = n as f64 / sr;
        let env = envelope(t, total, p);
        let mut s = 0.0;
        for ((f, a, _), ph) in partials.iter().zip(&phases) {
            s += a * (2.0 * PI * f * t + ph).sin();
        }
        samples[n] = env * s + p.noise_level * (rng.gen::<f64>() * 2.0 - 1.0);
    }

    // formant-band noise makes the boosted band audible even between partials
    if let SpoofTransform::FormantShift { center_hz, bandwidth_hz, gain } = transform {
        let n_tones = 12;
        let amp = 0.02 * gain;
        let tones: Vec<(f64, f64)> = (0..n_tones)
            .map(|_| {
                (
                    rng.gen_range(center_hz - bandwidth_hz..center_hz + bandwidth_hz),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        for (n, s) in samples.iter_mut().enumerate() {
            let t = n as f64 / sr;
            let env = envelope(t, total, p);
            let band: f64 = tones.iter().map(|(f, ph)| (2.0 * PI * f * t + ph).sin()).sum();
            *s += env * amp * band / (n_tones as f64).sqrt();
        }
    }

    if let SpoofTransform::ReplayChannel { lowpass_hz, echo_delay_ms, echo_gain, drive } =
        transform
    {
        let a = 1.0 - (-2.0 * PI * lowpass_hz / sr).exp();
        for _pass in 0..2 {
            let mut y = 0.0;
            for s in samples.iter_mut() {
                y += a * (*s - y);
                *s = y;
            }
        }
        let d = ((echo_delay_ms / 1000.0) * sr).round() as usize;
        if d > 0 && d < samples.len() {
            let dry = samples.clone();
            for n in d..samples.len() {
                samples[n] += echo_gain * dry[n - d];
                if n >= 2 * d {
                    samples[n] += echo_gain * echo_gain * dry[n - 2 * d];
                }
            }
        }
        for s in samples.iter_mut() {
            *s = (drive * *s).tanh();
        }
    }

    // normalize to the voice's target peak, clip defensively
    let max = samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    if max > 0.0 {
        let scale = p.peak / max;
        for s in samples.iter_mut() {
            *s = (*s * scale).clamp(-1.0, 1.0);
        }
    }
    samples
}

fn generate(
    n: usize,
    seed: u64,
    transform: &SpoofTransform,
    label: Label,
    type_id: &str,
) -> Vec<Utterance> {
    let class = match label {
        Label::Genuine => 'g',
        Label::Spoof => 's',
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let params = draw_voice(&mut rng);
            let samples = synthesize(&params, transform, &mut rng);
            Utterance {
                utt_id: format!("{class}{:04}", i),
                label,
                type_id: type_id.to_string(),
                wave: Waveform::new(samples, SAMPLE_RATE).expect("non-empty synthesis"),
            }
        })
        .collect()
}

/// `n` genuine utterances drawn from the fixed global voice distribution.
pub fn generate_genuine(n: usize, seed: u64) -> Vec<Utterance> {
    generate(n, seed, &SpoofTransform::Identity, Label::Genuine, "-")
}

/// `n` spoof utterances of one type: genuine-like bases passed through the
/// type's fixed transform.
pub fn generate_spoof(spec: &SpoofTypeSpec, n: usize, seed: u64) -> Vec<Utterance> {
    generate(n, seed, &spec.transform, Label::Spoof, &spec.type_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_identical_utterances() {
        let a = generate_genuine(3, 42);
        let b = generate_genuine(3, 42);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.wave.samples, y.wave.samples);
        }
        let spec = &synthesis_presets()[0];
        let c = generate_spoof(spec, 2, 7);
        let d = generate_spoof(spec, 2, 7);
        for (x, y) in c.iter().zip(&d) {
            assert_eq!(x.wave.samples, y.wave.samples);
        }
    }

    #[test]
    fn amplitudes_stay_in_range() {
        for u in generate_genuine(4, 11) {
            assert!(u.wave.samples.iter().all(|&s| (-1.0..=1.0).contains(&s)));
        }
        for spec in synthesis_presets().iter().chain(&replay_presets()) {
            for u in generate_spoof(spec, 2, 13) {
                assert!(
                    u.wave.samples.iter().all(|&s| (-1.0..=1.0).contains(&s)),
                    "type {}",
                    spec.type_id
                );
            }
        }
    }

    #[test]
    fn identity_preset_equals_genuine_base() {
        let spec = SpoofTypeSpec {
            type_id: "CTRL".into(),
            family: SpoofFamily::SynthesisLike,
            transform: SpoofTransform::Identity,
        };
        let spoofs = generate_spoof(&spec, 2, 99);
        let genuine = generate_genuine(2, 99);
        for (s, g) in spoofs.iter().zip(&genuine) {
            assert_eq!(s.wave.samples, g.wave.samples);
        }
        assert_eq!(spoofs[0].label, Label::Spoof);
    }

    #[test]
    fn durations_cover_both_sides_of_320_frames() {
        // 320 frames at 10 ms hop needs ~3.2 s; 2-4 s utterances straddle it
        let utts = generate_genuine(20, 3);
        let short = utts.iter().any(|u| u.wave.duration_secs() < 3.2);
        let long = utts.iter().any(|u| u.wave.duration_secs() > 3.3);
        assert!(short && long);
    }

    #[test]
    fn unknown_type_is_an_error() {
        assert!(preset("S1").is_ok());
        assert!(preset("X9").is_err());
        assert!(SpoofFamily::parse("synthesis_like").is_ok());
        assert!(SpoofFamily::parse("banana").is_err());
    }
}
