//! Training-time waveform augmentation: speed perturbation by plain
//! resampling and duration-preserving pitch shifting via a phase vocoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranges, per-transform probabilities and the seed that drives parameter
/// draws. The pitch range is interpreted in cents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub pitch_range_cents: (f64, f64),
    pub speed_rate_range: (f64, f64),
    pub pitch_prob: f64,
    pub speed_prob: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            pitch_range_cents: (-100.0, 100.0),
            speed_rate_range: (-0.05, 0.05),
            pitch_prob: 1.0,
            speed_prob: 1.0,
            seed: 0,
        }
    }
}

/// Concrete parameters drawn for one waveform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppliedAugment {
    pub pitch_cents: Option<f64>,
    pub speed_rate: Option<f64>,
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in
            [("pitch_range_cents", self.pitch_range_cents), ("speed_rate_range", self.speed_rate_range)]
        {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::Config(format!("{name}: need finite lo <= hi, got ({lo}, {hi})")));
            }
        }
        for (name, p) in [("pitch_prob", self.pitch_prob), ("speed_prob", self.speed_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.speed_rate_range.0 <= -1.0 {
            return Err(Error::Config("speed rate must stay above -1".into()));
        }
        Ok(())
    }

    /// Independent per-sample random stream so augmentation can run in
    /// parallel workers without shared state.
    pub fn rng_for_sample(&self, sample_index: u64) -> ChaCha8Rng {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(crate::seeding::derive_seed(self.seed, sample_index))
    }

    /// Draws the transform decisions and parameters for one waveform.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> AppliedAugment {
        let pitch_cents = if rng.gen::<f64>() < self.pitch_prob {
            Some(draw_uniform(rng, self.pitch_range_cents))
        } else {
            None
        };
        let speed_rate = if rng.gen::<f64>() < self.speed_prob {
            Some(draw_uniform(rng, self.speed_rate_range))
        } else {
            None
        };
        AppliedAugment { pitch_cents, speed_rate }
    }

    /// Resamples the waveform by factor `1 + rate`; positive rates play
    /// faster, so the output holds `round(n / (1 + rate))` samples and the
    /// pitch moves along with the speed.
    pub fn speed_perturb(&self, waveform: &[f32], rate: f64) -> Result<Vec<f32>> {
        let (lo, hi) = self.speed_rate_range;
        if !(lo..=hi).contains(&rate) {
            return Err(Error::OutOfRange { what: "speed rate".into(), value: rate, lo, hi });
        }
        if waveform.len() < 2 {
            return Err(Error::InvalidArgument("speed_perturb needs at least 2 samples".into()));
        }
        Ok(resample_by_step(waveform, 1.0 + rate))
    }

    /// Shifts the fundamental by `2^(cents/1200)` while preserving duration.
    pub fn pitch_shift(&self, waveform: &[f32], cents: f64) -> Result<Vec<f32>> {
        let (lo, hi) = self.pitch_range_cents;
        if !(lo..=hi).contains(&cents) {
            return Err(Error::OutOfRange { what: "pitch cents".into(), value: cents, lo, hi });
        }
        Ok(pitch_shift_preserving_length(waveform, cents))
    }

    /// Applies previously drawn parameters: pitch shift first, then speed.
    pub fn apply(&self, waveform: &[f32], applied: &AppliedAugment) -> Result<Vec<f32>> {
        let mut out;
        let mut current = waveform;
        if let Some(cents) = applied.pitch_cents {
            out = self.pitch_shift(current, cents)?;
            current = &out;
        } else {
            out = current.to_vec();
        }
        if let Some(rate) = applied.speed_rate {
            out = self.speed_perturb(current, rate)?;
        }
        Ok(out)
    }
}

/// One augmented output per input waveform, deterministic given `rng`.
pub fn apply_policy(waveform: &[f32], policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let applied = policy.sample(rng);
    policy.apply(waveform, &applied)
}

fn draw_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

// --- resampling -----------------------------------------------------------

const SINC_HALF_WIDTH: usize = 16;

/// Reads the input at positions `i * step` with a Hann-windowed sinc kernel.
/// Integer positions reproduce input samples exactly.
fn resample_by_step(input: &[f32], step: f64) -> Vec<f32> {
    let out_len = ((input.len() as f64) / step).round().max(1.0) as usize;
    resample_to(input, step, out_len)
}

fn resample_to(input: &[f32], step: f64, out_len: usize) -> Vec<f32> {
    let n = input.len() as isize;
    let w = SINC_HALF_WIDTH as isize;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let t = i as f64 * step;
        let base = t.floor() as isize;
        let mut acc = 0.0f64;
        for k in (base - w + 1)..=(base + w) {
            let x = input[k.clamp(0, n - 1) as usize] as f64;
            let d = t - k as f64;
            acc += x * windowed_sinc(d);
        }
        out.push(acc as f32);
    }
    out
}

fn windowed_sinc(d: f64) -> f64 {
    let w = SINC_HALF_WIDTH as f64;
    if d.abs() >= w {
        return 0.0;
    }
    let sinc = if d.abs() < 1e-12 {
        1.0
    } else {
        let pd = std::f64::consts::PI * d;
        pd.sin() / pd
    };
    let hann = 0.5 * (1.0 + (std::f64::consts::PI * d / w).cos());
    sinc * hann
}

// --- phase vocoder --------------------------------------------------------

fn pitch_shift_preserving_length(input: &[f32], cents: f64) -> Vec<f32> {
    let n = input.len();
    if n < 8 {
        return input.to_vec();
    }
    let factor = 2f64.powf(cents / 1200.0);
    let resampled_len = ((n as f64) / factor).round().max(2.0) as usize;
    let resampled = resample_to(input, factor, resampled_len);
    time_stretch_to(&resampled, n)
}

/// Phase-vocoder time stretch to an exact output length; pitch is preserved.
///
/// The input is zero-padded by one window on both sides so every real output
/// sample gets full overlap-add coverage; the pad is trimmed after synthesis.
fn time_stretch_to(input: &[f32], target_len: usize) -> Vec<f32> {
    let nfft = fft_size_for(input.len());
    let ratio = target_len as f64 / input.len() as f64;
    let pad = nfft;
    let lead_out = (pad as f64 * ratio).round() as usize;

    let mut padded = vec![0.0f32; pad];
    padded.extend_from_slice(input);
    padded.extend(std::iter::repeat(0.0f32).take(pad));

    let stretched = stretch_core(&padded, ratio, lead_out + target_len, nfft);
    stretched[lead_out..lead_out + target_len].to_vec()
}

fn stretch_core(input: &[f32], ratio: f64, needed_len: usize, nfft: usize) -> Vec<f32> {
    let n = input.len();
    let target_len = needed_len;
    let hop_s = (nfft / 4).max(1);
    let hop_a = hop_s as f64 / ratio;

    let window: Vec<f64> = (0..nfft)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / nfft as f64).cos())
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(nfft);
    let ifft = planner.plan_fft_inverse(nfft);

    let n_frames = if target_len <= nfft { 1 } else { (target_len - nfft).div_ceil(hop_s) + 1 };

    let out_len = (n_frames - 1) * hop_s + nfft;
    let mut out = vec![0.0f64; out_len];
    let mut envelope = vec![0.0f64; out_len];

    let mut prev_phase: Vec<f64> = vec![0.0; nfft];
    let mut synth_phase: Vec<f64> = vec![0.0; nfft];
    let mut prev_pos = 0usize;
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];

    for frame in 0..n_frames {
        let pos = ((frame as f64 * hop_a).round() as usize).min(n.saturating_sub(nfft));
        for i in 0..nfft {
            let x = if pos + i < n { input[pos + i] as f64 } else { 0.0 };
            buf[i] = Complex::new(x * window[i], 0.0);
        }
        fft.process(&mut buf);

        let dt = if frame == 0 { hop_s } else { (pos - prev_pos).max(1) };
        for bin in 0..nfft {
            let mag = buf[bin].norm();
            let phase = buf[bin].arg();
            if frame == 0 {
                synth_phase[bin] = phase;
            } else {
                let omega = 2.0 * std::f64::consts::PI * bin as f64 / nfft as f64;
                let expected = omega * dt as f64;
                let deviation = principal_angle(phase - prev_phase[bin] - expected);
                let true_freq = omega + deviation / dt as f64;
                synth_phase[bin] += true_freq * hop_s as f64;
            }
            prev_phase[bin] = phase;
            buf[bin] = Complex::from_polar(mag, synth_phase[bin]);
        }
        prev_pos = pos;

        ifft.process(&mut buf);
        let offset = frame * hop_s;
        for i in 0..nfft {
            let sample = buf[i].re / nfft as f64;
            out[offset + i] += sample * window[i];
            envelope[offset + i] += window[i] * window[i];
        }
    }

    (0..target_len)
        .map(|i| {
            if i < out_len {
                (out[i] / envelope[i].max(1e-8)) as f32
            } else {
                0.0
            }
        })
        .collect()
}

fn fft_size_for(n: usize) -> usize {
    let cap = n.min(1024).max(8);
    let mut size = 8;
    while size * 2 <= cap {
        size *= 2;
    }
    size
}

fn principal_angle(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = x % two_pi;
    if a > std::f64::consts::PI {
        a -= two_pi;
    } else if a < -std::f64::consts::PI {
        a += two_pi;
    }
    a
}
