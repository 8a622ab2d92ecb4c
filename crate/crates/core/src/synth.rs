//! Deterministic renderer: four FM oscillators summed, ADSR envelope,
//! resonant low-pass and square-wave gater, in that order.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamId, Patch, OSC_ORDER};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("unknown waveform '{0}'")]
    UnknownWaveform(String),
    #[error("invalid render config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Waveform {
    Sin,
    Saw,
    Tri,
    Sqr,
}

impl Waveform {
    pub fn as_str(self) -> &'static str {
        match self {
            Waveform::Sin => "sin",
            Waveform::Saw => "saw",
            Waveform::Tri => "tri",
            Waveform::Sqr => "sqr",
        }
    }
}

impl fmt::Display for Waveform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Waveform {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sin" => Ok(Waveform::Sin),
            "saw" => Ok(Waveform::Saw),
            "tri" => Ok(Waveform::Tri),
            "sqr" => Ok(Waveform::Sqr),
            other => Err(SynthError::UnknownWaveform(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub sample_rate: u32,
    /// Seconds.
    pub duration: f64,
    /// Key release time in seconds; note-on is at t = 0.
    pub note_off_time: f64,
    /// Upper bound on the saw/tri series length. The effective length is
    /// also capped at the number of harmonics below Nyquist.
    pub harmonic_limit: usize,
    pub mix_norm: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { sample_rate: 16384, duration: 1.0, note_off_time: 0.5, harmonic_limit: 64, mix_norm: 0.25 }
    }
}

impl RenderConfig {
    pub fn num_samples(&self) -> usize {
        (self.sample_rate as f64 * self.duration).round() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.sample_rate == 0 || self.duration <= 0.0 {
            return Err(SynthError::InvalidConfig("sample_rate and duration must be positive"));
        }
        if !(self.note_off_time > 0.0 && self.note_off_time <= self.duration) {
            return Err(SynthError::InvalidConfig("note_off_time must lie in (0, duration]"));
        }
        if self.harmonic_limit == 0 {
            return Err(SynthError::InvalidConfig("harmonic_limit must be at least 1"));
        }
        Ok(())
    }

    /// Series length for a saw/tri carrier at `freq` Hz.
    pub fn harmonics_for(&self, freq: f64) -> usize {
        let nyquist = self.sample_rate as f64 / 2.0;
        let below = if freq > 0.0 { (nyquist / freq).floor() as usize } else { self.harmonic_limit };
        below.clamp(1, self.harmonic_limit)
    }

    fn time(&self, i: usize) -> f64 {
        i as f64 / self.sample_rate as f64
    }
}

/// A rendered mono clip.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        AudioBuffer { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Rounds every sample through `f32`, the precision datasets store.
    pub fn to_f32_precision(&self) -> AudioBuffer {
        AudioBuffer { samples: self.samples.iter().map(|&s| s as f32 as f64).collect(), sample_rate: self.sample_rate }
    }
}

/// `sum_{n=1..N} c_n (-1)^n sin(n a)` with `c_n = n^-power`.
fn alternating_series(phase: f64, harmonics: usize, power: i32) -> f64 {
    // sin(n a) by the Chebyshev recurrence s_{n+1} = 2 cos(a) s_n - s_{n-1}
    let two_cos = 2.0 * phase.cos();
    let mut prev = 0.0;
    let mut cur = phase.sin();
    let mut acc = 0.0;
    for n in 1..=harmonics {
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        acc += sign * cur / (n as f64).powi(power);
        let next = two_cos * cur - prev;
        prev = cur;
        cur = next;
    }
    acc
}

/// One waveform sample at `phase` radians.
pub fn osc_wave(w: Waveform, phase: f64, harmonic_limit: usize) -> f64 {
    let a = phase.rem_euclid(TAU);
    match w {
        Waveform::Sin => a.sin(),
        Waveform::Sqr => {
            let s = a.sin();
            if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Waveform::Saw => 0.5 - alternating_series(a, harmonic_limit, 1) / PI,
        Waveform::Tri => 0.5 - alternating_series(a, harmonic_limit, 2) / PI,
    }
}

/// Parses a waveform symbol and evaluates it.
pub fn osc_wave_named(w: &str, phase: f64, harmonic_limit: usize) -> Result<f64, SynthError> {
    Ok(osc_wave(w.parse()?, phase, harmonic_limit))
}

/// `amp * x_w(2 pi f t + mod_amp * sin(2 pi v t))` sampled on the config's time base.
pub fn render_oscillator(w: Waveform, freq: f64, mod_freq: f64, amp: f64, mod_amp: f64, cfg: &RenderConfig) -> Vec<f64> {
    let n = cfg.num_samples();
    if amp == 0.0 {
        return vec![0.0; n];
    }
    let harmonics = cfg.harmonics_for(freq);
    (0..n)
        .map(|i| {
            let t = cfg.time(i);
            let phase = TAU * freq * t + mod_amp * (TAU * mod_freq * t).sin();
            amp * osc_wave(w, phase, harmonics)
        })
        .collect()
}

pub fn sum_oscillators(parts: &[Vec<f64>], mix_norm: f64) -> Vec<f64> {
    let n = parts.first().map_or(0, Vec::len);
    assert!(parts.iter().all(|p| p.len() == n), "oscillator outputs must have equal length");
    (0..n).map(|i| mix_norm * parts.iter().map(|p| p[i]).sum::<f64>()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adsr {
    pub attack: f64,
    pub decay: f64,
    pub sustain: f64,
    pub release: f64,
}

impl Adsr {
    /// Level while the key is held.
    fn held(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else if t < self.attack {
            t / self.attack
        } else if t < self.attack + self.decay {
            1.0 - (1.0 - self.sustain) * (t - self.attack) / self.decay
        } else {
            self.sustain
        }
    }

    pub fn gain(&self, note_off: f64, t: f64) -> f64 {
        let g = if t <= note_off {
            self.held(t)
        } else {
            let start = self.held(note_off);
            let frac = (t - note_off) / self.release;
            if frac >= 1.0 {
                0.0
            } else {
                start * (1.0 - frac)
            }
        };
        g.clamp(0.0, 1.0)
    }
}

pub fn adsr_envelope(a: f64, d: f64, s: f64, r: f64, note_off: f64, t: f64) -> f64 {
    Adsr { attack: a, decay: d, sustain: s, release: r }.gain(note_off, t)
}

/// Second-order resonant low-pass (bilinear-transform biquad), `q` used as
/// the quality factor after clamping to `[0.01, 10]`.
#[derive(Debug, Clone, Copy)]
pub struct ResonantLowpass {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl ResonantLowpass {
    pub fn new(cutoff: f64, q: f64, sample_rate: f64) -> Self {
        let q = q.clamp(0.01, 10.0);
        let w0 = TAU * cutoff.min(0.49 * sample_rate) / sample_rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        ResonantLowpass {
            b0: (1.0 - cos) / 2.0 / a0,
            b1: (1.0 - cos) / a0,
            b2: (1.0 - cos) / 2.0 / a0,
            a1: -2.0 * cos / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    /// Runs the filter from rest (transposed direct form II).
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let (mut z1, mut z2) = (0.0, 0.0);
        x.iter()
            .map(|&xi| {
                let y = self.b0 * xi + z1;
                z1 = self.b1 * xi - self.a1 * y + z2;
                z2 = self.b2 * xi - self.a2 * y;
                y
            })
            .collect()
    }
}

pub fn lowpass_resonant(x: &[f64], f_cut: f64, q: f64, sample_rate: u32) -> Vec<f64> {
    ResonantLowpass::new(f_cut, q, sample_rate as f64).process(x)
}

/// Whether the gater is open at time `t`.
///
/// Open iff `sin(2 pi f t) >= 0`; exact zero crossings count as open so the
/// gate is idempotent.
pub fn gate_open(f_gate: f64, t: f64) -> bool {
    (TAU * f_gate * t).sin() >= 0.0
}

pub fn gate(x: &[f64], f_gate: f64, sample_rate: u32) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &s)| if gate_open(f_gate, i as f64 / sample_rate as f64) { s } else { 0.0 })
        .collect()
}

/// Everything up to and including the gater, before clipping.
pub fn render_unclipped(patch: &Patch, cfg: &RenderConfig) -> Vec<f64> {
    let parts: Vec<Vec<f64>> = OSC_ORDER
        .iter()
        .map(|&w| {
            render_oscillator(
                w,
                patch.get(ParamId::Freq(w)),
                patch.get(ParamId::ModFreq(w)),
                patch.get(ParamId::Amp(w)),
                patch.get(ParamId::ModAmp(w)),
                cfg,
            )
        })
        .collect();
    let mut y = sum_oscillators(&parts, cfg.mix_norm);

    let env = Adsr {
        attack: patch.get(ParamId::Attack),
        decay: patch.get(ParamId::Decay),
        sustain: patch.get(ParamId::Sustain),
        release: patch.get(ParamId::Release),
    };
    for (i, s) in y.iter_mut().enumerate() {
        *s *= env.gain(cfg.note_off_time, cfg.time(i));
    }

    let y = lowpass_resonant(&y, patch.get(ParamId::Cutoff), patch.get(ParamId::Resonance), cfg.sample_rate);
    gate(&y, patch.get(ParamId::GateFreq), cfg.sample_rate)
}

/// Renders a patch to a clip with every sample in `[-1, 1]`.
pub fn render_patch(patch: &Patch, cfg: &RenderConfig) -> AudioBuffer {
    let samples = render_unclipped(patch, cfg).into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
    AudioBuffer::new(samples, cfg.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{sample_patch, PatchClasses, NUM_PARAMS};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn cfg() -> RenderConfig {
        RenderConfig::default()
    }

    #[test]
    fn waveform_samples() {
        assert_eq!(osc_wave(Waveform::Sin, 0.0, 1), 0.0);
        assert_eq!(osc_wave(Waveform::Sqr, PI / 2.0, 1), 1.0);
        assert_eq!(osc_wave(Waveform::Sqr, 3.0 * PI / 2.0, 1), -1.0);
        assert!((osc_wave(Waveform::Saw, PI / 2.0, 1) - (0.5 + 1.0 / PI)).abs() < 1e-15);
        assert!(matches!(osc_wave_named("noise", 0.0, 1), Err(SynthError::UnknownWaveform(_))));
    }

    #[test]
    fn series_matches_direct_sum() {
        for &a in &[0.3, 1.7, 2.9, 4.4, 6.0] {
            for &(w, p) in &[(Waveform::Saw, 1), (Waveform::Tri, 2)] {
                let direct: f64 =
                    (1..=40).map(|n| (-1f64).powi(n) * (n as f64 * a).sin() / (n as f64).powi(p)).sum::<f64>();
                let expected = 0.5 - direct / PI;
                assert!((osc_wave(w, a, 40) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oscillator_b_zero_is_pure_carrier() {
        let c = cfg();
        let y = render_oscillator(Waveform::Sin, 440.0, 7.0, 0.8, 0.0, &c);
        for (i, &s) in y.iter().enumerate().step_by(97) {
            let t = i as f64 / 16384.0;
            assert!((s - 0.8 * (TAU * 440.0 * t).sin()).abs() < 1e-9);
        }
        assert!(render_oscillator(Waveform::Saw, 440.0, 3.0, 0.0, 100.0, &c).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn oscillator_sum_scaling() {
        let c = cfg();
        let sine = render_oscillator(Waveform::Sin, 523.0, 1.0, 1.0, 0.0, &c);
        let four = vec![sine.clone(), sine.clone(), sine.clone(), sine.clone()];
        let mixed = sum_oscillators(&four, 0.25);
        assert!(mixed.iter().zip(&sine).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(mixed.iter().all(|s| s.abs() <= 1.0 + 1e-12));
        assert!(sum_oscillators(&four, 0.0).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn envelope_stage_boundaries() {
        let (a, d, s, r, off) = (0.1, 0.2, 0.5, 0.2, 0.5);
        assert_eq!(adsr_envelope(a, d, s, r, off, 0.0), 0.0);
        assert!((adsr_envelope(a, d, s, r, off, 0.1) - 1.0).abs() < 1e-12);
        assert!((adsr_envelope(a, d, s, r, off, 0.05) - 0.5).abs() < 1e-12);
        assert!((adsr_envelope(a, d, s, r, off, 0.2) - 0.75).abs() < 1e-12);
        assert!((adsr_envelope(a, d, s, r, off, 0.4) - 0.5).abs() < 1e-12);
        assert!((adsr_envelope(a, d, s, r, off, 0.6) - 0.25).abs() < 1e-12);
        assert_eq!(adsr_envelope(a, d, s, r, off, 0.75), 0.0);
    }

    #[test]
    fn envelope_release_from_truncated_attack() {
        // key released half way through the attack
        let g_off = adsr_envelope(0.8, 0.1, 0.3, 0.4, 0.4, 0.4);
        assert!((g_off - 0.5).abs() < 1e-12);
        assert!((adsr_envelope(0.8, 0.1, 0.3, 0.4, 0.4, 0.6) - 0.25).abs() < 1e-12);
    }

    fn band_energy(x: &[f64], lo_hz: f64, hi_hz: f64) -> f64 {
        let n = x.len();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let hz_per_bin = 16384.0 / n as f64;
        buf[..n / 2]
            .iter()
            .enumerate()
            .filter(|(k, _)| {
                let f = *k as f64 * hz_per_bin;
                f >= lo_hz && f < hi_hz
            })
            .map(|(_, c)| c.norm_sqr())
            .sum()
    }

    #[test]
    fn lowpass_attenuates_above_twice_cutoff() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise: Vec<f64> = (0..16384).map(|_| rng.random_range(-1.0..1.0)).collect();
        for &(fc, q) in &[(1000.0, 0.707), (2000.0, 1.0), (500.0, 2.0)] {
            let y = lowpass_resonant(&noise, fc, q, 16384);
            let width_in = band_energy(&noise, 0.0, fc / 2.0) / (fc / 2.0);
            let width_pass = band_energy(&y, 0.0, fc / 2.0) / (fc / 2.0);
            let stop_in = band_energy(&noise, 2.0 * fc, 8192.0) / (8192.0 - 2.0 * fc);
            let stop_out = band_energy(&y, 2.0 * fc, 8192.0) / (8192.0 - 2.0 * fc);
            let pass_gain = width_pass / width_in;
            let stop_gain = stop_out / stop_in;
            let db = 10.0 * (stop_gain / pass_gain).log10();
            assert!(db <= -12.0, "fc={fc} q={q}: {db:.1} dB");
        }
    }

    #[test]
    fn lowpass_dc_gain_is_one() {
        let y = lowpass_resonant(&vec![1.0; 16384], 300.0, 3.0, 16384);
        assert!((y[16383] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn resonance_boosts_cutoff_frequency() {
        let c = cfg();
        let x = render_oscillator(Waveform::Sin, 1000.0, 1.0, 1.0, 0.0, &c);
        let rms = |q: f64| {
            let y = lowpass_resonant(&x, 1000.0, q, 16384);
            (y[8192..].iter().map(|v| v * v).sum::<f64>() / 8192.0).sqrt()
        };
        assert!(rms(10.0) > rms(0.5));
    }

    #[test]
    fn gate_halves() {
        let y = gate(&vec![1.0; 16384], 1.0, 16384);
        assert!(y[..8192].iter().all(|&s| s == 1.0));
        assert!(y[8193..].iter().all(|&s| s == 0.0));
        for &f in &[1.0, 2.0, 5.0, 13.0, 30.0] {
            let y = gate(&vec![0.7; 16384], f, 16384);
            let zeros = y.iter().filter(|&&s| s == 0.0).count() as f64 / 16384.0;
            assert!((zeros - 0.5).abs() < 0.01, "f={f}: {zeros}");
            assert!(y.iter().all(|&s| s == 0.0 || s == 0.7));
        }
    }

    #[test]
    fn patch_render_bit_reproducible() {
        let p = sample_patch(&mut ChaCha8Rng::seed_from_u64(3)).dequantize();
        let a = render_patch(&p, &cfg());
        let b = render_patch(&p, &cfg());
        assert_eq!(a.len(), 16384);
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn quiet_patch_stays_quiet() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut pc = sample_patch(&mut rng);
            for w in OSC_ORDER {
                pc.set(ParamId::Amp(w), 0).unwrap();
            }
            let y = render_unclipped(&pc.dequantize(), &cfg());
            let peak = y.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            assert!(peak <= 0.01, "peak {peak} for {pc}");
        }
    }

    #[test]
    fn render_homogeneous_in_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let pc = sample_patch(&mut rng);
            let base = pc.dequantize();
            let mut scaled = base;
            let c = 0.37;
            for w in OSC_ORDER {
                scaled.set(ParamId::Amp(w), c * base.get(ParamId::Amp(w)));
            }
            let y0 = render_unclipped(&base, &cfg());
            let y1 = render_unclipped(&scaled, &cfg());
            let scale = y0.iter().fold(1e-12f64, |m, s| m.max(s.abs()));
            for (a, b) in y0.iter().zip(&y1) {
                assert!((c * a - b).abs() <= 1e-9 * scale);
            }
        }
    }

    proptest! {
        #[test]
        fn envelope_in_unit_range(
            a in 0.001f64..1.0, d in 0.001f64..1.0, s in 0.001f64..1.0, r in 0.001f64..1.0,
            off in 0.01f64..1.0, t in 0.0f64..1.0,
        ) {
            let g = adsr_envelope(a, d, s, r, off, t);
            prop_assert!((0.0..=1.0).contains(&g));
        }

        #[test]
        fn saw_is_two_pi_periodic(a in -20.0f64..20.0, n in 1usize..64) {
            let x = osc_wave(Waveform::Saw, a, n);
            let y = osc_wave(Waveform::Saw, a + TAU, n);
            prop_assert!((x - y).abs() < 1e-12);
        }

        #[test]
        fn gate_idempotent(f in 0.5f64..30.0, seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..2048).map(|_| rng.random_range(-1.0..1.0)).collect();
            let once = gate(&x, f, 16384);
            prop_assert_eq!(gate(&once, f, 16384), once);
        }

        #[test]
        fn rendered_clips_stay_in_range(classes in prop::array::uniform23(0u8..16)) {
            let p = PatchClasses::new(classes).unwrap().dequantize();
            let y = render_patch(&p, &cfg());
            prop_assert_eq!(y.len(), 16384);
            prop_assert!(y.samples.iter().all(|s| (-1.0..=1.0).contains(s)));
            prop_assert_eq!(classes.len(), NUM_PARAMS);
        }
    }
}
