//! The 23 synthesizer parameters, their 16-level quantization and the
//! one-hot label supervector.
//!
//! Block `k` of a [`LabelVector`] always refers to `PARAMS[k]`; the order
//! below is frozen under [`PARAM_TABLE_VERSION`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::Waveform;

pub const NUM_PARAMS: usize = 23;
pub const NUM_CLASSES: usize = 16;
pub const LABEL_DIM: usize = NUM_PARAMS * NUM_CLASSES;

/// Bumped whenever the canonical order or any range changes.
pub const PARAM_TABLE_VERSION: u32 = 1;

/// Reference pitch for class 0 of every carrier frequency (A4).
pub const BASE_FREQ_HZ: f64 = 440.0;

/// Waveform order used for the per-oscillator parameter blocks.
pub const OSC_ORDER: [Waveform; 4] = [Waveform::Saw, Waveform::Sin, Waveform::Sqr, Waveform::Tri];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("class index {0} out of range 0..=15")]
    ClassOutOfRange(usize),
    #[error("expected {expected} values, got {actual}")]
    WrongLength { expected: usize, actual: usize },
    #[error("label block {block} is not one-hot")]
    NotOneHot { block: usize },
    #[error("unknown parameter name '{0}'")]
    UnknownParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamId {
    Attack,
    Decay,
    Sustain,
    Release,
    GateFreq,
    Cutoff,
    Resonance,
    Amp(Waveform),
    ModAmp(Waveform),
    ModFreq(Waveform),
    Freq(Waveform),
}

impl ParamId {
    /// Position of this parameter in the canonical order.
    pub fn index(self) -> usize {
        let osc = |w: Waveform, j: usize| {
            let wi = OSC_ORDER.iter().position(|&o| o == w).expect("all waveforms are in OSC_ORDER");
            7 + 4 * wi + j
        };
        match self {
            ParamId::Attack => 0,
            ParamId::Decay => 1,
            ParamId::Sustain => 2,
            ParamId::Release => 3,
            ParamId::GateFreq => 4,
            ParamId::Cutoff => 5,
            ParamId::Resonance => 6,
            ParamId::Amp(w) => osc(w, 0),
            ParamId::ModAmp(w) => osc(w, 1),
            ParamId::ModFreq(w) => osc(w, 2),
            ParamId::Freq(w) => osc(w, 3),
        }
    }

    pub fn name(self) -> String {
        match self {
            ParamId::Attack => "a".into(),
            ParamId::Decay => "d".into(),
            ParamId::Sustain => "s".into(),
            ParamId::Release => "r".into(),
            ParamId::GateFreq => "f_gate".into(),
            ParamId::Cutoff => "f_cut".into(),
            ParamId::Resonance => "q".into(),
            ParamId::Amp(w) => format!("A_{w}"),
            ParamId::ModAmp(w) => format!("B_{w}"),
            ParamId::ModFreq(w) => format!("v_{w}"),
            ParamId::Freq(w) => format!("f_{w}"),
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ParamId {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PARAMS
            .iter()
            .map(|p| p.id)
            .find(|id| id.name() == s)
            .ok_or_else(|| ParamError::UnknownParam(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    /// `2^(k/12) * 440 Hz`; `lo`/`hi` are informational only.
    Semitone,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamSpec {
    pub id: ParamId,
    pub lo: f64,
    pub hi: f64,
    pub scale: Scale,
    pub unit: &'static str,
}

impl ParamSpec {
    const fn linear(id: ParamId, lo: f64, hi: f64, unit: &'static str) -> Self {
        ParamSpec { id, lo, hi, scale: Scale::Linear, unit }
    }

    const fn semitone(id: ParamId) -> Self {
        // hi = 2^(15/12) * 440
        ParamSpec { id, lo: BASE_FREQ_HZ, hi: 1046.502_261_202_394_6, scale: Scale::Semitone, unit: "Hz" }
    }

    /// Parameter value represented by class `k`.
    pub fn dequantize(&self, k: usize) -> Result<f64, ParamError> {
        if k >= NUM_CLASSES {
            return Err(ParamError::ClassOutOfRange(k));
        }
        Ok(match self.scale {
            Scale::Linear => self.lo + k as f64 * (self.hi - self.lo) / (NUM_CLASSES - 1) as f64,
            Scale::Semitone => 2f64.powf(k as f64 / 12.0) * BASE_FREQ_HZ,
        })
    }
}

/// Free function form of [`ParamSpec::dequantize`].
pub fn dequantize(spec: &ParamSpec, k: usize) -> Result<f64, ParamError> {
    spec.dequantize(k)
}

macro_rules! osc_block {
    ($w:expr) => {
        [
            ParamSpec::linear(ParamId::Amp($w), 0.001, 1.0, "-"),
            ParamSpec::linear(ParamId::ModAmp($w), 0.0, 1500.0, "rad"),
            ParamSpec::linear(ParamId::ModFreq($w), 1.0, 30.0, "Hz"),
            ParamSpec::semitone(ParamId::Freq($w)),
        ]
    };
}

const fn build_table() -> [ParamSpec; NUM_PARAMS] {
    let head = [
        ParamSpec::linear(ParamId::Attack, 0.001, 1.0, "s"),
        ParamSpec::linear(ParamId::Decay, 0.001, 1.0, "s"),
        ParamSpec::linear(ParamId::Sustain, 0.001, 1.0, "-"),
        ParamSpec::linear(ParamId::Release, 0.001, 1.0, "s"),
        ParamSpec::linear(ParamId::GateFreq, 0.5, 30.0, "Hz"),
        ParamSpec::linear(ParamId::Cutoff, 200.0, 4000.0, "Hz"),
        ParamSpec::linear(ParamId::Resonance, 0.01, 10.0, "-"),
    ];
    let blocks = [
        osc_block!(Waveform::Saw),
        osc_block!(Waveform::Sin),
        osc_block!(Waveform::Sqr),
        osc_block!(Waveform::Tri),
    ];
    let mut out = [head[0]; NUM_PARAMS];
    let mut i = 0;
    while i < head.len() {
        out[i] = head[i];
        i += 1;
    }
    let mut b = 0;
    while b < 4 {
        let mut j = 0;
        while j < 4 {
            out[7 + 4 * b + j] = blocks[b][j];
            j += 1;
        }
        b += 1;
    }
    out
}

/// The canonical parameter table.
pub static PARAMS: [ParamSpec; NUM_PARAMS] = build_table();

pub fn spec(id: ParamId) -> &'static ParamSpec {
    &PARAMS[id.index()]
}

/// Quantized synthesizer configuration, one class per parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchClasses([u8; NUM_PARAMS]);

impl PatchClasses {
    pub fn new(classes: [u8; NUM_PARAMS]) -> Result<Self, ParamError> {
        if let Some(&bad) = classes.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(ParamError::ClassOutOfRange(bad as usize));
        }
        Ok(PatchClasses(classes))
    }

    pub fn from_slice(classes: &[usize]) -> Result<Self, ParamError> {
        if classes.len() != NUM_PARAMS {
            return Err(ParamError::WrongLength { expected: NUM_PARAMS, actual: classes.len() });
        }
        let mut out = [0u8; NUM_PARAMS];
        for (o, &c) in out.iter_mut().zip(classes) {
            if c >= NUM_CLASSES {
                return Err(ParamError::ClassOutOfRange(c));
            }
            *o = c as u8;
        }
        Ok(PatchClasses(out))
    }

    pub fn classes(&self) -> &[u8; NUM_PARAMS] {
        &self.0
    }

    pub fn get(&self, id: ParamId) -> usize {
        self.0[id.index()] as usize
    }

    pub fn set(&mut self, id: ParamId, class: usize) -> Result<(), ParamError> {
        if class >= NUM_CLASSES {
            return Err(ParamError::ClassOutOfRange(class));
        }
        self.0[id.index()] = class as u8;
        Ok(())
    }

    /// Concrete parameter values for this configuration.
    pub fn dequantize(&self) -> Patch {
        let mut values = [0.0; NUM_PARAMS];
        for ((v, spec), &k) in values.iter_mut().zip(PARAMS.iter()).zip(self.0.iter()) {
            *v = spec.dequantize(k as usize).expect("classes validated on construction");
        }
        Patch { values }
    }

    pub fn encode(&self) -> LabelVector {
        encode(self)
    }
}

impl fmt::Display for PatchClasses {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for PatchClasses {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parsed: Vec<usize> = s
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| ParamError::UnknownParam(t.to_string())))
            .collect::<Result<_, _>>()?;
        Self::from_slice(&parsed)
    }
}

/// Concrete parameter values in parameter units, canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub values: [f64; NUM_PARAMS],
}

impl Patch {
    pub fn get(&self, id: ParamId) -> f64 {
        self.values[id.index()]
    }

    pub fn set(&mut self, id: ParamId, value: f64) {
        self.values[id.index()] = value;
    }
}

/// Draws every class i.i.d. uniform over `0..16`.
pub fn sample_patch<R: Rng + ?Sized>(rng: &mut R) -> PatchClasses {
    let mut classes = [0u8; NUM_PARAMS];
    for c in classes.iter_mut() {
        *c = rng.random_range(0..NUM_CLASSES as u8);
    }
    PatchClasses(classes)
}

/// Concatenation of 23 one-hot blocks of 16.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct LabelVector([bool; LABEL_DIM]);

impl fmt::Debug for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let set: Vec<usize> = (0..LABEL_DIM).filter(|&i| self.0[i]).collect();
        f.debug_tuple("LabelVector").field(&set).finish()
    }
}

/// Packed size of a label on disk (one bit per entry, LSB first).
pub const LABEL_BYTES: usize = LABEL_DIM.div_ceil(8);

impl LabelVector {
    pub fn bits(&self) -> &[bool; LABEL_DIM] {
        &self.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Checks one-hot structure and recovers the classes.
    pub fn decode(&self) -> Result<PatchClasses, ParamError> {
        let mut classes = [0u8; NUM_PARAMS];
        for (block, c) in classes.iter_mut().enumerate() {
            let bits = &self.0[block * NUM_CLASSES..(block + 1) * NUM_CLASSES];
            let mut ones = bits.iter().enumerate().filter(|(_, &b)| b);
            match (ones.next(), ones.next()) {
                (Some((k, _)), None) => *c = k as u8,
                _ => return Err(ParamError::NotOneHot { block }),
            }
        }
        Ok(PatchClasses(classes))
    }

    pub fn to_bytes(&self) -> [u8; LABEL_BYTES] {
        let mut out = [0u8; LABEL_BYTES];
        for (i, &b) in self.0.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    /// Unpacks a label; the result is not validated, call [`decode`](Self::decode) for that.
    pub fn from_bytes(bytes: &[u8; LABEL_BYTES]) -> Self {
        let mut bits = [false; LABEL_DIM];
        for (i, b) in bits.iter_mut().enumerate() {
            *b = bytes[i / 8] >> (i % 8) & 1 == 1;
        }
        LabelVector(bits)
    }
}

pub fn encode(pc: &PatchClasses) -> LabelVector {
    let mut bits = [false; LABEL_DIM];
    for (block, &c) in pc.0.iter().enumerate() {
        bits[block * NUM_CLASSES + c as usize] = true;
    }
    LabelVector(bits)
}

/// Per-block argmax readout of a 368-score vector. Ties go to the lowest class.
pub fn decode_scores(scores: &[f64]) -> Result<PatchClasses, ParamError> {
    if scores.len() != LABEL_DIM {
        return Err(ParamError::WrongLength { expected: LABEL_DIM, actual: scores.len() });
    }
    let mut classes = [0u8; NUM_PARAMS];
    for (c, block) in classes.iter_mut().zip(scores.chunks_exact(NUM_CLASSES)) {
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if block[k] > block[best] {
                best = k;
            }
        }
        *c = best as u8;
    }
    Ok(PatchClasses(classes))
}

/// Machine-readable form of the parameter table, shipped with every dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTableManifest {
    pub version: u32,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub order: usize,
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub scale: Scale,
    pub unit: String,
}

impl ParamTableManifest {
    pub fn current() -> Self {
        let params = PARAMS
            .iter()
            .enumerate()
            .map(|(order, p)| ParamEntry {
                order,
                name: p.id.name(),
                lo: p.lo,
                hi: p.hi,
                scale: p.scale,
                unit: p.unit.to_string(),
            })
            .collect();
        ParamTableManifest { version: PARAM_TABLE_VERSION, params }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_shape() {
        assert_eq!(PARAMS.len(), 23);
        let semitone = PARAMS.iter().filter(|p| p.scale == Scale::Semitone).count();
        assert_eq!(semitone, 4);
        for (i, p) in PARAMS.iter().enumerate() {
            assert_eq!(p.id.index(), i, "{}", p.id);
            assert!(p.lo < p.hi);
            assert_eq!(p.id.name().parse::<ParamId>().unwrap(), p.id);
        }
        assert_eq!(ParamId::Cutoff.index(), 5);
        assert_eq!(ParamId::Amp(Waveform::Saw).index(), 7);
        assert_eq!(ParamId::Freq(Waveform::Sin).index(), 14);
        assert_eq!(ParamId::Freq(Waveform::Tri).index(), 22);
    }

    #[test]
    fn dequantize_examples() {
        let f_sin = spec(ParamId::Freq(Waveform::Sin));
        assert_eq!(f_sin.dequantize(0).unwrap(), 440.0);
        let top = f_sin.dequantize(15).unwrap();
        assert!((top - 2f64.powf(15.0 / 12.0) * 440.0).abs() < 1e-12);
        assert!((top - 1046.502).abs() < 1e-3);
        assert!((f_sin.hi - top).abs() < 1e-9);

        let a_saw = spec(ParamId::Amp(Waveform::Saw));
        assert_eq!(a_saw.dequantize(0).unwrap(), 0.001);
        assert!((a_saw.dequantize(15).unwrap() - 1.0).abs() < 1e-15);

        let f_cut = spec(ParamId::Cutoff);
        assert!((f_cut.dequantize(15).unwrap() - 4000.0).abs() < 1e-12);
        assert!((f_cut.dequantize(5).unwrap() - 1466.666_666_666_7).abs() < 1e-9);

        assert_eq!(f_cut.dequantize(16), Err(ParamError::ClassOutOfRange(16)));
    }

    #[test]
    fn dequantize_strictly_monotone() {
        for p in PARAMS.iter() {
            for k in 1..NUM_CLASSES {
                assert!(p.dequantize(k).unwrap() > p.dequantize(k - 1).unwrap(), "{}", p.id);
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let a = sample_patch(&mut ChaCha8Rng::seed_from_u64(7));
        let b = sample_patch(&mut ChaCha8Rng::seed_from_u64(7));
        let c = sample_patch(&mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sampling_is_uniform() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [[0usize; NUM_CLASSES]; NUM_PARAMS];
        for _ in 0..n {
            let pc = sample_patch(&mut rng);
            for (p, &c) in pc.classes().iter().enumerate() {
                counts[p][c as usize] += 1;
            }
        }
        // binomial(n, 1/16): 3 sigma band around n/16
        let p = 1.0 / 16.0;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let mut outside = 0;
        for row in counts.iter() {
            for &c in row.iter() {
                if (c as f64 - mean).abs() > 3.0 * sigma {
                    outside += 1;
                }
            }
        }
        // 368 cells; P(|z| > 3) = 0.0027 so one stray cell is plausible
        assert!(outside <= 2, "{outside} cells outside 3 sigma");
    }

    #[test]
    fn encode_all_zero() {
        let pc = PatchClasses::new([0; NUM_PARAMS]).unwrap();
        let label = encode(&pc);
        let set: Vec<usize> = (0..LABEL_DIM).filter(|&i| label.bits()[i]).collect();
        let expected: Vec<usize> = (0..NUM_PARAMS).map(|k| 16 * k).collect();
        assert_eq!(set, expected);
    }

    #[test]
    fn decode_scores_ties_and_peaks() {
        let mut scores = vec![0.5; LABEL_DIM];
        assert_eq!(decode_scores(&scores).unwrap().classes(), &[0; NUM_PARAMS]);
        scores[0..3].copy_from_slice(&[0.1, 0.9, 0.2]);
        assert_eq!(decode_scores(&scores).unwrap().get(ParamId::Attack), 1);
        assert!(matches!(decode_scores(&scores[..10]), Err(ParamError::WrongLength { .. })));
    }

    #[test]
    fn invalid_labels_rejected() {
        let mut bytes = [0u8; LABEL_BYTES];
        assert_eq!(LabelVector::from_bytes(&bytes).decode(), Err(ParamError::NotOneHot { block: 0 }));
        bytes = encode(&PatchClasses::new([3; NUM_PARAMS]).unwrap()).to_bytes();
        bytes[0] |= 1;
        assert_eq!(LabelVector::from_bytes(&bytes).decode(), Err(ParamError::NotOneHot { block: 0 }));
    }

    #[test]
    fn classes_parse_and_print() {
        let pc = sample_patch(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(pc.to_string().parse::<PatchClasses>().unwrap(), pc);
        assert!("1,2,3".parse::<PatchClasses>().is_err());
    }

    fn any_patch() -> impl Strategy<Value = PatchClasses> {
        prop::array::uniform23(0u8..16).prop_map(|c| PatchClasses::new(c).unwrap())
    }

    proptest! {
        #[test]
        fn label_roundtrip(pc in any_patch()) {
            let label = encode(&pc);
            prop_assert_eq!(label.count_ones(), NUM_PARAMS);
            prop_assert_eq!(label.decode().unwrap(), pc);
            prop_assert_eq!(decode_scores(&label.to_f64()).unwrap(), pc);
            prop_assert_eq!(LabelVector::from_bytes(&label.to_bytes()), label);
        }
    }
}
