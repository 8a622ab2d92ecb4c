//! Evaluation measures: rank-based parameter accuracy and spectral
//! reconstruction distances.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::Spectrogram;
use crate::params::{ParamId, PatchClasses, NUM_CLASSES, NUM_PARAMS, OSC_ORDER, PARAMS};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input")]
    Empty,
    #[error("k must be in 1..=16, got {0}")]
    BadK(usize),
    #[error("class {0} out of range")]
    BadClass(usize),
}

/// How a true class that ties with other classes is ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TieBreak {
    /// Only strictly greater scores count against the true class.
    Optimistic,
    /// The true class lands uniformly at random inside its tie group. The
    /// draw for instance `i` uses stream `i` of a ChaCha8 generator seeded
    /// with `seed`, so results do not depend on evaluation order.
    Random { seed: u64 },
}

impl Default for TieBreak {
    fn default() -> Self {
        TieBreak::Random { seed: 0 }
    }
}

fn tie_offset(tie: TieBreak, instance: usize, tied: usize) -> usize {
    match tie {
        TieBreak::Optimistic => 0,
        TieBreak::Random { .. } if tied <= 1 => 0,
        TieBreak::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(instance as u64);
            rng.random_range(0..tied)
        }
    }
}

/// Zero-based rank of `true_class` among `scores` sorted descending.
pub fn rank_of(scores: &[f64; NUM_CLASSES], true_class: usize, tie: TieBreak, instance: usize) -> usize {
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let target = scores[true_class];
    let first = order.iter().position(|&i| scores[i] == target).expect("true class is present");
    let tied = order[first..].iter().take_while(|&&i| scores[i] == target).count();
    first + tie_offset(tie, instance, tied)
}

fn check(scores: &[[f64; NUM_CLASSES]], truth: &[usize]) -> Result<(), MetricError> {
    if scores.len() != truth.len() {
        return Err(MetricError::Shape(format!("{} score rows vs {} labels", scores.len(), truth.len())));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    match truth.iter().find(|&&c| c >= NUM_CLASSES) {
        Some(&c) => Err(MetricError::BadClass(c)),
        None => Ok(()),
    }
}

pub fn ranks(scores: &[[f64; NUM_CLASSES]], truth: &[usize], tie: TieBreak) -> Result<Vec<usize>, MetricError> {
    check(scores, truth)?;
    Ok(scores.iter().zip(truth).enumerate().map(|(i, (s, &t))| rank_of(s, t, tie, i)).collect())
}

/// `100 (1 - mean(r / 15))`.
pub fn mpr_from_ranks(ranks: &[usize]) -> f64 {
    let total: usize = ranks.iter().sum();
    100.0 * (1.0 - total as f64 / ((NUM_CLASSES - 1) * ranks.len()) as f64)
}

/// Mean percentile rank of the true classes.
pub fn mpr(scores: &[[f64; NUM_CLASSES]], truth: &[usize], tie: TieBreak) -> Result<f64, MetricError> {
    Ok(mpr_from_ranks(&ranks(scores, truth, tie)?))
}

pub fn topk_from_ranks(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// Fraction of instances whose true class is among the `k` best scores.
pub fn topk_accuracy(scores: &[[f64; NUM_CLASSES]], truth: &[usize], k: usize, tie: TieBreak) -> Result<f64, MetricError> {
    if !(1..=NUM_CLASSES).contains(&k) {
        return Err(MetricError::BadK(k));
    }
    Ok(topk_from_ranks(&ranks(scores, truth, tie)?, k))
}

/// Highest-scoring class, lowest index on ties.
pub fn argmax_class(scores: &[f64; NUM_CLASSES]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn mae_classes(pred: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::Shape(format!("{} predictions vs {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= NUM_CLASSES) {
        return Err(MetricError::BadClass(c));
    }
    let total: usize = pred.iter().zip(truth).map(|(&p, &t)| p.abs_diff(t)).sum();
    Ok(total as f64 / pred.len() as f64)
}

/// Frobenius norm of `a - b`.
pub fn frobenius_delta(a: &Spectrogram, b: &Spectrogram) -> Result<f64, MetricError> {
    if (a.bins(), a.frames()) != (b.bins(), b.frames()) {
        return Err(MetricError::Shape(format!(
            "{}x{} vs {}x{}",
            a.bins(),
            a.frames(),
            b.bins(),
            b.frames()
        )));
    }
    let ss: f64 = a.as_frame_major().iter().zip(b.as_frame_major()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(ss.sqrt())
}

/// Sample Pearson correlation; `None` when either side has zero variance.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<Option<f64>, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::Shape(format!("{} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(MetricError::Empty);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// PCC of two spectrograms flattened by row (one row per frequency bin).
pub fn pcc_spectrogram(a: &Spectrogram, b: &Spectrogram) -> Result<Option<f64>, MetricError> {
    if (a.bins(), a.frames()) != (b.bins(), b.frames()) {
        return Err(MetricError::Shape("spectrogram extents differ".into()));
    }
    pcc(&a.flatten_rows(), &b.flatten_rows())
}

/// Median, taking the lower middle element for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Filter,
    Notes,
    AmplitudeLFO,
    FrequencyLFO,
    OscillatorsAmplitude,
    AmplitudeADSR,
    All,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Filter,
        ParamGroup::Notes,
        ParamGroup::AmplitudeLFO,
        ParamGroup::FrequencyLFO,
        ParamGroup::OscillatorsAmplitude,
        ParamGroup::AmplitudeADSR,
        ParamGroup::All,
    ];

    pub fn members(self) -> Vec<ParamId> {
        let per_osc = |f: fn(crate::synth::Waveform) -> ParamId| OSC_ORDER.iter().map(|&w| f(w)).collect();
        match self {
            ParamGroup::Filter => vec![ParamId::Cutoff, ParamId::Resonance],
            ParamGroup::Notes => per_osc(ParamId::Freq),
            ParamGroup::AmplitudeLFO => per_osc(ParamId::ModAmp),
            ParamGroup::FrequencyLFO => per_osc(ParamId::ModFreq),
            ParamGroup::OscillatorsAmplitude => per_osc(ParamId::Amp),
            ParamGroup::AmplitudeADSR => vec![ParamId::Attack, ParamId::Decay, ParamId::Sustain, ParamId::Release],
            ParamGroup::All => PARAMS.iter().map(|p| p.id).collect(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Filter => "Filter",
            ParamGroup::Notes => "Notes",
            ParamGroup::AmplitudeLFO => "AmplitudeLFO",
            ParamGroup::FrequencyLFO => "FrequencyLFO",
            ParamGroup::OscillatorsAmplitude => "OscillatorsAmplitude",
            ParamGroup::AmplitudeADSR => "AmplitudeADSR",
            ParamGroup::All => "All",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown parameter group '{s}'"))
    }
}

/// Rank-based scores of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamScore {
    pub param: String,
    pub mpr: f64,
    /// Top-k accuracy for k = 1..=5.
    pub topk: [f64; 5],
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group: ParamGroup,
    pub mpr: f64,
    pub topk: [f64; 5],
    pub mae: f64,
}

/// Mean and median of a spectral measure over instances. Degenerate
/// correlations are counted but left out of the statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
    pub degenerate: usize,
}

impl Summary {
    pub fn from_values(values: &[Option<f64>]) -> Summary {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        Summary {
            mean: mean(&defined).unwrap_or(f64::NAN),
            median: median(&defined).unwrap_or(f64::NAN),
            count: defined.len(),
            degenerate: values.len() - defined.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub frobenius_stft: Summary,
    pub pcc_stft: Summary,
    pub pcc_ft: Summary,
}

/// Per-instance spectral comparison of an input and its reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub frobenius_stft: f64,
    pub pcc_stft: Option<f64>,
    pub pcc_ft: Option<f64>,
}

impl PairMetrics {
    pub fn compute(
        stft_in: &Spectrogram,
        stft_out: &Spectrogram,
        ft_in: &[f64],
        ft_out: &[f64],
    ) -> Result<PairMetrics, MetricError> {
        Ok(PairMetrics {
            frobenius_stft: frobenius_delta(stft_in, stft_out)?,
            pcc_stft: pcc_spectrogram(stft_in, stft_out)?,
            pcc_ft: pcc(ft_in, ft_out)?,
        })
    }
}

impl SpectralReport {
    pub fn from_pairs(pairs: &[PairMetrics]) -> SpectralReport {
        let fro: Vec<Option<f64>> = pairs.iter().map(|p| Some(p.frobenius_stft)).collect();
        let stft: Vec<Option<f64>> = pairs.iter().map(|p| p.pcc_stft).collect();
        let ft: Vec<Option<f64>> = pairs.iter().map(|p| p.pcc_ft).collect();
        SpectralReport {
            frobenius_stft: Summary::from_values(&fro),
            pcc_stft: Summary::from_values(&stft),
            pcc_ft: Summary::from_values(&ft),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub instances: usize,
    pub params: Vec<ParamScore>,
    pub groups: Vec<GroupScore>,
    pub spectral: Option<SpectralReport>,
}

/// Splits a 368-score supervector into its 23 blocks of 16.
pub fn blocks(scores: &[f64]) -> Result<Vec<[f64; NUM_CLASSES]>, MetricError> {
    if scores.len() != NUM_PARAMS * NUM_CLASSES {
        return Err(MetricError::Shape(format!("{} scores, expected {}", scores.len(), NUM_PARAMS * NUM_CLASSES)));
    }
    Ok(scores.chunks_exact(NUM_CLASSES).map(|c| c.try_into().expect("chunk of 16")).collect())
}

/// Scores every parameter from raw network outputs against the true
/// patches. Instance `i` of parameter `p` draws tie breaks from stream
/// `i * 23 + p`.
pub fn score_params(scores: &[Vec<f64>], truth: &[PatchClasses], tie: TieBreak) -> Result<Vec<ParamScore>, MetricError> {
    if scores.len() != truth.len() {
        return Err(MetricError::Shape(format!("{} score vectors vs {} patches", scores.len(), truth.len())));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let split: Vec<Vec<[f64; NUM_CLASSES]>> = scores.iter().map(|s| blocks(s)).collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(NUM_PARAMS);
    for p in PARAMS.iter() {
        let j = p.id.index();
        let true_c: Vec<usize> = truth.iter().map(|t| t.get(p.id)).collect();
        let r: Vec<usize> = split
            .iter()
            .zip(&true_c)
            .enumerate()
            .map(|(i, (b, &t))| rank_of(&b[j], t, tie, i * NUM_PARAMS + j))
            .collect();
        let pred: Vec<usize> = split.iter().map(|b| argmax_class(&b[j])).collect();
        let mut topk = [0.0; 5];
        for (k, slot) in topk.iter_mut().enumerate() {
            *slot = topk_from_ranks(&r, k + 1);
        }
        out.push(ParamScore { param: p.id.name(), mpr: mpr_from_ranks(&r), topk, mae: mae_classes(&pred, &true_c)? });
    }
    Ok(out)
}

/// Arithmetic means of member parameters, for every group.
pub fn group_scores(params: &[ParamScore]) -> Vec<GroupScore> {
    ParamGroup::ALL
        .into_iter()
        .map(|group| {
            let members: Vec<&ParamScore> = group.members().iter().map(|id| &params[id.index()]).collect();
            let n = members.len() as f64;
            let mut topk = [0.0; 5];
            for (k, slot) in topk.iter_mut().enumerate() {
                *slot = members.iter().map(|m| m.topk[k]).sum::<f64>() / n;
            }
            GroupScore {
                group,
                mpr: members.iter().map(|m| m.mpr).sum::<f64>() / n,
                topk,
                mae: members.iter().map(|m| m.mae).sum::<f64>() / n,
            }
        })
        .collect()
}

impl EvalReport {
    pub fn param(&self, id: ParamId) -> &ParamScore {
        &self.params[id.index()]
    }

    pub fn group(&self, g: ParamGroup) -> &GroupScore {
        self.groups.iter().find(|s| s.group == g).expect("every group is reported")
    }

    pub fn mean_mpr_over(&self, ids: &[ParamId]) -> f64 {
        ids.iter().map(|&id| self.param(id).mpr).sum::<f64>() / ids.len() as f64
    }

    /// Flat `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = format!("model = {}\ninstances = {}\n", self.model, self.instances);
        for p in &self.params {
            s += &format!("param.{}.mpr = {:.4}\n", p.param, p.mpr);
            for (k, v) in p.topk.iter().enumerate() {
                s += &format!("param.{}.top{} = {:.4}\n", p.param, k + 1, v);
            }
            s += &format!("param.{}.mae = {:.4}\n", p.param, p.mae);
        }
        for g in &self.groups {
            s += &format!("group.{}.mpr = {:.4}\n", g.group, g.mpr);
            for (k, v) in g.topk.iter().enumerate() {
                s += &format!("group.{}.top{} = {:.4}\n", g.group, k + 1, v);
            }
            s += &format!("group.{}.mae = {:.4}\n", g.group, g.mae);
        }
        if let Some(sp) = &self.spectral {
            for (name, m) in [("frobenius_stft", sp.frobenius_stft), ("pcc_stft", sp.pcc_stft), ("pcc_ft", sp.pcc_ft)] {
                s += &format!("{name}.mean = {:.6}\n{name}.median = {:.6}\n{name}.degenerate = {}\n", m.mean, m.median, m.degenerate);
            }
        }
        s
    }
}

/// Text table with one row per parameter and one MPR column per report.
pub fn mpr_table(reports: &[&EvalReport]) -> String {
    let mut s = format!("{:<10}", "param");
    for r in reports {
        s += &format!("{:>10}", r.model);
    }
    s.push('\n');
    for p in PARAMS.iter() {
        s += &format!("{:<10}", p.id.name());
        for r in reports {
            s += &format!("{:>10.2}", r.param(p.id).mpr);
        }
        s.push('\n');
    }
    s += &format!("{:<10}", "mean");
    for r in reports {
        s += &format!("{:>10.2}", r.group(ParamGroup::All).mpr);
    }
    s.push('\n');
    s
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22}{:>8}{:>8}{:>8}{:>8}", "", "MPR", "top-1", "top-5", "MAE")?;
        for p in &self.params {
            writeln!(f, "{:<22}{:>8.2}{:>8.3}{:>8.3}{:>8.3}", p.param, p.mpr, p.topk[0], p.topk[4], p.mae)?;
        }
        for g in &self.groups {
            writeln!(f, "{:<22}{:>8.2}{:>8.3}{:>8.3}{:>8.3}", format!("[{}]", g.group), g.mpr, g.topk[0], g.topk[4], g.mae)?;
        }
        if let Some(sp) = &self.spectral {
            writeln!(f, "F_delta STFT  mean {:.3}  median {:.3}", sp.frobenius_stft.mean, sp.frobenius_stft.median)?;
            writeln!(f, "PCC STFT      mean {:.4}  median {:.4}  degenerate {}", sp.pcc_stft.mean, sp.pcc_stft.median, sp.pcc_stft.degenerate)?;
            writeln!(f, "PCC FT        mean {:.4}  median {:.4}  degenerate {}", sp.pcc_ft.mean, sp.pcc_ft.median, sp.pcc_ft.degenerate)?;
        }
        write!(f, "instances {}", self.instances)
    }
}
