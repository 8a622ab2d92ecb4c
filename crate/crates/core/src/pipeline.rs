//! End-to-end flows: training from a generated dataset, evaluation with
//! re-synthesis, single-clip inference and reconstruction.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, CheckpointError, DatasetBinding, LookupTable, NetworkCheckpoint, Predictor};
use crate::dataset::{
    pcm16_round_trip, read_all, record_spectrogram, DatasetError, DatasetManifest, DatasetReader, RecordKind,
};
use crate::features::{ft_mag, BowFeaturizer, FeatureError, Spectrogram, Stft};
use crate::metrics::{
    group_scores, score_params, EvalReport, MetricError, PairMetrics, SpectralReport, TieBreak,
};
use crate::neural::{
    build_model, train_with_progress, EpochRecord, Example, InputKind, ModelName, NeuralError, Tensor, TrainConfig,
};
use crate::params::{decode_scores, Patch, PatchClasses, LABEL_DIM};
use crate::synth::{render_patch, AudioBuffer};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("audio format: {0}")]
    Format(String),
    #[error("{0}")]
    Input(String),
}

/// Audio must match the rendering setup the checkpoint was trained for.
pub fn check_audio(audio: &AudioBuffer, binding: &DatasetBinding) -> Result<(), PipelineError> {
    if audio.sample_rate != binding.render.sample_rate {
        return Err(PipelineError::Format(format!(
            "sample rate {} Hz, expected {} Hz",
            audio.sample_rate, binding.render.sample_rate
        )));
    }
    if audio.len() != binding.render.num_samples() {
        return Err(PipelineError::Format(format!(
            "{} samples, expected {}",
            audio.len(),
            binding.render.num_samples()
        )));
    }
    Ok(())
}

/// Refuses data whose distribution differs from the training data.
pub fn check_manifest(binding: &DatasetBinding, manifest: &DatasetManifest) -> Result<(), PipelineError> {
    if binding.fingerprint != manifest.fingerprint {
        return Err(PipelineError::ManifestMismatch(format!(
            "checkpoint trained on fingerprint {}, data has {} (profile {} vs {})",
            &binding.fingerprint[..12.min(binding.fingerprint.len())],
            &manifest.fingerprint[..12.min(manifest.fingerprint.len())],
            binding.profile.as_str(),
            manifest.profile.as_str()
        )));
    }
    Ok(())
}

/// Raw log spectrogram with the checkpoint's STFT settings.
pub fn spectrogram_of(audio: &AudioBuffer, binding: &DatasetBinding) -> Result<Spectrogram, PipelineError> {
    Ok(Stft::new(binding.stft.clone()).logmag(&audio.samples)?)
}

/// Network input for one clip, in the model's declared representation.
pub fn front_end(net: &NetworkCheckpoint, binding: &DatasetBinding, audio: &AudioBuffer) -> Result<Vec<f64>, PipelineError> {
    match net.model.spec().input_kind {
        InputKind::RawAudio => Ok(audio.samples.clone()),
        InputKind::Spectrogram => {
            let s = spectrogram_of(audio, binding)?;
            Ok(s.as_frame_major().iter().map(|&v| binding.normalization.apply(v)).collect())
        }
        InputKind::Bow => {
            let f = net
                .featurizer
                .as_ref()
                .ok_or_else(|| PipelineError::Input("bag-of-words model without a featurizer".into()))?;
            Ok(f.encode(&spectrogram_of(audio, binding)?).probs)
        }
    }
}

const PREDICT_CHUNK: usize = 32;

/// 368 scores per clip.
pub fn predict_scores(ck: &Checkpoint, clips: &[AudioBuffer]) -> Result<Vec<Vec<f64>>, PipelineError> {
    for a in clips {
        check_audio(a, &ck.binding)?;
    }
    match &ck.predictor {
        Predictor::Lookup(table) => Ok(clips.iter().map(|a| lookup_scores(table, a)).collect()),
        Predictor::Network(net) => {
            let mut out = Vec::with_capacity(clips.len());
            for part in clips.chunks(PREDICT_CHUNK) {
                let inputs: Vec<Vec<f64>> =
                    part.par_iter().map(|a| front_end(net, &ck.binding, a)).collect::<Result<_, _>>()?;
                let mut shape = vec![part.len()];
                shape.extend_from_slice(&net.model.spec().input_shape);
                let x = Tensor::new(shape, inputs.concat())?;
                let y = net.model.predict(&x)?;
                out.extend(y.data().chunks_exact(LABEL_DIM).map(<[f64]>::to_vec));
            }
            Ok(out)
        }
    }
}

/// Known clips score their true patch; unknown ones get flat scores.
fn lookup_scores(table: &LookupTable, audio: &AudioBuffer) -> Vec<f64> {
    match table.get(audio) {
        Some(p) => p.encode().to_f64(),
        None => vec![0.5; LABEL_DIM],
    }
}

pub fn infer(ck: &Checkpoint, audio: &AudioBuffer) -> Result<PatchClasses, PipelineError> {
    let scores = predict_scores(ck, std::slice::from_ref(audio))?;
    Ok(decode_scores(&scores[0]).expect("model emits 368 scores"))
}

/// Renders a patch as datasets store it.
pub fn resynthesize(patch: &PatchClasses, binding: &DatasetBinding) -> AudioBuffer {
    render_patch(&patch.dequantize(), &binding.render).to_f32_precision()
}

pub fn compare(input: &AudioBuffer, output: &AudioBuffer, binding: &DatasetBinding) -> Result<PairMetrics, PipelineError> {
    let si = spectrogram_of(input, binding)?;
    let so = spectrogram_of(output, binding)?;
    Ok(PairMetrics::compute(&si, &so, &ft_mag(input), &ft_mag(output))?)
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub patch: PatchClasses,
    pub values: Patch,
    /// The re-rendered clip exactly as written to a 16-bit WAV.
    pub audio: AudioBuffer,
    pub metrics: PairMetrics,
}

/// Infers a patch, renders it and compares the result with the input.
pub fn reconstruct(ck: &Checkpoint, input: &AudioBuffer) -> Result<Reconstruction, PipelineError> {
    let patch = infer(ck, input)?;
    let audio = pcm16_round_trip(&resynthesize(&patch, &ck.binding));
    let metrics = compare(input, &audio, &ck.binding)?;
    Ok(Reconstruction { values: patch.dequantize(), patch, audio, metrics })
}

/// Test clips and their true patches, read from a dataset directory.
pub struct TestSet {
    pub manifest: DatasetManifest,
    pub clips: Vec<AudioBuffer>,
    pub truth: Vec<PatchClasses>,
}

impl TestSet {
    pub fn load(dir: &Path, limit: Option<usize>) -> Result<Self, PipelineError> {
        let manifest = DatasetManifest::load(dir)?;
        let raw = manifest
            .file(dir, RecordKind::Raw)
            .ok_or_else(|| PipelineError::Input("dataset has no raw audio file".into()))?;
        let sr = manifest.render.sample_rate;
        let mut clips = Vec::new();
        let mut truth = Vec::new();
        for rec in DatasetReader::open(&raw)?.take(limit.unwrap_or(usize::MAX)) {
            let rec = rec?;
            truth.push(rec.label.decode().expect("reader validates labels"));
            clips.push(AudioBuffer::new(rec.input.iter().map(|&v| v as f64).collect(), sr));
        }
        Ok(TestSet { manifest, clips, truth })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub tie: TieBreak,
    /// Re-render predictions and compute spectral measures.
    pub spectral: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { tie: TieBreak::default(), spectral: true }
    }
}

#[derive(Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub scores: Vec<Vec<f64>>,
    pub predicted: Vec<PatchClasses>,
    pub pairs: Vec<PairMetrics>,
}

pub fn evaluate(ck: &Checkpoint, test: &TestSet, opts: EvalOptions) -> Result<Evaluation, PipelineError> {
    check_manifest(&ck.binding, &test.manifest)?;
    let scores = predict_scores(ck, &test.clips)?;
    let params = score_params(&scores, &test.truth, opts.tie)?;
    let predicted: Vec<PatchClasses> = scores.iter().map(|s| decode_scores(s).expect("368 scores")).collect();
    let pairs: Vec<PairMetrics> = if opts.spectral {
        test.clips
            .par_iter()
            .zip(&predicted)
            .map(|(clip, p)| compare(clip, &resynthesize(p, &ck.binding), &ck.binding))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let report = EvalReport {
        model: ck.name(),
        instances: test.clips.len(),
        groups: group_scores(&params),
        params,
        spectral: opts.spectral.then(|| SpectralReport::from_pairs(&pairs)),
    };
    Ok(Evaluation { report, scores, predicted, pairs })
}

/// Lookup checkpoint holding the true patch of every clip in a dataset.
pub fn lookup_checkpoint(dir: &Path) -> Result<Checkpoint, PipelineError> {
    let test = TestSet::load(dir, None)?;
    let mut table = LookupTable::default();
    for (clip, p) in test.clips.iter().zip(&test.truth) {
        table.insert(clip, *p);
    }
    Ok(Checkpoint { binding: DatasetBinding::from_manifest(&test.manifest), predictor: Predictor::Lookup(table) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BowOptions {
    pub pca_dim: usize,
    pub k: usize,
    /// Spectrograms used for fitting PCA and the codebook.
    pub fit_examples: usize,
    pub max_iters: usize,
}

impl Default for BowOptions {
    fn default() -> Self {
        BowOptions { pca_dim: 64, k: 1000, fit_examples: 500, max_iters: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRequest {
    pub model: ModelName,
    pub width_scale: f64,
    pub config: TrainConfig,
    pub bow: BowOptions,
    pub limit: Option<usize>,
}

/// Loads the dataset in `dir` in the representation `model` consumes and
/// trains it. Bag-of-words models fit their featurizer on the data first.
pub fn train_from_dataset(
    dir: &Path,
    req: &TrainRequest,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint, PipelineError> {
    let manifest = DatasetManifest::load(dir)?;
    let binding = DatasetBinding::from_manifest(&manifest);
    let mut spec = build_model(req.model, req.width_scale)?;
    let kind = match spec.input_kind {
        InputKind::RawAudio => RecordKind::Raw,
        _ => RecordKind::Stft,
    };
    let path = manifest.file(dir, kind).ok_or_else(|| PipelineError::Input(format!("dataset lacks {kind:?} records")))?;
    let (_, mut records) = read_all(&path)?;
    if let Some(n) = req.limit {
        records.truncate(n);
    }

    let mut featurizer = None;
    let examples: Vec<Example> = match spec.input_kind {
        InputKind::RawAudio => records
            .into_iter()
            .map(|r| Example { target: label_targets(&r.label), input: r.input })
            .collect(),
        InputKind::Spectrogram => {
            let n = binding.normalization;
            records
                .into_iter()
                .map(|r| Example {
                    target: label_targets(&r.label),
                    input: r.input.iter().map(|&v| n.apply(v as f64) as f32).collect(),
                })
                .collect()
        }
        InputKind::Bow => {
            let specs: Vec<Spectrogram> = records.iter().take(req.bow.fit_examples).map(record_spectrogram).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(req.config.seed);
            let f = BowFeaturizer::fit(&specs, req.bow.pca_dim, req.bow.k, &mut rng, req.bow.max_iters)?;
            spec.input_shape = vec![f.codebook.k];
            let ex = records
                .par_iter()
                .map(|r| Example {
                    target: label_targets(&r.label),
                    input: f.encode(&record_spectrogram(r)).probs.iter().map(|&v| v as f32).collect(),
                })
                .collect();
            featurizer = Some(f);
            ex
        }
    };

    let out = train_with_progress(&examples, spec, &req.config, on_epoch)?;
    Ok(Checkpoint {
        binding,
        predictor: Predictor::Network(Box::new(NetworkCheckpoint {
            model: out.model,
            train_config: req.config.clone(),
            curve: out.curve,
            best_epoch: out.best_epoch,
            featurizer,
        })),
    })
}

fn label_targets(label: &crate::params::LabelVector) -> Vec<f32> {
    label.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}
