//! Binary dataset container, manifests, generation and WAV I/O.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::features::{Normalization, NormalizationAccumulator, Spectrogram, Stft, StftConfig, CLIP_LEN, SPEC_LEN};
use crate::params::{sample_patch, LabelVector, ParamId, ParamTableManifest, PatchClasses, LABEL_BYTES, NUM_CLASSES};
use crate::synth::{render_patch, AudioBuffer, RenderConfig, Waveform};

pub const DATASET_MAGIC: [u8; 4] = *b"IVSD";
pub const DATASET_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 24;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}: not a dataset file (bad magic)")]
    BadMagic(PathBuf),
    #[error("{path}: unsupported dataset version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: unknown record kind {kind}")]
    BadKind { path: PathBuf, kind: u32 },
    #[error("{path}: truncated, expected {expected} bytes, found {actual}")]
    Truncated { path: PathBuf, expected: u64, actual: u64 },
    #[error("{path}: record {index} carries an invalid label")]
    InvalidLabel { path: PathBuf, index: u64 },
    #[error("record has {got} values, file holds {want}")]
    RecordSize { got: usize, want: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("audio format: {0}")]
    AudioFormat(String),
    #[error("generation: {0}")]
    Generate(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Raw,
    Stft,
    Bow,
}

impl RecordKind {
    fn code(self) -> u32 {
        match self {
            RecordKind::Raw => 0,
            RecordKind::Stft => 1,
            RecordKind::Bow => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        [RecordKind::Raw, RecordKind::Stft, RecordKind::Bow].into_iter().find(|k| k.code() == code)
    }

    pub fn file_name(self) -> &'static str {
        match self {
            RecordKind::Raw => "raw.ivsd",
            RecordKind::Stft => "stft.ivsd",
            RecordKind::Bow => "bow.ivsd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub kind: RecordKind,
    pub record_dim: usize,
    pub count: u64,
}

impl DatasetHeader {
    pub fn record_bytes(&self) -> u64 {
        self.record_dim as u64 * 4 + LABEL_BYTES as u64
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN + self.count * self.record_bytes()
    }

    fn to_bytes(self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[0..4].copy_from_slice(&DATASET_MAGIC);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..12].copy_from_slice(&self.kind.code().to_le_bytes());
        b[12..16].copy_from_slice(&(self.record_dim as u32).to_le_bytes());
        b[16..24].copy_from_slice(&self.count.to_le_bytes());
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub input: Vec<f32>,
    pub label: LabelVector,
}

/// Sequential writer; the record count is patched into the header by
/// [`DatasetWriter::finish`].
pub struct DatasetWriter {
    path: PathBuf,
    out: BufWriter<File>,
    header: DatasetHeader,
}

impl DatasetWriter {
    pub fn create(path: &Path, kind: RecordKind, record_dim: usize) -> Result<Self, DatasetError> {
        let file = File::create(path).map_err(io_err(path))?;
        let header = DatasetHeader { version: DATASET_VERSION, kind, record_dim, count: 0 };
        let mut out = BufWriter::new(file);
        out.write_all(&header.to_bytes()).map_err(io_err(path))?;
        Ok(DatasetWriter { path: path.to_path_buf(), out, header })
    }

    pub fn push(&mut self, input: &[f32], label: &LabelVector) -> Result<(), DatasetError> {
        if input.len() != self.header.record_dim {
            return Err(DatasetError::RecordSize { got: input.len(), want: self.header.record_dim });
        }
        let mut bytes = Vec::with_capacity(self.header.record_bytes() as usize);
        for v in input {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&label.to_bytes());
        self.out.write_all(&bytes).map_err(io_err(&self.path))?;
        self.header.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<DatasetHeader, DatasetError> {
        let path = self.path.clone();
        self.out.seek(SeekFrom::Start(0)).map_err(io_err(&path))?;
        self.out.write_all(&self.header.to_bytes()).map_err(io_err(&path))?;
        self.out.flush().map_err(io_err(&path))?;
        Ok(self.header)
    }
}

/// Streaming reader: one record in memory at a time.
pub struct DatasetReader {
    path: PathBuf,
    input: BufReader<File>,
    header: DatasetHeader,
    next: u64,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let file = File::open(path).map_err(io_err(path))?;
        let actual = file.metadata().map_err(io_err(path))?.len();
        let mut input = BufReader::new(file);
        let mut raw = [0u8; HEADER_LEN as usize];
        if actual < HEADER_LEN {
            if actual >= 4 {
                input.read_exact(&mut raw[..4]).map_err(io_err(path))?;
                if raw[..4] != DATASET_MAGIC {
                    return Err(DatasetError::BadMagic(path.to_path_buf()));
                }
            }
            return Err(DatasetError::Truncated { path: path.to_path_buf(), expected: HEADER_LEN, actual });
        }
        input.read_exact(&mut raw).map_err(io_err(path))?;
        if raw[..4] != DATASET_MAGIC {
            return Err(DatasetError::BadMagic(path.to_path_buf()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(raw[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != DATASET_VERSION {
            return Err(DatasetError::UnsupportedVersion { path: path.to_path_buf(), version });
        }
        let kind = RecordKind::from_code(u32_at(8))
            .ok_or(DatasetError::BadKind { path: path.to_path_buf(), kind: u32_at(8) })?;
        let header = DatasetHeader {
            version,
            kind,
            record_dim: u32_at(12) as usize,
            count: u64::from_le_bytes(raw[16..24].try_into().expect("8 bytes")),
        };
        if actual < header.file_len() {
            return Err(DatasetError::Truncated { path: path.to_path_buf(), expected: header.file_len(), actual });
        }
        Ok(DatasetReader { path: path.to_path_buf(), input, header, next: 0 })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn read_record(&mut self) -> Result<Record, DatasetError> {
        let mut buf = vec![0u8; self.header.record_bytes() as usize];
        self.input.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => DatasetError::Truncated {
                path: self.path.clone(),
                expected: self.header.file_len(),
                actual: HEADER_LEN + self.next * self.header.record_bytes(),
            },
            _ => DatasetError::Io { path: self.path.clone(), source: e },
        })?;
        let split = self.header.record_dim * 4;
        let input = buf[..split].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let label = LabelVector::from_bytes(buf[split..].try_into().expect("label bytes"));
        if label.decode().is_err() {
            return Err(DatasetError::InvalidLabel { path: self.path.clone(), index: self.next });
        }
        Ok(Record { input, label })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Record, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.header.count {
            return None;
        }
        let r = self.read_record();
        self.next += 1;
        if r.is_err() {
            // stop after the first failure rather than yield garbage
            self.next = self.header.count;
        }
        Some(r)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.header.count - self.next) as usize;
        (left, Some(left))
    }
}

pub fn read_all(path: &Path) -> Result<(DatasetHeader, Vec<Record>), DatasetError> {
    let reader = DatasetReader::open(path)?;
    let header = *reader.header();
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((header, records))
}

/// Which parameters vary when sampling patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingProfile {
    /// All 23 parameters uniform over their 16 classes.
    Paper,
    /// Only f_cut, q, f_gate, A_sin and f_sin vary; the rest sit at fixed
    /// classes: a fast attack and decay, full sustain, long release, and a
    /// saw at two thirds amplitude on A4 so the filter has harmonics to act
    /// on. All modulation and the square/triangle oscillators are off.
    Desk,
}

impl SamplingProfile {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingProfile::Paper => "paper",
            SamplingProfile::Desk => "desk",
        }
    }

    pub fn free_params(self) -> Vec<ParamId> {
        match self {
            SamplingProfile::Paper => crate::params::PARAMS.iter().map(|p| p.id).collect(),
            SamplingProfile::Desk => vec![
                ParamId::Cutoff,
                ParamId::Resonance,
                ParamId::GateFreq,
                ParamId::Amp(Waveform::Sin),
                ParamId::Freq(Waveform::Sin),
            ],
        }
    }

    /// Classes of the parameters this profile holds fixed.
    pub fn pinned(self) -> PatchClasses {
        let mut pc = PatchClasses::new([0; 23]).expect("zeros are valid");
        if self == SamplingProfile::Desk {
            for (id, c) in [
                (ParamId::Sustain, 15),
                (ParamId::Release, 15),
                (ParamId::Amp(Waveform::Saw), 10),
            ] {
                pc.set(id, c).expect("class in range");
            }
        }
        pc
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> PatchClasses {
        match self {
            SamplingProfile::Paper => sample_patch(rng),
            SamplingProfile::Desk => {
                let mut pc = self.pinned();
                for id in self.free_params() {
                    pc.set(id, rng.random_range(0..NUM_CLASSES)).expect("class in range");
                }
                pc
            }
        }
    }
}

impl std::str::FromStr for SamplingProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "paper" | "full" => Ok(SamplingProfile::Paper),
            "desk" => Ok(SamplingProfile::Desk),
            _ => Err(format!("unknown profile '{s}' (expected desk or paper)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub kind: RecordKind,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: u64,
    pub profile: SamplingProfile,
    pub param_table: ParamTableManifest,
    pub render: RenderConfig,
    pub stft: StftConfig,
    /// Global statistics of the stored log-spectrogram values.
    pub normalization: Normalization,
    pub seed: u64,
    pub files: Vec<FileEntry>,
    /// SHA-256 over the payload files in listed order.
    pub content_hash: String,
    /// Hash of everything that defines the data distribution (table,
    /// profile, render and STFT settings) but not seed, size or content.
    /// Train and evaluation sets must agree on it.
    pub fingerprint: String,
}

pub fn fingerprint(profile: SamplingProfile, render: &RenderConfig, stft: &StftConfig) -> String {
    let doc = serde_json::json!({
        "manifest_version": MANIFEST_VERSION,
        "param_table": ParamTableManifest::current(),
        "profile": profile,
        "render": render,
        "stft": stft,
    });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the manifest document itself.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let path = dir.join(Self::FILE_NAME);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(DatasetError::Manifest(format!("unsupported manifest version {}", m.version)));
        }
        if m.param_table != ParamTableManifest::current() {
            return Err(DatasetError::Manifest("parameter table differs from this build".into()));
        }
        if m.fingerprint != fingerprint(m.profile, &m.render, &m.stft) {
            return Err(DatasetError::Manifest("fingerprint does not match recorded settings".into()));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        let path = dir.join(Self::FILE_NAME);
        fs::write(&path, self.to_json()).map_err(io_err(&path))
    }

    pub fn file(&self, dir: &Path, kind: RecordKind) -> Option<PathBuf> {
        self.files.iter().find(|f| f.kind == kind).map(|f| dir.join(&f.file))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, DatasetError> {
    let mut f = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub count: usize,
    pub seed: u64,
    pub profile: SamplingProfile,
    pub render: RenderConfig,
    pub stft: StftConfig,
}

impl GenerateConfig {
    pub fn new(count: usize, seed: u64, profile: SamplingProfile) -> Self {
        GenerateConfig { count, seed, profile, render: RenderConfig::default(), stft: StftConfig::default() }
    }
}

/// Patch for record `k`: stream `k` of a generator seeded with `seed`, so
/// any record can be regenerated alone.
pub fn record_patch(seed: u64, k: u64, profile: SamplingProfile) -> PatchClasses {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    profile.sample(&mut rng)
}

/// One generated pair, at storage precision.
pub struct Generated {
    pub patch: PatchClasses,
    pub audio: Vec<f32>,
    pub stft: Vec<f32>,
}

pub fn generate_record(cfg: &GenerateConfig, stft: &Stft, k: u64) -> Result<Generated, DatasetError> {
    let patch = record_patch(cfg.seed, k, cfg.profile);
    let audio = render_patch(&patch.dequantize(), &cfg.render).to_f32_precision();
    let spec = stft.logmag(&audio.samples).map_err(|e| DatasetError::Generate(e.to_string()))?;
    Ok(Generated {
        patch,
        audio: audio.samples.iter().map(|&s| s as f32).collect(),
        stft: spec.as_frame_major().iter().map(|&v| v as f32).collect(),
    })
}

const GEN_CHUNK: usize = 256;

/// Writes `raw.ivsd`, `stft.ivsd` and `manifest.json` into `dir`. Records
/// are rendered in parallel and written in index order, so output bytes do
/// not depend on the worker count. Partial files are removed on failure.
pub fn generate(dir: &Path, cfg: &GenerateConfig) -> Result<DatasetManifest, DatasetError> {
    generate_with_progress(dir, cfg, |_| {})
}

pub fn generate_with_progress(
    dir: &Path,
    cfg: &GenerateConfig,
    mut on_chunk: impl FnMut(usize),
) -> Result<DatasetManifest, DatasetError> {
    if cfg.count == 0 {
        return Err(DatasetError::Generate("count must be at least 1".into()));
    }
    cfg.render.validate().map_err(|e| DatasetError::Generate(e.to_string()))?;
    if cfg.render.num_samples() != CLIP_LEN || cfg.stft.input_len() != CLIP_LEN {
        return Err(DatasetError::Generate(format!("renders and frames must cover {CLIP_LEN} samples")));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let paths: Vec<PathBuf> = [RecordKind::Raw, RecordKind::Stft].iter().map(|k| dir.join(k.file_name())).collect();
    let result = write_pair(&paths, cfg, &mut on_chunk);
    if result.is_err() {
        for p in &paths {
            let _ = fs::remove_file(p);
        }
        let _ = fs::remove_file(dir.join(DatasetManifest::FILE_NAME));
        return result;
    }
    let manifest = result?;
    if let Err(e) = manifest.save(dir) {
        for p in &paths {
            let _ = fs::remove_file(p);
        }
        return Err(e);
    }
    Ok(manifest)
}

fn write_pair(paths: &[PathBuf], cfg: &GenerateConfig, on_chunk: &mut impl FnMut(usize)) -> Result<DatasetManifest, DatasetError> {
    let stft = Stft::new(cfg.stft.clone());
    let mut raw = DatasetWriter::create(&paths[0], RecordKind::Raw, CLIP_LEN)?;
    let mut spec = DatasetWriter::create(&paths[1], RecordKind::Stft, SPEC_LEN)?;
    let mut acc = NormalizationAccumulator::default();
    let mut done = 0;
    for start in (0..cfg.count).step_by(GEN_CHUNK) {
        let end = (start + GEN_CHUNK).min(cfg.count);
        let chunk: Vec<Generated> = (start..end)
            .into_par_iter()
            .map(|k| generate_record(cfg, &stft, k as u64))
            .collect::<Result<_, _>>()?;
        for g in &chunk {
            let label = g.patch.encode();
            raw.push(&g.audio, &label)?;
            spec.push(&g.stft, &label)?;
            acc.push_all(&g.stft.iter().map(|&v| v as f64).collect::<Vec<_>>());
        }
        done += chunk.len();
        on_chunk(done);
    }
    raw.finish()?;
    spec.finish()?;

    let mut files = Vec::new();
    let mut content = Sha256::new();
    for (kind, path) in [RecordKind::Raw, RecordKind::Stft].into_iter().zip(paths) {
        let digest = sha256_file(path)?;
        content.update(digest.as_bytes());
        files.push(FileEntry { kind, file: kind.file_name().into(), sha256: digest });
    }
    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        count: cfg.count as u64,
        profile: cfg.profile,
        param_table: ParamTableManifest::current(),
        render: cfg.render,
        stft: cfg.stft.clone(),
        normalization: acc.finish(),
        seed: cfg.seed,
        files,
        content_hash: hex::encode(content.finalize()),
        fingerprint: fingerprint(cfg.profile, &cfg.render, &cfg.stft),
    })
}

/// Checks every payload file against the digests in the manifest.
pub fn verify(dir: &Path, manifest: &DatasetManifest) -> Result<(), DatasetError> {
    for f in &manifest.files {
        let digest = sha256_file(&dir.join(&f.file))?;
        if digest != f.sha256 {
            return Err(DatasetError::Manifest(format!("{} does not match its recorded hash", f.file)));
        }
    }
    Ok(())
}

/// Reinterprets a stored stft record as a spectrogram.
pub fn record_spectrogram(record: &Record) -> Spectrogram {
    Spectrogram::from_frames(
        crate::features::NUM_BINS,
        crate::features::NUM_FRAMES,
        record.input.iter().map(|&v| v as f64).collect(),
    )
}

/// Mono 16-bit PCM at the buffer's rate; samples quantized by
/// `round(s * 32767)` after clamping to [-1, 1].
pub fn write_wav(buffer: &AudioBuffer, path: &Path) -> Result<(), DatasetError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => DatasetError::Io { path: path.to_path_buf(), source },
        other => DatasetError::AudioFormat(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &buffer.samples {
        w.write_sample(quantize_i16(s)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

pub fn quantize_i16(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

/// The buffer as it reads back from a 16-bit WAV.
pub fn pcm16_round_trip(buffer: &AudioBuffer) -> AudioBuffer {
    AudioBuffer::new(buffer.samples.iter().map(|&s| quantize_i16(s) as f64 / 32767.0).collect(), buffer.sample_rate)
}

/// Reads a mono WAV at `expected_rate`. Other rates are refused rather
/// than resampled.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<AudioBuffer, DatasetError> {
    let mut r = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => DatasetError::Io { path: path.to_path_buf(), source },
        other => DatasetError::AudioFormat(format!("{}: {other}", path.display())),
    })?;
    let spec = r.spec();
    if spec.sample_rate != expected_rate {
        return Err(DatasetError::AudioFormat(format!(
            "{}: sample rate {} Hz, expected {expected_rate} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    if spec.channels != 1 {
        return Err(DatasetError::AudioFormat(format!("{}: {} channels, expected mono", path.display(), spec.channels)));
    }
    let fmt_err = |e: hound::Error| DatasetError::AudioFormat(format!("{}: {e}", path.display()));
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            r.samples::<i16>().map(|s| s.map(|v| v as f64 / 32767.0)).collect::<Result<_, _>>().map_err(fmt_err)?
        }
        (hound::SampleFormat::Float, 32) => {
            r.samples::<f32>().map(|s| s.map(|v| v as f64)).collect::<Result<_, _>>().map_err(fmt_err)?
        }
        (f, b) => {
            return Err(DatasetError::AudioFormat(format!("{}: unsupported {b}-bit {f:?} samples", path.display())))
        }
    };
    Ok(AudioBuffer::new(samples, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path, n: usize, seed: u64) -> DatasetManifest {
        generate(dir, &GenerateConfig::new(n, seed, SamplingProfile::Desk)).unwrap()
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ivsd");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = DatasetWriter::create(&path, RecordKind::Bow, 5).unwrap();
        let mut expect = Vec::new();
        for _ in 0..7 {
            let input: Vec<f32> = (0..5).map(|_| rng.random()).collect();
            let label = sample_patch(&mut rng).encode();
            w.push(&input, &label).unwrap();
            expect.push(Record { input, label });
        }
        assert!(matches!(w.push(&[0.0; 4], &expect[0].label), Err(DatasetError::RecordSize { .. })));
        let h = w.finish().unwrap();
        assert_eq!(h.count, 7);
        assert_eq!(fs::metadata(&path).unwrap().len(), h.file_len());
        let (h2, got) = read_all(&path).unwrap();
        assert_eq!(h, h2);
        assert_eq!(got, expect);
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ivsd");
        let label = sample_patch(&mut ChaCha8Rng::seed_from_u64(2)).encode();
        let mut w = DatasetWriter::create(&path, RecordKind::Raw, 3).unwrap();
        for _ in 0..4 {
            w.push(&[0.5, -0.5, 0.25], &label).unwrap();
        }
        w.finish().unwrap();
        let good = fs::read(&path).unwrap();

        let p = dir.path().join("trunc.ivsd");
        fs::write(&p, &good[..good.len() - 10]).unwrap();
        assert!(matches!(DatasetReader::open(&p), Err(DatasetError::Truncated { .. })));

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(DatasetReader::open(&p), Err(DatasetError::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 9;
        fs::write(&p, &bad).unwrap();
        assert!(matches!(DatasetReader::open(&p), Err(DatasetError::UnsupportedVersion { version: 9, .. })));

        let mut bad = good.clone();
        let second_label = HEADER_LEN as usize + (3 * 4 + LABEL_BYTES) + 12;
        bad[second_label] ^= 0xff;
        fs::write(&p, &bad).unwrap();
        let results: Vec<_> = DatasetReader::open(&p).unwrap().collect();
        assert!(results[0].is_ok());
        assert!(matches!(results[1], Err(DatasetError::InvalidLabel { index: 1, .. })));
        assert_eq!(results.len(), 2);
    }

    #[test]
    fn desk_profile_pins_all_but_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pinned = SamplingProfile::Desk.pinned();
        let free = SamplingProfile::Desk.free_params();
        let mut seen = vec![std::collections::HashSet::new(); 23];
        for _ in 0..400 {
            let pc = SamplingProfile::Desk.sample(&mut rng);
            for p in crate::params::PARAMS.iter() {
                seen[p.id.index()].insert(pc.get(p.id));
                if !free.contains(&p.id) {
                    assert_eq!(pc.get(p.id), pinned.get(p.id));
                }
            }
        }
        for id in free {
            assert_eq!(seen[id.index()].len(), 16, "{id}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_paired() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = small(a.path(), 10, 7);
        let mb = small(b.path(), 10, 7);
        assert_eq!(ma, mb);
        for kind in [RecordKind::Raw, RecordKind::Stft] {
            assert_eq!(fs::read(a.path().join(kind.file_name())).unwrap(), fs::read(b.path().join(kind.file_name())).unwrap());
        }
        let loaded = DatasetManifest::load(a.path()).unwrap();
        assert_eq!(loaded, ma);
        verify(a.path(), &loaded).unwrap();

        let (_, raw) = read_all(&a.path().join("raw.ivsd")).unwrap();
        let (_, spec) = read_all(&a.path().join("stft.ivsd")).unwrap();
        let stft = Stft::new(StftConfig::default());
        for (k, (r, s)) in raw.iter().zip(&spec).enumerate() {
            assert_eq!(r.label, s.label);
            assert_eq!(r.label.decode().unwrap(), record_patch(7, k as u64, SamplingProfile::Desk));
            let again = stft.logmag(&r.input.iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap();
            let n = ma.normalization;
            let diff = again
                .as_frame_major()
                .iter()
                .zip(&s.input)
                .map(|(x, &y)| (n.apply(*x) - n.apply(y as f64)).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-5, "{diff}");
        }

        let other = tempfile::tempdir().unwrap();
        let mc = small(other.path(), 10, 8);
        assert_ne!(mc.content_hash, ma.content_hash);
        assert_eq!(mc.fingerprint, ma.fingerprint);
        assert_ne!(mc.hash(), ma.hash());
    }

    #[test]
    fn tampered_payload_fails_verification() {
        let dir = tempfile::tempdir().unwrap();
        let m = small(dir.path(), 3, 1);
        let p = dir.path().join("raw.ivsd");
        let mut bytes = fs::read(&p).unwrap();
        bytes[100] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(verify(dir.path(), &m).is_err());
    }

    #[test]
    fn failed_generation_leaves_no_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = GenerateConfig::new(3, 0, SamplingProfile::Desk);
        cfg.render.duration = 0.5;
        assert!(generate(dir.path(), &cfg).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn wav_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let pc = record_patch(5, 0, SamplingProfile::Paper);
        let audio = render_patch(&pc.dequantize(), &RenderConfig::default());
        write_wav(&audio, &path).unwrap();

        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"RIFF");
        assert_eq!(&bytes[8..12], b"WAVE");
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        assert_eq!(u16_at(20), 1, "PCM");
        assert_eq!(u16_at(22), 1, "mono");
        assert_eq!(u32_at(24), 16384);
        assert_eq!(u16_at(34), 16);
        let data = bytes.windows(4).position(|w| w == b"data").unwrap();
        assert_eq!(u32_at(data + 4) as usize, 16384 * 2);

        let back = read_wav(&path, 16384).unwrap();
        assert_eq!(back.len(), 16384);
        assert_eq!(back.duration(), 1.0);
        assert_eq!(back, pcm16_round_trip(&audio));
        assert!(back.samples.iter().zip(&audio.samples).all(|(a, b)| (a - b).abs() <= 0.5 / 32767.0 + 1e-12));

        let slow = AudioBuffer::new(vec![0.0; 8000], 8000);
        let p2 = dir.path().join("b.wav");
        write_wav(&slow, &p2).unwrap();
        assert!(matches!(read_wav(&p2, 16384), Err(DatasetError::AudioFormat(_))));
    }
}
