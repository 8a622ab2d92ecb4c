use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use inversynth_core::checkpoint::{Checkpoint, CheckpointError};
use inversynth_core::dataset::{
    generate_with_progress, read_wav, write_wav, DatasetError, DatasetManifest, GenerateConfig, SamplingProfile,
};
use inversynth_core::features::{Spectrogram, Stft, StftConfig};
use inversynth_core::metrics::TieBreak;
use inversynth_core::neural::{build_model, ModelName, NeuralError, TrainConfig};
use inversynth_core::params::{PatchClasses, PARAMS};
use inversynth_core::pipeline::{
    self, BowOptions, EvalOptions, PipelineError, TestSet, TrainRequest,
};
use inversynth_core::synth::{render_patch, RenderConfig};

#[derive(Parser)]
#[command(name = "inversynth", version, about = "Estimate synthesizer parameters from audio")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

impl Profile {
    fn sampling(self) -> SamplingProfile {
        match self {
            Profile::Desk => SamplingProfile::Desk,
            Profile::Paper => SamplingProfile::Paper,
        }
    }

    fn count(self) -> usize {
        match self {
            Profile::Desk => 4000,
            Profile::Paper => 200_000,
        }
    }

    fn width_scale(self) -> f64 {
        match self {
            Profile::Desk => 0.25,
            Profile::Paper => 1.0,
        }
    }

    fn epochs(self) -> usize {
        match self {
            Profile::Desk => 30,
            Profile::Paper => 100,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ImageFormat {
    Csv,
    Pgm,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled dataset (raw audio + log spectrograms + manifest).
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "desk")]
        profile: Profile,
        /// Number of clips; defaults to 4000 (desk) or 200000 (paper).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a generated dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "desk")]
        profile: Profile,
        #[arg(long)]
        width_scale: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 10)]
        patience: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        /// Use only the first N records.
        #[arg(long)]
        limit: Option<usize>,
        /// Codebook size for bag-of-words models.
        #[arg(long, default_value_t = 1000)]
        bow_k: usize,
        /// Write the per-epoch loss curve as CSV.
        #[arg(long)]
        curve_csv: Option<PathBuf>,
    },
    /// Score a checkpoint on a test dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        /// Seed for random tie breaking in rank metrics.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_spectral: bool,
        /// Write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write the report as key = value lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the patch of a WAV clip.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        wav: PathBuf,
    },
    /// Render a patch to WAV. Without --patch a patch is sampled from the
    /// profile with --seed.
    Render {
        #[arg(long)]
        out: PathBuf,
        /// 23 comma-separated classes in canonical order.
        #[arg(long)]
        patch: Option<String>,
        #[arg(long, value_enum, default_value = "paper")]
        profile: Profile,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Infer, re-render, write the result and compare it with the input.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the 257x64 log spectrogram of a clip.
    ExportSpectrogram {
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: ImageFormat,
    },
    /// Print per-layer and total trainable weights of a model.
    AuditParams {
        /// A model name, or "all".
        #[arg(long, default_value = "all")]
        model: String,
        #[arg(long, default_value_t = 1.0)]
        width_scale: f64,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn input(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }
}

fn dataset_code(e: &DatasetError) -> u8 {
    match e {
        DatasetError::AudioFormat(_)
        | DatasetError::BadMagic(_)
        | DatasetError::UnsupportedVersion { .. }
        | DatasetError::BadKind { .. }
        | DatasetError::Truncated { .. }
        | DatasetError::InvalidLabel { .. } => 3,
        _ => 2,
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::ManifestMismatch(_) => 4,
            PipelineError::Format(_) => 3,
            PipelineError::Dataset(d) => dataset_code(d),
            PipelineError::Checkpoint(c) => checkpoint_code(c),
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn checkpoint_code(e: &CheckpointError) -> u8 {
    match e {
        CheckpointError::Io { .. } => 2,
        _ => 3,
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure { code: dataset_code(&e), msg: e.to_string() }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure { code: checkpoint_code(&e), msg: e.to_string() }
    }
}

impl From<NeuralError> for Failure {
    fn from(e: NeuralError) -> Self {
        Failure::input(e.to_string())
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

fn provenance(hash: &str, seed: u64) {
    println!("manifest {hash}");
    println!("seed {seed}");
}

fn parse_model(name: &str) -> Result<ModelName, Failure> {
    name.parse().map_err(|e: NeuralError| Failure::input(e.to_string()))
}

fn load_wav(path: &Path, ck: &Checkpoint) -> Result<inversynth_core::synth::AudioBuffer, Failure> {
    let audio = read_wav(path, ck.binding.render.sample_rate)?;
    pipeline::check_audio(&audio, &ck.binding)?;
    Ok(audio)
}

fn patch_table(pc: &PatchClasses) -> String {
    let values = pc.dequantize();
    let mut s = format!("{:<8}{:>6}{:>14}  {}\n", "param", "class", "value", "unit");
    for p in PARAMS.iter() {
        let _ = writeln!(s, "{:<8}{:>6}{:>14.6}  {}", p.id.name(), pc.get(p.id), values.get(p.id), p.unit);
    }
    s
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenDataset { out, profile, count, seed } => {
            let cfg = GenerateConfig::new(count.unwrap_or(profile.count()), seed, profile.sampling());
            let total = cfg.count;
            let m = generate_with_progress(&out, &cfg, |done| eprintln!("rendered {done}/{total}"))?;
            println!("wrote {} clips to {}", m.count, out.display());
            println!("content {}", m.content_hash);
            println!("fingerprint {}", m.fingerprint);
            provenance(&m.hash(), seed);
        }
        Command::Train {
            data,
            model,
            out,
            profile,
            width_scale,
            epochs,
            patience,
            batch,
            lr,
            seed,
            val_fraction,
            limit,
            bow_k,
            curve_csv,
        } => {
            let manifest = DatasetManifest::load(&data)?;
            provenance(&manifest.hash(), seed);
            let req = TrainRequest {
                model: parse_model(&model)?,
                width_scale: width_scale.unwrap_or(profile.width_scale()),
                config: TrainConfig {
                    lr,
                    batch,
                    max_epochs: epochs.unwrap_or(profile.epochs()),
                    patience,
                    seed,
                    val_fraction,
                },
                bow: BowOptions { k: bow_k, ..BowOptions::default() },
                limit,
            };
            let ck = pipeline::train_from_dataset(&data, &req, |r| {
                println!("epoch {:>3}  train {:.6}  val {:.6}", r.epoch, r.train_loss, r.val_loss)
            })?;
            let net = ck.network().expect("training yields a network");
            println!(
                "best epoch {} val {:.6} ({} weights)",
                net.best_epoch,
                net.curve[net.best_epoch].val_loss,
                net.model.param_count()
            );
            ck.save(&out)?;
            if let Some(p) = curve_csv {
                let mut s = String::from("epoch,train_loss,val_loss\n");
                for r in &net.curve {
                    let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, r.val_loss);
                }
                write_file(&p, s)?;
            }
            println!("wrote {}", out.display());
        }
        Command::Evaluate { checkpoint, data, limit, seed, no_spectral, json, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let test = TestSet::load(&data, limit)?;
            provenance(&test.manifest.hash(), seed);
            println!("trained on manifest {}", ck.binding.manifest_hash);
            let opts = EvalOptions { tie: TieBreak::Random { seed }, spectral: !no_spectral };
            let ev = pipeline::evaluate(&ck, &test, opts)?;
            println!("{}", ev.report);
            if let Some(p) = json {
                write_file(&p, serde_json::to_string_pretty(&ev.report).expect("report serializes"))?;
            }
            if let Some(p) = out {
                write_file(&p, ev.report.to_key_values())?;
            }
        }
        Command::Infer { checkpoint, wav } => {
            let ck = Checkpoint::load(&checkpoint)?;
            provenance(&ck.binding.manifest_hash, ck.binding.seed);
            let audio = load_wav(&wav, &ck)?;
            let pc = pipeline::infer(&ck, &audio)?;
            println!("patch {pc}");
            print!("{}", patch_table(&pc));
        }
        Command::Render { out, patch, profile, seed } => {
            let pc = match patch {
                Some(s) => s.parse::<PatchClasses>().map_err(|e| Failure::input(e.to_string()))?,
                None => profile.sampling().sample(&mut ChaCha8Rng::seed_from_u64(seed)),
            };
            provenance("none", seed);
            let audio = render_patch(&pc.dequantize(), &RenderConfig::default());
            write_wav(&audio, &out)?;
            println!("patch {pc}");
            print!("{}", patch_table(&pc));
            println!("wrote {}", out.display());
        }
        Command::Reconstruct { checkpoint, wav, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            provenance(&ck.binding.manifest_hash, ck.binding.seed);
            let audio = load_wav(&wav, &ck)?;
            let r = pipeline::reconstruct(&ck, &audio)?;
            write_wav(&r.audio, &out)?;
            println!("patch {}", r.patch);
            print!("{}", patch_table(&r.patch));
            let show = |v: Option<f64>| v.map_or("degenerate".to_string(), |x| format!("{x:.6}"));
            println!("F_delta_stft {:.6}", r.metrics.frobenius_stft);
            println!("pcc_stft {}", show(r.metrics.pcc_stft));
            println!("pcc_ft {}", show(r.metrics.pcc_ft));
            println!("wrote {}", out.display());
        }
        Command::ExportSpectrogram { wav, out, format } => {
            let rc = RenderConfig::default();
            let audio = read_wav(&wav, rc.sample_rate)?;
            if audio.len() != rc.num_samples() {
                return Err(Failure { code: 3, msg: format!("{} samples, expected {}", audio.len(), rc.num_samples()) });
            }
            provenance("none", 0);
            let spec = Stft::new(StftConfig::default())
                .logmag(&audio.samples)
                .map_err(|e| Failure { code: 3, msg: e.to_string() })?;
            match format {
                ImageFormat::Csv => write_file(&out, spectrogram_csv(&spec))?,
                ImageFormat::Pgm => write_file(&out, spectrogram_pgm(&spec))?,
            }
            println!("wrote {} ({} bins x {} frames)", out.display(), spec.bins(), spec.frames());
        }
        Command::AuditParams { model, width_scale } => {
            provenance("none", 0);
            let names: Vec<ModelName> =
                if model.eq_ignore_ascii_case("all") { ModelName::ALL.to_vec() } else { vec![parse_model(&model)?] };
            for name in names {
                print!("{}", audit(name, width_scale)?);
            }
        }
    }
    Ok(())
}

/// Reference size of each architecture at full width.
fn target_params(name: ModelName) -> f64 {
    match name {
        ModelName::Conv6XL => 2.3e6,
        ModelName::ConvE2E => 1.9e6,
        _ => 1.2e6,
    }
}

fn audit(name: ModelName, width_scale: f64) -> Result<String, Failure> {
    let spec = build_model(name, width_scale)?;
    let mut s = format!("{name} (width {width_scale})\n");
    let _ = writeln!(s, "  {:<24}{:>22}{:>12}", "input", format!("{:?}", spec.input_shape), "");
    for (layer, out, params) in spec.shape_trace()? {
        let _ = writeln!(s, "  {:<24}{:>22}{:>12}", layer.to_string(), format!("{out:?}"), params);
    }
    let total = spec.param_count()?;
    let _ = write!(s, "  total {total}");
    if width_scale == 1.0 {
        let target = target_params(name);
        let dev = 100.0 * (total as f64 - target) / target;
        let _ = write!(s, "  (target {:.1}M, {dev:+.1}%)", target / 1e6);
    }
    s.push('\n');
    Ok(s)
}

/// One row per frequency bin, one column per frame.
fn spectrogram_csv(spec: &Spectrogram) -> String {
    let mut s = String::new();
    for bin in 0..spec.bins() {
        let row: Vec<String> = (0..spec.frames()).map(|f| format!("{}", spec.get(bin, f))).collect();
        s += &row.join(",");
        s.push('\n');
    }
    s
}

/// Binary greymap, bins as rows; min maps to 0 and max to 255.
fn spectrogram_pgm(spec: &Spectrogram) -> Vec<u8> {
    let (lo, hi) = spec.min_max();
    let mut out = format!("P5\n{} {}\n255\n", spec.frames(), spec.bins()).into_bytes();
    for bin in 0..spec.bins() {
        for f in 0..spec.frames() {
            let v = if hi > lo { ((spec.get(bin, f) - lo) / (hi - lo) * 255.0).round() } else { 0.0 };
            out.push(v as u8);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
