//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use inversynth_core::checkpoint::Checkpoint;
use inversynth_core::dataset::{
    generate, read_all, read_wav, write_wav, DatasetManifest, GenerateConfig, RecordKind, SamplingProfile,
};
use inversynth_core::features::{Stft, StftConfig};
use inversynth_core::metrics::{mpr, mae_classes, argmax_class, topk_accuracy, ParamGroup, TieBreak};
use inversynth_core::neural::gradcheck::max_relative_error;
use inversynth_core::neural::*;
use inversynth_core::params::{ParamId, PatchClasses, LABEL_DIM};
use inversynth_core::pipeline::{self, EvalOptions, Evaluation, TestSet, TrainRequest};
use inversynth_core::synth::{adsr_envelope, gate, gate_open, render_patch, RenderConfig, Waveform};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn timed(limit: Duration, what: &str, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure!(t < limit, "{what} took {t:.1?}, limit {limit:?}");
    Ok(())
}

// 1. analytic gradients vs central differences

fn fd_error(input: Vec<usize>, layers: Vec<LayerSpec>, seed: u64, dropout: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec { name: "probe".into(), input_kind: InputKind::Spectrogram, input_shape: input.clone(), width_scale: 1.0, layers };
    let model = Model::new(spec, &mut rng).unwrap();
    let mut shape = vec![2];
    shape.extend(input);
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let t: Vec<f64> = (0..2 * model.output_dim()).map(|_| rng.random_range(0..2) as f64).collect();
    let drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0);
    max_relative_error(&model, &x, &t, 1e-4, 1e-6, dropout.then_some(&drop_rng))
}

fn gradient_fidelity() -> Outcome {
    use LayerSpec::*;
    let start = Instant::now();
    let cases: Vec<(&str, Vec<usize>, Vec<LayerSpec>, bool)> = vec![
        ("conv2d", vec![2, 8, 9], vec![LayerSpec::conv(3, 3, 4, 2, 3), Flatten, Sigmoid], false),
        ("conv1d", vec![2, 1, 24], vec![LayerSpec::conv1d(3, 5, 4), Flatten, Sigmoid], false),
        ("fc", vec![7], vec![Fc { out_dim: 5 }, Sigmoid], false),
        ("relu", vec![6], vec![Fc { out_dim: 6 }, Relu, Fc { out_dim: 4 }, Sigmoid], false),
        ("sigmoid", vec![6], vec![Fc { out_dim: 5 }, Sigmoid, Fc { out_dim: 3 }, Sigmoid], false),
        ("dropout", vec![6], vec![Fc { out_dim: 8 }, Dropout { p: 0.4 }, Fc { out_dim: 3 }, Sigmoid], true),
        ("flatten", vec![2, 3, 3], vec![LayerSpec::conv(2, 2, 2, 1, 1), Flatten, Fc { out_dim: 4 }, Sigmoid], false),
        (
            "channels_to_image",
            vec![1, 1, 32],
            vec![LayerSpec::conv1d(5, 4, 4), ChannelsToImage, LayerSpec::conv(2, 3, 3, 2, 2), Flatten, Sigmoid],
            false,
        ),
        (
            "2conv+fc",
            vec![1, 8, 9],
            vec![
                LayerSpec::conv(4, 3, 3, 1, 1),
                Relu,
                LayerSpec::conv(4, 3, 3, 2, 2),
                Relu,
                Flatten,
                Fc { out_dim: 6 },
                Sigmoid,
            ],
            false,
        ),
    ];
    let mut worst: (f64, &str) = (0.0, "");
    for (name, input, layers, dropout) in cases {
        for seed in 0..3 {
            let e = fd_error(input.clone(), layers.clone(), seed, dropout);
            ensure!(e < 1e-4, "{name} seed {seed}: relative error {e:e}");
            if e > worst.0 {
                worst = (e, name);
            }
        }
    }
    timed(Duration::from_secs(60), "gradient checks", start)?;
    Ok(format!("max relative error {:.2e} ({}) over 9 layouts x 3 seeds", worst.0, worst.1))
}

// 2. parameter counts and forward shapes

fn architecture_audit() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut summary = Vec::new();
    for name in ModelName::ALL {
        let spec = build_model(name, 1.0).map_err(|e| e.to_string())?;
        let count = spec.param_count().map_err(|e| e.to_string())?;
        let target = match name {
            ModelName::Conv6XL => 2.3e6,
            ModelName::ConvE2E => 1.9e6,
            _ => 1.2e6,
        };
        let dev = (count as f64 - target) / target;
        ensure!(dev.abs() <= 0.10, "{name}: {count} weights, {:.1}% from {target}", dev * 100.0);
        let model = Model::new(spec.clone(), &mut rng).map_err(|e| e.to_string())?;
        ensure!(model.param_count() == count, "{name}: instantiated count differs");
        let mut shape = vec![1];
        shape.extend(spec.input_shape.clone());
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = model.predict(&x).map_err(|e| e.to_string())?;
        ensure!(y.shape() == [1, LABEL_DIM], "{name}: output shape {:?}", y.shape());
        ensure!(y.data().iter().all(|&s| s > 0.0 && s < 1.0), "{name}: score outside (0,1)");
        summary.push(format!("{name} {:.3}M", count as f64 / 1e6));
    }
    timed(Duration::from_secs(120), "architecture audit", start)?;
    Ok(summary.join(", "))
}

// 3. metrics vs a sorting-free reference

fn brute_rank(s: &[f64; 16], t: usize) -> usize {
    (0..16).filter(|&j| s[j] > s[t]).count()
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for m in 0..1000 {
        let n = rng.random_range(1..40);
        let levels = [0u32, 3, 16][m % 3];
        let rows: Vec<[f64; 16]> = (0..n)
            .map(|_| std::array::from_fn(|_| if levels == 0 { rng.random() } else { rng.random_range(0..levels) as f64 }))
            .collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..16)).collect();
        let ranks: Vec<usize> = rows.iter().zip(&truth).map(|(s, &t)| brute_rank(s, t)).collect();
        let want_mpr = 100.0 * (1.0 - ranks.iter().sum::<usize>() as f64 / (15 * n) as f64);
        let got = mpr(&rows, &truth, TieBreak::Optimistic).unwrap();
        ensure!(got == want_mpr, "matrix {m}: MPR {got} vs {want_mpr}");
        for k in 1..=5 {
            let want = ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
            let got = topk_accuracy(&rows, &truth, k, TieBreak::Optimistic).unwrap();
            ensure!(got == want, "matrix {m}: top-{k} {got} vs {want}");
        }
        let pred: Vec<usize> = rows
            .iter()
            .map(|s| (0..16).find(|&i| (0..16).all(|j| s[j] < s[i] || (s[j] == s[i] && j >= i))).unwrap())
            .collect();
        let want_mae = pred.iter().zip(&truth).map(|(&p, &t)| p.abs_diff(t)).sum::<usize>() as f64 / n as f64;
        let argmax: Vec<usize> = rows.iter().map(argmax_class).collect();
        let got = mae_classes(&argmax, &truth).unwrap();
        ensure!(got == want_mae, "matrix {m}: MAE {got} vs {want_mae}");
    }

    let rows: Vec<[f64; 16]> = (0..10_000).map(|_| std::array::from_fn(|_| rng.random())).collect();
    let truth: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..16)).collect();
    let random = mpr(&rows, &truth, TieBreak::default()).unwrap();
    ensure!((random - 50.0).abs() <= 2.0, "random MPR {random}");
    let perfect: Vec<[f64; 16]> =
        truth.iter().map(|&t| std::array::from_fn(|i| if i == t { 1.0 } else { 0.0 })).collect();
    let best = mpr(&perfect, &truth, TieBreak::default()).unwrap();
    ensure!(best == 100.0, "perfect MPR {best}");
    Ok(format!("1000 matrices exact; perfect {best}, random {random:.2} over 10^4"))
}

// 4. synthesizer

fn synth_correctness() -> Outcome {
    let start = Instant::now();
    let cfg = RenderConfig::default();
    let mut pc = PatchClasses::new([0; 23]).unwrap();
    pc.set(ParamId::Amp(Waveform::Sin), 15).unwrap();
    pc.set(ParamId::Sustain, 15).unwrap();
    pc.set(ParamId::Release, 15).unwrap();
    pc.set(ParamId::Cutoff, 15).unwrap();
    pc.set(ParamId::Resonance, 1).unwrap();
    pc.set(ParamId::GateFreq, 1).unwrap();
    let patch = pc.dequantize();
    ensure!(patch.get(ParamId::Freq(Waveform::Sin)) == 440.0, "sine not at 440 Hz");
    let audio = render_patch(&patch, &cfg);
    let again = render_patch(&patch, &cfg);
    ensure!(
        audio.samples.iter().zip(&again.samples).all(|(a, b)| a.to_bits() == b.to_bits()),
        "renders differ between runs"
    );

    let f_gate = patch.get(ParamId::GateFreq);
    let sr = cfg.sample_rate as f64;
    let mut closed = 0;
    for (i, &s) in audio.samples.iter().enumerate() {
        if !gate_open(f_gate, i as f64 / sr) {
            ensure!(s == 0.0, "sample {i} in a closed half-cycle is {s}");
            closed += 1;
        }
    }
    ensure!(closed > 4000, "only {closed} closed samples");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..16384).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = gate(&x, 3.7, cfg.sample_rate);
    for (i, (&a, &b)) in x.iter().zip(&g).enumerate() {
        let open = (std::f64::consts::TAU * 3.7 * i as f64 / sr).sin() >= 0.0;
        ensure!(if open { a == b } else { b == 0.0 }, "gater sample {i}");
    }

    let spec = Stft::new(StftConfig::default()).logmag(&audio.samples).map_err(|e| e.to_string())?;
    let mut open_frames = 0;
    for f in 0..spec.frames() {
        let centre = (f * 256 + 256).min(16383);
        if !gate_open(f_gate, centre as f64 / sr) || spec.frame(f).iter().all(|&v| v < -10.0) {
            continue;
        }
        open_frames += 1;
        let peak = spec.argmax_bin(f);
        ensure!((13..=14).contains(&peak), "frame {f} peaks at bin {peak}");
    }
    ensure!(open_frames >= 20, "only {open_frames} open frames");

    let (a, d, s, r, off) = (0.1, 0.2, 0.6, 0.3, 0.5);
    let closed_form = |t: f64| -> f64 {
        if t <= 0.0 {
            0.0
        } else if t <= a {
            t / a
        } else if t <= a + d {
            1.0 - (1.0 - s) * (t - a) / d
        } else if t <= off {
            s
        } else if t <= off + r {
            s * (1.0 - (t - off) / r)
        } else {
            0.0
        }
    };
    for t in [0.0, a, a + d, off, off + r, 0.05, 0.2, 0.4, 0.65, 0.95] {
        let got = adsr_envelope(a, d, s, r, off, t);
        ensure!((got - closed_form(t)).abs() < 1e-12, "envelope at {t}: {got} vs {}", closed_form(t));
    }
    timed(Duration::from_secs(30), "synth checks", start)?;
    Ok(format!("{open_frames} open frames peak at bins 13-14; {closed} gated samples exactly zero"))
}

// 5. cheating checkpoint through the whole pipeline

fn pipeline_identity(work: &Path) -> Outcome {
    let dir = work.join("identity");
    generate(&dir, &GenerateConfig::new(100, 55, SamplingProfile::Paper)).map_err(|e| e.to_string())?;
    let ck_path = work.join("lookup.ivsc");
    pipeline::lookup_checkpoint(&dir).map_err(|e| e.to_string())?.save(&ck_path).map_err(|e| e.to_string())?;
    let ck = Checkpoint::load(&ck_path).map_err(|e| e.to_string())?;
    let test = TestSet::load(&dir, None).map_err(|e| e.to_string())?;
    let ev = pipeline::evaluate(&ck, &test, EvalOptions::default()).map_err(|e| e.to_string())?;
    ensure!(ev.pairs.len() == 100, "{} pairs", ev.pairs.len());
    for (i, p) in ev.pairs.iter().enumerate() {
        ensure!(p.frobenius_stft == 0.0, "instance {i}: F_delta {}", p.frobenius_stft);
        let rho = p.pcc_stft.ok_or(format!("instance {i}: degenerate PCC"))?;
        ensure!((rho - 1.0).abs() < 1e-12, "instance {i}: PCC {rho}");
    }
    ensure!(ev.report.params.iter().all(|p| p.mpr == 100.0), "MPR below 100");

    // the same through 16-bit WAV files
    for (i, clip) in test.clips.iter().take(5).enumerate() {
        let wav = work.join(format!("in{i}.wav"));
        write_wav(clip, &wav).map_err(|e| e.to_string())?;
        let audio = read_wav(&wav, 16384).map_err(|e| e.to_string())?;
        let r = pipeline::reconstruct(&ck, &audio).map_err(|e| e.to_string())?;
        ensure!(r.patch == test.truth[i], "WAV {i}: wrong patch");
        ensure!(r.metrics.frobenius_stft == 0.0, "WAV {i}: F_delta {}", r.metrics.frobenius_stft);
    }
    let sp = ev.report.spectral.unwrap();
    Ok(format!("100 instances: F_delta median {}, PCC(STFT) median {}", sp.frobenius_stft.median, sp.pcc_stft.median))
}

// 6-8. desk-scale learning

struct Desk {
    train_dir: PathBuf,
    conv3_val: Vec<f64>,
    conv3_eval: Evaluation,
    conv3_time: Duration,
}

const DESK_TRAIN: usize = 4000;
const DESK_TEST: usize = 500;
const DESK_WIDTH: f64 = 0.25;
const DESK_EPOCHS: usize = 30;

fn desk_request(model: ModelName, seed: u64) -> TrainRequest {
    TrainRequest {
        model,
        width_scale: DESK_WIDTH,
        config: TrainConfig { max_epochs: DESK_EPOCHS, seed, ..TrainConfig::default() },
        bow: Default::default(),
        limit: None,
    }
}

fn best_val(ck: &Checkpoint) -> f64 {
    let n = ck.network().unwrap();
    n.curve[n.best_epoch].val_loss
}

fn desk_setup(work: &Path) -> Result<Desk, String> {
    let train_dir = work.join("desk-train");
    let test_dir = work.join("desk-test");
    generate(&train_dir, &GenerateConfig::new(DESK_TRAIN, 1, SamplingProfile::Desk)).map_err(|e| e.to_string())?;
    generate(&test_dir, &GenerateConfig::new(DESK_TEST, 2, SamplingProfile::Desk)).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let ck = pipeline::train_from_dataset(&train_dir, &desk_request(ModelName::Conv3, 0), |_| {}).map_err(|e| e.to_string())?;
    let conv3_time = start.elapsed();
    let test = TestSet::load(&test_dir, None).map_err(|e| e.to_string())?;
    let conv3_eval = pipeline::evaluate(&ck, &test, EvalOptions::default()).map_err(|e| e.to_string())?;
    Ok(Desk { train_dir, conv3_val: vec![best_val(&ck)], conv3_eval, conv3_time })
}

fn desk_learning(desk: &Desk) -> Outcome {
    let r = &desk.conv3_eval.report;
    let fcut = r.param(ParamId::Cutoff).mpr;
    let fgate = r.param(ParamId::GateFreq).mpr;
    let free = r.mean_mpr_over(&SamplingProfile::Desk.free_params());
    let all = r.group(ParamGroup::All).mpr;
    let msg = format!(
        "Conv3 x{DESK_WIDTH}: MPR f_cut {fcut:.2}, f_gate {fgate:.2}, free-param mean {free:.2}, all-param mean {all:.2}; trained in {:.0?}",
        desk.conv3_time
    );
    ensure!(desk.conv3_time < Duration::from_secs(30 * 60), "{msg}: over 30 min");
    ensure!(fcut >= 90.0 && fgate >= 80.0 && free >= 65.0 && all >= 65.0, "{msg}");
    Ok(msg)
}

fn depth_trend(desk: &mut Desk) -> Outcome {
    let median3 = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[1]
    };
    let mut conv1 = Vec::new();
    for seed in 0..3 {
        let ck = pipeline::train_from_dataset(&desk.train_dir, &desk_request(ModelName::Conv1, seed), |_| {})
            .map_err(|e| e.to_string())?;
        conv1.push(best_val(&ck));
        if seed > 0 {
            let ck = pipeline::train_from_dataset(&desk.train_dir, &desk_request(ModelName::Conv3, seed), |_| {})
                .map_err(|e| e.to_string())?;
            desk.conv3_val.push(best_val(&ck));
        }
    }
    let p1 = build_model(ModelName::Conv1, DESK_WIDTH).unwrap().param_count().unwrap();
    let p3 = build_model(ModelName::Conv3, DESK_WIDTH).unwrap().param_count().unwrap();
    let (m1, m3) = (median3(&mut conv1.clone()), median3(&mut desk.conv3_val.clone()));
    let msg = format!(
        "median best val loss Conv3 {m3:.5} ({p3} weights) vs Conv1 {m1:.5} ({p1} weights); Conv3 {:?}, Conv1 {:?}",
        desk.conv3_val.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>(),
        conv1.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>()
    );
    ensure!(m3 < m1, "{msg}");
    Ok(msg)
}

fn reconstruction_quality(desk: &Desk) -> Outcome {
    let sp = desk.conv3_eval.report.spectral.unwrap();
    let msg = format!(
        "Conv3 PCC(STFT) median {:.4} (mean {:.4}, {} degenerate), PCC(FT) median {:.4}, F_delta median {:.2}",
        sp.pcc_stft.median, sp.pcc_stft.mean, sp.pcc_stft.degenerate, sp.pcc_ft.median, sp.frobenius_stft.median
    );
    ensure!(sp.pcc_stft.median >= 0.85, "{msg}");
    Ok(msg)
}

// 9. dataset determinism

fn dataset_determinism(work: &Path) -> Outcome {
    let a = work.join("det-a");
    let b = work.join("det-b");
    let cfg = GenerateConfig::new(256, 99, SamplingProfile::Paper);
    let ma = generate(&a, &cfg).map_err(|e| e.to_string())?;
    generate(&b, &cfg).map_err(|e| e.to_string())?;
    for name in [RecordKind::Raw.file_name(), RecordKind::Stft.file_name(), DatasetManifest::FILE_NAME] {
        let x = std::fs::read(a.join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(name)).map_err(|e| e.to_string())?;
        ensure!(x == y, "{name} differs between runs");
    }
    let (_, raw) = read_all(&a.join(RecordKind::Raw.file_name())).map_err(|e| e.to_string())?;
    let (_, stft) = read_all(&a.join(RecordKind::Stft.file_name())).map_err(|e| e.to_string())?;
    let st = Stft::new(ma.stft.clone());
    let norm = ma.normalization;
    let mut worst = 0.0f64;
    for (k, (r, s)) in raw.iter().zip(&stft).enumerate() {
        ensure!(r.label == s.label, "record {k}: labels differ");
        let again = st.logmag(&r.input.iter().map(|&v| v as f64).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
        for (x, &y) in again.as_frame_major().iter().zip(&s.input) {
            worst = worst.max((norm.apply(*x) - norm.apply(y as f64)).abs());
        }
    }
    ensure!(worst < 1e-5, "paired stft differs by {worst:e}");
    Ok(format!("256 records byte-identical across runs; recomputed stft max diff {worst:.2e}"))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let t = start.elapsed();
    match res {
        Ok(msg) => {
            println!("PASS  {name}: {msg} [{t:.1?}]");
            true
        }
        Err(msg) => {
            println!("FAIL  {name}: {msg} [{t:.1?}]");
            false
        }
    }
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let mut ok = Vec::new();
    ok.push(run("1 gradient fidelity", gradient_fidelity));
    ok.push(run("2 architecture audit", architecture_audit));
    ok.push(run("3 metric oracle equivalence", metric_oracle));
    ok.push(run("4 synthesizer correctness", synth_correctness));
    ok.push(run("5 pipeline identity", || pipeline_identity(w)));

    let setup_start = Instant::now();
    let desk = catch_unwind(AssertUnwindSafe(|| desk_setup(w))).unwrap_or_else(|_| Err("desk setup panicked".into()));
    println!("      desk setup (generation, Conv3 training, evaluation) took {:.1?}", setup_start.elapsed());
    match desk {
        Ok(mut desk) => {
            ok.push(run("6 desk-scale learning", || desk_learning(&desk)));
            ok.push(run("7 depth trend", || depth_trend(&mut desk)));
            ok.push(run("8 reconstruction quality", || reconstruction_quality(&desk)));
        }
        Err(e) => {
            for name in ["6 desk-scale learning", "7 depth trend", "8 reconstruction quality"] {
                println!("FAIL  {name}: setup failed: {e}");
                ok.push(false);
            }
        }
    }
    ok.push(run("9 dataset determinism", || dataset_determinism(w)));

    let passed = ok.iter().filter(|&&b| b).count();
    println!("acceptance: {passed}/{} criteria passed", ok.len());
    if passed != ok.len() {
        std::process::exit(1);
    }
}
