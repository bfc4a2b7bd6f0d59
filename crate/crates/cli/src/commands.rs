use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use facemotion::ar::{generate_stream, ArModel, DecodeMode, FeatureNorm, Stream};
use facemotion::audio::{compute_logmel, read_wav, LogMelConfig};
use facemotion::codec::{CodecModel, ScaleSchedule, TokenPyramid};
use facemotion::dataset::{read_corpus, read_motion, synth_generate, write_corpus, write_motion, Corpus, MotionClip, SynthConfig, FEATURES_PER_FRAME};
use facemotion::metrics::{EvalReport, FddConvention};
use facemotion::motion::{read_basis, FlameBasis, MotionWindow, VertexMask, EXPR_DIM, FPS, MOTION_DIM};
use facemotion::trainer::{evaluate_ar, evaluate_codec, train_ar, train_codec, ArData, CodecData, Hook, OptimState, StepInfo, Trace, TrainConfig};
use facemotion::Error;
use serde::Serialize;
use tracing::{info, warn};

use crate::artifacts::{save_model, save_weights, sidecar_for, Bundle, STATE_FILE, TRACE_FILE};
use crate::config::{RunConfig, RUN_CONFIG};
use crate::{Command, Common, DecodeArg, DecodeFlags, TrainFlags};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth { out, clips, frames, common } => {
            let mut cfg = resolve(&common, "gen-synth")?;
            if let Some(n) = clips {
                cfg.synth.clips = n;
            }
            if let Some(f) = frames {
                cfg.synth.frames = f;
            }
            gen_synth(&cfg, &out)
        }
        Command::TrainCodec { data, out, train, no_multiscale, no_temporal_vq, common } => {
            let mut cfg = resolve(&common, "train-codec")?;
            apply_train(&mut cfg.codec_train, &mut cfg.max_clips, &train);
            if no_multiscale {
                cfg.codec.schedule = ScaleSchedule::single(cfg.codec.window())?;
            }
            if no_temporal_vq {
                cfg.codec.temporal = false;
            }
            cfg.validate()?;
            cmd_train_codec(&cfg, &data, &out, train.resume)
        }
        Command::TrainAr { data, codec, out, train, no_temporal_ar, no_style, freeze_style, common } => {
            let mut cfg = resolve(&common, "train-ar")?;
            apply_train(&mut cfg.ar_train, &mut cfg.max_clips, &train);
            if no_temporal_ar {
                cfg.ar.temporal = false;
            }
            if no_style {
                cfg.ar.use_style = false;
            }
            cfg.freeze_style |= freeze_style;
            cmd_train_ar(cfg, &data, &codec, &out, train.resume)
        }
        Command::Encode { model, motion, out, recon, common } => {
            let cfg = resolve(&common, "encode")?;
            encode(&cfg, &model, &motion, &out, recon.as_deref())
        }
        Command::Generate { model, audio, style, out, decode, common } => {
            let mut cfg = resolve(&common, "generate")?;
            apply_decode(&mut cfg, &decode);
            generate(&cfg, &model, &audio, style.as_deref(), &out)
        }
        Command::Eval { pred, gt, basis, mask, beta, scale, fdd_deviation_of_norm, out, common } => {
            let mut cfg = resolve(&common, "eval")?;
            if let Some(s) = scale {
                cfg.eval.scale = s;
            }
            if fdd_deviation_of_norm {
                cfg.eval.fdd = FddConvention::DeviationOfNorm;
            }
            eval(&cfg, &pred, &gt, &basis, &mask, beta.as_deref(), &out)
        }
        Command::Bench { model, seconds, out, common } => {
            let mut cfg = resolve(&common, "bench")?;
            if let Some(s) = seconds {
                cfg.bench.seconds = s;
            }
            bench(&cfg, &model, &out)
        }
        Command::ExportObj { motion, basis, beta, out, common } => {
            let cfg = resolve(&common, "export-obj")?;
            export_obj(&cfg, &motion, &basis, beta.as_deref(), &out)
        }
    }
}

fn resolve(common: &Common, command: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.command = command.into();
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.codec_train.seed = s;
        cfg.ar_train.seed = s;
        if let DecodeMode::Sample { seed, .. } = &mut cfg.decode {
            *seed = s;
        }
    }
    Ok(cfg)
}

fn apply_train(t: &mut TrainConfig, max_clips: &mut Option<usize>, f: &TrainFlags) {
    if let Some(s) = f.steps {
        t.iterations = s;
    }
    if let Some(b) = f.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = f.lr {
        t.lr_start = lr;
        t.lr_end = lr / 10.0;
    }
    if f.clips.is_some() {
        *max_clips = f.clips;
    }
}

fn apply_decode(cfg: &mut RunConfig, f: &DecodeFlags) {
    let (mut top_k, mut temperature) = match cfg.decode {
        DecodeMode::Sample { top_k, temperature, .. } => (top_k, temperature),
        DecodeMode::Argmax => (16, 1.0),
    };
    top_k = f.top_k.unwrap_or(top_k);
    temperature = f.temperature.unwrap_or(temperature);
    cfg.decode = match f.decode {
        Some(DecodeArg::Argmax) => DecodeMode::Argmax,
        Some(DecodeArg::Sample) => DecodeMode::Sample { top_k, temperature, seed: cfg.seed },
        None => match cfg.decode {
            DecodeMode::Sample { seed, .. } => DecodeMode::Sample { top_k, temperature, seed },
            m => m,
        },
    };
}

/// `path` plus an extra extension, e.g. `out.artm` -> `out.artm.run.json`.
fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn read_clip(path: &Path) -> Result<MotionClip> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_motion(&mut BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?)
}

fn write_clip(path: &Path, clip: &MotionClip) -> Result<()> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(File::create(path)?);
    write_motion(&mut w, clip)?;
    w.flush()?;
    Ok(())
}

fn load_beta(path: Option<&Path>, basis: &FlameBasis) -> Result<Vec<f32>> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?).map_err(Error::from)?),
        None => Ok(vec![0.0; basis.shape_count()]),
    }
}

fn load_corpus(dir: &Path, max_clips: Option<usize>) -> Result<Corpus> {
    let mut c = read_corpus(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    if let Some(n) = max_clips {
        if n == 0 {
            return Err(Error::Contract("--clips must be at least 1".into()).into());
        }
        c.truncate(n);
    }
    info!(clips = c.len(), "dataset loaded");
    Ok(c)
}

fn gen_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let clips = synth_generate(cfg.seed, cfg.synth.clips, cfg.synth.frames, &SynthConfig::default())?;
    let basis = FlameBasis::synthetic(cfg.seed, cfg.synth.n_shape);
    let beta = vec![0.0; cfg.synth.n_shape];
    write_corpus(out, &clips, &basis, &VertexMask::synthetic(), &beta)?;
    cfg.write_to(&out.join(RUN_CONFIG))?;
    info!(clips = clips.len(), dir = %out.display(), "synthetic dataset written");
    Ok(())
}

fn log_every(every: usize) -> impl FnMut(&StepInfo<'_>) -> facemotion::Result<bool> {
    let t0 = Instant::now();
    move |s: &StepInfo<'_>| {
        if s.step % every.max(1) == 0 {
            let terms: Vec<String> = s.terms.iter().map(|(k, v)| format!("{k}={v:.5}")).collect();
            info!("step {} lr {:.2e} |g| {:.3} {} ({:.0}s)", s.step, s.lr, s.grad_norm, terms.join(" "), t0.elapsed().as_secs_f64());
        }
        Ok(false)
    }
}

/// Runs `step_fn` in chunks of `every` steps, writing trace rows, weights and
/// optimizer state after each chunk. A numeric failure saves the weights as
/// `diverged.artc` before propagating.
fn chunked(
    out: &Path,
    total: usize,
    every: usize,
    state: &mut OptimState,
    mut step_fn: impl FnMut(&mut OptimState, &mut Hook<'_>) -> Result<Trace>,
    mut save: impl FnMut(&Path, &OptimState) -> Result<()>,
) -> Result<()> {
    let mut log = log_every(50);
    while state.next_step < total {
        let stop_at = (state.next_step / every.max(1) + 1) * every.max(1);
        let mut hook = |s: &StepInfo<'_>| -> facemotion::Result<bool> {
            log(s)?;
            Ok(s.step + 1 >= stop_at)
        };
        match step_fn(state, &mut hook) {
            Ok(trace) => {
                trace.append_csv(&out.join(TRACE_FILE))?;
                save(out, state)?;
            }
            Err(e) => {
                if matches!(e.downcast_ref::<Error>(), Some(Error::Numeric(_))) {
                    warn!(step = state.next_step, "training diverged; dumping state");
                    save(&out.join("diverged"), state)?;
                }
                return Err(e);
            }
        }
    }
    Ok(())
}

fn cmd_train_codec(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: bool) -> Result<()> {
    let corpus = load_corpus(data_dir, cfg.max_clips)?;
    fs::create_dir_all(out)?;
    cfg.write_to(&out.join(RUN_CONFIG))?;
    let data = CodecData::from_clips(&corpus.motions, cfg.codec.window(), &corpus.basis, &corpus.beta, &corpus.mask)?;
    let sidecar = sidecar_for(&cfg.codec, None, cfg.decode, cfg.seed);
    let (mut model, mut state) = if resume {
        let b = Bundle::load(out)?;
        if b.sidecar.codec != cfg.codec {
            return Err(Error::Contract("resumed codec config differs from the stored one".into()).into());
        }
        let st = OptimState::load(&b.codec.store, &out.join(STATE_FILE))?;
        info!(step = st.next_step, "resuming");
        (b.codec, st)
    } else {
        let _ = fs::remove_file(out.join(TRACE_FILE));
        let m = CodecModel::new(&cfg.codec, cfg.seed)?;
        let st = OptimState::new(&m.store);
        (m, st)
    };
    let before = evaluate_codec(&model, &data)?;
    info!(recon = before.recon, mae = before.mae, "codec before training");
    let model_cell = std::cell::RefCell::new(&mut model);
    chunked(
        out,
        cfg.codec_train.iterations,
        cfg.checkpoint_every,
        &mut state,
        |st, hook| Ok(train_codec(&mut model_cell.borrow_mut(), &data, &cfg.codec_train, st, Some(hook))?),
        |dir, st| save_codec_progress(dir, &model_cell.borrow(), st, &sidecar),
    )?;
    let after = evaluate_codec(&model, &data)?;
    info!(recon = after.recon, mae = after.mae, lve = after.lve, "codec after training");
    save_model(out, &model, None, &sidecar)?;
    Ok(())
}

fn save_codec_progress(dir: &Path, model: &CodecModel, st: &OptimState, sidecar: &crate::artifacts::Sidecar) -> Result<()> {
    if dir.file_name().is_some_and(|n| n == "diverged") {
        save_weights(&sibling(dir, ".artc"), model, None)?;
        st.save(&model.store, &sibling(dir, ".state.artc"))?;
        return Ok(());
    }
    save_model(dir, model, None, sidecar)?;
    st.save(&model.store, &dir.join(STATE_FILE))?;
    Ok(())
}

fn cmd_train_ar(mut cfg: RunConfig, data_dir: &Path, codec_dir: &Path, out: &Path, resume: bool) -> Result<()> {
    let codec = Bundle::load(codec_dir).with_context(|| format!("loading codec from {}", codec_dir.display()))?.codec;
    cfg.codec = codec.config().clone();
    cfg.validate()?;
    let corpus = load_corpus(data_dir, cfg.max_clips)?;
    fs::create_dir_all(out)?;
    cfg.write_to(&out.join(RUN_CONFIG))?;
    let pairs = corpus.pairs();
    let sidecar = sidecar_for(&cfg.codec, Some(&cfg.ar), cfg.decode, cfg.seed);
    let (mut ar, mut state) = if resume {
        let b = Bundle::load(out)?;
        let ar = b.ar.ok_or_else(|| Error::State("no stage-2 weights to resume from".into()))?;
        if ar.config() != &cfg.ar {
            return Err(Error::Contract("resumed AR config differs from the stored one".into()).into());
        }
        let st = OptimState::load(&ar.store, &out.join(STATE_FILE))?;
        info!(step = st.next_step, "resuming");
        (ar, st)
    } else {
        let _ = fs::remove_file(out.join(TRACE_FILE));
        let mut ar = ArModel::new(&cfg.ar, &cfg.codec, cfg.seed)?;
        let feats: Vec<_> = corpus.features.iter().map(|f| f.frames()).collect();
        ar.norm = FeatureNorm::fit(&feats)?;
        let st = OptimState::new(&ar.store);
        (ar, st)
    };
    let data = ArData::build(&codec, &ar, &pairs, cfg.seed)?;
    let e0 = evaluate_ar(&ar, &data)?;
    info!(loss = e0.loss, acc = e0.acc, windows = data.len(), "AR before training");
    let cell = std::cell::RefCell::new(&mut ar);
    let freeze = cfg.freeze_style;
    chunked(
        out,
        cfg.ar_train.iterations,
        cfg.checkpoint_every,
        &mut state,
        |st, hook| Ok(train_ar(&mut cell.borrow_mut(), &data, &cfg.ar_train, st, freeze, Some(hook))?),
        |dir, st| {
            let ar = cell.borrow();
            if dir.file_name().is_some_and(|n| n == "diverged") {
                save_weights(&sibling(dir, ".artc"), &codec, Some(&ar))?;
                st.save(&ar.store, &sibling(dir, ".state.artc"))?;
                return Ok(());
            }
            save_model(dir, &codec, Some(&ar), &sidecar)?;
            st.save(&ar.store, &dir.join(STATE_FILE))?;
            Ok(())
        },
    )?;
    let e1 = evaluate_ar(&ar, &data)?;
    info!(loss = e1.loss, acc = e1.acc, "AR after training");
    save_model(out, &codec, Some(&ar), &sidecar)?;
    Ok(())
}

#[derive(Serialize)]
struct TokenFile<'a> {
    window: usize,
    schedule: &'a [usize],
    frames: usize,
    windows: Vec<TokenPyramid>,
}

/// Tokenizes with ground-truth previous windows. The optional reconstruction
/// decodes from the tokens alone, each window using the previous decoded one
/// as context, as at inference.
fn encode(cfg: &RunConfig, model_dir: &Path, motion: &Path, out: &Path, recon: Option<&Path>) -> Result<()> {
    let codec = Bundle::load(model_dir)?.codec;
    let clip = read_clip(motion)?;
    let k = codec.config().window();
    let mut prev = MotionWindow::neutral(k);
    let mut pyramids = Vec::new();
    for start in (0..clip.len()).step_by(k) {
        let cur = clip.padded_window(start, k);
        pyramids.push(codec.tokenize(&prev, &cur)?);
        prev = cur;
    }
    ensure_parent(out)?;
    let file = TokenFile { window: k, schedule: codec.config().schedule.lengths(), frames: clip.len(), windows: pyramids };
    fs::write(out, serde_json::to_string(&file)?)?;
    cfg.write_to(&sibling(out, ".run.json"))?;
    if let Some(r) = recon {
        let decoded = decode_chain(&codec, &file.windows)?;
        write_clip(r, &MotionClip::from_windows(&decoded, clip.len())?)?;
        cfg.write_to(&sibling(r, ".run.json"))?;
    }
    Ok(())
}

fn decode_chain(codec: &CodecModel, pyramids: &[TokenPyramid]) -> Result<Vec<MotionWindow>> {
    let mut ctx = MotionWindow::neutral(codec.config().window());
    let mut out = Vec::with_capacity(pyramids.len());
    for p in pyramids {
        let w = codec.decode(p, &ctx)?;
        ctx = w.clone();
        out.push(w);
    }
    Ok(out)
}

fn style_window(ar: &ArModel, k: usize, style: Option<&Path>) -> Result<MotionWindow> {
    match style {
        Some(p) => Ok(read_clip(p)?.padded_window(0, k)),
        None if ar.config().use_style => Err(Error::Contract("this model needs --style".into()).into()),
        None => Ok(MotionWindow::neutral(k)),
    }
}

fn generate(cfg: &RunConfig, model_dir: &Path, audio: &Path, style: Option<&Path>, out: &Path) -> Result<()> {
    let bundle = Bundle::load(model_dir)?;
    let ar = bundle.require_ar()?;
    let wav = read_wav(BufReader::new(File::open(audio).with_context(|| format!("opening {}", audio.display()))?))?;
    let feats = compute_logmel(&wav, &LogMelConfig::default())?;
    let k = bundle.codec.config().window();
    let token = ar.style_encode(&style_window(ar, k, style)?)?;
    let t0 = Instant::now();
    let clip = generate_stream(ar, &bundle.codec, &feats, &token, &cfg.decode)?;
    info!(frames = clip.len(), seconds = t0.elapsed().as_secs_f64(), "generated");
    write_clip(out, &clip)?;
    cfg.write_to(&sibling(out, ".run.json"))?;
    Ok(())
}

fn eval(cfg: &RunConfig, pred: &[PathBuf], gt: &[PathBuf], basis: &Path, mask: &Path, beta: Option<&Path>, out: &Path) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!("{} predictions for {} ground-truth clips", pred.len(), gt.len())).into());
    }
    let basis = read_basis(&mut BufReader::new(File::open(basis)?))?;
    let mask = VertexMask::from_json(&fs::read_to_string(mask)?)?;
    mask.validate(basis.vertex_count())?;
    let vm = basis.vertex_model::<f32>(&load_beta(beta, &basis)?)?;
    let mut seqs = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        let (pc, gc) = (read_clip(p)?, read_clip(g)?);
        if pc.len() != gc.len() {
            return Err(Error::Dimension(format!("{} has {} frames, {} has {}", p.display(), pc.len(), g.display(), gc.len())).into());
        }
        let name = g.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        seqs.push((name, vm.vertices(pc.frames())?, vm.vertices(gc.frames())?));
    }
    let report = EvalReport::evaluate(&seqs, &mask, cfg.eval.scale, cfg.eval.fdd)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    fs::write(out.join("report.txt"), report.to_table())?;
    cfg.write_to(&out.join(RUN_CONFIG))?;
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    windows: usize,
    warmup_windows: usize,
    seconds_generated: f64,
    wall_seconds: f64,
    seconds_per_generated_second: f64,
    real_time_factor: f64,
    per_window_seconds: Vec<f64>,
    /// Reported for reference only; not a reproduction target.
    paper_reference_seconds_per_second: f64,
}

/// Times window generation plus decoding only; audio features are computed
/// before the clock starts.
fn bench(cfg: &RunConfig, model_dir: &Path, out: &Path) -> Result<()> {
    let bundle = Bundle::load(model_dir)?;
    let ar = bundle.require_ar()?;
    let k = bundle.codec.config().window();
    let window_s = k as f64 / FPS as f64;
    let timed = ((cfg.bench.seconds / window_s).ceil() as usize).max(10);
    let warm = cfg.bench.warmup_windows;
    let synth = synth_generate(cfg.seed, 1, (timed + warm) * k, &SynthConfig::default())?;
    let feats = &synth[0].features;
    let token = ar.style_encode(&synth[0].motion.padded_window(0, k))?;
    let per = k * FEATURES_PER_FRAME;
    let mut stream = Stream::new(ar, &bundle.codec, token, cfg.decode);
    for w in 0..warm {
        stream.step(&feats.window(w * per, per))?;
    }
    let mut times = Vec::with_capacity(timed);
    for w in warm..warm + timed {
        let audio = feats.window(w * per, per);
        let t0 = Instant::now();
        stream.step(&audio)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    let wall: f64 = times.iter().sum();
    let generated = timed as f64 * window_s;
    let report = BenchReport {
        windows: timed,
        warmup_windows: warm,
        seconds_generated: generated,
        wall_seconds: wall,
        seconds_per_generated_second: wall / generated,
        real_time_factor: wall / generated,
        per_window_seconds: times,
        paper_reference_seconds_per_second: 0.01,
    };
    info!(rtf = report.real_time_factor, "benchmark done (paper reference 0.01 s/s)");
    ensure_parent(out)?;
    fs::write(out, serde_json::to_string_pretty(&report)?)?;
    cfg.write_to(&sibling(out, ".run.json"))?;
    Ok(())
}

fn param_header() -> String {
    let mut h = String::from("frame");
    for i in 0..MOTION_DIM {
        let name = match i {
            i if i < EXPR_DIM => format!("expr_{i}"),
            i if i < EXPR_DIM + 3 => format!("rot_{}", i - EXPR_DIM),
            i => format!("jaw_{}", i - EXPR_DIM - 3),
        };
        let _ = write!(h, ",{name}");
    }
    h
}

fn export_obj(cfg: &RunConfig, motion: &Path, basis: &Path, beta: Option<&Path>, out: &Path) -> Result<()> {
    let basis = read_basis(&mut BufReader::new(File::open(basis)?))?;
    let clip = read_clip(motion)?;
    let verts = basis.vertex_model::<f32>(&load_beta(beta, &basis)?)?.vertices(clip.frames())?;
    fs::create_dir_all(out)?;
    let mut faces = String::new();
    for f in basis.faces().unwrap_or(&[]) {
        let _ = writeln!(faces, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    let mut csv = param_header();
    csv.push('\n');
    for t in 0..clip.len() {
        let mut obj = String::new();
        for v in verts.row(t).chunks_exact(3) {
            let _ = writeln!(obj, "v {} {} {}", v[0], v[1], v[2]);
        }
        obj.push_str(&faces);
        fs::write(out.join(format!("frame_{t:05}.obj")), obj)?;
        let _ = write!(csv, "{t}");
        for x in clip.frames().row(t) {
            let _ = write!(csv, ",{x}");
        }
        csv.push('\n');
    }
    fs::write(out.join("params.csv"), csv)?;
    cfg.write_to(&out.join(RUN_CONFIG))?;
    Ok(())
}
