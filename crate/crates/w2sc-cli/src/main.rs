//! `w2sc` command line: corpus synthesis, feature extraction, training,
//! conversion, evaluation.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use w2sc::config::RunConfig;
use w2sc::evaluation::{
    dtw_align, estimate_f0, mel_cepstral_distortion, rmse_f0, F0Options, F0Track, RmseVariant,
};
use w2sc::signal::{
    frame_silence_mask, griffin_lim, hann_window, invert_mel, load_mel, load_wav, log_mel_frames,
    min_max, normalize_log_mel, save_mel, save_wav, MelFilterbank, MelSpectrogram, Waveform,
    N_MELS,
};
use w2sc::synth::synth_pair;
use w2sc::training::{
    sample_batch, train_step, Checkpoint, Corpus, SegmentPool, TrainState, Utterance,
};

#[derive(Parser)]
#[command(name = "w2sc", about = "whisper-to-normal speech conversion")]
struct Cli {
    /// Flat `key = value` config file with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// WAV directory -> one feature file per input + corpus stats.
    Extract { in_dir: PathBuf, out_dir: PathBuf },
    /// Generate a paired synthetic whisper/normal WAV corpus.
    SynthCorpus {
        out_dir: PathBuf,
        #[arg(long, short = 'n')]
        n_utterances: usize,
    },
    /// Train on extracted features; writes checkpoints and a CSV loss log.
    Train {
        corpus_dir: PathBuf,
        checkpoint_dir: PathBuf,
        /// Continue from the newest checkpoint in checkpoint_dir.
        #[arg(long)]
        resume: bool,
    },
    /// Convert one whisper WAV through a trained checkpoint.
    Convert {
        checkpoint: PathBuf,
        in_wav: PathBuf,
        out_wav: PathBuf,
    },
    /// Compare converted WAVs against references; writes a CSV report.
    Evaluate {
        converted_dir: PathBuf,
        reference_dir: PathBuf,
        report: PathBuf,
    },
}

enum CliError {
    /// Bad input, config, or arguments: exit 1.
    Validation(String),
    /// Mid-run failure (NaN loss, broken checkpoint): exit 2.
    Runtime(String),
}

impl CliError {
    fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("aborted: {msg}");
            std::process::exit(2);
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match cli_config {
        Some(p) => RunConfig::load(p).map_err(CliError::validation)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train_seed = s;
    }
    cfg.validate().map_err(CliError::validation)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.config, cli.seed)?;
    match cli.command {
        Command::Extract { in_dir, out_dir } => cmd_extract(&in_dir, &out_dir, &cfg),
        Command::SynthCorpus {
            out_dir,
            n_utterances,
        } => cmd_synth_corpus(&out_dir, n_utterances, &cfg),
        Command::Train {
            corpus_dir,
            checkpoint_dir,
            resume,
        } => cmd_train(&corpus_dir, &checkpoint_dir, resume, &cfg),
        Command::Convert {
            checkpoint,
            in_wav,
            out_wav,
        } => cmd_convert(&checkpoint, &in_wav, &out_wav, &cfg),
        Command::Evaluate {
            converted_dir,
            reference_dir,
            report,
        } => cmd_evaluate(&converted_dir, &reference_dir, &report, &cfg),
    }
}

fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == ext).unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

fn filterbank(cfg: &RunConfig) -> MelFilterbank {
    MelFilterbank::new(
        cfg.signal_sample_rate,
        cfg.signal_n_fft,
        cfg.signal_f_min,
        cfg.signal_f_max,
    )
}

fn cmd_extract(in_dir: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let wavs = list_files(in_dir, "wav")?;
    if wavs.is_empty() {
        return Err(CliError::Validation(format!(
            "no input files in {}",
            in_dir.display()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(CliError::validation)?;
    let fb = filterbank(cfg);
    let window = hann_window(cfg.signal_n_fft);

    // First pass: raw log-mel per file; skip unreadable files but keep going.
    let mut raws: Vec<(PathBuf, Vec<f64>)> = Vec::new();
    for path in &wavs {
        let result = load_wav(path, Some(cfg.signal_sample_rate)).and_then(|w| {
            log_mel_frames(&w, &fb, cfg.signal_n_fft, cfg.signal_hop, &window)
        });
        match result {
            Ok(raw) => raws.push((path.clone(), raw)),
            Err(e) => eprintln!("skipping {}: {e}", path.display()),
        }
    }
    if raws.is_empty() {
        return Err(CliError::Runtime("no file could be extracted".into()));
    }

    // Corpus-level normalization stats over every frame of every file.
    let all: Vec<f64> = raws.iter().flat_map(|(_, r)| r.iter().copied()).collect();
    let stats = min_max(&all);
    for (path, raw) in &raws {
        let mel = normalize_log_mel(raw, stats);
        let out = out_dir
            .join(path.file_stem().unwrap_or_default())
            .with_extension("mel");
        save_mel(&out, &mel).map_err(CliError::runtime)?;
    }
    std::fs::write(
        out_dir.join("stats.txt"),
        format!("min = {:?}\nmax = {:?}\n", stats.0, stats.1),
    )
    .map_err(CliError::runtime)?;
    println!("extracted {} files to {}", raws.len(), out_dir.display());
    Ok(())
}

fn cmd_synth_corpus(out_dir: &Path, n: usize, cfg: &RunConfig) -> Result<(), CliError> {
    if n < 1 {
        return Err(CliError::Validation("need at least one utterance".into()));
    }
    let whisper_dir = out_dir.join("whisper");
    let normal_dir = out_dir.join("normal");
    std::fs::create_dir_all(&whisper_dir).map_err(CliError::validation)?;
    std::fs::create_dir_all(&normal_dir).map_err(CliError::validation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train_seed);
    for i in 0..n {
        let duration = 1.0 + (i % 4) as f64 * 0.25;
        let pair = synth_pair(&mut rng, duration, cfg.signal_sample_rate);
        let name = format!("utt_{i:04}.wav");
        save_wav(&whisper_dir.join(&name), &pair.whisper).map_err(CliError::runtime)?;
        save_wav(&normal_dir.join(&name), &pair.normal).map_err(CliError::runtime)?;
    }
    println!("wrote {n} pairs under {}", out_dir.display());
    Ok(())
}

fn load_feature_dir(dir: &Path) -> Result<Vec<Utterance>, CliError> {
    let files = list_files(dir, "mel")?;
    if files.is_empty() {
        return Err(CliError::Validation(format!(
            "no feature files in {}",
            dir.display()
        )));
    }
    files
        .iter()
        .map(|p| {
            Ok(Utterance {
                name: p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                mel: load_mel(p).map_err(CliError::validation)?,
            })
        })
        .collect()
}

fn newest_checkpoint(dir: &Path) -> Option<PathBuf> {
    list_files(dir, "w2sc").ok()?.into_iter().next_back()
}

fn cmd_train(
    corpus_dir: &Path,
    checkpoint_dir: &Path,
    resume: bool,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let corpus = Corpus {
        whisper: load_feature_dir(&corpus_dir.join("whisper"))?,
        normal: load_feature_dir(&corpus_dir.join("normal"))?,
    };
    let whisper_stats = corpus.whisper[0].mel.norm_stats;
    let normal_stats = corpus.normal[0].mel.norm_stats;
    let pool = SegmentPool::build(&corpus).map_err(CliError::validation)?;
    std::fs::create_dir_all(checkpoint_dir).map_err(CliError::validation)?;

    let mut state = match (resume, newest_checkpoint(checkpoint_dir)) {
        (true, Some(path)) => {
            let ckpt = Checkpoint::load(&path).map_err(CliError::runtime)?;
            let state = TrainState::from_checkpoint(&ckpt).map_err(CliError::runtime)?;
            println!("resumed from {} at step {}", path.display(), state.step);
            state
        }
        (true, None) => {
            return Err(CliError::Validation(format!(
                "--resume set but no checkpoint in {}",
                checkpoint_dir.display()
            )))
        }
        (false, _) => TrainState::new(cfg.clone()),
    };

    let save = |state: &TrainState| -> Result<(), CliError> {
        let mut ckpt = state.to_checkpoint();
        ckpt.put_vec("stats:whisper", &[whisper_stats.0, whisper_stats.1]);
        ckpt.put_vec("stats:normal", &[normal_stats.0, normal_stats.1]);
        let path = checkpoint_dir.join(format!("ckpt_{:06}.w2sc", state.step));
        ckpt.save(&path).map_err(CliError::runtime)
    };

    let log_path = checkpoint_dir.join("loss_log.csv");
    let mut log = if state.step > 0 && log_path.exists() {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(CliError::runtime)?
    } else {
        let mut f = std::fs::File::create(&log_path).map_err(CliError::runtime)?;
        writeln!(f, "step,L_D,L_G_adv,L_GS,L_S,L_id").map_err(CliError::runtime)?;
        f
    };

    if state.step == 0 {
        save(&state)?;
    }
    let total = cfg.train_total_generator_steps;
    while state.step < total {
        let mut rng = state.rng_for_step(state.step);
        let batch = sample_batch(&pool, cfg.train_batch_size, &mut rng);
        let report = train_step(&mut state, &batch).map_err(CliError::runtime)?;
        let d = report
            .d_loss
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        writeln!(
            log,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            report.step,
            d,
            report.parts.adv,
            report.parts.siamese_transform,
            report.parts.siamese_margin,
            report.parts.identity
        )
        .map_err(CliError::runtime)?;
        if state.step % cfg.train_checkpoint_interval == 0 || state.step == total {
            save(&state)?;
        }
    }
    if total % cfg.train_checkpoint_interval != 0 && total > 0 {
        save(&state)?;
    }
    println!("trained to step {}", state.step);
    Ok(())
}

fn ckpt_stats(ckpt: &Checkpoint, name: &str) -> Result<(f32, f32), CliError> {
    let t = ckpt.get(name).map_err(CliError::validation)?;
    if t.data.len() != 2 {
        return Err(CliError::Validation(format!("malformed {name} in checkpoint")));
    }
    Ok((t.data[0], t.data[1]))
}

fn cmd_convert(
    checkpoint: &Path,
    in_wav: &Path,
    out_wav: &Path,
    cli_cfg: &RunConfig,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint).map_err(CliError::validation)?;
    let state = TrainState::from_checkpoint(&ckpt).map_err(CliError::validation)?;
    // Signal settings come from the training-time config inside the
    // checkpoint so features match the model; only eval knobs may differ.
    let mut cfg = state.config.clone();
    cfg.eval_f0_floor = cli_cfg.eval_f0_floor;
    cfg.eval_f0_ceil = cli_cfg.eval_f0_ceil;
    let whisper_stats = ckpt_stats(&ckpt, "stats:whisper")?;
    let normal_stats = ckpt_stats(&ckpt, "stats:normal")?;

    let wav = load_wav(in_wav, Some(cfg.signal_sample_rate)).map_err(CliError::validation)?;
    let fb = filterbank(&cfg);
    let window = hann_window(cfg.signal_n_fft);
    let raw = log_mel_frames(&wav, &fb, cfg.signal_n_fft, cfg.signal_hop, &window)
        .map_err(CliError::validation)?;
    let mel = normalize_log_mel(&raw, whisper_stats);

    let mut converted =
        w2sc::training::convert_utterance(&state.gen, &mel).map_err(CliError::runtime)?;
    // Generated segments live in the normal domain; denormalize with its stats.
    converted.norm_stats = normal_stats;

    let mag = invert_mel(&converted, &fb);
    let result = griffin_lim(
        &mag,
        converted.n_frames(),
        cfg.signal_griffin_lim_iters,
        cfg.signal_n_fft,
        cfg.signal_hop,
        &window,
        cfg.signal_sample_rate,
    );
    let mut out = result.waveform;
    let peak = out.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()));
    if peak > 1.0 {
        for s in out.samples.iter_mut() {
            *s /= peak;
        }
    }
    if out.samples.iter().any(|s| !s.is_finite()) {
        return Err(CliError::Runtime("non-finite output waveform".into()));
    }
    save_wav(out_wav, &out).map_err(CliError::runtime)?;
    println!(
        "converted {} ({} frames) -> {}",
        in_wav.display(),
        converted.n_frames(),
        out_wav.display()
    );
    Ok(())
}

struct UttMetrics {
    id: String,
    rmse_original: f64,
    rmse_processed: f64,
    rmse_normalized: f64,
    mcd_db: f64,
    voiced_fraction: f64,
}

fn evaluate_pair(
    conv_path: &Path,
    ref_path: &Path,
    cfg: &RunConfig,
    fb: &MelFilterbank,
    window: &[f64],
) -> Result<UttMetrics, CliError> {
    let conv = load_wav(conv_path, Some(cfg.signal_sample_rate)).map_err(CliError::validation)?;
    let reference = load_wav(ref_path, Some(cfg.signal_sample_rate)).map_err(CliError::validation)?;
    let mel_of = |w: &Waveform| -> Result<MelSpectrogram, CliError> {
        let raw = log_mel_frames(w, fb, cfg.signal_n_fft, cfg.signal_hop, window)
            .map_err(CliError::validation)?;
        Ok(normalize_log_mel(&raw, min_max(&raw)))
    };
    let mel_c = mel_of(&conv)?;
    let mel_r = mel_of(&reference)?;
    let path = dtw_align(&mel_c.frames, &mel_r.frames, N_MELS).map_err(CliError::runtime)?;

    let opts = F0Options {
        floor_hz: cfg.eval_f0_floor,
        ceil_hz: cfg.eval_f0_ceil,
        frame_ms: cfg.eval_f0_frame_ms,
        hop_ms: cfg.eval_f0_hop_ms,
        voicing_threshold: cfg.eval_voicing_threshold,
    };
    let f0_c = estimate_f0(&conv, &opts);
    let f0_r = estimate_f0(&reference, &opts);

    // Map aligned mel frames onto F0 frames (different hop rates).
    let mel_hop_s = cfg.signal_hop as f64 / cfg.signal_sample_rate as f64;
    let to_f0_idx = |t: usize, track: &F0Track| -> Option<usize> {
        if track.f0.is_empty() {
            return None;
        }
        let idx = ((t as f64 * mel_hop_s) / track.hop_seconds).round() as usize;
        Some(idx.min(track.f0.len() - 1))
    };
    let silence_r = frame_silence_mask(&mel_r, cfg.signal_silence_db);
    let mut f0_c_aligned = Vec::new();
    let mut f0_r_aligned = Vec::new();
    let mut silence_aligned = Vec::new();
    for &(i, j) in &path.pairs {
        match (to_f0_idx(i, &f0_c), to_f0_idx(j, &f0_r)) {
            (Some(ic), Some(jr)) => {
                f0_c_aligned.push(f0_c.f0[ic]);
                f0_r_aligned.push(f0_r.f0[jr]);
                silence_aligned.push(silence_r[j]);
            }
            _ => continue,
        }
    }
    let track_c = F0Track {
        f0: f0_c_aligned,
        hop_seconds: f0_c.hop_seconds,
    };
    let track_r = F0Track {
        f0: f0_r_aligned,
        hop_seconds: f0_r.hop_seconds,
    };
    let original = rmse_f0(&track_c, &track_r, RmseVariant::Original, None)
        .map_err(CliError::runtime)?;
    let processed = rmse_f0(
        &track_c,
        &track_r,
        RmseVariant::Processed,
        Some(&silence_aligned),
    )
    .map_err(CliError::runtime)?;
    let mcd = mel_cepstral_distortion(&mel_c, &mel_r, &path);
    Ok(UttMetrics {
        id: conv_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        rmse_original: original.literal,
        rmse_processed: processed.literal,
        rmse_normalized: processed.normalized,
        mcd_db: mcd,
        voiced_fraction: f0_c.voiced_fraction(),
    })
}

fn cmd_evaluate(
    converted_dir: &Path,
    reference_dir: &Path,
    report: &Path,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let conv_files = list_files(converted_dir, "wav")?;
    if conv_files.is_empty() {
        return Err(CliError::Validation(format!(
            "no wav files in {}",
            converted_dir.display()
        )));
    }
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for c in &conv_files {
        let name = c.file_name().unwrap_or_default();
        let r = reference_dir.join(name);
        if r.exists() {
            pairs.push((c.clone(), r));
        } else {
            missing.push(name.to_string_lossy().into_owned());
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Validation(format!(
            "no reference for: {}",
            missing.join(", ")
        )));
    }
    let fb = filterbank(cfg);
    let window = hann_window(cfg.signal_n_fft);
    let mut rows = Vec::new();
    for (c, r) in &pairs {
        rows.push(evaluate_pair(c, r, cfg, &fb, &window)?);
    }
    let mut out = String::from(
        "id,rmse_f0_original,rmse_f0_processed,rmse_f0_normalized,mcd_db,voiced_frame_fraction\n",
    );
    let n = rows.len() as f64;
    let mut sums = [0.0f64; 5];
    for row in &rows {
        let vals = [
            row.rmse_original,
            row.rmse_processed,
            row.rmse_normalized,
            row.mcd_db,
            row.voiced_fraction,
        ];
        for (s, v) in sums.iter_mut().zip(vals) {
            *s += v;
        }
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            row.id, vals[0], vals[1], vals[2], vals[3], vals[4]
        )
        .unwrap();
    }
    writeln!(
        out,
        "mean,{:.6},{:.6},{:.6},{:.6},{:.6}",
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n,
        sums[4] / n
    )
    .unwrap();
    std::fs::write(report, out).map_err(CliError::runtime)?;
    println!("evaluated {} pairs -> {}", rows.len(), report.display());
    Ok(())
}
