//! Batch pipeline front-end: score, asnorm, eval, calibrate, fuse, augment.
//!
//! Stages communicate through score files so multi-system workflows can
//! fan out and fuse. Exit codes: 0 success, 1 domain error, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use svkit::augment::{self, FeatureMatrix, Waveform};
use svkit::calib::{
    apply_calibration, fit_calibration, load_calibration_model, manual_fusion,
    write_calibration_model, SystemScores,
};
use svkit::corpus_io::{
    load_embeddings, load_scores, load_trials, write_scores, EmbeddingFormat, ScoreSet,
};
use svkit::metrics::{act_dcf, bayes_threshold, cllr, det_points, eer, min_dcf, DcfParams, LabeledScores};
use svkit::scoring::{asnorm, build_cohort_scores, load_plda, score_trials, Backend, Strategy};

#[derive(Parser)]
#[command(name = "svkit", version, about = "Speaker verification scoring, normalization, calibration and evaluation toolkit")]
struct Cli {
    /// Cap on scoring parallelism (default: machine parallelism)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Cosine,
    Plda,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Single,
    Ea,
    Msa,
    EaMsa,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Single => Strategy::Single,
            StrategyArg::Ea => Strategy::Ea,
            StrategyArg::Msa => Strategy::Msa,
            StrategyArg::EaMsa => Strategy::EaMsa,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Binary,
    Text,
}

impl From<FormatArg> for EmbeddingFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Binary => EmbeddingFormat::Binary,
            FormatArg::Text => EmbeddingFormat::Text,
        }
    }
}

#[derive(Args)]
struct BackendOpts {
    #[arg(long, value_enum, default_value = "cosine")]
    backend: BackendArg,
    /// PLDA model file (required with --backend plda)
    #[arg(long)]
    plda_model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ea")]
    strategy: StrategyArg,
}

#[derive(Subcommand)]
enum Command {
    /// Score a trial list against an embedding set
    Score {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        format: FormatArg,
        #[arg(long)]
        trials: PathBuf,
        #[command(flatten)]
        backend: BackendOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adaptive symmetric score normalization against a cohort
    Asnorm {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        format: FormatArg,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value_t = 300)]
        topk: usize,
        #[command(flatten)]
        backend: BackendOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute EER / minDCF / actual DCF / Cllr on labeled trials
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        ptarget: f64,
        #[arg(long, default_value_t = 1.0)]
        cmiss: f64,
        #[arg(long, default_value_t = 1.0)]
        cfa: f64,
        /// Write DET points (P_miss P_fa per line) to this file
        #[arg(long)]
        det: Option<PathBuf>,
        /// Emit machine-readable key=value lines
        #[arg(long)]
        machine: bool,
    },
    /// Fit prior-weighted logistic calibration / fusion weights
    Calibrate {
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        prior: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse systems with a fitted model or manual weights
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        #[arg(long, conflicts_with = "weights")]
        model: Option<PathBuf>,
        /// Comma-separated manual weights, one per system
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Data augmentation transforms on raw f32-LE files
    #[command(subcommand)]
    Augment(AugmentCommand),
}

#[derive(Subcommand)]
enum AugmentCommand {
    /// Time/frequency masking and warping on a raw feature matrix
    Specaug {
        #[arg(long, name = "RAW")]
        r#in: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        time_masks: usize,
        #[arg(long, default_value_t = 0)]
        max_time: usize,
        #[arg(long, default_value_t = 0)]
        freq_masks: usize,
        #[arg(long, default_value_t = 0)]
        max_freq: usize,
        #[arg(long, default_value_t = 0)]
        warp: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Additive noise at a target SNR
    Noise {
        #[arg(long)]
        r#in: PathBuf,
        #[arg(long)]
        noise: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        snr_db: f64,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
    },
    /// Convolve with a room impulse response
    Reverb {
        #[arg(long)]
        r#in: PathBuf,
        #[arg(long)]
        rir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
    },
    /// Speed perturbation by resampling
    Speed {
        #[arg(long)]
        r#in: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        factor: f64,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn make_backend<'a>(
    opts: &BackendOpts,
    plda_storage: &'a mut Option<svkit::scoring::PldaModel>,
) -> Result<Backend<'a>, String> {
    match opts.backend {
        BackendArg::Cosine => Ok(Backend::Cosine),
        BackendArg::Plda => {
            let path = opts
                .plda_model
                .as_ref()
                .ok_or("--plda-model is required with --backend plda")?;
            *plda_storage = Some(load_plda(path).map_err(|e| e.to_string())?);
            Ok(Backend::Plda(plda_storage.as_ref().unwrap()))
        }
    }
}

fn run(command: Command) -> Result<(), String> {
    match command {
        Command::Score {
            embeddings,
            format,
            trials,
            backend,
            out,
        } => {
            let embs =
                load_embeddings(&embeddings, format.into()).map_err(|e| e.to_string())?;
            let trial_list = load_trials(&trials).map_err(|e| e.to_string())?;
            let mut plda = None;
            let be = make_backend(&backend, &mut plda)?;
            let scores = score_trials(&embs, &trial_list, be, backend.strategy.into())
                .map_err(|e| e.to_string())?;
            write_scores(&scores, &out).map_err(|e| e.to_string())?;
            Ok(())
        }
        Command::Asnorm {
            scores,
            embeddings,
            format,
            cohort,
            topk,
            backend,
            out,
        } => {
            let raw = load_scores(&scores).map_err(|e| e.to_string())?;
            let embs =
                load_embeddings(&embeddings, format.into()).map_err(|e| e.to_string())?;
            let cohort_set =
                load_embeddings(&cohort, format.into()).map_err(|e| e.to_string())?;
            let mut plda = None;
            let be = make_backend(&backend, &mut plda)?;
            let k = topk.min(cohort_set.len());
            if k < topk {
                eprintln!(
                    "warning: top-K {topk} clamped to cohort size {}",
                    cohort_set.len()
                );
            }
            let cohort_scores =
                build_cohort_scores(&embs, &cohort_set, be, backend.strategy.into())
                    .map_err(|e| e.to_string())?;
            let normalized = asnorm(&raw, &cohort_scores, &cohort_scores, k)
                .map_err(|e| e.to_string())?;
            write_scores(&normalized, &out).map_err(|e| e.to_string())?;
            Ok(())
        }
        Command::Eval {
            scores,
            trials,
            ptarget,
            cmiss,
            cfa,
            det,
            machine,
        } => {
            let score_set = load_scores(&scores).map_err(|e| e.to_string())?;
            let trial_list = load_trials(&trials).map_err(|e| e.to_string())?;
            let ls = LabeledScores::from_trials(&score_set, &trial_list)
                .map_err(|e| e.to_string())?;
            let params = DcfParams::new(ptarget, cmiss, cfa).map_err(|e| e.to_string())?;
            let (eer_value, eer_threshold) = eer(&ls);
            let (mdcf, mdcf_threshold) = min_dcf(&ls, &params);
            let adcf = act_dcf(&ls, &params, bayes_threshold(&params));
            let cllr_value = cllr(&ls);
            if machine {
                println!("eer={:.6e}", eer_value);
                println!("eer_threshold={:.6e}", eer_threshold);
                println!("min_dcf={:.6e}", mdcf);
                println!("min_dcf_threshold={:.6e}", mdcf_threshold);
                println!("act_dcf={:.6e}", adcf);
                println!("cllr={:.6e}", cllr_value);
            } else {
                println!(
                    "EER(%) {:.6} minDCF {:.6} threshold {:.6}",
                    100.0 * eer_value,
                    mdcf,
                    mdcf_threshold
                );
                println!("actDCF {:.6} Cllr {:.6}", adcf, cllr_value);
            }
            if let Some(det_path) = det {
                let pts = det_points(&ls);
                let mut body = String::new();
                for (pm, pf) in pts {
                    body.push_str(&format!("{:.16e} {:.16e}\n", pm, pf));
                }
                std::fs::write(&det_path, body).map_err(|e| e.to_string())?;
            }
            Ok(())
        }
        Command::Calibrate {
            scores,
            trials,
            prior,
            out,
        } => {
            let trial_list = load_trials(&trials).map_err(|e| e.to_string())?;
            let sets: Result<Vec<ScoreSet>, String> = scores
                .iter()
                .map(|p| load_scores(p).map_err(|e| e.to_string()))
                .collect();
            let ss = SystemScores::from_score_sets(&sets?, &trial_list)
                .map_err(|e| e.to_string())?;
            let fit = fit_calibration(&ss, prior).map_err(|e| e.to_string())?;
            if !fit.converged {
                eprintln!(
                    "warning: calibration did not converge in {} iterations",
                    fit.iterations
                );
            }
            write_calibration_model(&fit.model, &out).map_err(|e| e.to_string())?;
            println!(
                "calibration objective {:.6e} after {} iterations",
                fit.objective, fit.iterations
            );
            Ok(())
        }
        Command::Fuse {
            scores,
            model,
            weights,
            out,
        } => {
            let sets: Result<Vec<ScoreSet>, String> = scores
                .iter()
                .map(|p| load_scores(p).map_err(|e| e.to_string()))
                .collect();
            let sets = sets?;
            // fused application does not need labels; synthesize the trial
            // list from the first system's (enroll, test) pairs
            let trial_list = svkit::corpus_io::TrialList {
                trials: sets[0]
                    .entries
                    .iter()
                    .map(|e| svkit::corpus_io::Trial {
                        enroll: e.enroll.clone(),
                        test: e.test.clone(),
                        label: None,
                    })
                    .collect(),
            };
            let ss = SystemScores::from_score_sets(&sets, &trial_list)
                .map_err(|e| e.to_string())?;
            let fused = match (model, weights) {
                (Some(path), None) => {
                    let model = load_calibration_model(&path).map_err(|e| e.to_string())?;
                    apply_calibration(&model, &ss).map_err(|e| e.to_string())?
                }
                (None, Some(spec)) => {
                    let parsed: Result<Vec<f64>, _> =
                        spec.split(',').map(|t| t.trim().parse::<f64>()).collect();
                    let w = parsed.map_err(|_| "invalid --weights list".to_string())?;
                    manual_fusion(&w, &ss).map_err(|e| e.to_string())?
                }
                _ => return Err("exactly one of --model or --weights is required".into()),
            };
            write_scores(&fused, &out).map_err(|e| e.to_string())?;
            Ok(())
        }
        Command::Augment(cmd) => run_augment(cmd),
    }
}

fn read_raw_f32(path: &PathBuf) -> Result<Vec<f64>, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{}: length not a multiple of 4", path.display()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_raw_f32(path: &PathBuf, samples: &[f64]) -> Result<(), String> {
    let mut bytes = Vec::with_capacity(samples.len() * 4);
    for &s in samples {
        bytes.extend_from_slice(&(s as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| e.to_string())
}

fn run_augment(cmd: AugmentCommand) -> Result<(), String> {
    match cmd {
        AugmentCommand::Specaug {
            r#in,
            out,
            frames,
            bins,
            time_masks,
            max_time,
            freq_masks,
            max_freq,
            warp,
            seed,
        } => {
            let values = read_raw_f32(&r#in)?;
            let feat = FeatureMatrix::new(frames, bins, values).map_err(|e| e.to_string())?;
            let result = augment::specaug(
                &feat, time_masks, max_time, freq_masks, max_freq, warp, seed,
            )
            .map_err(|e| e.to_string())?;
            write_raw_f32(&out, &result.values)
        }
        AugmentCommand::Noise {
            r#in,
            noise,
            out,
            snr_db,
            sample_rate,
        } => {
            let signal =
                Waveform::new(read_raw_f32(&r#in)?, sample_rate).map_err(|e| e.to_string())?;
            let noise_wave =
                Waveform::new(read_raw_f32(&noise)?, sample_rate).map_err(|e| e.to_string())?;
            let result =
                augment::mix_at_snr(&signal, &noise_wave, snr_db).map_err(|e| e.to_string())?;
            write_raw_f32(&out, &result.samples)
        }
        AugmentCommand::Reverb {
            r#in,
            rir,
            out,
            sample_rate,
        } => {
            let signal =
                Waveform::new(read_raw_f32(&r#in)?, sample_rate).map_err(|e| e.to_string())?;
            let rir_wave =
                Waveform::new(read_raw_f32(&rir)?, sample_rate).map_err(|e| e.to_string())?;
            let result = augment::reverberate(&signal, &rir_wave).map_err(|e| e.to_string())?;
            write_raw_f32(&out, &result.samples)
        }
        AugmentCommand::Speed {
            r#in,
            out,
            factor,
            sample_rate,
        } => {
            let signal =
                Waveform::new(read_raw_f32(&r#in)?, sample_rate).map_err(|e| e.to_string())?;
            let result = augment::speed_perturb(&signal, factor).map_err(|e| e.to_string())?;
            write_raw_f32(&out, &result.samples)
        }
    }
}
