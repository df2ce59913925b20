use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mtdnet::autodiff::gradcheck::CheckOptions;
use mtdnet::checkpoint::Checkpoint;
use mtdnet::config::RunConfig;
use mtdnet::evaluation::{self, Scorer};
use mtdnet::experiment::{self, AblationSetup};
use mtdnet::network::{self, init_params, NetConfig, Preset, Variant};
use mtdnet::sampling::LabeledImage;
use mtdnet::synth::{self, SplitProtocol, SynthSpec};
use mtdnet::trainer::{self, CrossDomainState};

#[derive(Parser)]
#[command(name = "mtdnet", version, about = "Multi-task person re-identification: training, evaluation and checks")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic two-camera dataset as PNGs plus manifest.csv.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 80)]
        identities: usize,
        #[arg(long, default_value_t = 1)]
        images_per_camera: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Camera-2 domain shift in [0, 1].
        #[arg(long, default_value_t = 0.3)]
        shift: f64,
        /// Write `train/` and `test/` sub-datasets with this many test identities.
        #[arg(long, default_value_t = 0)]
        test_identities: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a config file; writes a checkpoint and a loss-history CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (manifest.csv, or <person>/<camera>/<image> folders).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV [default: <out>.loss.csv].
        #[arg(long)]
        history: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Coupled source/target training starting from a source checkpoint.
    TrainCross {
        /// Loss weights and training settings; the architecture must match the checkpoint.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source_checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Set loss.lambda_cts to the initial ReID / contrastive loss ratio.
        #[arg(long)]
        balance_cts: bool,
    },
    /// Single-shot CMC of a checkpoint on a test dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Extra gallery-only identities (camera 2 images are used).
        #[arg(long)]
        distractors: Option<PathBuf>,
        /// CMC CSV output.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ScorerArg::Auto)]
        scorer: ScorerArg,
        /// First gallery-selection seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of gallery selections averaged.
        #[arg(long, default_value_t = 1)]
        trials: u64,
    },
    /// Finite-difference check of the full training loss.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
        preset: PresetArg,
        #[arg(long, value_enum, default_value_t = VariantArg::Full)]
        variant: VariantArg,
        /// Triplet margin used for the check; large enough to keep the hinge
        /// open at the default seed without inflating the loss.
        #[arg(long, default_value_t = 10.0)]
        alpha: f64,
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 8)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Threshold loss versus ranking on the two-case score layouts.
    CaseStudy,
    /// Train and evaluate the cls-only, rnk-only and full variants.
    Ablate {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        /// Table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerArg {
    /// Classification probability when the network has the pair head, otherwise embedding distance.
    Auto,
    Cls,
    Euclid,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    Cls,
    Rnk,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::Cls => Variant::ClsOnly,
            VariantArg::Rnk => Variant::RnkOnly,
        }
    }
}

struct Failure {
    stage: &'static str,
    message: String,
}

type CliResult<T> = Result<T, Failure>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T, E: std::fmt::Display> Stage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| Failure {
            stage,
            message: e.to_string(),
        })
    }
}

fn fail<T>(stage: &'static str, message: impl Into<String>) -> CliResult<T> {
    Err(Failure {
        stage,
        message: message.into(),
    })
}

fn load_data(dir: &Path, net: &NetConfig) -> mtdnet::Result<Vec<LabeledImage>> {
    let size = [net.input_shape[1], net.input_shape[2]];
    if dir.join(synth::MANIFEST).is_file() {
        synth::import_dataset(dir, size)
    } else {
        synth::load_folder(dir, size)
    }
}

fn default_history(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn write(path: &Path, text: &str) -> mtdnet::Result<()> {
    std::fs::write(path, text).map_err(|e| mtdnet::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData {
            out,
            identities,
            images_per_camera,
            size,
            shift,
            test_identities,
            seed,
        } => {
            let spec = SynthSpec {
                n_identities: identities,
                images_per_camera,
                image_size: [size, size],
                domain_shift: shift,
                seed,
                ..SynthSpec::default()
            };
            let data = synth::generate(&spec).stage("generating data")?;
            if test_identities == 0 {
                synth::export_dataset(&data, &out).stage("writing dataset")?;
                println!("wrote {} images of {identities} identities to {}", data.len(), out.display());
            } else {
                let split = synth::split(
                    &data,
                    &SplitProtocol {
                        n_test_identities: test_identities,
                        n_val_identities: 0,
                        gallery_distractors: 0,
                        seed,
                    },
                )
                .stage("splitting identities")?;
                synth::export_dataset(&split.train, &out.join("train")).stage("writing dataset")?;
                synth::export_dataset(&split.test, &out.join("test")).stage("writing dataset")?;
                println!(
                    "wrote {} training and {} test images to {}",
                    split.train.len(),
                    split.test.len(),
                    out.display()
                );
            }
        }
        Command::Train {
            config,
            data,
            out,
            history,
            seed,
            epochs,
        } => {
            let mut cfg = RunConfig::load(&config).stage("loading config")?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let data = load_data(&data, &cfg.net).stage("loading dataset")?;
            let params = init_params(&cfg.net, cfg.train.seed).stage("initialising parameters")?;
            let res = trainer::train_single(&cfg.net, params, &data, &cfg.train, None).stage("training")?;
            let ck = Checkpoint {
                net: cfg.net.clone(),
                seed: cfg.train.seed,
                epoch: cfg.train.epochs as u32,
                params: res.params,
            };
            ck.save(&out).stage("writing checkpoint")?;
            let hpath = history.unwrap_or_else(|| default_history(&out));
            trainer::write_history(&hpath, &res.history).stage("writing loss history")?;
            if let Some(last) = res.history.last() {
                println!("final combined loss {:.6}", last.combined);
            }
            println!("checkpoint {}  history {}", out.display(), hpath.display());
        }
        Command::TrainCross {
            config,
            source_checkpoint,
            source,
            target,
            out,
            history,
            seed,
            epochs,
            balance_cts,
        } => {
            let mut cfg = RunConfig::load(&config).stage("loading config")?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            // The checkpoint fixes the architecture; loss weights come from the config.
            let stored = Checkpoint::load(&source_checkpoint).stage("loading source checkpoint")?;
            let mut expected = cfg.net.clone();
            expected.loss = stored.net.loss.clone();
            let ck = Checkpoint::load_for(&source_checkpoint, &expected).stage("loading source checkpoint")?;
            let src = load_data(&source, &cfg.net).stage("loading source dataset")?;
            let tgt = load_data(&target, &cfg.net).stage("loading target dataset")?;
            let mut state = CrossDomainState::from_source(&cfg.net, ck.params);
            if balance_cts {
                let (reid, cts) =
                    trainer::initial_loss_scales(&state, &src, &tgt, &cfg.train, 64).stage("cross-domain training")?;
                if cts > 0.0 {
                    state.net.loss.lambda_cts = reid / cts;
                }
                log::info!("lambda_cts = {:.4e} (reid {reid:.4}, contrastive {cts:.4})", state.net.loss.lambda_cts);
            }
            let used = state.net.clone();
            let res = trainer::train_cross(state, &src, &tgt, &cfg.train, None).stage("cross-domain training")?;
            Checkpoint {
                net: used,
                seed: cfg.train.seed,
                epoch: cfg.train.epochs as u32,
                params: res.params,
            }
            .save(&out)
            .stage("writing checkpoint")?;
            let hpath = history.unwrap_or_else(|| default_history(&out));
            trainer::write_history(&hpath, &res.history).stage("writing loss history")?;
            println!("target checkpoint {}  history {}", out.display(), hpath.display());
        }
        Command::Eval {
            checkpoint,
            data,
            distractors,
            out,
            scorer,
            seed,
            trials,
        } => {
            if trials == 0 {
                return fail("parsing arguments", "--trials must be >= 1");
            }
            let ck = Checkpoint::load(&checkpoint).stage("loading checkpoint")?;
            let test = load_data(&data, &ck.net).stage("loading dataset")?;
            let extra = match &distractors {
                Some(d) => load_data(d, &ck.net)
                    .stage("loading distractors")?
                    .into_iter()
                    .filter(|d| d.camera_id == 2)
                    .collect(),
                None => Vec::new(),
            };
            let scorer = match scorer {
                ScorerArg::Auto => Scorer::for_config(&ck.net),
                ScorerArg::Cls => Scorer::ClsProb,
                ScorerArg::Euclid => Scorer::NegEuclid,
            };
            let seeds: Vec<u64> = (seed..seed + trials).collect();
            let curve =
                evaluation::evaluate(&test, &extra, &ck.net, &ck.params, scorer, &seeds).stage("evaluating")?;
            curve.write_csv(&out).stage("writing CMC")?;
            println!("{} [{}]", curve.summary(), scorer.name());
        }
        Command::Gradcheck {
            preset,
            variant,
            alpha,
            coords,
            seed,
        } => {
            let preset = match preset {
                PresetArg::Desk => Preset::Desk,
                PresetArg::Paper => Preset::Paper,
            };
            let mut cfg = NetConfig::preset(preset).with_variant(variant.into());
            cfg.loss.alpha = alpha;
            let opts = CheckOptions {
                max_coords: Some(coords),
                seed,
                ..CheckOptions::default()
            };
            let (report, terms) = network::gradcheck_network(&cfg, seed, &opts).stage("gradient check")?;
            print!("{}", report.render());
            let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
            println!(
                "loss {:.6} (triplet {}, classification {})",
                report.loss,
                show(terms.triplet),
                show(terms.classification)
            );
            if terms.triplet == Some(0.0) {
                eprintln!("warning: triplet hinge is closed; its gradient path was not exercised (raise --alpha)");
            }
            let max = report.max_rel_err();
            if !report.passed() {
                return fail(
                    "gradient check",
                    format!("max rel err {max:.3e} exceeds {:.0e} in {}", opts.tol, report.flagged().join(", ")),
                );
            }
            println!("max rel err < 1e-4: PASS ({max:.3e})");
        }
        Command::CaseStudy => {
            let cs = evaluation::threshold_ranking_case_study().stage("case study")?;
            print!("{}", cs.render());
            if !cs.holds() {
                return fail("case study", "the threshold loss did not prefer the worse-ranked case");
            }
        }
        Command::Ablate { seeds, epochs, out } => {
            if seeds == 0 {
                return fail("parsing arguments", "--seeds must be >= 1");
            }
            let setup = AblationSetup::desk(seeds, epochs);
            let table = experiment::run_ablation(&setup, &[Variant::ClsOnly, Variant::RnkOnly, Variant::Full])
                .stage("ablation")?;
            print!("{}", table.render());
            println!("(mean over {seeds} seeds, gallery {})", table.gallery_size);
            if let Some(p) = out {
                write(&p, &table.to_csv()).stage("writing table")?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Ok(v) = std::env::var(mtdnet::THREADS_ENV) {
        if !matches!(v.trim().parse::<usize>(), Ok(n) if n > 0) {
            eprintln!("error: environment: {} must be a positive integer, got '{v}'", mtdnet::THREADS_ENV);
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.stage, f.message);
            ExitCode::FAILURE
        }
    }
}
