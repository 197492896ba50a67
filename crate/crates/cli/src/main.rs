use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use wpa_cli::commands::{self, exit_code, thread_cap, Overrides};
use wpa_core::wp::WpBnPolicy;
use wpa_core::Result;

#[derive(Parser)]
#[command(name = "wp", about = "Train and diagnose image classifiers with white-paper regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BnPolicyArg {
    Update,
    Freeze,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or sweep) and write per-epoch metrics, a summary and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Probability of a white-paper phase after each epoch.
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        lambda: Option<f32>,
        /// Iterations per white-paper phase.
        #[arg(long)]
        m: Option<usize>,
        /// Feed probes without dataset normalization.
        #[arg(long)]
        probe_raw: bool,
        #[arg(long, value_enum)]
        wp_bn_policy: Option<BnPolicyArg>,
        /// Give white-paper phases their own momentum buffers.
        #[arg(long)]
        wp_fresh_momentum: bool,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Top-k confidences of a checkpoint on one image (white paper by default).
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Raw image tensor container.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Classes to report; at most five by default.
        #[arg(long)]
        k: Option<usize>,
        /// Skip the training normalization.
        #[arg(long)]
        raw: bool,
    },
    /// Corruption errors and mCE for one or more checkpoints.
    CorruptEval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
    },
    /// Reliability diagram and ECE on the test split.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Write an exponentially imbalanced copy of the training split.
    LongtailGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Swap classifier heads between two checkpoints.
    Splice {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
    },
}

fn base(common: &Common) -> Overrides {
    Overrides { seed: common.seed, out: common.out.clone(), ..Overrides::default() }
}

fn dispatch(cmd: Command) -> Result<()> {
    thread_cap(std::env::var("WP_THREADS").ok().as_deref())?;
    match cmd {
        Command::Train { common, epochs, p, lambda, m, probe_raw, wp_bn_policy, wp_fresh_momentum, bins } => {
            let o = Overrides {
                epochs,
                p,
                lambda,
                m,
                probe_raw,
                wp_bn_policy: wp_bn_policy.map(|b| match b {
                    BnPolicyArg::Update => WpBnPolicy::Update,
                    BnPolicyArg::Freeze => WpBnPolicy::Freeze,
                }),
                wp_fresh_momentum,
                bins,
                ..base(&common)
            };
            let cfg = commands::load_config(&common.config, &o)?;
            for (name, s) in commands::train(&cfg)? {
                let label = if name.is_empty() { String::new() } else { format!("{name}: ") };
                println!(
                    "{label}{} run, test error {:.4}, ece {:.4}, {} wp phases",
                    s.mode, s.final_test_error, s.ece, s.wp_phases
                );
            }
            println!("artifacts in {}", cfg.out_dir.display());
        }
        Command::Probe { common, checkpoint, image, k, raw } => {
            let cfg = commands::load_config(&common.config, &base(&common))?;
            let r = commands::probe(&cfg, &checkpoint, image.as_deref(), k, raw)?;
            for c in &r.topk {
                println!("class {:>3}  {:.4}", c.class, c.confidence);
            }
            println!("uniformity {:.6}", r.uniformity);
        }
        Command::CorruptEval { common, checkpoint } => {
            let cfg = commands::load_config(&common.config, &base(&common))?;
            let out = commands::corrupt_eval(&cfg, &checkpoint)?;
            for c in &out.summary.ce {
                println!("{:<14} {:.4}", c.corruption.name(), c.ce);
            }
            println!("mce {:.4}", out.summary.mce);
        }
        Command::Calibrate { common, checkpoint, bins } => {
            let cfg = commands::load_config(&common.config, &Overrides { bins, ..base(&common) })?;
            let (out, _) = commands::calibrate_checkpoint(&cfg, &checkpoint)?;
            println!("ece {:.4} over {} bins, test error {:.4}", out.ece, out.bins, out.test_error);
        }
        Command::LongtailGen { common, rho } => {
            let cfg = commands::load_config(&common.config, &base(&common))?;
            let spec = commands::longtail_gen(&cfg, rho)?;
            println!("rho {} counts {:?}", spec.rho, spec.counts);
        }
        Command::Splice { common, pre, post } => {
            let cfg = commands::load_config(&common.config, &base(&common))?;
            let a = commands::splice(&cfg, &pre, &post)?;
            println!(
                "pre/pre {:.4}  post/post {:.4}  pre-conv/post-head {:.4}  post-conv/pre-head {:.4}",
                a.pre_conv_pre_head, a.post_conv_post_head, a.pre_conv_post_head, a.post_conv_pre_head
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
