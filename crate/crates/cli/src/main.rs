use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use handcap::config::{SessionConfig, SpeedSource};
use handcap::pipeline::{self, Error, SyncOptions, SyncPaths};
use handcap::records;
use handcap::retarget::{shipped_hand, RetargetOptions, ShippedHand};
use handcap::spatialcal::DEFAULT_DEGENERACY_THRESHOLD;
use handcap::spectral::{DEFAULT_F_MIN_HZ, DEFAULT_HOP, DEFAULT_WINDOW};

mod heatmap;

/// Simulate, synchronize, calibrate, analyze and retarget an 18-sensor
/// hand-capture session.
#[derive(Parser)]
#[command(name = "handcap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate sample, anchor, ground-truth and capture records from a config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit clock maps from anchors and resample every stream onto the master grid.
    Sync {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// One-time alignment from the first anchor only.
        #[arg(long)]
        baseline: bool,
        #[arg(long, default_value_t = 800.0)]
        rate: f64,
        #[arg(long, default_value_t = 1.0)]
        drift_cadence: f64,
        /// Write gzip-compressed records.
        #[arg(long)]
        gzip: bool,
    },
    /// Solve per-sensor mountings from the two calibration poses.
    Calibrate {
        #[arg(long)]
        captures: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DEGENERACY_THRESHOLD)]
        threshold: f64,
    },
    /// Apply a calibration to an aligned file, producing hand frames.
    Reconstruct {
        #[arg(long)]
        aligned: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Band-energy landscape of a hand-frame or aligned file.
    Spectrum {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_F_MIN_HZ)]
        fmin: f64,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = DEFAULT_HOP)]
        hop: usize,
        /// Speed source for aligned input: gyro or orientation.
        #[arg(long, default_value = "gyro", value_parser = parse_source)]
        source: SpeedSource,
        /// Also render the profile as a PNG heatmap.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Wrist-frame fingertip targets from hand frames.
    Targets {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "five-finger", value_parser = parse_hand)]
        hand: ShippedHand,
        #[arg(long, default_value_t = 8)]
        stride: usize,
    },
    /// Solve joint angles for a target stream.
    Retarget {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        joints: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = RetargetOptions::default().tol)]
        tol: f64,
        #[arg(long, default_value_t = RetargetOptions::default().max_iter)]
        max_iter: usize,
    },
    /// Write a shipped hand's chain file.
    Chain {
        #[arg(long, value_parser = parse_hand)]
        hand: ShippedHand,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage and write a summary with threshold checks.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config and use the one-time alignment.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        heatmap: Option<PathBuf>,
        /// Exit with the validation code when any check fails.
        #[arg(long)]
        strict: bool,
    },
    /// Render a spectrum file as a PNG heatmap.
    Plot {
        #[arg(long)]
        spectrum: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_source(s: &str) -> Result<SpeedSource, String> {
    match s {
        "gyro" => Ok(SpeedSource::Gyro),
        "orientation" => Ok(SpeedSource::Orientation),
        "frames" => Ok(SpeedSource::Frames),
        _ => Err(format!("unknown source `{s}` (gyro, orientation, frames)")),
    }
}

fn parse_hand(s: &str) -> Result<ShippedHand, String> {
    match s {
        "four-finger" => Ok(ShippedHand::FourFinger),
        "five-finger" => Ok(ShippedHand::FiveFinger),
        _ => Err(format!("unknown hand `{s}` (four-finger, five-finger)")),
    }
}

fn config_dir(config: &Path) -> &Path {
    config.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Simulate { config, out } => {
            let cfg = SessionConfig::load(&config)?;
            let p = pipeline::cmd_simulate(&cfg, &out)?;
            println!("wrote {}", p.samples.display());
            println!("wrote {}", p.anchors.display());
            println!("wrote {}", p.ground_truth.display());
            println!("wrote {}", p.captures.display());
        }
        Command::Sync { samples, anchors, out, baseline, rate, drift_cadence, gzip } => {
            std::fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
            let opts = SyncOptions { baseline, grid_rate_hz: rate, drift_cadence_s: drift_cadence };
            let paths = SyncPaths::in_dir(&out, gzip);
            let s = pipeline::cmd_sync(&samples, &anchors, &opts, &paths)?;
            println!("wrote {} ({} ticks)", paths.aligned.display(), s.aligned.grid.count);
            println!("wrote {}", paths.drift.display());
        }
        Command::Calibrate { captures, out, threshold } => {
            let cal = pipeline::cmd_calibrate(&captures, threshold, &out)?;
            println!("wrote {} ({} sensors)", out.display(), cal.sensors.len());
        }
        Command::Reconstruct { aligned, calibration, out } => {
            pipeline::cmd_reconstruct(&aligned, &calibration, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Spectrum { input, out, fmin, window, hop, source, heatmap } => {
            let p = pipeline::cmd_spectrum(&input, source, fmin, window, hop, &out)?;
            println!("wrote {} ({} frames)", out.display(), p.frame_times.len());
            if let Some(h) = heatmap {
                heatmap::render(&p, &h)?;
                println!("wrote {}", h.display());
            }
        }
        Command::Targets { frames, out, hand, stride } => {
            let t = pipeline::cmd_targets(&frames, hand, stride, &out)?;
            println!("wrote {} ({} frames)", out.display(), t.len());
        }
        Command::Retarget { chain, targets, joints, report, tol, max_iter } => {
            let opts = RetargetOptions { tol, max_iter, ..RetargetOptions::default() };
            let r = pipeline::cmd_retarget(&chain, &targets, &opts, &joints, &report)?;
            print!("{}", pipeline::render_retarget_report(&r));
        }
        Command::Chain { hand, out } => {
            pipeline::write_text(&out, &shipped_hand(hand).to_toml())?;
            println!("wrote {}", out.display());
        }
        Command::Pipeline { config, out, baseline, heatmap, strict } => {
            let mut cfg = SessionConfig::load(&config)?;
            cfg.sync.baseline |= baseline;
            let run = pipeline::cmd_pipeline(&cfg, config_dir(&config), &out)?;
            for c in &run.summary.checks {
                println!("check {} value={:e} threshold={:e} {}", c.name, c.value, c.threshold, if c.pass { "PASS" } else { "FAIL" });
            }
            println!("wrote {}", run.paths.summary.display());
            if let Some(h) = heatmap {
                heatmap::render(&run.spectrum, &h)?;
                println!("wrote {}", h.display());
            }
            if strict && run.summary.checks.iter().any(|c| !c.pass) {
                return Err(Error::Invalid("one or more checks failed".into()));
            }
        }
        Command::Plot { spectrum, out } => {
            let p = records::read_spectrum(&spectrum)?;
            heatmap::render(&p, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
