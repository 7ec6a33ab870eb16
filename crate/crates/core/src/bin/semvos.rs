//! Command-line front end. Exit codes: 0 ok, 1 usage, 2 data error,
//! 3 numerical failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semvos::numerics::set_backward_fault;
use semvos::pipeline::{
    evaluate_dirs, load_sequence, load_training_set, run_selftest, run_sequence, train,
    write_predictions, GenRequest, Model,
};
use semvos::{EngineConfig, Error, Result};

#[derive(Parser)]
#[command(
    name = "semvos",
    version,
    about = "Semi-supervised video object segmentation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic sequences described by a JSON spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from the sequences under a data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        freeze_vit: bool,
        /// Continue from these weights instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// JSON-lines loss log; defaults to the checkpoint path with a `.jsonl` extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Segment one sequence.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        include_first_frame: bool,
    },
    /// Run the built-in oracle suites and print a JSON report.
    Selftest {
        /// Flip one backward-pass sign to check that the gradient suite notices.
        #[arg(long, hide = true)]
        inject_fault: bool,
        #[arg(long, default_value_t = 3)]
        grad_instances: usize,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Gen { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Io {
                path: spec.clone(),
                source: e,
            })?;
            let req: GenRequest = serde_json::from_str(&text)?;
            let written = req.run(&out)?;
            println!("wrote {} sequence(s) to {}", written.len(), out.display());
        }
        Command::Train {
            data,
            config,
            steps,
            out,
            freeze_vit,
            init,
            log,
        } => {
            let mut cfg = EngineConfig::from_json_file(&config)?;
            cfg.freeze_vit |= freeze_vit;
            let seqs = load_training_set(&data)?;
            let mut model = match init {
                Some(p) => Model::load(&p)?,
                None => Model::new(cfg.model_config(), cfg.seed)?,
            };
            let log_path = log.unwrap_or_else(|| out.with_extension("jsonl"));
            let file = File::create(&log_path).map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
            let mut writer = BufWriter::new(file);
            let losses = train(&mut model, &cfg, &seqs, steps, Some(&mut writer))?;
            writer.flush().map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
            model.save(&out)?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!(
                    "{steps} steps, loss {first:.4} -> {last:.4}; weights in {}",
                    out.display()
                );
            }
        }
        Command::Run {
            manifest,
            ckpt,
            config,
            out,
            report,
        } => {
            let cfg = EngineConfig::from_json_file(&config)?;
            let model = Model::load(&ckpt)?;
            let seq = load_sequence(&manifest)?;
            let result = run_sequence(&model, &cfg, &seq)?;
            write_predictions(&out, &seq.stems, &result.masks)?;
            if let Some(path) = report {
                let rep = result.report.ok_or_else(|| {
                    Error::Input(format!(
                        "{} lists no ground truth to score",
                        manifest.display()
                    ))
                })?;
                write_json(&path, &rep)?;
                println!("J&F {:.4}", rep.jf_mean);
            }
        }
        Command::Eval {
            pred,
            gt,
            report,
            include_first_frame,
        } => {
            let rep = evaluate_dirs(&pred, &gt, include_first_frame)?;
            write_json(&report, &rep)?;
            println!(
                "J {:.4}  F {:.4}  J&F {:.4}",
                rep.j_mean, rep.f_mean, rep.jf_mean
            );
        }
        Command::Selftest {
            inject_fault,
            grad_instances,
        } => {
            set_backward_fault(inject_fault);
            let rep = run_selftest(grad_instances.max(1));
            println!("{}", serde_json::to_string_pretty(&rep)?);
            return Ok(rep.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("semvos: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
