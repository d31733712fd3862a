use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use setsim_core::checks::{self, CheckLine};
use setsim_core::encoder::load_checkpoint;
use setsim_core::runner::{
    encode_dataset, evaluate_retrieval, heatmap_export, mean_circular_variance, mean_pair_heatmap,
    per_slot_retrieval, slot_ablation, slot_usage, train, RunDir, TrainConfig,
};
use setsim_core::simset::{Scoring, SimilarityKind};
use setsim_core::synthdata::{generate, load_features, save_features, Dataset, WorldConfig};
use setsim_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(
    name = "setsim",
    version,
    about = "Set-based image-text embedding experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    Gen {
        /// World settings (JSON); omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 250)]
        n_images: usize,
    },
    /// Train an encoder; writes metrics.jsonl, timing.jsonl and checkpoints.
    Train {
        /// Training settings (JSON); omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval metrics of a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score with this set similarity.
        #[arg(long, value_enum, default_value_t = KindArg::Maxmatch)]
        kind: KindArg,
        /// Score with the mean of the k largest element cosines instead.
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Collapse diagnostics of a checkpoint on the held-out split.
    Diag {
        #[arg(value_enum)]
        which: DiagKind,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Run an oracle suite; exits with status 4 if any check fails.
    Check {
        #[arg(value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Mil,
    Sc,
    Maxmatch,
}

impl From<KindArg> for SimilarityKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Mil => SimilarityKind::Mil,
            KindArg::Sc => SimilarityKind::smooth_chamfer(),
            KindArg::Maxmatch => SimilarityKind::MaxMatch,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DiagKind {
    Variance,
    Slots,
    Heatmap,
    Perslot,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Assign,
    Grads,
    Jensen,
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).map_err(Error::from)?)
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(Error::from)?;
    Ok(())
}

fn test_split(data: &Path, test_fraction: f64) -> Result<Dataset> {
    let ds = load_features(data)?;
    Ok(ds.split(test_fraction)?.1)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Gen {
            config,
            out,
            seed,
            n_images,
        } => {
            let world: WorldConfig = read_json(config.as_deref())?;
            let ds = generate(world, n_images, seed)?;
            save_features(&out, &ds)?;
            println!(
                "wrote {} images, {} captions to {}",
                ds.images.len(),
                ds.captions.len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg: TrainConfig = read_json(config.as_deref())?;
            let ds = load_features(&data)?;
            let run = RunDir { dir: out };
            let outcome = train(&cfg, &ds, Some(&run))?;
            if let Some(last) = outcome.records.last() {
                println!(
                    "epochs {} final loss {:.6} rsum {:?} best epoch {:?}",
                    outcome.records.len(),
                    last.loss.total,
                    last.rsum,
                    outcome.best_epoch
                );
            }
        }
        Command::Eval {
            ckpt,
            data,
            kind,
            topk,
            test_fraction,
        } => {
            let (enc, _) = load_checkpoint(&ckpt)?;
            let test = test_split(&data, test_fraction)?;
            let scoring = match topk {
                Some(k) => Scoring::TopK(k),
                None => Scoring::Kind(kind.into()),
            };
            let e = encode_dataset(&enc, &test)?;
            let m = evaluate_retrieval(&e.images, &e.captions, &e.relevance, scoring)?;
            println!(
                "{}",
                json!({ "i2t": m.i2t, "t2i": m.t2i, "rsum": m.rsum() })
            );
        }
        Command::Diag {
            which,
            ckpt,
            data,
            out,
            test_fraction,
        } => {
            let (enc, meta) = load_checkpoint(&ckpt)?;
            let test = test_split(&data, test_fraction)?;
            let e = encode_dataset(&enc, &test)?;
            match which {
                DiagKind::Variance => {
                    let vi = mean_circular_variance(&e.images)?;
                    let vt = mean_circular_variance(&e.captions)?;
                    write_json(
                        &out,
                        &json!({
                            "meta": meta,
                            "circ_var_image": vi,
                            "circ_var_text": vt,
                            "log_var_image": vi.ln(),
                            "log_var_text": vt.ln(),
                        }),
                    )?;
                }
                DiagKind::Slots => {
                    let abl = slot_ablation(&e.images, &e.captions, &e.relevance)?;
                    let usage = slot_usage(&e.images, &e.captions, &e.pairs)?;
                    write_json(
                        &out,
                        &json!({
                            "meta": meta,
                            "full_rsum": abl.full.rsum(),
                            "singleton_rsum": abl.singletons.iter().map(|m| m.rsum()).collect::<Vec<_>>(),
                            "ablation": abl,
                            "slot_usage": usage,
                        }),
                    )?;
                }
                DiagKind::Heatmap => {
                    let m = mean_pair_heatmap(&e.images, &e.captions, &e.pairs)?;
                    heatmap_export(&m, &meta, &out)?;
                }
                DiagKind::Perslot => {
                    let r = per_slot_retrieval(&e.images, &e.captions)?;
                    write_json(
                        &out,
                        &json!({ "meta": meta, "distinct_rate": r.distinct_rate, "top1": r.top1 }),
                    )?;
                }
            }
        }
        Command::Check { suite, seed } => {
            let lines = match suite {
                Suite::Assign => checks::assignment_suite(&[2, 3, 4, 5, 6], 1000, seed)?,
                Suite::Grads => checks::gradient_suite(50)?,
                Suite::Jensen => checks::jensen_suite(1000, seed)?,
            };
            report(&lines);
            if !checks::all_passed(&lines) {
                return Ok(EXIT_CHECK);
            }
        }
    }
    Ok(0)
}

fn report(lines: &[CheckLine]) {
    for l in lines {
        println!(
            "{} {}: {}",
            if l.passed { "PASS" } else { "FAIL" },
            l.name,
            l.detail
        );
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. } | Error::NanInCheck { .. }) => EXIT_NUMERIC,
        Some(Error::InvalidArgument(_)) => EXIT_USAGE,
        Some(_) => EXIT_DATA,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_DATA,
        None => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn numeric_errors_map_to_three() {
        let e = anyhow::Error::from(Error::NonFinite { term: "gd".into() });
        assert_eq!(exit_code(&e), EXIT_NUMERIC);
        let e = anyhow::Error::from(Error::Truncated("x".into()));
        assert_eq!(exit_code(&e), EXIT_DATA);
    }

    #[test]
    fn missing_config_gives_defaults() {
        let w: WorldConfig = read_json(None).unwrap();
        assert_eq!(w, WorldConfig::default());
    }
}
