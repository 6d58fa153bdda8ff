//! `mxplan` — mixed-precision MoE quantization planner.
//!
//! Composable pipeline commands with file-based handoff:
//! gen-model -> calibrate -> allocate -> schedule -> report, plus a roofline
//! explorer and a one-shot `run` driven by a manifest.
//!
//! Exit codes: 0 ok, 2 infeasible budget, 3 configuration error, 4 data/io
//! error.

use clap::{Parser, Subcommand};
use mxplan_core::alloc::Granularity;
use mxplan_core::cost::KernelMode;
use mxplan_core::moe::{GeneratorConfig, MoEBlockSpec};
use mxplan_core::pipeline::{
    self, AllocationSettings, CalibrationSettings, RunManifest,
};
use mxplan_core::MxError;
use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mxplan",
    about = "Mixed-precision MoE quantization planner and execution simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic MoE model directory (MXT1 tensors + manifest).
    GenModel {
        /// Output model directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        experts: usize,
        #[arg(long = "top-k", default_value_t = 2)]
        top_k: usize,
        #[arg(long, default_value_t = 128)]
        hidden: usize,
        #[arg(long, default_value_t = 256)]
        intermediate: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inject outlier channels, scaled experts and a router bias ramp.
        #[arg(long)]
        heterogeneous: bool,
    },
    /// Compute the sensitivity table and routing statistics for a model.
    Calibrate {
        /// Model directory from gen-model.
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated scheme list (wxay_gz_b notation); defaults to the
        /// built-in set.
        #[arg(long, default_value = "")]
        schemes: String,
        /// Calibration sequences.
        #[arg(long, default_value_t = 128)]
        samples: usize,
        /// Tokens per sequence.
        #[arg(long = "seq-len", default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "out-sensitivity", default_value = "sensitivity.json")]
        out_sensitivity: PathBuf,
        #[arg(long = "out-stats", default_value = "stats.json")]
        out_stats: PathBuf,
        /// Also write the calibration routing trace as an MXT1 tensor.
        #[arg(long = "out-trace")]
        out_trace: Option<PathBuf>,
    },
    /// Print the pairwise crossover table and write time-vs-m curves.
    Roofline {
        /// Hardware profile JSON (defaults to the builtin RTX-4090-like one).
        #[arg(long, alias = "hw")]
        profile: Option<PathBuf>,
        #[arg(long, default_value = "")]
        schemes: String,
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, default_value_t = 4096)]
        k: usize,
        /// Largest token count swept.
        #[arg(long = "max-m", default_value_t = 4096)]
        max_m: usize,
        #[arg(long = "out-csv")]
        out_csv: Option<PathBuf>,
    },
    /// Solve the bitwidth allocation under a memory budget.
    Allocate {
        #[arg(long = "sens")]
        sensitivity: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, alias = "hw")]
        profile: Option<PathBuf>,
        /// Average bits per weight; converted to bytes via parameter count.
        #[arg(long = "budget-bits", default_value_t = 5.0)]
        budget_bits: f64,
        /// Accuracy/performance trade-off exponent in [0,1].
        #[arg(long, default_value_t = 0.75)]
        r: f64,
        #[arg(long, value_parser = parse_granularity, default_value = "linear")]
        granularity: Granularity,
        /// Experts pinned to fp16 and excluded from reallocation.
        #[arg(long = "exclude-experts", default_value = "")]
        exclude_experts: String,
        /// Cost tiles as one unified kernel instead of specialized ones.
        #[arg(long = "unified-kernel")]
        unified_kernel: bool,
        #[arg(long, default_value = "plan.json")]
        out: PathBuf,
    },
    /// Expand a plan into tile tasks, schedule them and validate by simulation.
    Schedule {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, alias = "hw")]
        profile: Option<PathBuf>,
        #[arg(long, default_value = "schedule.json")]
        out: PathBuf,
        /// Run the deterministic simulator and print per-SM utilization.
        #[arg(long)]
        simulate: bool,
    },
    /// Compare uniform schemes against the mixed plan.
    Report {
        #[arg(long = "sens")]
        sensitivity: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, alias = "hw")]
        profile: Option<PathBuf>,
        #[arg(long = "budget-bits", default_value_t = 5.0)]
        budget_bits: f64,
        #[arg(long, default_value_t = 0.75)]
        r: f64,
        #[arg(long, value_parser = parse_granularity, default_value = "linear")]
        granularity: Granularity,
        #[arg(long = "out-json")]
        out_json: Option<PathBuf>,
        /// Roofline curves CSV.
        #[arg(long = "out-csv")]
        out_csv: Option<PathBuf>,
    },
    /// Run the whole pipeline from a manifest into an output directory.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    match s {
        "linear" => Ok(Granularity::Linear),
        "expert" => Ok(Granularity::Expert),
        other => Err(format!("granularity must be linear|expert, got {other}")),
    }
}

fn parse_expert_list(s: &str) -> Result<BTreeSet<usize>, MxError> {
    let mut out = BTreeSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let e: usize = part
            .parse()
            .map_err(|_| MxError::config(format!("bad expert id `{part}`")))?;
        out.insert(e);
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), MxError> {
    match cli.command {
        Command::GenModel {
            out,
            experts,
            top_k,
            hidden,
            intermediate,
            seed,
            heterogeneous,
        } => {
            let spec = MoEBlockSpec::new(experts, top_k, hidden, intermediate)?;
            let generator = if heterogeneous {
                GeneratorConfig::heterogeneous(spec, seed)
            } else {
                GeneratorConfig::uniform(spec, seed)
            };
            pipeline::cmd_gen_model(&out, &generator)?;
            println!(
                "wrote model: {} experts, top-{}, d={}, f={} -> {}",
                experts,
                top_k,
                hidden,
                intermediate,
                out.display()
            );
        }
        Command::Calibrate {
            model,
            schemes,
            samples,
            seq_len,
            seed,
            out_sensitivity,
            out_stats,
            out_trace,
        } => {
            let schemes = pipeline::schemes_or_default(&schemes)?;
            let settings = CalibrationSettings {
                samples,
                seq_len,
                seed,
            };
            let (table, stats) = pipeline::cmd_calibrate_with_trace(
                &model,
                &out_sensitivity,
                &out_stats,
                out_trace.as_deref(),
                &schemes,
                &settings,
            )?;
            println!(
                "calibrated {} experts x {} schemes over {} samples ({} tokens each)",
                stats.spec.num_experts,
                table.schemes.len(),
                samples,
                seq_len
            );
            println!("tokens per expert: {:?}", stats.tokens_per_expert);
        }
        Command::Roofline {
            profile,
            schemes,
            n,
            k,
            max_m,
            out_csv,
        } => {
            let hw = pipeline::load_profile(profile.as_deref())?;
            let schemes = pipeline::schemes_or_default(&schemes)?;
            let rows = pipeline::crossover_table(&schemes, &hw, n, k, max_m)?;
            println!("{:<18} {:<18} {:>12}", "scheme a", "scheme b", "crossover m");
            for row in &rows {
                match row.crossover_m {
                    Some(m) => println!("{:<18} {:<18} {:>12}", row.scheme_a, row.scheme_b, m),
                    None => println!("{:<18} {:<18} {:>12}", row.scheme_a, row.scheme_b, "-"),
                }
            }
            if let Some(path) = out_csv {
                let m_values: Vec<usize> = (0..)
                    .map(|i| 1usize << i)
                    .take_while(|&m| m <= max_m)
                    .collect();
                let csv = pipeline::roofline_curves_csv(&schemes, &hw, n, k, &m_values)?;
                std::fs::write(&path, csv)?;
                println!("wrote curves: {}", path.display());
            }
        }
        Command::Allocate {
            sensitivity,
            stats,
            profile,
            budget_bits,
            r,
            granularity,
            exclude_experts,
            unified_kernel,
            out,
        } => {
            let hw = pipeline::load_profile(profile.as_deref())?;
            let settings = AllocationSettings {
                budget_bits,
                r,
                granularity,
                kernel_mode: if unified_kernel {
                    KernelMode::Unified
                } else {
                    KernelMode::Specialized
                },
                exclude_experts: parse_expert_list(&exclude_experts)?,
            };
            let plan = pipeline::cmd_allocate(&sensitivity, &stats, hw, &settings, &out)?;
            println!(
                "plan: objective {:.6e}, L {:.6e}, T {:.6e}s, {:.3} avg bits ({} bytes of {} budget)",
                plan.objective,
                plan.predicted_l,
                plan.predicted_t,
                plan.average_bits,
                plan.memory_used.round(),
                plan.budget_bytes.round()
            );
            println!("wrote {}", out.display());
        }
        Command::Schedule {
            plan,
            profile,
            out,
            simulate,
        } => {
            let hw = pipeline::load_profile(profile.as_deref())?;
            let (_, exec) = pipeline::cmd_schedule(&plan, hw, &out)?;
            println!(
                "scheduled {} tiles onto {} SMs: makespan {:.6e}s (serial/P estimate {:.6e}s)",
                exec.tasks.len(),
                exec.schedule.per_sm.len(),
                exec.schedule.makespan,
                exec.estimated_t
            );
            if simulate {
                let busy_mean = exec.sim.utilization.iter().sum::<f64>()
                    / exec.sim.utilization.len().max(1) as f64;
                println!(
                    "simulated makespan {:.6e}s, mean SM utilization {:.1}%",
                    exec.sim.makespan,
                    100.0 * busy_mean
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Report {
            sensitivity,
            stats,
            profile,
            budget_bits,
            r,
            granularity,
            out_json,
            out_csv,
        } => {
            let hw = pipeline::load_profile(profile.as_deref())?;
            let settings = AllocationSettings {
                budget_bits,
                r,
                granularity,
                kernel_mode: KernelMode::Specialized,
                exclude_experts: BTreeSet::new(),
            };
            let (_, rendered) = pipeline::cmd_report(
                &sensitivity,
                &stats,
                hw,
                &settings,
                out_json.as_deref(),
                out_csv.as_deref(),
            )?;
            print!("{rendered}");
        }
        Command::Run { manifest, out } => {
            let manifest: RunManifest = serde_json::from_str(
                &std::fs::read_to_string(&manifest)
                    .map_err(|e| MxError::data(format!("{}: {e}", manifest.display())))?,
            )?;
            let summary = pipeline::run_pipeline(&manifest, &out)?;
            println!(
                "pipeline done: objective {:.6e}, L {:.6e}, T {:.6e}s, {:.3} avg bits, makespan {:.6e}s",
                summary.objective,
                summary.predicted_l,
                summary.predicted_t,
                summary.average_bits,
                summary.makespan
            );
            println!("outputs in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // die quietly when stdout is closed early (e.g. piped into `head`)
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                MxError::Infeasible { .. } => 2,
                MxError::Config(_) => 3,
                MxError::Data(_) | MxError::Io(_) | MxError::Json(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}
