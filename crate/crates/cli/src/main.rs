mod run_config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fhkd::bench::{emit_report, speedup_report, ReportFormat, DEFAULT_REPEATS};
use fhkd::checks::{run_suite, Suite, DEFAULT_SEEDS, TOLERANCE};
use fhkd::distill::{default_threads, distill_run_with_threads, save_history_csv};
use fhkd::io::{load_checkpoint, load_clips, save_checkpoint};
use fhkd::model::{build_model, preset, Model};
use fhkd::{Error, Result};

use run_config::RunConfig;

#[derive(Parser)]
#[command(
    name = "fhkd",
    version,
    about = "Distill, benchmark and inspect thin-and-deep speech encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distill a student from a frozen teacher
    Distill {
        /// TOML run config (teacher, student, [distill] section)
        #[arg(long)]
        config: PathBuf,
        /// Clip directory or synth:<seed>,<count>,<seconds>
        #[arg(long)]
        data: String,
        /// Student checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss CSV (default: <out>.losses.csv)
        #[arg(long)]
        log: Option<PathBuf>,
        /// Worker threads (default: $FHKD_THREADS or 1)
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Time a model against a reference on the same clips
    Bench {
        /// Checkpoint path or preset name
        #[arg(long)]
        student: String,
        /// Checkpoint path or preset name
        #[arg(long)]
        teacher: String,
        /// Clip directory or synth:<seed>,<count>,<seconds>
        #[arg(long)]
        clips: String,
        #[arg(long, default_value_t = DEFAULT_REPEATS)]
        repeats: usize,
        /// json or csv
        #[arg(long, default_value = "json")]
        format: String,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks
    Gradcheck {
        /// ops, layers, model or distill (default: all)
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
    },
    /// Re-save a checkpoint, optionally without the intermediate heads
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        strip_heads: bool,
        /// Output path (default: overwrite --ckpt)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print config, parameter counts and tensor shapes
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!(
                "error[E_USAGE]: {}",
                e.render().to_string().trim_start_matches("error: ")
            );
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(ok) if ok => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Distill {
            config,
            data,
            out,
            log,
            threads,
        } => distill(&config, &data, &out, log, threads),
        Command::Bench {
            student,
            teacher,
            clips,
            repeats,
            format,
            out,
        } => bench(&student, &teacher, &clips, repeats, &format, out),
        Command::Gradcheck { module, seeds } => gradcheck(module.as_deref(), seeds),
        Command::Export {
            ckpt,
            strip_heads,
            out,
        } => export(&ckpt, strip_heads, out),
        Command::Inspect { ckpt } => inspect(&ckpt),
    }
}

fn distill(
    config: &Path,
    data: &str,
    out: &Path,
    log: Option<PathBuf>,
    threads: Option<usize>,
) -> Result<bool> {
    let cfg = RunConfig::load(config)?;
    let teacher = build_model(&cfg.teacher.resolve()?, cfg.teacher_seed)?.freeze();
    let student = build_model(&cfg.student.resolve()?, cfg.student_seed)?;
    let clips = load_clips(data)?;
    let outcome = distill_run_with_threads(
        &teacher,
        student,
        &clips,
        &cfg.distill,
        threads.unwrap_or_else(default_threads),
    )?;
    save_checkpoint(&outcome.student, Some(&outcome.optimizer), out)?;
    let log = log.unwrap_or_else(|| out.with_extension("losses.csv"));
    save_history_csv(&outcome.history, &log)?;
    if let Some(last) = outcome.history.last() {
        println!(
            "{} steps  l_feat {:.6}  l_hint {:.6}  l_kd {:.6}",
            last.step, last.l_feat, last.l_hint, last.l_kd
        );
    }
    println!("wrote {} and {}", out.display(), log.display());
    Ok(true)
}

fn model_arg(arg: &str) -> Result<Model<f32>> {
    if Path::new(arg).is_file() {
        return Ok(load_checkpoint::<f32>(arg)?.0);
    }
    Model::build(&preset(arg)?, 0)
}

fn bench(
    student: &str,
    teacher: &str,
    clips: &str,
    repeats: usize,
    format: &str,
    out: Option<PathBuf>,
) -> Result<bool> {
    let format: ReportFormat = format.parse()?;
    let student = model_arg(student)?;
    let teacher = model_arg(teacher)?;
    let clips: Vec<Vec<f32>> = load_clips(clips)?
        .into_iter()
        .map(|c| c.samples.iter().map(|&x| x as f32).collect())
        .collect();
    let report = speedup_report(&student, &teacher, &clips, repeats)?;
    let text = emit_report(&report, format)?;
    match out {
        Some(path) => std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?,
        None => println!("{text}"),
    }
    Ok(true)
}

fn gradcheck(module: Option<&str>, seeds: usize) -> Result<bool> {
    let suites = match module {
        Some(m) => vec![m.parse::<Suite>()?],
        None => Suite::ALL.to_vec(),
    };
    let mut ok = true;
    for suite in suites {
        let report = run_suite(suite, seeds)?;
        let failed: Vec<_> = report.failures().collect();
        println!(
            "{suite:<8} {:>5} cases  worst rel err {:.2e}  {}",
            report.cases.len(),
            report.worst(),
            if failed.is_empty() { "ok" } else { "FAILED" }
        );
        for f in &failed {
            println!(
                "  {} seed {}: {:.3e} > {TOLERANCE:e}",
                f.name, f.seed, f.max_rel_err
            );
        }
        ok &= failed.is_empty();
    }
    Ok(ok)
}

fn export(ckpt: &Path, strip_heads: bool, out: Option<PathBuf>) -> Result<bool> {
    let (model, optimizer) = load_checkpoint::<f32>(ckpt)?;
    let out = out.unwrap_or_else(|| ckpt.to_path_buf());
    if strip_heads {
        // optimizer moments no longer line up with the parameter list
        save_checkpoint(&model.strip_heads_for_finetuning()?, None, &out)?;
    } else {
        save_checkpoint(&model, optimizer.as_ref(), &out)?;
    }
    println!("wrote {}", out.display());
    Ok(true)
}

fn inspect(ckpt: &Path) -> Result<bool> {
    let (model, optimizer) = load_checkpoint::<f32>(ckpt)?;
    let counts = model.count_parameters();
    let mut s = String::new();
    s.push_str(&model.config.to_toml()?);
    s.push_str(&format!(
        "\n# parameters: total {}  without heads {}  last head only {}\n",
        counts.total, counts.without_heads, counts.last_head_only
    ));
    match &optimizer {
        Some(o) => s.push_str(&format!("# optimizer state at step {}\n", o.step)),
        None => s.push_str("# no optimizer state\n"),
    }
    for p in model.params.iter() {
        s.push_str(&format!("{:<48} {:?}\n", p.name, p.value.shape()));
    }
    std::io::stdout()
        .write_all(s.as_bytes())
        .map_err(|e| Error::Io {
            path: "<stdout>".into(),
            source: e,
        })?;
    Ok(true)
}
