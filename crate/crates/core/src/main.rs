use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use metaverify::audit_log::AuditLog;
use metaverify::camv::{
    AnchorSet, CamvConfig, CamvError, ConflictSet, Screening, SynthesisScore, TraceRef,
};
use metaverify::corpus::{
    adversarial_scenario, load_corpus, random_scenario, write_corpus, AdversarialParams,
    RandomParams,
};
use metaverify::eval::{evaluate, run_ablation, AblationConfig, EvalReport, Method};
use metaverify::replay::replay;
use metaverify::scenario::load_scenario;
use metaverify::value::CanonicalValue;

const SCHEMA: &str = include_str!("../schema/scenario.schema.json");

#[derive(Parser)]
#[command(name = "metaverify", version, about = "Conflict-aware multi-expert verification")]
struct Cli {
    /// Print the JSON schema for scenario files and exit.
    #[arg(long)]
    schema_dump: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline on one scenario.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        theta: Option<usize>,
        /// Maximum verify calls during auditing.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        gate_threshold: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Skip facts-consistency gating.
        #[arg(long)]
        no_facts: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score methods over a corpus directory.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated subset of camv, mv, sv, passn (ablation names also accepted).
        #[arg(long, value_delimiter = ',', default_value = "camv,mv,sv,passn")]
        methods: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the six component-ablation configurations over a corpus.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a seeded synthetic corpus.
    Gen {
        #[arg(long, value_enum)]
        kind: CorpusKind,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Experts per adversarial scenario, or the maximum for random ones.
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a recorded audit log and print the reconstructed state.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKind {
    Random,
    Adversarial,
}

#[derive(Serialize)]
struct AnswerFile<'a> {
    answer: &'a CanonicalValue,
    chosen: &'a TraceRef,
    score: &'a SynthesisScore,
    verify_calls: usize,
    b_max: usize,
    anchors: &'a AnchorSet,
    conflicts: &'a ConflictSet,
    screening: &'a [Screening],
    synthesis_fallback: bool,
    eba_fallback: bool,
}

#[derive(Serialize)]
struct AbstentionFile {
    abstained: bool,
    reason: String,
}

fn write(path: &Path, contents: &str) -> Result<(), String> {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))
}

fn to_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    scenario: &Path,
    theta: Option<usize>,
    budget: Option<usize>,
    gate_threshold: Option<f64>,
    seed: Option<u64>,
    no_facts: bool,
    out: &Path,
) -> Result<u8, String> {
    let sc = load_scenario(scenario).map_err(|e| e.to_string())?;
    let mut config = sc.config(&CamvConfig::default());
    if let Some(t) = theta {
        config.theta = t;
    }
    if budget.is_some() {
        config.b_max = budget;
    }
    if let Some(g) = gate_threshold {
        config.gate_threshold = g;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.use_facts = !no_facts;

    create_dir(out)?;
    let mut log = AuditLog::new();
    let result = sc.run(&config, &mut log);
    write(&out.join("audit.log"), &log.to_lines())?;
    write(&out.join("facts.jsonl"), &sc.facts.to_lines())?;
    match result {
        Ok(o) => {
            let file = AnswerFile {
                answer: &o.answer,
                chosen: &o.chosen,
                score: &o.score,
                verify_calls: o.verify_calls,
                b_max: o.budget.b_max(),
                anchors: &o.anchors,
                conflicts: &o.conflicts,
                screening: &o.screening_log,
                synthesis_fallback: o.synthesis_fallback,
                eba_fallback: o.eba_fallback,
            };
            write(&out.join("answer.json"), &to_pretty(&file))?;
            println!("answer: {}", o.answer);
            Ok(0)
        }
        Err(CamvError::NoFeasibleCandidate(e)) => {
            let file = AbstentionFile {
                abstained: true,
                reason: e.to_string(),
            };
            write(&out.join("answer.json"), &to_pretty(&file))?;
            eprintln!("abstained: {e}");
            Ok(2)
        }
        Err(e) => Err(e.to_string()),
    }
}

fn write_report(out: &Path, report: &EvalReport) -> Result<(), String> {
    create_dir(out)?;
    write(&out.join("report.json"), &report.to_json())?;
    let table = report.to_table();
    write(&out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_eval(corpus: &Path, methods: &[String], out: &Path) -> Result<u8, String> {
    let methods = methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let scenarios = load_corpus(corpus).map_err(|e| e.to_string())?;
    let report = evaluate(&scenarios, &methods, &CamvConfig::default())
        .map_err(|e| format!("{}: {e}", corpus.display()))?;
    write_report(out, &report)?;
    Ok(0)
}

fn cmd_ablate(corpus: &Path, out: &Path) -> Result<u8, String> {
    let scenarios = load_corpus(corpus).map_err(|e| e.to_string())?;
    let report = run_ablation(&scenarios, &AblationConfig::TABLE, &CamvConfig::default())
        .map_err(|e| format!("{}: {e}", corpus.display()))?;
    write_report(out, &report)?;
    Ok(0)
}

fn cmd_gen(kind: CorpusKind, count: usize, seed: u64, experts: Option<usize>, out: &Path) -> Result<u8, String> {
    let files: Vec<_> = match kind {
        CorpusKind::Random => {
            let mut p = RandomParams::default();
            if let Some(n) = experts {
                p.max_experts = n;
            }
            (0..count).map(|i| random_scenario(&p, seed, i)).collect()
        }
        CorpusKind::Adversarial => {
            let mut p = AdversarialParams::default();
            if let Some(n) = experts {
                if n < 3 || n % 2 == 0 {
                    return Err(format!("adversarial corpora need an odd expert count >= 3, got {n}"));
                }
                p.experts = n;
            }
            (0..count).map(|i| adversarial_scenario(&p, seed, i)).collect()
        }
    };
    let paths = write_corpus(out, &files).map_err(|e| e.to_string())?;
    println!("wrote {} scenarios to {}", paths.len(), out.display());
    Ok(0)
}

fn cmd_replay(path: &Path) -> Result<u8, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let log = AuditLog::from_lines(&text).map_err(|e| e.to_string())?;
    let st = replay(&log).map_err(|e| e.to_string())?;
    println!("entries: {}", log.len());
    println!("anchors: {}", st.anchors.len());
    println!("conflicts: {}", st.conflicts.len());
    println!("verify_calls: {}", st.verify_calls);
    match &st.answer {
        Some(a) => println!("answer: {a}"),
        None => println!("answer: none"),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.schema_dump {
        print!("{SCHEMA}");
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("no command given; see --help");
        return ExitCode::from(1);
    };
    let result = match command {
        Command::Run {
            scenario,
            theta,
            budget,
            gate_threshold,
            seed,
            no_facts,
            out,
        } => cmd_run(&scenario, theta, budget, gate_threshold, seed, no_facts, &out),
        Command::Eval { corpus, methods, out } => cmd_eval(&corpus, &methods, &out),
        Command::Ablate { corpus, out } => cmd_ablate(&corpus, &out),
        Command::Gen {
            kind,
            count,
            seed,
            experts,
            out,
        } => cmd_gen(kind, count, seed, experts, &out),
        Command::Replay { log } => cmd_replay(&log),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
