use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_mdm::backbone::{Model, ModelConfig};
use sparse_mdm::diffusion::{DiffusionSchedule, Vocabulary};
use sparse_mdm::harness::{
    bench, default_threads, verify, AblationToggle, BenchConfig, Fault, VerifyOptions,
};
use sparse_mdm::masks::{
    build_inference_mask, extract_path_mask, step_causal_mask, two_path_example, AttentionMask,
};
use sparse_mdm::samplers::{
    pregen_order_2d, sample_pregen, sample_semi_ar, DecodeRule, SampleOutput, SemiARConfig,
};
use sparse_mdm::sparse::BlockAssignment;
use sparse_mdm::trainer::{train_toy_with, TrainConfig};
use sparse_mdm::{Error, TokenId};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

/// Sparse masked-diffusion toolkit: verification, ablation bench, sampling,
/// training and attention-mask dumps.
#[derive(Parser)]
#[command(name = "sparse-mdm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the equivalence and oracle suites.
    Verify(VerifyArgs),
    /// Token-forward and wall-clock ablation over cache/truncation toggles.
    Bench(BenchArgs),
    /// Generate a sequence with a sparse sampler.
    Sample(SampleArgs),
    /// Train the toy model on the pattern grammar.
    Train(TrainArgs),
    /// Write an attention mask as CSV or PGM.
    DumpMask(DumpMaskArgs),
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Worker threads (default from SPARSE_MDM_THREADS, else 1).
    #[arg(long)]
    threads: Option<usize>,
    /// Corrupt the masks under test to check that the suites fail.
    #[arg(long, value_enum)]
    inject_fault: Option<FaultArg>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    FlipMaskCell,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON bench config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run all eight toggle combinations.
    #[arg(long)]
    grid: bool,
    #[arg(long = "L")]
    len: Option<usize>,
    #[arg(long = "S")]
    prompt_len: Option<usize>,
    #[arg(long = "K")]
    steps: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Toggles for a single comparison against dense, e.g. `cp,cr,tr` (default: all).
    #[arg(long, value_delimiter = ',')]
    toggles: Option<Vec<ToggleArg>>,
    /// CSV output (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ToggleArg {
    Cp,
    Cr,
    Tr,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Pregen2d,
    SemiAr,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Greedy,
    Categorical,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, value_enum, default_value = "pregen2d")]
    task: Task,
    /// Model checkpoint; a seeded random model is used when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated prompt token ids.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    prompt: Vec<TokenId>,
    #[arg(long = "H", default_value_t = 8)]
    h: usize,
    #[arg(long = "W", default_value_t = 8)]
    w: usize,
    #[arg(long = "K", default_value_t = 16)]
    k: usize,
    /// Response length for semi-ar.
    #[arg(long = "L", default_value_t = 64)]
    len: usize,
    #[arg(long, default_value_t = 16)]
    block_size: usize,
    #[arg(long, default_value_t = 4)]
    steps_per_block: usize,
    /// Decode blocks right to left.
    #[arg(long)]
    reverse_blocks: bool,
    #[arg(long, default_value_t = 4)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "greedy")]
    decode: RuleArg,
    /// JSON token array (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON train config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Output directory for metrics.csv, report.json and model.bin.
    #[arg(long, default_value = "train-out")]
    out: PathBuf,
    /// Print the loss every N steps (0 = quiet).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Pgm,
}

#[derive(Args)]
struct DumpMaskArgs {
    /// The two-path example: prompt P0..P2, six response tokens, M = N = 2, one register.
    #[arg(long, conflicts_with_all = ["inference", "random"])]
    fig7: bool,
    /// A seeded random step-causal assignment (S <= 4, L <= 12, M, N <= 3).
    #[arg(long, conflicts_with = "inference")]
    random: bool,
    /// Registers per masked block for --random.
    #[arg(long, default_value_t = 1)]
    m: usize,
    /// Restrict to the path ending in this masked block.
    #[arg(long, conflicts_with = "inference")]
    path: Option<usize>,
    /// Inference mask for `n_cache,n_new,n_decode,m`.
    #[arg(long, value_delimiter = ',')]
    inference: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Pixels per cell for PGM output.
    #[arg(long, default_value_t = 8)]
    scale: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Failed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::DimensionMismatch(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Failed(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Failed(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(format!("bad JSON: {e}"))
    }
}

type CliResult = Result<(), Failure>;

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn run_verify(args: VerifyArgs) -> CliResult {
    let opts = VerifyOptions {
        seed: args.seed,
        trials: args.trials,
        fault: args
            .inject_fault
            .map(|FaultArg::FlipMaskCell| Fault::FlipMaskCell),
        threads: args.threads.unwrap_or_else(default_threads),
    };
    let report = verify(&opts);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for s in &report.suites {
        let status = if s.passed() { "PASS" } else { "FAIL" };
        match s.max_abs_diff {
            Some(d) => println!(
                "{status} {} ({} trials, max |diff| {d:.2e})",
                s.name, s.trials
            ),
            None => println!("{status} {} ({} trials)", s.name, s.trials),
        }
        for f in s.failures.iter().take(5) {
            println!("    {f}");
        }
    }
    if let Some(path) = &args.out {
        serde_json::to_writer_pretty(File::create(path)?, &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Failed("verification failed".into()))
    }
}

fn run_bench(args: BenchArgs) -> CliResult {
    let mut cfg: BenchConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => BenchConfig::default(),
    };
    cfg.response_len = args.len.unwrap_or(cfg.response_len);
    cfg.prompt_len = args.prompt_len.unwrap_or(cfg.prompt_len);
    cfg.steps = args.steps.unwrap_or(cfg.steps);
    cfg.registers = args.m.unwrap_or(cfg.registers);
    cfg.repeats = args.repeats.unwrap_or(cfg.repeats);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    let toggles = if args.grid {
        AblationToggle::grid()
    } else {
        let chosen = args
            .toggles
            .unwrap_or_else(|| vec![ToggleArg::Cp, ToggleArg::Cr, ToggleArg::Tr]);
        let t = AblationToggle {
            cache_prompt: chosen.contains(&ToggleArg::Cp),
            cache_response: chosen.contains(&ToggleArg::Cr),
            truncate_response: chosen.contains(&ToggleArg::Tr),
        };
        if t == AblationToggle::DENSE {
            vec![t]
        } else {
            vec![AblationToggle::DENSE, t]
        }
    };
    let report = bench(&cfg, &toggles)?;
    report.write_csv(output(args.out.as_deref())?)?;
    if !report.counts_match() {
        return Err(Failure::Failed(
            "instrumented token counts differ from the analytic counts".into(),
        ));
    }
    Ok(())
}

fn write_sample(out: &SampleOutput, args: &SampleArgs) -> CliResult {
    let mut w = output(args.out.as_deref())?;
    serde_json::to_writer(&mut w, out.response.tokens())?;
    writeln!(w)?;
    w.flush()?;
    if let Some(path) = &args.trace {
        let mut t = BufWriter::new(File::create(path)?);
        for step in &out.trace {
            serde_json::to_writer(&mut t, step)?;
            writeln!(t)?;
        }
        t.flush()?;
    }
    eprintln!(
        "{} tokens, {} steps, {} token-forwards",
        out.response.len(),
        out.trace.len(),
        out.token_forwards
    );
    Ok(())
}

fn run_sample(args: SampleArgs) -> CliResult {
    let len = match args.task {
        Task::Pregen2d => args.h * args.w,
        Task::SemiAr => args.len,
    };
    let model: Model<f32> = match &args.checkpoint {
        Some(p) => Model::load(p)?,
        None => {
            let cfg = ModelConfig::new(
                Vocabulary::new(16)?,
                32,
                2,
                2,
                64,
                args.prompt.len() + len + args.m,
            )
            .with_seed(args.seed);
            Model::init(&cfg)?
        }
    };
    let rule = match args.decode {
        RuleArg::Greedy => DecodeRule::Greedy,
        RuleArg::Categorical => DecodeRule::Categorical,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let out = match args.task {
        Task::Pregen2d => {
            let order = pregen_order_2d(args.h, args.w, args.k, args.seed)?;
            let schedule = DiffusionSchedule::linear(args.k)?;
            sample_pregen(
                &model,
                &args.prompt,
                len,
                &order,
                &schedule,
                args.m,
                &mut rng,
                rule,
            )?
        }
        Task::SemiAr => {
            let mut cfg = SemiARConfig::new(args.block_size, args.steps_per_block);
            cfg.decode_rule = rule;
            if args.reverse_blocks {
                cfg.block_order = (0..cfg.num_blocks(len)).rev().collect();
            }
            sample_semi_ar(&model, &args.prompt, len, &cfg, args.m, &mut rng)?
        }
    };
    write_sample(&out, &args)
}

fn run_train(args: TrainArgs) -> CliResult {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.steps = args.steps.unwrap_or(cfg.steps);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.lr = args.lr.unwrap_or(cfg.lr);
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    std::fs::create_dir_all(&args.out)?;
    let every = args.log_every;
    let (model, report) = train_toy_with(&cfg, |m| {
        if every > 0 && m.step % every == 0 {
            eprintln!("step {:>5}  loss {:.5}", m.step, m.loss);
        }
    })?;
    report.write_csv(BufWriter::new(File::create(args.out.join("metrics.csv"))?))?;
    serde_json::to_writer_pretty(File::create(args.out.join("report.json"))?, &report)?;
    serde_json::to_writer_pretty(File::create(args.out.join("config.json"))?, &cfg)?;
    model.save(args.out.join("model.bin"))?;
    println!("initial loss {:.5}", report.initial_loss);
    if let Some(l) = report.final_loss {
        println!("final loss   {l:.5}");
    }
    if let Some(v) = report.validity {
        println!("validity     {v:.4} ({} samples)", report.samples);
    }
    Ok(())
}

fn random_assignment(seed: u64, regs: usize) -> Result<BlockAssignment, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = rng.gen_range(1..=3);
    let masked = rng.gen_range(1..=3);
    let blocks = (0..rng.gen_range(1..=12))
        .map(|_| rng.gen_range(1..=clean + masked))
        .collect();
    Ok(BlockAssignment::new(rng.gen_range(0..=4), blocks, clean, masked)?.with_registers(regs))
}

fn run_dump_mask(args: DumpMaskArgs) -> CliResult {
    let assignment = if args.fig7 {
        Some(two_path_example())
    } else if args.random {
        Some(random_assignment(args.seed, args.m)?)
    } else {
        None
    };
    let mask: AttentionMask = if let Some(a) = assignment {
        match args.path {
            Some(b) => extract_path_mask(&a, b)?,
            None => step_causal_mask(&a),
        }
    } else if let Some(v) = &args.inference {
        if v.len() != 4 {
            return Err(Failure::Usage(
                "--inference takes n_cache,n_new,n_decode,m".into(),
            ));
        }
        build_inference_mask(v[0], v[1], v[2], v[3])?
    } else {
        return Err(Failure::Usage(
            "choose --fig7, --random or --inference".into(),
        ));
    };
    let mut w = output(args.out.as_deref())?;
    match args.format {
        Format::Csv => mask.write_csv(&mut w)?,
        Format::Pgm => mask.write_pgm(&mut w, args.scale)?,
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(a) => run_verify(a),
        Command::Bench(a) => run_bench(a),
        Command::Sample(a) => run_sample(a),
        Command::Train(a) => run_train(a),
        Command::DumpMask(a) => run_dump_mask(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
