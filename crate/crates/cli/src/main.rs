use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pgm_core::bench::throughput_bench;
use pgm_core::checkpoint::Checkpoint;
use pgm_core::config::RunConfig;
use pgm_core::distill::distill;
use pgm_core::eval::{generative_perplexity, nelbo_perplexity, unigram_entropy, NgramScorer};
use pgm_core::halton::halton_schedule;
use pgm_core::model::Model;
use pgm_core::sampling::{sample, SampleTrace};
use pgm_core::training::{train, TrainOutputs};
use pgm_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "pgm", version, about = "Partition generative models and a masked-diffusion baseline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set steps=0` or `--set train.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for the numeric kernels.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write `checkpoints/final.ckpt` and `metrics.csv`.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Generate sequences into `samples/`.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Defaults to `checkpoints/final.ckpt` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `sample.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Distil a checkpoint into `checkpoints/student.ckpt`.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write likelihood and sample-quality metrics to `eval.json`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time the samplers and write `bench.csv`.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to time; a freshly initialised model when none is given.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Print the Halton visiting order of an H×H grid as CSV.
    Halton {
        #[arg(long = "H", value_name = "H")]
        h: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn resolve(common: &Common, section: &str) -> Result<RunConfig> {
    if common.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    base.with_overrides(&common.overrides, Some(section))
}

fn checkpoints_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("checkpoints")
}

fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> Result<Checkpoint> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| checkpoints_dir(cfg).join("final.ckpt"));
    Checkpoint::load(&path)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { common } => cmd_train(&resolve(&common, "train")?),
        Command::Sample {
            common,
            checkpoint,
            steps,
        } => {
            let mut cfg = resolve(&common, "sample")?;
            if let Some(s) = steps {
                cfg.sample.steps = s;
                cfg.validate()?;
            }
            cmd_sample(&cfg, checkpoint.as_deref())
        }
        Command::Distill { common, checkpoint } => cmd_distill(&resolve(&common, "distill")?, checkpoint.as_deref()),
        Command::Eval { common, checkpoint } => cmd_eval(&resolve(&common, "eval")?, checkpoint.as_deref()),
        Command::Bench { common, checkpoint } => cmd_bench(&resolve(&common, "bench")?, &checkpoint),
        Command::Halton { h } => {
            let mut out = String::from("row,col\n");
            for (r, c) in halton_schedule(h)? {
                let _ = writeln!(out, "{r},{c}");
            }
            print!("{out}");
            Ok(())
        }
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.write_resolved()?;
    let data = cfg.data.load()?;
    let mut model = Model::new(&cfg.model, cfg.init_seed)?;
    let dir = checkpoints_dir(cfg);
    create_dir(&dir)?;
    let outputs = TrainOutputs {
        metrics_csv: Some(cfg.output_dir.join("metrics.csv")),
        checkpoint_dir: Some(dir.clone()),
    };
    let outcome = train(
        &cfg.train,
        &cfg.schedule,
        &mut model,
        &data.train.sequences,
        &data.val.sequences,
        &outputs,
    )?;
    let path = dir.join("final.ckpt");
    outcome.checkpoint(&model).save(&path)?;
    println!("trained {} steps; checkpoint {}", outcome.steps, path.display());
    Ok(())
}

fn generate(cfg: &RunConfig, model: &Model) -> Result<Vec<SampleTrace>> {
    let opts = cfg.sample.options(cfg.schedule, Some(cfg.data.vocab().bos));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample.seed);
    let mut traces = Vec::with_capacity(cfg.sample.n_samples);
    while traces.len() < cfg.sample.n_samples {
        let b = cfg.sample.batch.min(cfg.sample.n_samples - traces.len());
        traces.extend(sample(
            cfg.sample.sampler,
            model.denoiser(),
            cfg.data.seq_len(),
            cfg.sample.steps,
            b,
            &opts,
            &mut rng,
        )?);
    }
    Ok(traces)
}

fn cmd_sample(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    cfg.write_resolved()?;
    let model = load_checkpoint(cfg, checkpoint)?.eval_model()?;
    let traces = generate(cfg, &model)?;
    let dir = cfg.output_dir.join("samples");
    create_dir(&dir)?;
    let vocab = cfg.data.vocab();
    let mut seqs = String::new();
    let mut csv = String::from("sample,step,n_clean,n_decoded,positions_processed,model_calls\n");
    for (i, t) in traces.iter().enumerate() {
        t.validate(vocab.size)?;
        let _ = writeln!(seqs, "{}", vocab.render(&t.tokens));
        for s in &t.steps {
            let _ = writeln!(
                csv,
                "{i},{},{},{},{},{}",
                s.step,
                s.n_clean,
                s.positions.len(),
                s.positions_processed,
                s.model_calls
            );
        }
    }
    write(&dir.join("sequences.txt"), &seqs)?;
    write(&dir.join("trace.csv"), &csv)?;
    println!("wrote {} samples to {}", traces.len(), dir.display());
    Ok(())
}

fn cmd_distill(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    cfg.write_resolved()?;
    let teacher = load_checkpoint(cfg, checkpoint)?;
    let data = cfg.data.load()?;
    let out = distill(
        &teacher.eval_model()?,
        &teacher.metadata,
        &data.train.sequences,
        &cfg.distill,
        &cfg.schedule,
    )?;
    let dir = checkpoints_dir(cfg);
    create_dir(&dir)?;
    let path = dir.join("student.ckpt");
    Checkpoint::from_model(&out.student, None, out.metadata.clone()).save(&path)?;
    println!(
        "distilled {} round(s), step ratio {}; checkpoint {}",
        cfg.distill.rounds,
        out.metadata.step_ratio,
        path.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    cfg.write_resolved()?;
    let model = load_checkpoint(cfg, checkpoint)?.eval_model()?;
    let data = cfg.data.load()?;
    let nelbo = nelbo_perplexity(&model, &data.val.sequences, &cfg.schedule, cfg.eval.n_mc, cfg.eval.seed)?;
    let mut report = serde_json::json!({
        "nelbo_nats_per_token": nelbo.nats_per_token,
        "nelbo_std_error": nelbo.std_error,
        "nelbo_perplexity": nelbo.perplexity,
    });
    if let Some(chain) = &data.chain {
        report["entropy_rate"] = chain.entropy_rate().into();
        report["entropy_rate_perplexity"] = chain.entropy_rate().exp().into();
    }
    if cfg.eval.gen_samples > 0 {
        let mut scfg = cfg.clone();
        scfg.sample.n_samples = cfg.eval.gen_samples;
        let samples: Vec<Vec<u32>> = generate(&scfg, &model)?.into_iter().map(|t| t.tokens).collect();
        let scorer = NgramScorer::fit(&data.train.sequences, cfg.eval.ngram_order, cfg.data.vocab().size)?;
        report["gen_perplexity"] = generative_perplexity(&scorer, &samples)?.into();
        report["unigram_entropy"] = unigram_entropy(&samples, cfg.data.vocab().size)?.into();
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Evaluation(e.to_string()))?;
    write(&cfg.output_dir.join("eval.json"), &format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<()> {
    cfg.write_resolved()?;
    let mut models = Vec::new();
    if checkpoints.is_empty() {
        let m = Model::new(&cfg.model, cfg.init_seed)?;
        models.push((format!("{:?}", m.kind()).to_lowercase(), m));
    }
    for p in checkpoints {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        models.push((name, Checkpoint::load(p)?.eval_model()?));
    }
    let refs: Vec<(&str, &dyn pgm_core::model::Denoiser)> =
        models.iter().map(|(n, m)| (n.as_str(), m.denoiser())).collect();
    let opts = cfg.sample.options(cfg.schedule, Some(cfg.data.vocab().bos));
    let report = throughput_bench(&refs, &cfg.bench, &opts)?;
    let path = cfg.output_dir.join("bench.csv");
    report.write_csv(&path)?;
    println!("wrote {} rows to {}", report.rows.len(), path.display());
    Ok(())
}
