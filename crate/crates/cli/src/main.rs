use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use adavi_core::checkpoint::Checkpoint;
use adavi_core::config::{parse_config, parse_train_config, zoo_config, ModelConfig};
use adavi_core::dataset::{check_shapes, load_dataset, save_dataset};
use adavi_core::family::DualFamily;
use adavi_core::gradcheck;
use adavi_core::mfvi::{mfvi_fit, MfviConfig};
use adavi_core::oracle::{elbo_estimate, gre_kl_to_analytic, gre_log_evidence, mean_se, GreConstants};
use adavi_core::rng::{streams, Rng, RngPosition};
use adavi_core::tensor::TensorRecord;
use adavi_core::train::{simulate_dataset, train_with_validation, Dataset, EvalRecord, Observer, StepRecord};
use adavi_core::{Error, Result};

/// Amortized variational inference for pyramidal hierarchical models.
///
/// MODEL is either a path to a model config (JSON) or one of the built-in
/// names `gre`, `nc` and `gm`.
#[derive(Parser)]
#[command(name = "adavi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model config and print its descriptor table.
    Validate { model: String },
    /// Draw observations (and optionally parameters) from the prior.
    Simulate {
        model: String,
        #[arg(long)]
        n: usize,
        #[arg(long, env = "ADAVI_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Keep the simulated parameters next to the observations.
        #[arg(long)]
        with_theta: bool,
    },
    /// Train the dual family and write a checkpoint.
    Train {
        model: String,
        /// Training settings (JSON) replacing the ones in the model config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training data; simulated from the prior when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out examples simulated for an ELBO estimate after each stage.
        #[arg(long, default_value_t = 0)]
        validation: usize,
        /// Write metric records here instead of stdout.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, env = "ADAVI_SEED")]
        seed: Option<u64>,
    },
    /// Draw posterior samples for every example of a dataset.
    Infer {
        model: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        draws: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = default_threads())]
        threads: usize,
        #[arg(long, env = "ADAVI_SEED")]
        seed: Option<u64>,
    },
    /// Estimate the ELBO of a trained family on a dataset.
    Evaluate {
        model: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        oracle: Option<OracleKind>,
        #[arg(long, default_value_t = 256)]
        draws: usize,
        #[arg(long, env = "ADAVI_SEED")]
        seed: Option<u64>,
    },
    /// Fit the non-amortized mean-field baseline to each example.
    BaselineMfvi {
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = MfviConfig::default().steps)]
        steps: usize,
        /// Only fit the first N examples.
        #[arg(long)]
        examples: Option<usize>,
        #[arg(long, env = "ADAVI_SEED")]
        seed: Option<u64>,
    },
    /// Compare every analytic gradient with central finite differences.
    Gradcheck {
        #[arg(long, env = "ADAVI_SEED", default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    Gre,
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Exit status for an error: 1 for invalid input, 2 for failed runs.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::RunFailed(_) | Error::NonFinite(_) | Error::NanGradient { .. } | Error::Domain { .. } => 2,
        _ => 1,
    }
}

fn load_model(spec: &str) -> Result<ModelConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        return parse_config(&std::fs::read_to_string(path)?);
    }
    zoo_config(spec)
}

fn emit(out: &mut dyn Write, v: &Value) -> Result<()> {
    writeln!(out, "{v}")?;
    Ok(())
}

fn record(kind: &str, body: impl serde::Serialize) -> Value {
    let mut v = serde_json::to_value(body).expect("records serialize");
    if let Value::Object(m) = &mut v {
        m.insert("record".into(), Value::String(kind.into()));
    }
    v
}

fn load_data(path: &Path, cfg: &ModelConfig) -> Result<Dataset> {
    let desc = cfg.validate()?;
    let data = load_dataset(path)?;
    check_shapes(&data.data, &desc)?;
    Ok(data.data)
}

fn load_family(cfg: &ModelConfig, checkpoint: &Path) -> Result<DualFamily> {
    let mut family = DualFamily::build(&cfg.template, &cfg.arch, cfg.train.seed)?;
    Checkpoint::load(checkpoint)?.restore(&mut family.store, &cfg.digest())?;
    Ok(family)
}

struct CliObserver<'a> {
    out: &'a mut dyn Write,
    checkpoint: PathBuf,
    digest: String,
    error: Option<io::Error>,
}

impl CliObserver<'_> {
    fn write(&mut self, v: Value) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{v}") {
                self.error = Some(e);
            }
        }
    }
}

impl Observer for CliObserver<'_> {
    fn step(&mut self, r: &StepRecord) {
        self.write(record("step", r));
    }

    fn eval(&mut self, r: &EvalRecord) {
        self.write(record("eval", r));
    }

    fn stage_end(&mut self, stage: usize, family: &DualFamily, rng: RngPosition) -> Result<()> {
        Checkpoint::capture(&family.store, &self.digest, rng, None).save(&self.checkpoint)?;
        self.write(json!({"record": "stage_end", "stage": stage, "checkpoint": self.checkpoint}));
        Ok(())
    }
}

fn run(cmd: Command) -> Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cmd {
        Command::Validate { model } => {
            let cfg = load_model(&model)?;
            let desc = cfg.validate()?;
            let family = DualFamily::build(&cfg.template, &cfg.arch, cfg.train.seed)?;
            writeln!(out, "{desc}")?;
            writeln!(out, "parameters: {}", family.param_count())?;
            writeln!(out, "digest: {}", cfg.digest())?;
        }
        Command::Simulate {
            model,
            n,
            seed,
            out: path,
            with_theta,
        } => {
            let cfg = load_model(&model)?;
            let desc = cfg.validate()?;
            let seed = seed.unwrap_or(cfg.train.seed);
            let mut rng = Rng::with_stream(seed, streams::SIMULATE);
            let data = simulate_dataset(&cfg.template, &desc, n, with_theta, &mut rng)?;
            save_dataset(&path, &cfg.template.name, &data)?;
            emit(&mut out, &json!({"record": "simulate", "examples": n, "out": path}))?;
        }
        Command::Train {
            model,
            config,
            out: ckpt,
            data,
            validation,
            metrics,
            seed,
        } => {
            let mut cfg = load_model(&model)?;
            if let Some(p) = config {
                cfg.train = parse_train_config(&std::fs::read_to_string(&p)?)?;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.train.check()?;
            let desc = cfg.validate()?;
            let mut sim = Rng::with_stream(cfg.train.seed, streams::SIMULATE);
            let data = match data {
                Some(p) => load_data(&p, &cfg)?,
                None => simulate_dataset(
                    &cfg.template,
                    &desc,
                    cfg.train.dataset_size,
                    cfg.train.needs_theta(),
                    &mut sim,
                )?,
            };
            let held_out = (validation > 0)
                .then(|| simulate_dataset(&cfg.template, &desc, validation, false, &mut sim))
                .transpose()?;
            let mut family = DualFamily::build(&cfg.template, &cfg.arch, cfg.train.seed)?;
            let mut file;
            let sink: &mut dyn Write = match &metrics {
                Some(p) => {
                    file = BufWriter::new(File::create(p)?);
                    &mut file
                }
                None => &mut out,
            };
            let mut obs = CliObserver {
                out: sink,
                checkpoint: ckpt.clone(),
                digest: cfg.digest(),
                error: None,
            };
            let m = train_with_validation(&mut family, &data, held_out.as_ref(), &cfg.train, &mut obs)?;
            if let Some(e) = obs.error.take() {
                return Err(e.into());
            }
            if cfg.train.stages.is_empty() {
                let rng = Rng::with_stream(cfg.train.seed, streams::TRAIN).position();
                Checkpoint::capture(&family.store, &cfg.digest(), rng, None).save(&ckpt)?;
            }
            let summary = json!({
                "record": "summary",
                "steps": m.records.len(),
                "skipped": m.skipped(),
                "failed": m.failed,
                "wall_s": m.wall_s,
                "final_loss": m.records.iter().rev().find_map(|r| r.loss),
                "parameters": family.param_count(),
                "checkpoint": ckpt,
            });
            emit(obs.out, &summary)?;
            obs.out.flush()?;
            if m.failed {
                return Err(Error::RunFailed(format!(
                    "{} of {} steps skipped",
                    m.skipped(),
                    m.records.len()
                )));
            }
        }
        Command::Infer {
            model,
            checkpoint,
            data,
            draws,
            out: path,
            threads,
            seed,
        } => {
            let cfg = load_model(&model)?;
            let family = load_family(&cfg, &checkpoint)?;
            let data = load_data(&data, &cfg)?;
            let seed = seed.unwrap_or(cfg.train.seed);
            let start = std::time::Instant::now();
            let results = family.infer_batch(&data.x, draws, seed, threads)?;
            let examples: Vec<Value> = results
                .iter()
                .map(|d| {
                    let values: serde_json::Map<String, Value> = d
                        .values
                        .iter()
                        .map(|(k, v)| (k.clone(), serde_json::to_value(TensorRecord::from(v)).expect("tensor")))
                        .collect();
                    json!({"values": values, "log_q": d.log_q})
                })
                .collect();
            let doc = json!({"model": cfg.template.name, "draws": draws, "examples": examples});
            std::fs::write(&path, doc.to_string())?;
            emit(
                &mut out,
                &json!({"record": "infer", "examples": results.len(), "draws": draws,
                        "wall_s": start.elapsed().as_secs_f64(), "out": path}),
            )?;
        }
        Command::Evaluate {
            model,
            checkpoint,
            data,
            oracle,
            draws,
            seed,
        } => {
            let cfg = load_model(&model)?;
            let family = load_family(&cfg, &checkpoint)?;
            let data = load_data(&data, &cfg)?;
            let mut rng = Rng::with_stream(seed.unwrap_or(cfg.train.seed), streams::EVAL);
            let gre = match oracle {
                Some(OracleKind::Gre) => Some(GreConstants::from_template(&cfg.template)?),
                None => None,
            };
            let (mut elbos, mut kls, mut gaps) = (Vec::new(), Vec::new(), Vec::new());
            for i in 0..data.len() {
                let x = data.example(i)?;
                let (elbo, elbo_se) = elbo_estimate(&family, &x, draws, &mut rng)?;
                let mut rec = json!({"record": "example", "example": i, "elbo": elbo, "elbo_se": elbo_se});
                if let Some(c) = gre {
                    let (kl, kl_se) = gre_kl_to_analytic(&family, &x, c, draws, &mut rng)?;
                    let evidence = gre_log_evidence(&x, c)?;
                    rec["analytic_kl"] = json!(kl);
                    rec["analytic_kl_se"] = json!(kl_se);
                    rec["log_evidence"] = json!(evidence);
                    rec["evidence_gap"] = json!(evidence - elbo);
                    kls.push(kl);
                    gaps.push(evidence - elbo);
                }
                elbos.push(elbo);
                emit(&mut out, &rec)?;
            }
            let (mean, se) = mean_se(&elbos);
            let mut summary = json!({"record": "summary", "examples": elbos.len(),
                                     "elbo_mean": mean, "elbo_se": se, "elbo_median": median(&elbos)});
            if gre.is_some() {
                summary["analytic_kl_mean"] = json!(mean_se(&kls).0);
                summary["evidence_gap_mean"] = json!(mean_se(&gaps).0);
            }
            emit(&mut out, &summary)?;
        }
        Command::BaselineMfvi {
            model,
            data,
            steps,
            examples,
            seed,
        } => {
            let cfg = load_model(&model)?;
            let data = load_data(&data, &cfg)?;
            let n = examples.unwrap_or(data.len()).min(data.len());
            let mcfg = MfviConfig {
                steps,
                seed: seed.unwrap_or(cfg.train.seed),
                ..MfviConfig::default()
            };
            let mut elbos = Vec::with_capacity(n);
            let mut failed = 0;
            for i in 0..n {
                let fit = mfvi_fit(&cfg.template, &data.example(i)?, &mcfg)?;
                let params: serde_json::Map<String, Value> = fit
                    .family
                    .summary()
                    .iter()
                    .map(|(k, v)| (k.clone(), serde_json::to_value(TensorRecord::from(v)).expect("tensor")))
                    .collect();
                let skipped = fit.trace.iter().filter(|t| t.is_none()).count();
                emit(
                    &mut out,
                    &json!({"record": "example", "example": i, "elbo": fit.elbo, "elbo_se": fit.elbo_se,
                            "skipped": skipped, "failed": fit.failed, "params": params}),
                )?;
                failed += usize::from(fit.failed);
                elbos.push(fit.elbo);
            }
            let (mean, se) = mean_se(&elbos);
            emit(
                &mut out,
                &json!({"record": "summary", "examples": n, "elbo_mean": mean, "elbo_se": se,
                        "elbo_median": median(&elbos), "failed": failed}),
            )?;
            if failed > 0 {
                return Err(Error::RunFailed(format!("{failed} mean-field fits failed")));
            }
        }
        Command::Gradcheck { seed } => {
            let results = gradcheck::suite(seed)?;
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                emit(&mut out, &record("check", r))?;
            }
            let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            emit(
                &mut out,
                &json!({"record": "summary", "checks": results.len(), "failed": failed, "max_rel_err": worst}),
            )?;
            if failed > 0 {
                return Err(Error::RunFailed(format!("{failed} gradient checks failed")));
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
