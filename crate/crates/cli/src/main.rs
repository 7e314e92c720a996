//! `grnet`: synthetic data, training, evaluation, gradient checks, ablations
//! and file inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use grnet_core::autodiff::GradCheckConfig;
use grnet_core::data::checkpoint;
use grnet_core::data::config::RunConfig;
use grnet_core::data::dataset::Dataset;
use grnet_core::data::featfile;
use grnet_core::data::manifest::{Manifest, Role, Split};
use grnet_core::data::synth::{generate_synthetic, SynthSpec};
use grnet_core::data::write_atomic;
use grnet_core::experiment::{
    ablate, ablation_variants, evaluate, fit, model_grad_check, synthetic_run_config,
    synthetic_task, tail_mean, variant,
};
use grnet_core::pyramid::{PyramidConfig, Scale};
use grnet_core::reasoning::{EdgeMode, GrNet, ModelShape, ReasoningConfig};
use grnet_core::retrieval::{evaluate_protocol, Protocol, Scorer};
use grnet_core::{DType, Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "grnet", version, about = "Graph reasoning over similarity pyramids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size model and 60-epoch schedule.
    Default,
    /// Small model, 200 steps, tuned for the synthetic task.
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    GlobalCosine,
    GreedyLocal,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run config patch; unspecified fields keep preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match self.preset {
            Preset::Default => RunConfig::default(),
            Preset::Synthetic => synthetic_run_config(0),
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let patch: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let mut merged = serde_json::to_value(&cfg).expect("config serialises");
            merge(&mut merged, patch);
            cfg = RunConfig::from_json(&merged.to_string())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-patch dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON generator spec; defaults to the occlusion/cropping task.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_identities: Option<usize>,
        #[arg(long)]
        test_identities: Option<usize>,
        #[arg(long)]
        val_identities: Option<usize>,
        #[arg(long)]
        distractors: Option<usize>,
        #[arg(long)]
        occlusion: Option<f64>,
        #[arg(long)]
        cropping: Option<f64>,
        #[arg(long)]
        view: Option<f64>,
        /// On-disk precision of the feature files.
        #[arg(long, default_value = "f32")]
        dtype: DType,
    },
    /// Train a model and write a checkpoint plus a log.
    Train {
        /// Manifest (JSONL).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Log path; defaults to the checkpoint path with `.log` appended.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a split and report top-k accuracy per protocol.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "scorer", required_unless_present = "scorer")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        scorer: Option<Baseline>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Comma-separated; defaults to every protocol that selects a query.
        #[arg(long, value_delimiter = ',')]
        protocol: Vec<Protocol>,
        #[arg(long, value_delimiter = ',', default_value = "1,20,50")]
        k: Vec<usize>,
        /// Window grid of the greedy-local baseline.
        #[arg(long, default_value = "3x3")]
        greedy_scale: Scale,
        /// Config echoed with baseline scores.
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Writes `query<TAB>gallery ids best-first` per query.
        #[arg(long)]
        ranking: Option<PathBuf>,
    },
    /// Finite-difference gradient check of a randomly initialised model.
    Gradcheck {
        #[arg(long, default_value = "1x1,2x2")]
        scales: PyramidConfig,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        /// Similarity vector dimension.
        #[arg(long, default_value_t = 6)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        hidden: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value = "recompute-per-layer")]
        edge_mode: EdgeMode,
        #[arg(long, default_value = "f64")]
        precision: DType,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Prints one line per parameter.
        #[arg(long)]
        verbose: bool,
    },
    /// Train and evaluate scale / connectivity variants over several seeds.
    Ablate {
        /// Fixed dataset; without it every seed regenerates the synthetic task.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Generator spec used when `--data` is absent; its seed is replaced.
        #[arg(long, conflicts_with = "data")]
        spec: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// JSON patch over the preset; its seed is ignored.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "synthetic")]
        preset: Preset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise a checkpoint, feature file or manifest.
    Inspect { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}: {}", e.code(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}

/// Recursive object merge; non-object values in `patch` replace.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth {
            out,
            spec,
            seed,
            train_identities,
            test_identities,
            val_identities,
            distractors,
            occlusion,
            cropping,
            view,
            dtype,
        } => {
            let mut s = match spec {
                Some(path) => read_spec(&path)?,
                None => synthetic_task(0),
            };
            let overrides = [
                (train_identities, &mut s.train_identities),
                (test_identities, &mut s.test_identities),
                (val_identities, &mut s.val_identities),
                (distractors, &mut s.distractors),
            ];
            for (v, slot) in overrides {
                if let Some(v) = v {
                    *slot = v;
                }
            }
            for (v, slot) in [(occlusion, &mut s.occlusion_rate), (cropping, &mut s.cropping_rate), (view, &mut s.view_rate)] {
                if let Some(v) = v {
                    *slot = v;
                }
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let data = generate_synthetic(&s)?;
            let header = format!("synth {}", serde_json::to_string(&s).expect("spec serialises"));
            let manifest = data.save(&out, dtype, &header)?;
            println!(
                "wrote {} items to {}",
                manifest.records.len(),
                out.join("manifest.jsonl").display()
            );
        }
        Command::Train {
            data,
            out,
            config,
            log,
            quiet,
        } => {
            let cfg = config.resolve()?;
            let log_path = log.unwrap_or_else(|| append_ext(&out, "log"));
            match cfg.precision {
                DType::F64 => train_cmd::<f64>(&cfg, &data, &out, &log_path, quiet)?,
                DType::F32 => train_cmd::<f32>(&cfg, &data, &out, &log_path, quiet)?,
            }
        }
        Command::Eval {
            data,
            checkpoint,
            scorer,
            split,
            protocol,
            k,
            greedy_scale,
            config,
            out,
            ranking,
        } => {
            let args = EvalArgs {
                data: &data,
                split,
                protocols: &protocol,
                ks: &k,
                out: out.as_deref(),
                ranking: ranking.as_deref(),
            };
            match (checkpoint, scorer) {
                (Some(path), _) => {
                    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    match checkpoint::peek(&bytes)?.0 {
                        DType::F64 => {
                            let (model, cfg) = checkpoint::decode::<f64>(&bytes)?;
                            eval_cmd(&args, &cfg, &Scorer::Grnet(&model))?;
                        }
                        DType::F32 => {
                            let (model, cfg) = checkpoint::decode::<f32>(&bytes)?;
                            eval_cmd(&args, &cfg, &Scorer::Grnet(&model))?;
                        }
                    }
                }
                (None, Some(b)) => {
                    let cfg = config.resolve()?;
                    let scorer = match b {
                        Baseline::GlobalCosine => Scorer::GlobalCosine,
                        Baseline::GreedyLocal => Scorer::GreedyLocal { scale: greedy_scale },
                    };
                    eval_cmd::<f64>(&args, &cfg, &scorer)?;
                }
                (None, None) => return Err(Error::Config("pass --checkpoint or --scorer".into())),
            }
        }
        Command::Gradcheck {
            scales,
            channels,
            dim,
            hidden,
            layers,
            edge_mode,
            precision,
            seed,
            tolerance,
            verbose,
        } => {
            if precision != DType::F64 {
                return Err(Error::Config(
                    "gradient checks need f64; f32 differences are dominated by rounding".into(),
                ));
            }
            let shape = ModelShape {
                channels,
                pyramid: scales,
                reasoning: ReasoningConfig {
                    layers,
                    hidden,
                    proj_dim: dim,
                    edge_mode,
                    ..ReasoningConfig::default()
                },
            };
            let report = model_grad_check(shape, seed, &GradCheckConfig::default())?;
            if verbose {
                for p in &report.params {
                    println!(
                        "param={} coords={} max_rel_err={:.3e} max_abs_err={:.3e}",
                        p.identifier, p.coords_checked, p.max_rel_error, p.max_abs_error
                    );
                }
            }
            let worst = report.max_rel_error();
            if worst < tolerance {
                println!("PASS max_rel_err={worst:.3e}");
            } else {
                println!("FAIL max_rel_err={worst:.3e} tolerance={tolerance:e}");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate {
            data,
            spec,
            variants,
            seeds,
            config,
            preset,
            out,
        } => {
            let cfg = ConfigArgs {
                config,
                preset,
                seed: None,
            }
            .resolve()?;
            let chosen = if variants.is_empty() {
                ablation_variants()
            } else {
                variants.iter().map(|n| variant(n)).collect::<Result<_>>()?
            };
            let mut progress = |line: &str| eprintln!("{line}");
            let table = match data {
                Some(path) => {
                    let d = Dataset::<f64>::load(&Manifest::load(&path)?)?;
                    ablate(&cfg, &chosen, &seeds, &mut |_| Ok(d.clone()), &mut progress)?
                }
                None => {
                    let base = match spec {
                        Some(path) => read_spec(&path)?,
                        None => synthetic_task(0),
                    };
                    let mut gen = |seed| {
                        let s = SynthSpec { seed, ..base.clone() };
                        Ok(generate_synthetic(&s)?.cast::<f64>())
                    };
                    ablate(&cfg, &chosen, &seeds, &mut gen, &mut progress)?
                }
            };
            let mut text = format!("{}\n# seeds {:?}\n", cfg.echo(), seeds);
            for line in table.lines() {
                text.push_str(&line);
                text.push('\n');
            }
            emit(&text, out.as_deref())?;
        }
        Command::Inspect { path } => inspect(&path)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn read_spec(path: &Path) -> Result<SynthSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SynthSpec =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

fn append_ext(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Prints `text` and, when `out` is set, also writes it there.
fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    print!("{text}");
    if let Some(path) = out {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

fn train_cmd<T: Scalar>(cfg: &RunConfig, data: &Path, out: &Path, log_path: &Path, quiet: bool) -> Result<()> {
    let dataset = Dataset::<T>::load(&Manifest::load(data)?)?;
    let mut sink = |line: &str| {
        if !quiet {
            println!("{line}");
        }
    };
    let (model, log) = fit(cfg, &dataset, &mut sink)?;
    checkpoint::save(out, &model, cfg)?;
    let mut text = format!("{}\n", cfg.echo());
    for line in &log.lines {
        text.push_str(line);
        text.push('\n');
    }
    write_atomic(log_path, text.as_bytes())?;
    println!(
        "steps={} final_loss={:.6} checkpoint={}",
        log.losses.len(),
        tail_mean(&log.losses, 10),
        out.display()
    );
    Ok(())
}

struct EvalArgs<'a> {
    data: &'a Path,
    split: Split,
    protocols: &'a [Protocol],
    ks: &'a [usize],
    out: Option<&'a Path>,
    ranking: Option<&'a Path>,
}

fn eval_cmd<T: Scalar>(args: &EvalArgs<'_>, cfg: &RunConfig, scorer: &Scorer<'_, T>) -> Result<()> {
    let dataset = Dataset::<T>::load(&Manifest::load(args.data)?)?;
    let (scores, eval) = evaluate(&dataset, args.split, scorer, args.ks)?;
    let mut text = format!(
        "{}\n# scorer={} split={} queries={} gallery={}\n",
        cfg.echo(),
        scorer.name(),
        args.split,
        scores.queries(),
        scores.gallery()
    );
    let mut warnings = Vec::new();
    if args.protocols.is_empty() {
        for report in &eval.protocols {
            push_lines(&mut text, &report.lines());
            warnings.extend(report.results.iter().filter_map(|r| r.warning.clone()));
        }
    } else {
        let (_, _, attrs) = dataset.retrieval_sets(args.split);
        for &p in args.protocols {
            let report = evaluate_protocol(&scores, &attrs, p, args.ks)?;
            push_lines(&mut text, &report.lines());
            warnings.extend(report.results.iter().filter_map(|r| r.warning.clone()));
        }
    }
    warnings.sort();
    warnings.dedup();
    for w in warnings {
        eprintln!("warning: {}", one_line(&w));
    }
    emit(&text, args.out)?;
    if let Some(path) = args.ranking {
        let dump = format!("{}\n{}", cfg.echo(), scores.ranking_dump());
        write_atomic(path, dump.as_bytes())?;
    }
    Ok(())
}

fn push_lines(text: &mut String, lines: &[String]) {
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(checkpoint::MAGIC) {
        let (dtype, header) = checkpoint::peek(&bytes)?;
        println!("kind=checkpoint dtype={dtype}");
        println!("pyramid={} nodes={}", header.shape.pyramid, header.shape.pyramid.node_count());
        match dtype {
            DType::F64 => print_params(&checkpoint::decode::<f64>(&bytes)?.0),
            DType::F32 => print_params(&checkpoint::decode::<f32>(&bytes)?.0),
        }
        println!("{}", header.config.echo());
    } else if bytes.starts_with(featfile::MAGIC) {
        let (map, dtype) = featfile::decode::<f64>(&bytes)?;
        let d = map.data();
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
        println!(
            "kind=features dtype={dtype} channels={} height={} width={} min={min:.6} max={max:.6} mean={mean:.6}",
            map.channels(),
            map.height(),
            map.width()
        );
    } else {
        let manifest = Manifest::load(path)?;
        println!("kind=manifest records={}", manifest.records.len());
        for split in [Split::Train, Split::Val, Split::Test] {
            let rs: Vec<_> = manifest.records.iter().filter(|r| r.split == split).collect();
            if rs.is_empty() {
                continue;
            }
            let queries: Vec<_> = rs.iter().filter(|r| r.role == Role::Query).collect();
            let mut ids: Vec<&str> = rs.iter().map(|r| r.identity.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            let count = |f: &dyn Fn(&grnet_core::retrieval::QueryAttributes) -> bool| {
                queries.iter().filter(|r| f(&r.attributes())).count()
            };
            println!(
                "split={split} queries={} gallery={} identities={} occluded={} cropped={} non_front={}",
                queries.len(),
                rs.len() - queries.len(),
                ids.len(),
                count(&|a| a.occluded),
                count(&|a| a.cropped),
                count(&|a| a.view != grnet_core::retrieval::View::Front),
            );
        }
        match manifest.validate(true) {
            Ok(()) => println!("valid=true"),
            Err(e) => println!("valid=false code={} reason={}", e.code(), one_line(&e.to_string())),
        }
    }
    Ok(())
}

fn print_params<T: Scalar>(model: &GrNet<T>) {
    let mut total = 0;
    for p in model.params().iter() {
        total += p.value.numel();
        println!("param={} shape={:?} decay={}", p.identifier, p.value.shape(), p.decay);
    }
    println!("parameters={total}");
}
