use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pcbm::api::SessionView;
use pcbm::experiment::{
    check_all, run_benchmark, BenchmarkReport, CheckOutcome, CurveSummary, ExperimentOptions,
};
use pcbm::intervention::{payload, Edit, InterventionSession};
use pcbm::metrics::MeanStd;
use pcbm::pipeline::{
    evaluate_bundle, load_bundle, save_bundle, train_all, EvalReport, MaskOverride, Overrides,
    Profile, Variant,
};
use pcbm::schema::{load_schema, ConceptSchema};
use pcbm::synth::{read_dataset, write_dataset, Split};
use serde::Deserialize;

#[derive(Parser)]
#[command(
    name = "pcbm",
    about = "Progressive concept bottleneck models on synthetic scans"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ProfileArgs {
    /// Named profile: full, desk, acceptance or tiny.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// TOML file overriding profile fields, e.g. `[predictor.train]` `epochs = 10`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// TOML concept schema; the built-in geo-scan schema when absent.
    #[arg(long)]
    schema: Option<PathBuf>,
}

impl ProfileArgs {
    fn load(&self) -> Result<(Profile, ConceptSchema)> {
        let mut profile = Profile::by_name(&self.profile)?;
        if let Some(path) = &self.config {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            profile = profile.with_overrides(&text)?;
        }
        let schema = match &self.schema {
            Some(path) => load_schema(
                &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
            )?,
            None => ConceptSchema::geoscan(),
        };
        Ok((profile, schema))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its train/val/test split.
    GenData {
        #[command(flatten)]
        profile: ProfileArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant on a dataset directory and write a checkpoint.
    Train {
        #[command(flatten)]
        profile: ProfileArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "pcbm")]
        variant: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Metrics JSON destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one sample through the chain, with optional overrides, and dump every intermediate.
    Infer {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: usize,
        /// JSON `{"masks": {"organ": "ground_truth" | "clear" | [values]}, "concepts": {"name": value}}`.
        #[arg(long)]
        overrides: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply a JSON list of edits to one sample, locally or through a running server.
    Intervene {
        #[arg(long)]
        sample: usize,
        /// JSON array of edits, e.g. `[{"type": "concept", "concept": "bar_angle_ok", "value": 0.99}]`.
        #[arg(long)]
        edits: PathBuf,
        /// Service root, e.g. `http://127.0.0.1:8080`; local bundle and data are used otherwise.
        #[arg(long)]
        server: Option<String>,
        #[arg(long, required_unless_present = "server")]
        bundle: Option<PathBuf>,
        #[arg(long, required_unless_present = "server")]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every variant over several seeds; write metrics and curve files.
    Experiment {
        #[command(flatten)]
        profile: ProfileArgs,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3,4,5,6,7,8,9,10", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Skip the end-to-end baseline.
        #[arg(long)]
        no_standard: bool,
        /// Run the cross-seed direction checks; exit nonzero when any fails.
        #[arg(long)]
        check: bool,
    },
    /// Serve intervention sessions over HTTP.
    Serve {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Idle seconds before a session is evicted.
        #[arg(long, default_value_t = 1800)]
        ttl: u64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData { profile, out } => {
            let (profile, schema) = profile.load()?;
            let data = profile.dataset(&schema)?;
            write_dataset(&data, schema.n(), &out)?;
            println!(
                "wrote {} samples ({} train / {} val / {} test) to {}",
                data.samples.len(),
                data.splits.train.len(),
                data.splits.val.len(),
                data.splits.test.len(),
                out.display()
            );
        }
        Command::Train {
            profile,
            data,
            variant,
            seed,
            out,
        } => {
            let (profile, schema) = profile.load()?;
            let variant = Variant::parse(&variant)?;
            let data = read_dataset(&data)?;
            let bundle = train_all(&profile, &schema, &data, variant, seed)?;
            println!(
                "{:<12} {:>8} {:>12} {:>10}",
                "stage", "epochs", "best_epoch", "val_loss"
            );
            for s in &bundle.stages {
                println!(
                    "{:<12} {:>8} {:>12} {:>10.5}",
                    format!("{:?}", s.stage).to_lowercase(),
                    s.epochs,
                    s.best_epoch,
                    s.best_val_loss
                );
            }
            save_bundle(&bundle, &out)?;
            println!("checkpoint written to {}", out.display());
        }
        Command::Eval {
            bundle,
            data,
            split,
            out,
        } => {
            let bundle = load_bundle(&bundle, None)?;
            let data = read_dataset(&data)?;
            let split = parse_split(&split)?;
            let report = evaluate_bundle(&bundle, &data, data.split(split))?;
            print_reports(std::slice::from_ref(&report));
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
        }
        Command::Infer {
            bundle,
            data,
            sample,
            overrides,
            out,
        } => {
            let bundle = load_bundle(&bundle, None)?;
            let data = read_dataset(&data)?;
            let s = data
                .samples
                .get(sample)
                .with_context(|| format!("unknown sample {sample}"))?;
            let ov = match overrides {
                Some(p) => parse_overrides(&bundle.schema, &fs::read_to_string(&p)?)?,
                None => Overrides::default(),
            };
            let inf = bundle.infer(&s.image, Some(&s.mask), &ov)?;
            emit(out.as_deref(), &payload(&bundle, &data, sample, &inf, &ov)?)?;
        }
        Command::Intervene {
            sample,
            edits,
            server,
            bundle,
            data,
            out,
        } => {
            let edits: Vec<Edit> =
                serde_json::from_str(&fs::read_to_string(&edits)?).context("parsing edits")?;
            let view = match server {
                Some(base) => intervene_remote(&base, sample, &edits)?,
                None => intervene_local(
                    &bundle.context("--bundle is required without --server")?,
                    &data.context("--data is required without --server")?,
                    sample,
                    edits,
                )?,
            };
            for a in &view.audit {
                eprintln!(
                    "edit {}: {:?} recomputed, {} -> {}",
                    a.seq, a.recomputed, a.class_before, a.class_after
                );
            }
            emit(out.as_deref(), &view)?;
        }
        Command::Experiment {
            profile,
            seeds,
            out,
            no_standard,
            check,
        } => return experiment(&profile, &seeds, &out, no_standard, check),
        Command::Serve {
            bundle,
            data,
            addr,
            ttl,
        } => {
            let bundle = load_bundle(&bundle, None)?;
            let data = read_dataset(&data)?;
            let state = pcbm_service::AppState::new(bundle, data, Duration::from_secs(ttl));
            tokio::runtime::Runtime::new()?.block_on(pcbm_service::serve(addr, state))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_split(name: &str) -> Result<Split> {
    Split::parse(name)
        .with_context(|| format!("unknown split `{name}` (expected train, val or test)"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MaskSpec {
    Named(String),
    Layer(Vec<f64>),
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct OverrideFile {
    #[serde(default)]
    masks: BTreeMap<String, MaskSpec>,
    #[serde(default)]
    concepts: BTreeMap<String, f64>,
}

fn parse_overrides(schema: &ConceptSchema, text: &str) -> Result<Overrides> {
    let file: OverrideFile = serde_json::from_str(text).context("parsing overrides")?;
    let mut ov = Overrides::default();
    for (name, spec) in file.masks {
        let k = schema
            .segmentation_index(&name)
            .with_context(|| format!("unknown segmentation concept `{name}`"))?;
        let o = match spec {
            MaskSpec::Named(s) if s == "ground_truth" => MaskOverride::GroundTruth,
            MaskSpec::Named(s) if s == "clear" => MaskOverride::Clear,
            MaskSpec::Named(s) => {
                bail!("mask override `{s}` (expected ground_truth, clear or an array)")
            }
            MaskSpec::Layer(v) => MaskOverride::Layer(v),
        };
        ov.masks.insert(k, o);
    }
    for (name, v) in file.concepts {
        let i = schema
            .concept_index(&name)
            .with_context(|| format!("unknown property concept `{name}`"))?;
        ov.concepts.insert(i, v);
    }
    Ok(ov)
}

fn intervene_local(
    bundle: &Path,
    data: &Path,
    sample: usize,
    edits: Vec<Edit>,
) -> Result<SessionView> {
    let bundle = load_bundle(bundle, None)?;
    let data = read_dataset(data)?;
    let mut s = InterventionSession::open(&bundle, &data, sample)?;
    for e in edits {
        s.apply(&bundle, &data, e)?;
    }
    Ok(SessionView {
        session_id: "local".into(),
        payload: payload(&bundle, &data, sample, &s.current, &s.overrides)?,
        audit: s.audit,
    })
}

fn intervene_remote(base: &str, sample: usize, edits: &[Edit]) -> Result<SessionView> {
    tokio::runtime::Runtime::new()?.block_on(async {
        let client = pcbm_client::Client::new(base);
        let mut view = client.open_session(sample).await?;
        let id = view.session_id.clone();
        let result = async {
            for e in edits {
                view = client.edit(&id, e).await?;
            }
            Ok::<_, pcbm_client::ClientError>(view)
        }
        .await;
        client.close(&id).await?;
        Ok(result?)
    })
}

fn print_reports(reports: &[EvalReport]) {
    println!(
        "{:<12} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "variant", "n", "OA", "MA", "MCC", "COA", "RMSE", "IoU"
    );
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for r in reports {
        println!(
            "{:<12} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>8} {:>8} {:>8}",
            r.variant.name(),
            r.samples,
            r.classification.oa,
            r.classification.ma,
            r.classification.mcc,
            opt(r.concepts.as_ref().map(|c| c.coa)),
            opt(r.concepts.as_ref().map(|c| c.rmse_applicable)),
            opt(r.segmentation.as_ref().map(|s| s.mean_foreground_iou)),
        );
    }
}

fn print_summary(bench: &BenchmarkReport) {
    let cols = ["oa", "ma", "mcc", "coa", "rmse_applicable", "iou"];
    print!("{:<12}", "variant");
    for c in cols {
        print!(" {c:>16}");
    }
    println!();
    for (v, m) in &bench.summary {
        print!("{:<12}", v.name());
        for c in cols {
            match m.get(c) {
                Some(MeanStd { mean, std }) => print!(" {:>16}", format!("{mean:.4}±{std:.4}")),
                None => print!(" {:>16}", "-"),
            }
        }
        println!();
    }
}

/// Tab-separated `k`, mean OA and its standard deviation.
fn curve_file(c: &CurveSummary) -> String {
    let mut s = String::from("k\toa_mean\toa_std\n");
    for (k, p) in c.oa.iter().enumerate() {
        s.push_str(&format!("{k}\t{}\t{}\n", p.mean, p.std));
    }
    s
}

fn experiment(
    args: &ProfileArgs,
    seeds: &[u64],
    out: &Path,
    no_standard: bool,
    check: bool,
) -> Result<ExitCode> {
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    let (profile, schema) = args.load()?;
    let opts = if no_standard {
        ExperimentOptions::without_standard()
    } else {
        ExperimentOptions::default()
    };
    let bench = run_benchmark(&profile, &schema, seeds, &opts, |r| {
        eprintln!("seed {} done", r.seed)
    })?;
    fs::create_dir_all(out)?;
    write_json(&out.join("metrics.json"), &bench)?;
    for c in &bench.curves {
        let name = format!(
            "curve_{}_{}.tsv",
            c.variant.name(),
            serde_json::to_value(c.selection)?
                .as_str()
                .unwrap_or("selection")
        );
        fs::write(out.join(name), curve_file(c))?;
    }
    print_summary(&bench);
    if !check {
        return Ok(ExitCode::SUCCESS);
    }
    let outcomes: Vec<CheckOutcome> = check_all(&bench.per_seed);
    write_json(&out.join("checks.json"), &outcomes)?;
    for c in &outcomes {
        println!(
            "{} {} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            c.detail
        );
    }
    Ok(if outcomes.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
