use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deepbow::dataio::{self, PhantomSpec};
use deepbow::eval::{self, FitContext, FitLog};
use deepbow::features::Scenario;
use deepbow::pipeline::{self, Artifacts, Family, PipelineConfig, PipelineFeaturizer, Protocol, RunReport};
use deepbow::{Error, ErrorKind, Result};
use log::info;

#[derive(Parser)]
#[command(name = "deepbow", version, about = "Deep bag-of-words region classification")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a mean-matched phantom dataset.
    Synth(SynthArgs),
    /// Extract patches and write per-metric normalization statistics.
    Extract(Common),
    /// Train the auto-encoders on every subject.
    TrainCae(Common),
    /// Fit codebooks, reusing trained auto-encoders from --out.
    BuildVocab(Common),
    /// Write the feature matrix and cohort histograms using saved artifacts.
    Featurize(Common),
    /// Repeated-split cross-validation.
    Evaluate(Common),
    /// Heldout-ensemble evaluation.
    Holdout(Common),
    /// Run the protocol(s) named in the config.
    Run(Common),
    /// Tabulate several run reports.
    Compare(CompareArgs),
    /// Print a summary of one run report.
    Report(ReportArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON pipeline config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest (default: generate the configured phantom).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Codebook size.
    #[arg(long)]
    words: Option<usize>,
    /// Treat SVM iteration-cap hits as errors.
    #[arg(long)]
    strict: bool,
    /// Retrain the auto-encoder inside every CV repeat.
    #[arg(long)]
    strict_leakage: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    effect_size: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(required = true, num_args = 2..)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    report: PathBuf,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(d) = &self.dataset {
            c.dataset = Some(d.clone());
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if let Some(f) = self.family {
            c.family = f;
        }
        if let Some(s) = self.scenario {
            c.scenario = s;
        }
        if let Some(k) = self.words {
            c.vocab.k = k;
        }
        c.strict |= self.strict;
        c.eval.strict_leakage |= self.strict_leakage;
        c.validate()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data | ErrorKind::Io => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Extract(c) => extract(&c.config()?),
        Command::TrainCae(c) => train_cae(&c.config()?),
        Command::BuildVocab(c) => build_vocab(&c.config()?),
        Command::Featurize(c) => featurize(&c.config()?),
        Command::Evaluate(c) => run_protocol(c.config()?, Some(Protocol::Cv)),
        Command::Holdout(c) => run_protocol(c.config()?, Some(Protocol::Heldout)),
        Command::Run(c) => run_protocol(c.config()?, None),
        Command::Compare(a) => compare(a),
        Command::Report(a) => report(&a.report),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => PipelineConfig::load(p)?.phantom,
        None => PhantomSpec::default(),
    };
    if let Some(n) = a.subjects {
        spec.n_subjects = n;
    }
    if let Some(n) = a.patients {
        spec.n_patients = n;
    }
    if let Some(e) = a.effect_size {
        spec.effect_size = e;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let ds = dataio::generate_phantom_dataset(&spec).map_err(|e| Error::from(e).in_stage("synth"))?;
    let manifest = dataio::save_dataset(&ds, &a.out).map_err(|e| Error::from(e).in_stage("synth"))?;
    fs::write(a.out.join("phantom_spec.json"), serde_json::to_string_pretty(&spec)?)?;
    let (pos, neg) = ds.class_counts();
    info!("wrote {} subjects ({pos} patients, {neg} controls) to {}", ds.len(), manifest.display());
    Ok(())
}

fn all_rows(f: &PipelineFeaturizer) -> Vec<usize> {
    (0..eval::Featurizer::subjects(f).0.len()).collect()
}

fn patch_family(config: &PipelineConfig, stage: &str) -> Result<()> {
    if config.family == Family::RegionMean {
        return Err(Error::Config(format!("`{stage}` needs a patch family, not region-mean")));
    }
    Ok(())
}

fn extract(config: &PipelineConfig) -> Result<()> {
    patch_family(config, "extract")?;
    let ds = config.load_dataset().map_err(|e| e.in_stage("load"))?;
    let f = PipelineFeaturizer::new(&ds, config)?;
    let norm = f.fit_norm(&all_rows(&f), FitContext::Shared, &FitLog::new())?;
    let out = &config.out_dir;
    fs::create_dir_all(out)?;
    f.bank().expect("patch family").write_counts_csv(&ds.ids(), out.join("patch_counts.csv"))?;
    fs::write(out.join("norm.json"), serde_json::to_string_pretty(&norm)?)?;
    info!("patch counts and normalization statistics written to {}", out.display());
    Ok(())
}

fn train_cae(config: &PipelineConfig) -> Result<()> {
    if config.family != Family::DeepBow {
        return Err(Error::Config("`train-cae` applies to the deep-bow family".into()));
    }
    let ds = config.load_dataset().map_err(|e| e.in_stage("load"))?;
    let f = PipelineFeaturizer::new(&ds, config)?;
    let rows = all_rows(&f);
    let log = FitLog::new();
    let norm = f.fit_norm(&rows, FitContext::Shared, &log)?;
    let models = f.train_models(&rows, &norm, FitContext::Shared, &log, config.seed)?;
    Artifacts {
        norm,
        models,
        codebooks: Vec::new(),
    }
    .save(&config.out_dir)?;
    info!("auto-encoders written to {}", config.out_dir.join("cae").display());
    Ok(())
}

fn build_vocab(config: &PipelineConfig) -> Result<()> {
    patch_family(config, "build-vocab")?;
    let ds = config.load_dataset().map_err(|e| e.in_stage("load"))?;
    let f = PipelineFeaturizer::new(&ds, config)?;
    let models = match config.family {
        Family::DeepBow => {
            let saved = Artifacts::load(&config.out_dir)?.models;
            if saved.is_empty() {
                return Err(Error::Config(format!(
                    "no auto-encoders under {}; run train-cae first",
                    config.out_dir.display()
                )));
            }
            Some(saved)
        }
        _ => None,
    };
    let artifacts = f.fit(&all_rows(&f), FitContext::Shared, &FitLog::new(), config.seed, models)?;
    artifacts.save(&config.out_dir)?;
    info!("{} codebooks written", artifacts.codebooks.len());
    Ok(())
}

fn featurize(config: &PipelineConfig) -> Result<()> {
    let ds = config.load_dataset().map_err(|e| e.in_stage("load"))?;
    let f = PipelineFeaturizer::new(&ds, config)?;
    let artifacts = if config.family == Family::RegionMean {
        Artifacts::default()
    } else {
        let a = Artifacts::load(&config.out_dir)?;
        if a.codebooks.is_empty() {
            return Err(Error::Config(format!(
                "no codebooks under {}; run build-vocab first",
                config.out_dir.display()
            )));
        }
        a
    };
    let x = f.transform(&artifacts).map_err(|e| e.in_stage("featurize"))?;
    fs::create_dir_all(&config.out_dir)?;
    x.write_csv(config.out_dir.join("features.csv"))?;
    eval::cohort_histograms(&x)?.write_csv(config.out_dir.join("cohort_histograms.csv"))?;
    info!("{} x {} feature matrix written", x.n_rows(), x.n_cols());
    Ok(())
}

fn run_protocol(mut config: PipelineConfig, protocol: Option<Protocol>) -> Result<()> {
    if let Some(p) = protocol {
        config.protocol = p;
    }
    let out = pipeline::run(&config)?;
    pipeline::write_run(&out, &config.out_dir)?;
    if let Some(cv) = &out.report.cv {
        info!(
            "CV accuracy {:.3} over {} repeats",
            cv.accuracy.mean.unwrap_or(f64::NAN),
            cv.repeats.len()
        );
    }
    if let Some(h) = &out.report.heldout {
        info!("heldout ensemble accuracy {:.3} over {} rounds", h.mean_accuracy, h.rounds.len());
    }
    info!("report written to {}", config.out_dir.join("report.json").display());
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            RunReport::load(p)
                .map(|r| (p.display().to_string(), r))
                .map_err(|e| e.in_stage("compare"))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = pipeline::compare_reports(&reports);
    let table = pipeline::format_compare_table(&rows);
    print!("{table}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        pipeline::write_compare_csv(&rows, out.join("compare.csv"))?;
        fs::write(out.join("compare.txt"), &table)?;
    }
    Ok(())
}

fn report(path: &Path) -> Result<()> {
    let r = RunReport::load(path).map_err(|e| e.in_stage("report"))?;
    let mut out = vec![format!(
        "family {} | scenario {} | words {} | dimension {} ({} image)",
        r.family.name(),
        r.scenario,
        r.words,
        r.feature_dim,
        r.image_dim
    )];
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}%", 100.0 * x));
    if let Some(cv) = &r.cv {
        out.push(format!(
            "CV ({} repeats, {} validation): accuracy {} ± {}, sensitivity {}, specificity {}",
            cv.repeats.len(),
            cv.validation_size,
            pct(cv.accuracy.mean),
            pct(cv.accuracy.std),
            pct(cv.sensitivity.mean),
            pct(cv.specificity.mean)
        ));
        let mut counts = std::collections::BTreeMap::<&str, usize>::new();
        for rep in &cv.repeats {
            for name in &rep.selected {
                *counts.entry(name.as_str()).or_default() += 1;
            }
        }
        let mut top: Vec<_> = counts.into_iter().collect();
        top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        for (name, n) in top.iter().take(10) {
            out.push(format!("  selected in {n:>3} repeats: {name}"));
        }
    }
    if let Some(h) = &r.heldout {
        out.push(format!(
            "heldout ({} rounds of {}, {}-model vote): accuracy {}",
            h.rounds.len(),
            h.heldout_size,
            h.ensemble_size,
            pct(Some(h.mean_accuracy))
        ));
    }
    // A closed pipe (`| head`) is not an error.
    let _ = writeln!(std::io::stdout(), "{}", out.join("\n"));
    Ok(())
}
