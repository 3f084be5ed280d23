use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use patrep_core::ingest::{DiagnosisTaxonomy, Schema};
use patrep_core::pipeline::{load_toml, Artifact, FactorFile, PipelineConfig, Runner, Stage};
use patrep_core::pooling::DeltaMode;
use patrep_core::rss::FactorSpec;
use patrep_core::text::{Concept, TemporalScheme};

#[derive(Parser)]
#[command(name = "patrep", version, about = "Temporally-aware patient representations from event records")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML). Built-in synthetic defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding every artifact of the run.
    #[arg(long, global = true, default_value = "patrep-out")]
    out_dir: PathBuf,
    /// Run data-parallel loops on a single thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted effects.
    Synth {
        #[arg(long)]
        out_events: Option<PathBuf>,
        #[arg(long)]
        out_manifest: Option<PathBuf>,
    },
    /// Validate a delimited event file into JSON-lines records.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
        /// TOML mapping logical fields to column names.
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collapse records into per-visit patient tables and split ids.
    BuildCohort {
        /// Records written by `ingest`.
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        window: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render visit sentences.
    Textualize {
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        scheme: Option<TemporalScheme>,
        /// TOML with one factor whose items or visits are removed.
        #[arg(long)]
        exclude: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt the reference encoder with the contrastive objective.
    TrainEncoder {
        #[arg(long)]
        texts: Option<PathBuf>,
        #[arg(long)]
        concept: Option<Concept>,
        #[arg(long, requires = "concept")]
        out: Option<PathBuf>,
    },
    /// Embed visit sentences.
    Encode {
        #[arg(long)]
        texts: Option<PathBuf>,
        /// Parameter file or external-encoder spec.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        concept: Option<Concept>,
        #[arg(long, requires = "concept")]
        out: Option<PathBuf>,
    },
    /// Train the attention scorer with a triplet objective.
    TrainPooler(TrainPoolerArgs),
    /// Pool visit embeddings into one vector per patient.
    Pool {
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        scorer: Option<PathBuf>,
        #[arg(long)]
        concept: Option<Concept>,
        #[arg(long, requires = "concept")]
        out: Option<PathBuf>,
    },
    /// Fit standardize+PCA on the training split and build patient rows.
    Represent {
        #[arg(long)]
        pooled_meds: Option<PathBuf>,
        #[arg(long)]
        pooled_comorb: Option<PathBuf>,
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Only `train` is supported.
        #[arg(long, default_value = "train")]
        fit_on: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the logistic probe and the baseline probes.
    FitProbe {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test-split ACC and AUC for the probe and baselines.
    Evaluate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Uniformity and spectrum of three embedding settings.
    Geometry {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Representation-shift attribution on the attribution split.
    Rss {
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Directory holding the frozen encoder, transform and probe.
        #[arg(long)]
        pipeline: Option<PathBuf>,
        /// TOML with `[[factors]]` entries.
        #[arg(long)]
        factors: Option<PathBuf>,
        /// `key=value` over sex, race or label.
        #[arg(long)]
        subgroup: Option<String>,
        #[arg(long)]
        min_support: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage in order.
    RunAll,
    /// Write (x, y, err) tables for ablation and attribution charts.
    EmitPlots {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Args)]
struct TrainPoolerArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    concept: Option<Concept>,
    #[arg(long, requires = "concept")]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    delta_mode: Option<String>,
    #[arg(long)]
    max_triplets_per_anchor: Option<usize>,
    #[arg(long)]
    normalize: Option<bool>,
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if g.sequential {
        cfg.parallel = false;
    }
    Ok(cfg)
}

fn one_factor(path: &Path) -> Result<FactorSpec> {
    if let Ok(f) = load_toml::<FactorSpec>(path) {
        return Ok(f);
    }
    let mut file: FactorFile = load_toml(path)?;
    if file.factors.len() != 1 {
        bail!("{} must describe exactly one factor", path.display());
    }
    Ok(file.factors.remove(0))
}

/// Apply optional path overrides.
fn with(mut r: Runner, pairs: Vec<(Artifact, Option<PathBuf>)>) -> Runner {
    for (a, p) in pairs {
        if let Some(p) = p {
            r = r.with_override(a, p);
        }
    }
    r
}

fn concept_out(c: Option<Concept>, a: fn(Concept) -> Artifact, p: Option<PathBuf>) -> Vec<(Artifact, Option<PathBuf>)> {
    c.map(|c| vec![(a(c), p)]).unwrap_or_default()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    let out_dir = cli.global.out_dir.clone();

    // config edits first, then the runner, then path overrides
    match &cli.command {
        Command::Ingest { schema: Some(p), .. } => cfg.schema = load_toml::<Schema>(p)?,
        Command::BuildCohort { taxonomy, window, .. } => {
            if let Some(p) = taxonomy {
                cfg.taxonomy = Some(load_toml::<DiagnosisTaxonomy>(p)?);
            }
            if let Some(w) = window {
                cfg.window_radius_days = *w;
            }
        }
        Command::Textualize { scheme: Some(s), .. } => cfg.scheme = *s,
        Command::TrainPooler(a) => {
            let t = &mut cfg.pooler.train;
            a.epochs.inspect(|v| t.epochs = *v);
            a.batch.inspect(|v| t.batch_size = *v);
            a.lr.inspect(|v| t.learning_rate = *v);
            a.weight_decay.inspect(|v| t.weight_decay = *v);
            a.margin.inspect(|v| t.margin = *v);
            a.hidden_dim.inspect(|v| t.hidden_dim = *v);
            a.max_triplets_per_anchor.inspect(|v| t.max_triplets_per_anchor = *v);
            a.normalize.inspect(|v| t.normalize = *v);
            if let Some(m) = &a.delta_mode {
                t.delta_mode = match m.as_str() {
                    "identity" => DeltaMode::Identity,
                    "log1p" => DeltaMode::Log1p,
                    other => bail!("unknown delta mode `{other}` (identity|log1p)"),
                };
            }
        }
        Command::Pool { scorer: Some(_), .. } => cfg.pooler.enabled = true,
        Command::Represent { fit_on, .. } if fit_on != "train" => {
            bail!("transforms are only ever fitted on the training split (got --fit-on {fit_on})")
        }
        Command::Rss { factors, subgroup, min_support, .. } => {
            if let Some(p) = factors {
                cfg.rss.factors = load_toml::<FactorFile>(p)?.factors;
            }
            if subgroup.is_some() {
                cfg.rss.subgroup = subgroup.clone();
            }
            if let Some(m) = min_support {
                cfg.rss.min_support = *m;
            }
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            return Ok(());
        }
        _ => {}
    }

    let mut runner = Runner::new(&cfg, &out_dir)?;
    let stage = match cli.command {
        Command::Synth { out_events, out_manifest } => {
            runner = with(runner, vec![(Artifact::Events, out_events), (Artifact::SynthManifest, out_manifest)]);
            Stage::Synth
        }
        Command::Ingest { input, out, .. } => {
            runner = with(runner, vec![(Artifact::Events, input), (Artifact::Records, out)]);
            Stage::Ingest
        }
        Command::BuildCohort { events, out, .. } => {
            runner = with(runner, vec![(Artifact::Records, events), (Artifact::Cohort, out)]);
            Stage::BuildCohort
        }
        Command::Textualize { cohort, exclude, out, .. } => {
            runner.options.exclude = exclude.as_deref().map(one_factor).transpose()?;
            runner = with(runner, vec![(Artifact::Cohort, cohort), (Artifact::Texts, out)]);
            Stage::Textualize
        }
        Command::TrainEncoder { texts, concept, out } => {
            runner.options.concept = concept;
            let mut o = vec![(Artifact::Texts, texts)];
            o.extend(concept_out(concept, Artifact::Encoder, out));
            runner = with(runner, o);
            Stage::TrainEncoder
        }
        Command::Encode { texts, encoder, concept, out } => {
            runner.options.concept = concept;
            runner.options.encoder = encoder;
            let mut o = vec![(Artifact::Texts, texts)];
            o.extend(concept_out(concept, Artifact::Embeddings, out));
            runner = with(runner, o);
            Stage::Encode
        }
        Command::TrainPooler(a) => {
            runner.options.concept = a.concept;
            let mut o = vec![(Artifact::Cohort, a.cohort)];
            o.extend(concept_out(a.concept, Artifact::Embeddings, a.embeddings));
            o.extend(concept_out(a.concept, Artifact::Scorer, a.out));
            runner = with(runner, o);
            Stage::TrainPooler
        }
        Command::Pool { embeddings, cohort, scorer, concept, out } => {
            runner.options.concept = concept;
            let mut o = vec![(Artifact::Cohort, cohort)];
            o.extend(concept_out(concept, Artifact::Embeddings, embeddings));
            o.extend(concept_out(concept, Artifact::Scorer, scorer));
            o.extend(concept_out(concept, Artifact::Pooled, out));
            runner = with(runner, o);
            Stage::Pool
        }
        Command::Represent { pooled_meds, pooled_comorb, cohort, out, .. } => {
            runner = with(
                runner,
                vec![
                    (Artifact::Pooled(Concept::Medication), pooled_meds),
                    (Artifact::Pooled(Concept::Comorbidity), pooled_comorb),
                    (Artifact::Cohort, cohort),
                    (Artifact::Representation, out),
                ],
            );
            Stage::Represent
        }
        Command::FitProbe { out } => {
            runner = with(runner, vec![(Artifact::Probe, out)]);
            Stage::FitProbe
        }
        Command::Evaluate { out } => {
            runner = with(runner, vec![(Artifact::Metrics, out)]);
            Stage::Evaluate
        }
        Command::Geometry { out } => {
            runner = with(runner, vec![(Artifact::Geometry, out)]);
            Stage::Geometry
        }
        Command::Rss { cohort, pipeline, out, .. } => {
            let mut o = vec![(Artifact::Cohort, cohort), (Artifact::Rss, out)];
            if let Some(dir) = pipeline {
                let mut frozen = vec![Artifact::Transform, Artifact::Probe, Artifact::Split];
                for c in Concept::ALL {
                    frozen.extend([Artifact::Encoder(c), Artifact::Scorer(c)]);
                }
                o.extend(frozen.into_iter().map(|a| (a, Some(dir.join(a.file_name())))));
            }
            runner = with(runner, o);
            Stage::Rss
        }
        Command::EmitPlots { out } => {
            runner = with(runner, vec![(Artifact::Plots, out)]);
            Stage::EmitPlots
        }
        Command::RunAll => {
            let manifest = runner.run_all()?;
            for s in &manifest.stages {
                log::info!("{:<14} {:>8} ms  {} outputs", s.stage, s.wall_time_ms, s.outputs.len());
            }
            println!("{}", serde_json::to_string_pretty(&manifest)?);
            return Ok(());
        }
        Command::ShowConfig => unreachable!("handled above"),
    };
    let record = runner.run(stage).with_context(|| format!("stage `{stage}` failed"))?;
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
