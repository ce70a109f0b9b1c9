use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use horl_core::data::{
    fit_tabular_primitive, make_behavior_policy, relabel_high_dataset, sample_point_mass,
    sample_trajectories, segment_low_dataset, BehaviorPolicy, CorridorBehavior, DatasetManifest,
    GroundTruth, SamplingConfig, SkillStyle, TabularPrimitive,
};
use horl_core::flow::{train_flow, FlowDocument, FlowEncoder};
use horl_core::iql::{train_iql, ContinuousArch, IqlConfig, IqlDocument, TabularArch, IQL_SCHEMA_VERSION};
use horl_core::mdp::{exact_value_iteration_as, FeatureTable, HyperMDP, LinearTabularMDP, PointMassEnv, PolicyKind, PolicyTable, VI_TOL};
use horl_core::nn::TrainSettings;
use horl_core::pevi::{compute_beta_schedule, fit_pessimistic_value_with};
use horl_core::analysis::suboptimality_decomposition;
use horl_core::vae::{train_vae, VaeDocument};
use horl_lab::config::{validate_config, ConfigLoadError, FeatureBasis, FlowSettings, PeviSettings, VaeSettings};
use horl_lab::io::{read_continuous_csv, read_tabular_csv, write_continuous_csv, write_tabular_csv, write_trace_csv};
use horl_lab::runner::run_experiment;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "horl", version, about = "Offline hierarchical RL laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Env {
    Tabular,
    PointMass,
}

#[derive(Clone, Copy, ValueEnum)]
enum SkillModel {
    Tabular,
    Flow,
    Vae,
}

#[derive(Clone, Copy, ValueEnum)]
enum Learner {
    Pevi,
    Iql,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random linear-mixture MDP.
    GenMdp {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        states: usize,
        #[arg(long, default_value_t = 3)]
        actions: usize,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        r_max: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample an offline dataset with a skill-based behavior policy.
    GenData {
        #[arg(long, value_enum, default_value = "tabular")]
        env: Env,
        /// MDP document (tabular only).
        #[arg(long)]
        mdp: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        skills: usize,
        #[arg(long, value_enum, default_value = "softmax-diverse")]
        style: Style,
        #[arg(long, default_value_t = 100)]
        trajectories: usize,
        #[arg(long, default_value_t = 8)]
        horizon: usize,
        /// Skill length; the behavior redraws its skill every `c` steps.
        #[arg(long, default_value_t = 1)]
        c: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for `data.csv`, `manifest.json` and `behavior.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit low-level skills from a dataset.
    TrainSkills {
        #[arg(long, value_enum)]
        model: SkillModel,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        c: usize,
        /// MDP document, needed for tabular sizes.
        #[arg(long)]
        mdp: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        skills: usize,
        #[arg(long, default_value_t = 0.0)]
        smoothing: f64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Parameter document; the loss trace goes next to it as `.trace.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Relabel a dataset and learn the high-level policy.
    TrainHigh {
        #[arg(long, value_enum)]
        learner: Learner,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        c: usize,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        /// MDP document (tabular data).
        #[arg(long)]
        mdp: Option<PathBuf>,
        /// Learned primitive from `train-skills --model tabular`; the
        /// pessimistic learner plans in the hyper-MDP it induces.
        #[arg(long)]
        primitive: Option<PathBuf>,
        /// Flow document used to encode continuous segments.
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        constant: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long)]
        composed_features: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompose the suboptimality of a learned tabular pipeline.
    Evaluate {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        behavior: PathBuf,
        #[arg(long)]
        primitive: PathBuf,
        /// High-level policy table written by `train-high`.
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        c: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment sweep from a config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a config file and report every problem.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    ActionsAsSkills,
    RandomDeterministic,
    SoftmaxDiverse,
}

impl From<Style> for SkillStyle {
    fn from(s: Style) -> Self {
        match s {
            Style::ActionsAsSkills => SkillStyle::ActionsAsSkills,
            Style::RandomDeterministic => SkillStyle::RandomDeterministic,
            Style::SoftmaxDiverse => SkillStyle::SoftmaxDiverse,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn trace_path(out: &Path) -> PathBuf {
    out.with_extension("trace.csv")
}

fn load_mdp(path: Option<&Path>) -> Result<LinearTabularMDP> {
    let path = path.context("--mdp is required for tabular data")?;
    Ok(LinearTabularMDP::from_json(&fs::read_to_string(path)?)?)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenMdp { seed, dim, states, actions, gamma, r_max, out } => {
            let mdp = LinearTabularMDP::generate(seed, dim, states, actions, gamma, r_max)?;
            write_json(&out, &mdp)?;
        }
        Command::GenData { env, mdp, skills, style, trajectories, horizon, c, seed, out } => {
            fs::create_dir_all(&out)?;
            let manifest = match env {
                Env::Tabular => {
                    let mdp = load_mdp(mdp.as_deref())?;
                    let behavior = make_behavior_policy(&mdp, skills, style.into(), seed)?;
                    let trajs = sample_trajectories(&mdp, &behavior, &SamplingConfig::aligned(trajectories, horizon, c), seed)?;
                    write_tabular_csv(&trajs, File::create(out.join("data.csv"))?)?;
                    write_json(&out.join("behavior.json"), &behavior)?;
                    DatasetManifest::describe(&segment_low_dataset(&trajs, c)?, mdp.gamma(), seed, trajectories)
                }
                Env::PointMass => {
                    let env = PointMassEnv::bimodal();
                    let trajs = sample_point_mass(&env, &CorridorBehavior::default(), trajectories, horizon, seed)?;
                    write_continuous_csv(&trajs, File::create(out.join("data.csv"))?)?;
                    DatasetManifest::describe(&segment_low_dataset(&trajs, c)?, 0.99, seed, trajectories)
                }
            };
            write_json(&out.join("manifest.json"), &manifest)?;
        }
        Command::TrainSkills { model, data, c, mdp, skills, smoothing, steps, batch_size, lr, seed, out } => {
            let settings = TrainSettings { steps, batch_size, lr };
            match model {
                SkillModel::Tabular => {
                    let mdp = load_mdp(mdp.as_deref())?;
                    let low = segment_low_dataset(&read_tabular_csv(open(&data)?)?, c)?;
                    let fit = fit_tabular_primitive(&low, mdp.num_states(), skills, mdp.num_actions(), smoothing)?;
                    write_json(&out, &fit)?;
                }
                SkillModel::Flow => {
                    let low = segment_low_dataset(&read_continuous_csv(open(&data)?)?, c)?;
                    let seg = &low.segments[0];
                    let config = FlowSettings::default().model(c, seg.actions[0].len(), seg.states[0].len());
                    let run = train_flow(&low, &config, &settings, seed)?;
                    write_json(&out, &FlowDocument::new(run.flow, run.prior))?;
                    write_trace_csv(&run.trace, File::create(trace_path(&out))?)?;
                }
                SkillModel::Vae => {
                    let low = segment_low_dataset(&read_continuous_csv(open(&data)?)?, c)?;
                    let seg = &low.segments[0];
                    let config = VaeSettings::default().model(c, seg.states[0].len(), seg.actions[0].len());
                    let run = train_vae(&low, &config, &settings, seed)?;
                    write_json(&out, &VaeDocument::new(run.model))?;
                    write_trace_csv(&run.trace, File::create(trace_path(&out))?)?;
                }
            }
        }
        Command::TrainHigh {
            learner,
            data,
            c,
            gamma,
            mdp,
            primitive,
            flow,
            constant,
            delta,
            composed_features,
            seed,
            out,
        } => {
            if let Some(flow_path) = flow {
                let doc = FlowDocument::from_json(&fs::read_to_string(&flow_path)?)?;
                let low = segment_low_dataset(&read_continuous_csv(open(&data)?)?, c)?;
                let hi = relabel_high_dataset(&low, &FlowEncoder { flow: &doc.flow }, gamma)?;
                if !matches!(learner, Learner::Iql) {
                    bail!("continuous skills need the iql learner");
                }
                let arch = ContinuousArch {
                    state_dim: low.segments[0].states[0].len(),
                    latent_dim: doc.flow.config().flow_dim(),
                    hidden: 64,
                };
                let config = IqlConfig::default();
                let run = train_iql(&hi, arch, &config, seed)?;
                write_json(&out, &IqlDocument { version: IQL_SCHEMA_VERSION, config, params: run.params })?;
                write_trace_csv(&run.trace, File::create(trace_path(&out))?)?;
                return Ok(ExitCode::SUCCESS);
            }
            let mdp = load_mdp(mdp.as_deref())?;
            let low = segment_low_dataset(&read_tabular_csv(open(&data)?)?, c)?;
            let hi = relabel_high_dataset(&low, &GroundTruth, mdp.gamma())?;
            let primitive: TabularPrimitive = read_json(primitive.as_deref().context("--primitive is required for tabular data")?)?;
            let num_skills = primitive.table.num_rows() / mdp.num_states();
            let policy = match learner {
                Learner::Pevi => {
                    let hyper = HyperMDP::build(&mdp, &primitive.table, c)?;
                    let settings = PeviSettings {
                        constant,
                        delta,
                        features: if composed_features { FeatureBasis::Composed } else { FeatureBasis::Indicator },
                        ..PeviSettings::default()
                    };
                    let features = match settings.features {
                        FeatureBasis::Indicator => FeatureTable::indicator(mdp.num_states(), num_skills),
                        FeatureBasis::Composed => hyper.composed_features(),
                    };
                    let schedule = compute_beta_schedule(features.dim(), hi.len(), mdp.gamma(), c, delta, constant, mdp.r_max())?;
                    let est = fit_pessimistic_value_with(&hi, &hyper, &features, &settings.solver(schedule.beta_scale))?;
                    write_json(&out, &est)?;
                    est.policy
                }
                Learner::Iql => {
                    let arch = TabularArch { num_states: mdp.num_states(), num_skills };
                    let config = IqlConfig::default();
                    let run = train_iql(&hi, arch, &config, seed)?;
                    let policy = run.params.policy_table()?;
                    write_json(&out, &IqlDocument { version: IQL_SCHEMA_VERSION, config, params: run.params })?;
                    write_trace_csv(&run.trace, File::create(trace_path(&out))?)?;
                    policy
                }
            };
            write_json(&out.with_extension("policy.json"), &policy)?;
        }
        Command::Evaluate { mdp, behavior, primitive, policy, c, out } => {
            let mdp = load_mdp(Some(&mdp))?;
            let behavior: BehaviorPolicy = read_json(&behavior)?;
            let primitive: TabularPrimitive = read_json(&primitive)?;
            let policy: PolicyTable = read_json(&policy)?;
            let hyper = HyperMDP::build(&mdp, behavior.skills(), c)?;
            let report = suboptimality_decomposition(&mdp, &hyper, &primitive.table, &policy)?;
            let best = exact_value_iteration_as(&hyper, VI_TOL, PolicyKind::HighLevel)?;
            let doc = serde_json::json!({
                "decomposition": report,
                "residual": report.residual(),
                "best_high_level_policy": best.policy.argmax_choices(),
            });
            match out {
                Some(path) => write_json(&path, &doc)?,
                None => println!("{}", serde_json::to_string_pretty(&doc)?),
            }
        }
        Command::Sweep { config, out, workers, seed } => {
            let mut config = match validate_config(&config) {
                Ok(c) => c,
                Err(e) => return Ok(report_config_error(&e)),
            };
            if let Some(w) = workers {
                config.workers = Some(w);
            }
            if let Some(s) = seed {
                config.master_seed = s;
            }
            let out = out.unwrap_or_else(|| config.output_dir.clone());
            let summary = run_experiment(&config, &out)?;
            println!(
                "{} cells, {} failed; results in {}",
                summary.cells,
                summary.failed,
                summary.out_dir.display()
            );
            if !summary.all_succeeded() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Validate { config } => match validate_config(&config) {
            Ok(c) => println!("ok: {} with {} cells", c.kind.name(), horl_lab::experiments::plan_cells(&c).len()),
            Err(e) => return Ok(report_config_error(&e)),
        },
    }
    Ok(ExitCode::SUCCESS)
}

fn report_config_error(e: &ConfigLoadError) -> ExitCode {
    eprintln!("invalid config:\n{e}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
