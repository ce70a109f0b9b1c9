//! Cell bodies for each experiment kind and the aggregation of their
//! records into summary tables, fits and plots.

use std::collections::BTreeMap;

use anyhow::{anyhow, Context, Result};
use horl_core::analysis::{
    concentration_coefficient, finite_median, log_log_slope, primitive_audit, representation_audit,
    similarity_map, suboptimality_decomposition, theorem1_terms, tv_subopt_check, BoundInputs,
    RepresentationAudit, TvInstance,
};
use horl_core::data::{
    fit_tabular_primitive, relabel_high_dataset, sample_point_mass, sample_trajectories,
    segment_low_dataset, weighted_primitive_tv, CorridorBehavior, GroundTruth, HighLevelDataset,
    SamplingConfig, SkillDataset, TabularPrimitive,
};
use horl_core::flow::{train_flow, FlowSkillDecoder};
use horl_core::iql::{train_iql, IqlParams, TabularArch};
use horl_core::mdp::{
    exact_value_iteration_as, policy_state_values, policy_value, FeatureTable, HyperMDP,
    PointMassEnv, PolicyKind, PolicyTable, VI_TOL,
};
use horl_core::pevi::{
    compute_beta_schedule, fit_pessimistic_value_with, uncertainty_quantifier_violation_rate,
    BoundSchedule, PessimisticEstimate,
};
use horl_core::vae::{reconstruction_l1, train_vae, VaeSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, ExperimentKind, FeatureBasis, HighLearner, TaskSpec};
use crate::report::{Cell, Metrics, Plot, Table};
use crate::tasks::{is_fixed_instance, tabular_task, TabularTask};

/// Coordinates of one unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub index: usize,
    pub c: usize,
    pub n: usize,
    pub seed: u64,
    /// Independent random stream for sampling and training.
    pub stream: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn stream_seed(master: u64, index: usize) -> u64 {
    splitmix(master ^ splitmix(index as u64))
}

/// Grid kinds span `c × N × seed`; audit kinds run one cell per seed and
/// cycle through `c_list` and `n_list`.
pub fn plan_cells(config: &ExperimentConfig) -> Vec<CellSpec> {
    let seeds = config.seed_list();
    let ns = if config.n_list.is_empty() { vec![0] } else { config.n_list.clone() };
    let cs = if config.c_list.is_empty() { vec![0] } else { config.c_list.clone() };
    let mut coords = Vec::new();
    if config.kind.uses_grid() {
        for &c in &cs {
            for &n in &ns {
                for &seed in &seeds {
                    coords.push((c, n, seed));
                }
            }
        }
    } else {
        for (i, &seed) in seeds.iter().enumerate() {
            coords.push((cs[i % cs.len()], ns[i % ns.len()], seed));
        }
    }
    coords
        .into_iter()
        .enumerate()
        .map(|(index, (c, n, seed))| CellSpec {
            index,
            c,
            n,
            seed,
            stream: stream_seed(config.master_seed, index),
        })
        .collect()
}

/// Per-`c` quantities that depend only on a fixed instance.
pub struct SkillLengthContext {
    pub hyper: HyperMDP,
    pub best: PolicyTable,
    pub j_best: f64,
    pub representation: Option<RepresentationAudit>,
}

/// Work shared by all cells, computed once before they run.
pub enum Shared {
    None,
    Fixed {
        task: TabularTask,
        per_c: BTreeMap<usize, SkillLengthContext>,
    },
}

pub fn prepare(config: &ExperimentConfig) -> Result<Shared> {
    if !is_fixed_instance(&config.task) {
        return Ok(Shared::None);
    }
    let task = tabular_task(&config.task, 0)?;
    let mut per_c = BTreeMap::new();
    for &c in &config.c_list {
        let hyper = HyperMDP::build(&task.mdp, task.behavior.skills(), c)?;
        let best = exact_value_iteration_as(&hyper, VI_TOL, PolicyKind::HighLevel)?.policy;
        let j_best = policy_value(&hyper, &best)?;
        let representation = if config.kind == ExperimentKind::SkillLengthSweep {
            Some(representation_audit(&task.mdp, task.behavior.skills(), c)?)
        } else {
            None
        };
        per_c.insert(
            c,
            SkillLengthContext {
                hyper,
                best,
                j_best,
                representation,
            },
        );
    }
    Ok(Shared::Fixed { task, per_c })
}

/// Output of one successful cell.
pub struct CellOutput {
    pub metrics: Metrics,
    pub detail: Value,
}

pub fn run_cell(config: &ExperimentConfig, shared: &Shared, cell: &CellSpec) -> Result<CellOutput> {
    match config.kind {
        ExperimentKind::SkillLengthSweep => skill_length_cell(config, shared, cell),
        ExperimentKind::RateSweep => rate_cell(config, shared, cell),
        ExperimentKind::PessimismAudit => pessimism_cell(config, cell),
        ExperimentKind::RepresentationContrast => representation_cell(config, cell),
        ExperimentKind::DecompositionAudit => decomposition_cell(config, cell),
        ExperimentKind::TvAudit => tv_cell(config, cell),
    }
}

fn features_for(config: &ExperimentConfig, hyper: &HyperMDP) -> FeatureTable {
    match config.pevi.features {
        FeatureBasis::Indicator => FeatureTable::indicator(hyper.num_states(), hyper.num_skills()),
        FeatureBasis::Composed => hyper.composed_features(),
    }
}

/// Data and learners of the tabular pipeline: sample with the behavior,
/// fit the primitive, relabel, learn the high-level policy.
struct Pipeline {
    low: SkillDataset<usize, usize>,
    primitive: TabularPrimitive,
    high_data: HighLevelDataset<usize, usize>,
    features: FeatureTable,
    schedule: BoundSchedule,
    estimate: Option<PessimisticEstimate>,
    policy: PolicyTable,
}

fn run_pipeline(
    config: &ExperimentConfig,
    task: &TabularTask,
    hyper: &HyperMDP,
    cell: &CellSpec,
    constant: f64,
) -> Result<Pipeline> {
    let c = cell.c;
    let mdp = &task.mdp;
    let sampling = SamplingConfig::aligned(cell.n, task.windows * c, c);
    let trajectories = sample_trajectories(mdp, &task.behavior, &sampling, cell.stream)?;
    let low = segment_low_dataset(&trajectories, c)?;
    let primitive = fit_tabular_primitive(
        &low,
        mdp.num_states(),
        task.num_skills(),
        mdp.num_actions(),
        config.skills.smoothing,
    )?;
    let high_data = relabel_high_dataset(&low, &GroundTruth, mdp.gamma())?;
    let features = features_for(config, hyper);
    let schedule = compute_beta_schedule(
        features.dim(),
        high_data.len(),
        mdp.gamma(),
        c,
        config.pevi.delta,
        constant,
        mdp.r_max(),
    )?;
    let (estimate, policy) = match config.high_learner {
        HighLearner::Pevi => {
            let est = fit_pessimistic_value_with(&high_data, hyper, &features, &config.pevi.solver(schedule.beta_scale))?;
            let policy = est.policy.clone();
            (Some(est), policy)
        }
        HighLearner::Iql => {
            let arch = TabularArch {
                num_states: mdp.num_states(),
                num_skills: task.num_skills(),
            };
            let run = train_iql(&high_data, arch, &config.iql, cell.stream)?;
            (None, IqlParams::policy_table(&run.params)?)
        }
    };
    Ok(Pipeline {
        low,
        primitive,
        high_data,
        features,
        schedule,
        estimate,
        policy,
    })
}

fn fixed<'a>(shared: &'a Shared, c: usize) -> Result<(&'a TabularTask, &'a SkillLengthContext)> {
    match shared {
        Shared::Fixed { task, per_c } => Ok((task, per_c.get(&c).ok_or_else(|| anyhow!("no context for c = {c}"))?)),
        Shared::None => Err(anyhow!("experiment needs a fixed instance")),
    }
}

fn owned_context(config: &ExperimentConfig, cell: &CellSpec, with_representation: bool) -> Result<(TabularTask, SkillLengthContext)> {
    let task = tabular_task(&config.task, cell.seed)?;
    let hyper = HyperMDP::build(&task.mdp, task.behavior.skills(), cell.c)?;
    let best = exact_value_iteration_as(&hyper, VI_TOL, PolicyKind::HighLevel)?.policy;
    let j_best = policy_value(&hyper, &best)?;
    let representation = if with_representation {
        Some(representation_audit(&task.mdp, task.behavior.skills(), cell.c)?)
    } else {
        None
    };
    Ok((
        task,
        SkillLengthContext {
            hyper,
            best,
            j_best,
            representation,
        },
    ))
}

fn skill_length_cell(config: &ExperimentConfig, shared: &Shared, cell: &CellSpec) -> Result<CellOutput> {
    let owned;
    let (task, ctx) = match shared {
        Shared::Fixed { .. } => fixed(shared, cell.c)?,
        Shared::None => {
            owned = owned_context(config, cell, true)?;
            (&owned.0, &owned.1)
        }
    };
    let run = run_pipeline(config, task, &ctx.hyper, cell, config.pevi.constant)?;
    let report = suboptimality_decomposition(&task.mdp, &ctx.hyper, &run.primitive.table, &run.policy)?;
    let prim = primitive_audit(&task.mdp, task.behavior.skills(), &run.primitive.table, &run.policy, cell.c)?;
    let rep = ctx.representation.clone().context("missing representation audit")?;
    let c_dagger = concentration_coefficient(&run.high_data, &ctx.hyper, &run.features, &ctx.best)?;
    let inputs = bound_inputs(config, task, cell.c, run.features.dim(), run.high_data.len(), prim.eps_theta, rep.eps_omega, c_dagger)?;
    let terms = theorem1_terms(&inputs).ok();

    let mut m = Metrics::new();
    m.set("subopt", report.total_subopt);
    m.set("primitive_error", report.primitive_error);
    m.set("offline_error", report.offline_error);
    m.set("representation_error", report.representation_error);
    m.set("eps_theta", prim.eps_theta);
    m.set("eps_omega", rep.eps_omega);
    m.set("c_dagger", c_dagger);
    m.set("tuples", run.high_data.len() as f64);
    m.set("beta_scale", run.schedule.beta_scale);
    m.set("bound_total", terms.map_or(f64::INFINITY, |t| t.total));
    Ok(CellOutput {
        metrics: m,
        detail: json!({
            "decomposition": report,
            "primitive_audit": prim,
            "representation_audit": rep,
            "bound_inputs": finite_json(&inputs),
            "bound_terms": terms,
            "schedule": run.schedule,
            "segments": run.low.len(),
        }),
    })
}

#[allow(clippy::too_many_arguments)]
fn bound_inputs(
    config: &ExperimentConfig,
    task: &TabularTask,
    c: usize,
    d: usize,
    n: usize,
    eps_theta: f64,
    eps_omega: f64,
    c_dagger: f64,
) -> Result<BoundInputs> {
    Ok(BoundInputs::new(
        eps_theta,
        eps_omega,
        c_dagger,
        d,
        n,
        c,
        task.mdp.gamma(),
        task.mdp.r_max(),
        config.pevi.delta,
        config.pevi.constant,
    )?)
}

fn finite_json<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).unwrap_or(Value::Null)
}

fn rate_cell(config: &ExperimentConfig, shared: &Shared, cell: &CellSpec) -> Result<CellOutput> {
    let owned;
    let (task, ctx) = match shared {
        Shared::Fixed { .. } => fixed(shared, cell.c)?,
        Shared::None => {
            owned = owned_context(config, cell, false)?;
            (&owned.0, &owned.1)
        }
    };
    let run = run_pipeline(config, task, &ctx.hyper, cell, config.pevi.constant)?;
    let gap = ctx.j_best - policy_value(&ctx.hyper, &run.policy)?;
    let rows = task.behavior.skills().num_rows();
    let primitive_tv = weighted_primitive_tv(&run.primitive.table, task.behavior.skills(), &vec![1.0 / rows as f64; rows])?;
    let mut m = Metrics::new();
    m.set("offline_gap", gap);
    m.set("primitive_tv", primitive_tv);
    m.set("tuples", run.high_data.len() as f64);
    m.set("beta_scale", run.schedule.beta_scale);
    Ok(CellOutput {
        metrics: m,
        detail: json!({ "schedule": run.schedule, "chosen_skills": run.policy.argmax_choices() }),
    })
}

/// Metric key for a per-constant value.
pub fn constant_key(prefix: &str, constant: f64) -> String {
    format!("{prefix}@{constant}")
}

fn pessimism_cell(config: &ExperimentConfig, cell: &CellSpec) -> Result<CellOutput> {
    let task = tabular_task(&config.task, cell.seed)?;
    let hyper = HyperMDP::build(&task.mdp, task.behavior.skills(), cell.c)?;
    let mut m = Metrics::new();
    let mut detail = Vec::new();
    for &constant in &config.pevi.constants {
        let run = run_pipeline(config, &task, &hyper, cell, constant)?;
        let est = run.estimate.as_ref().context("pessimism audit needs the pessimistic learner")?;
        let achieved = policy_state_values(&hyper, &est.policy)?;
        let worst = est
            .v_hat
            .iter()
            .zip(&achieved)
            .map(|(v, a)| v - a)
            .fold(f64::NEG_INFINITY, f64::max);
        let violation = uncertainty_quantifier_violation_rate(&hyper, est, &run.features)?;
        m.flag(constant_key("satisfied", constant), worst <= 1e-8);
        m.set(constant_key("violation_rate", constant), violation);
        detail.push(json!({
            "constant": constant,
            "schedule": run.schedule,
            "worst_excess": worst,
            "quantifier_violation_rate": violation,
            "converged": est.converged,
        }));
    }
    m.set("d", task.mdp.dim() as f64);
    m.set("states", task.mdp.num_states() as f64);
    Ok(CellOutput {
        metrics: m,
        detail: Value::Array(detail),
    })
}

fn decomposition_cell(config: &ExperimentConfig, cell: &CellSpec) -> Result<CellOutput> {
    let (task, ctx) = owned_context(config, cell, true)?;
    let run = run_pipeline(config, &task, &ctx.hyper, cell, config.pevi.constant)?;
    let report = suboptimality_decomposition(&task.mdp, &ctx.hyper, &run.primitive.table, &run.policy)?;
    let prim = primitive_audit(&task.mdp, task.behavior.skills(), &run.primitive.table, &run.policy, cell.c)?;
    let rep = ctx.representation.clone().context("missing representation audit")?;
    let mut m = Metrics::new();
    m.set("residual", report.residual());
    m.set("subopt", report.total_subopt);
    m.set("primitive_measured", prim.measured);
    m.set("primitive_bound", prim.bound);
    m.flag("primitive_holds", prim.holds);
    m.set("representation_measured", rep.measured);
    m.set("representation_bound", rep.bound);
    m.flag("representation_holds", rep.holds);
    Ok(CellOutput {
        metrics: m,
        detail: json!({ "decomposition": report, "primitive_audit": prim, "representation_audit": rep }),
    })
}

fn tv_cell(config: &ExperimentConfig, cell: &CellSpec) -> Result<CellOutput> {
    let TaskSpec::RandomChains(t) = &config.task else {
        return Err(anyhow!("tv audit needs a random-chains task"));
    };
    let inst = TvInstance::random(cell.seed, t.max_states, t.max_c);
    let check = tv_subopt_check(&inst)?;
    let mut m = Metrics::new();
    m.set("lhs", check.lhs);
    m.set("rhs", check.rhs);
    m.set("epsilon", check.epsilon);
    m.flag("holds", check.holds);
    m.set("states", inst.num_states as f64);
    m.set("c", inst.c as f64);
    Ok(CellOutput {
        metrics: m,
        detail: json!({ "instance": inst, "check": check }),
    })
}

fn representation_cell(config: &ExperimentConfig, cell: &CellSpec) -> Result<CellOutput> {
    let TaskSpec::Bimodal(t) = &config.task else {
        return Err(anyhow!("representation contrast needs a bimodal task"));
    };
    let c = cell.c;
    let env = PointMassEnv::bimodal();
    let behavior = CorridorBehavior::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cell.stream);
    let train = sample_point_mass(&env, &behavior, t.trajectories, t.horizon, rng.random())?;
    let held = sample_point_mass(&env, &behavior, t.held_out, t.horizon, rng.random())?;
    let low = segment_low_dataset(&train, c)?;
    let held_low = segment_low_dataset(&held, c)?;
    let (sd, ad) = (env.state_dim(), env.action_dim());
    let settings = &config.skills.training;

    let flow = train_flow(&low, &config.skills.flow.model(c, ad, sd), settings, rng.random())?;
    let vae = train_vae(&low, &config.skills.vae.model(c, sd, ad), settings, rng.random())?;

    let mut roundtrip = 0.0f64;
    for seg in low.segments.iter().chain(&held_low.segments) {
        let actions = seg.actions.concat();
        let z = flow.flow.encode(&actions, seg.start())?;
        let back = flow.flow.decode(&z, seg.start())?;
        roundtrip = back.iter().zip(&actions).map(|(x, y)| (x - y).abs()).fold(roundtrip, f64::max);
    }
    let held_samples: Vec<VaeSample> = held_low.segments.iter().map(VaeSample::from_segment).collect();
    let vae_l1 = reconstruction_l1(&vae.model, &held_samples)?;

    let data: Vec<(Vec<f64>, Vec<f64>)> = train
        .iter()
        .flat_map(|tr| tr.states.iter().zip(&tr.actions).map(|(s, a)| (s.clone(), a.clone())))
        .collect();
    let decoder = FlowSkillDecoder {
        flow: &flow.flow,
        prior: &flow.prior,
        action_bound: env.max_step,
    };
    let flow_dim = flow.flow.config().flow_dim();
    let latent_dim = vae.model.config().latent_dim;
    let range = t.latent_range;
    let mut flow_decisions = Vec::new();
    let mut vae_decisions = Vec::new();
    for i in 0..t.decodes {
        let s0 = low.segments[i % low.segments.len()].start().clone();
        let z: Vec<f64> = (0..flow_dim).map(|_| rng.random_range(-range..range)).collect();
        let mut s = [s0[0], s0[1]];
        for a in decoder.decode_actions(&z, &s0)? {
            flow_decisions.push((s.to_vec(), a.clone()));
            s = env.step(s, [a[0], a[1]]).0;
        }
        let z: Vec<f64> = (0..latent_dim).map(|_| rng.random_range(-range..range)).collect();
        let mut s = [s0[0], s0[1]];
        for _ in 0..c {
            let a = vae.model.decode_step(&z, &s)?;
            let a = env.clip_action([a[0], a[1]]);
            vae_decisions.push((s.to_vec(), a.to_vec()));
            s = env.step(s, a).0;
        }
    }
    let flow_eps = similarity_map(&flow_decisions, &data, t.radius);
    let vae_eps = similarity_map(&vae_decisions, &data, t.radius);
    let finite = |v: &[f64]| v.iter().filter(|x| x.is_finite()).count() as f64;

    let mut m = Metrics::new();
    m.set("flow_roundtrip", roundtrip);
    m.set("vae_l1", vae_l1);
    m.set("flow_similarity", finite_median(&flow_eps).unwrap_or(f64::NAN));
    m.set("vae_similarity", finite_median(&vae_eps).unwrap_or(f64::NAN));
    m.set("flow_neighboured", finite(&flow_eps));
    m.set("vae_neighboured", finite(&vae_eps));
    m.set("flow_final_loss", flow.trace.last().map_or(f64::NAN, |l| l.loss));
    m.set("vae_final_loss", vae.trace.last().map_or(f64::NAN, |l| l.loss));
    m.set("segments", low.len() as f64);
    Ok(CellOutput {
        metrics: m,
        detail: json!({
            "flow_first_loss": flow.trace.first().map(|l| l.loss),
            "vae_first_loss": vae.trace.first().map(|l| l.loss),
            "held_out_segments": held_low.len(),
        }),
    })
}

/// A finished cell as consumed by aggregation.
pub struct Finished<'a> {
    pub spec: &'a CellSpec,
    pub metrics: &'a Metrics,
}

/// Aggregated outputs of an experiment.
pub struct Summary {
    pub table: Table,
    pub fits: BTreeMap<String, f64>,
    pub plots: Vec<Plot>,
}

fn median_of(cells: &[&Finished], key: &str) -> f64 {
    let vals: Vec<f64> = cells.iter().filter_map(|c| c.metrics.get(key)).collect();
    finite_median(&vals).unwrap_or(f64::NAN)
}

fn group_by<'a, K: Ord>(cells: &'a [Finished<'a>], key: impl Fn(&CellSpec) -> K) -> BTreeMap<K, Vec<&'a Finished<'a>>> {
    let mut out: BTreeMap<K, Vec<&Finished>> = BTreeMap::new();
    for c in cells {
        out.entry(key(c.spec)).or_default().push(c);
    }
    out
}

pub fn summarize(config: &ExperimentConfig, cells: &[Finished]) -> Result<Summary> {
    match config.kind {
        ExperimentKind::SkillLengthSweep => summarize_skill_length(config, cells),
        ExperimentKind::RateSweep => summarize_rate(cells),
        ExperimentKind::PessimismAudit => summarize_pessimism(config, cells),
        ExperimentKind::RepresentationContrast => summarize_representation(cells),
        ExperimentKind::DecompositionAudit => summarize_decomposition(cells),
        ExperimentKind::TvAudit => summarize_tv(cells),
    }
}

fn summarize_skill_length(config: &ExperimentConfig, cells: &[Finished]) -> Result<Summary> {
    let mut table = Table::new(&[
        "c",
        "n",
        "cells",
        "median_subopt",
        "median_primitive_error",
        "median_offline_error",
        "median_representation_error",
        "median_eps_theta",
        "eps_omega",
        "median_c_dagger",
        "median_tuples",
        "bound_offline",
        "bound_skill",
        "bound_total",
    ]);
    let task = match config.task {
        TaskSpec::Generated(_) | TaskSpec::GradedGap(_) | TaskSpec::Chain(_) => tabular_task(&config.task, 0)?,
        _ => return Err(anyhow!("skill-length sweep needs a tabular task")),
    };
    let mut plot_c = Vec::new();
    let mut plot_sub = Vec::new();
    let mut plot_bound = Vec::new();
    for ((c, n), group) in group_by(cells, |s| (s.c, s.n)) {
        let eps_theta = median_of(&group, "eps_theta");
        let eps_omega = median_of(&group, "eps_omega");
        let c_dagger = median_of(&group, "c_dagger");
        let tuples = median_of(&group, "tuples");
        let d = task.mdp.num_states() * task.num_skills();
        let d = match config.pevi.features {
            FeatureBasis::Indicator => d,
            FeatureBasis::Composed => task.mdp.dim(),
        };
        let terms = bound_inputs(config, &task, c, d, tuples.round().max(1.0) as usize, eps_theta, eps_omega, c_dagger)
            .ok()
            .and_then(|b| theorem1_terms(&b).ok());
        let (off, skill, total) = terms.map_or((f64::INFINITY, f64::NAN, f64::INFINITY), |t| (t.offline, t.skill, t.total));
        let sub = median_of(&group, "subopt");
        table.push(vec![
            c.into(),
            n.into(),
            group.len().into(),
            sub.into(),
            median_of(&group, "primitive_error").into(),
            median_of(&group, "offline_error").into(),
            median_of(&group, "representation_error").into(),
            eps_theta.into(),
            eps_omega.into(),
            c_dagger.into(),
            tuples.into(),
            off.into(),
            skill.into(),
            total.into(),
        ]);
        if n == config.n_list[0] {
            plot_c.push(c as f64);
            plot_sub.push(sub);
            plot_bound.push(total);
        }
    }
    let mut fits = BTreeMap::new();
    if let Some(first) = plot_sub.first().copied() {
        let (best_i, best) = plot_sub
            .iter()
            .copied()
            .enumerate()
            .skip(1)
            .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
        fits.insert("first_median_subopt".into(), first);
        if best.is_finite() {
            fits.insert("best_c".into(), plot_c[best_i]);
            fits.insert("best_median_subopt".into(), best);
            fits.insert("improvement_fraction".into(), (first - best) / first);
        }
        if let Some(i) = valley_index(&plot_bound) {
            fits.insert("bound_argmin_c".into(), plot_c[i]);
        }
        fits.insert("bound_is_valley".into(), if valley_index(&plot_bound).is_some() { 1.0 } else { 0.0 });
    }
    let plots = vec![
        Plot::line("subopt.svg", "Median suboptimality by skill length", "skill length c", "J(π*) − J(π̂)")
            .with("median suboptimality", &plot_c, &plot_sub),
        Plot::line("bound.svg", "Evaluated bound by skill length", "skill length c", "bound")
            .with("bound at median inputs", &plot_c, &plot_bound),
    ];
    Ok(Summary { table, fits, plots })
}

/// Index of the minimum when `values` strictly decreases up to it and
/// strictly increases after it, with the minimum at neither end.
pub fn valley_index(values: &[f64]) -> Option<usize> {
    if values.len() < 3 || values.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let i = (0..values.len()).min_by(|&a, &b| values[a].total_cmp(&values[b]))?;
    let falls = values[..=i].windows(2).all(|w| w[1] < w[0]);
    let rises = values[i..].windows(2).all(|w| w[1] > w[0]);
    (i > 0 && i + 1 < values.len() && falls && rises).then_some(i)
}

fn summarize_rate(cells: &[Finished]) -> Result<Summary> {
    let mut table = Table::new(&["c", "n", "cells", "median_offline_gap", "median_primitive_tv", "median_tuples"]);
    let mut fits = BTreeMap::new();
    let mut plots = Vec::new();
    for (c, by_c) in group_by(cells, |s| s.c) {
        let mut ns = Vec::new();
        let mut gaps = Vec::new();
        let mut tvs = Vec::new();
        let mut by_n: BTreeMap<usize, Vec<&Finished>> = BTreeMap::new();
        for f in by_c {
            by_n.entry(f.spec.n).or_default().push(f);
        }
        for (n, group) in by_n {
            let gap = median_of(&group, "offline_gap");
            let tv = median_of(&group, "primitive_tv");
            table.push(vec![c.into(), n.into(), group.len().into(), gap.into(), tv.into(), median_of(&group, "tuples").into()]);
            ns.push(n as f64);
            gaps.push(gap);
            tvs.push(tv);
        }
        let slope = |y: &[f64]| log_log_slope(&ns, y).unwrap_or(f64::NAN);
        fits.insert(format!("offline_gap_slope@c={c}"), slope(&gaps));
        fits.insert(format!("primitive_tv_slope@c={c}"), slope(&tvs));
        plots.push(
            Plot::line(&format!("rate_c{c}.svg"), &format!("Error versus sample size (c = {c})"), "trajectories N", "median error")
                .log_log()
                .with("offline gap", &ns, &gaps)
                .with("primitive TV", &ns, &tvs),
        );
    }
    Ok(Summary { table, fits, plots })
}

fn summarize_pessimism(config: &ExperimentConfig, cells: &[Finished]) -> Result<Summary> {
    let mut table = Table::new(&["constant", "instances", "satisfied", "satisfaction_rate", "mean_violation_rate"]);
    let mut xs = Vec::new();
    let mut rates = Vec::new();
    for &constant in &config.pevi.constants {
        let sat: Vec<f64> = cells.iter().filter_map(|c| c.metrics.get(&constant_key("satisfied", constant))).collect();
        let viol: Vec<f64> = cells.iter().filter_map(|c| c.metrics.get(&constant_key("violation_rate", constant))).collect();
        let count = sat.iter().sum::<f64>();
        let rate = if sat.is_empty() { f64::NAN } else { count / sat.len() as f64 };
        let mean_viol = if viol.is_empty() { f64::NAN } else { viol.iter().sum::<f64>() / viol.len() as f64 };
        table.push(vec![constant.into(), sat.len().into(), (count as usize).into(), rate.into(), mean_viol.into()]);
        xs.push(constant);
        rates.push(rate);
    }
    let monotone = rates.windows(2).all(|w| w[1] >= w[0]);
    let mut fits = BTreeMap::new();
    fits.insert("satisfaction_monotone".into(), if monotone { 1.0 } else { 0.0 });
    let plots = vec![Plot::line("pessimism.svg", "Pointwise pessimism by bonus constant", "constant C", "fraction of instances with V̂ ≤ V^π̂")
        .with("satisfaction rate", &xs, &rates)];
    Ok(Summary { table, fits, plots })
}

fn summarize_representation(cells: &[Finished]) -> Result<Summary> {
    let cols = ["flow_roundtrip", "vae_l1", "flow_similarity", "vae_similarity", "flow_neighboured", "vae_neighboured"];
    let mut header = vec!["seed", "c"];
    header.extend(cols);
    let mut table = Table::new(&header);
    let mut seeds = Vec::new();
    let mut flow = Vec::new();
    let mut vae = Vec::new();
    for f in cells {
        let mut row = vec![f.spec.seed.into(), f.spec.c.into()];
        row.extend(cols.iter().map(|k| Cell::from(f.metrics.get(k).unwrap_or(f64::NAN))));
        table.push(row);
        seeds.push(f.spec.seed as f64);
        flow.push(f.metrics.get("flow_similarity").unwrap_or(f64::NAN));
        vae.push(f.metrics.get("vae_similarity").unwrap_or(f64::NAN));
    }
    let all: Vec<&Finished> = cells.iter().collect();
    let mut fits = BTreeMap::new();
    for k in cols {
        fits.insert(format!("median_{k}"), median_of(&all, k));
    }
    fits.insert(
        "max_flow_roundtrip".into(),
        cells.iter().filter_map(|c| c.metrics.get("flow_roundtrip")).fold(0.0, f64::max),
    );
    let plots = vec![Plot::line("similarity.svg", "Median similarity of random-latent decisions", "seed", "median ε")
        .scatter()
        .with("flow", &seeds, &flow)
        .with("VAE", &seeds, &vae)];
    Ok(Summary { table, fits, plots })
}

fn summarize_decomposition(cells: &[Finished]) -> Result<Summary> {
    let cols = [
        "residual",
        "subopt",
        "primitive_measured",
        "primitive_bound",
        "primitive_holds",
        "representation_measured",
        "representation_bound",
        "representation_holds",
    ];
    let mut header = vec!["seed", "c"];
    header.extend(cols);
    let mut table = Table::new(&header);
    for f in cells {
        let mut row = vec![f.spec.seed.into(), f.spec.c.into()];
        row.extend(cols.iter().map(|k| Cell::from(f.metrics.get(k).unwrap_or(f64::NAN))));
        table.push(row);
    }
    let col = |k: &str| table.column(k).unwrap_or_default();
    let mut fits = BTreeMap::new();
    fits.insert("instances".into(), cells.len() as f64);
    fits.insert("max_residual".into(), col("residual").into_iter().fold(0.0, f64::max));
    fits.insert("primitive_violations".into(), col("primitive_holds").iter().filter(|&&h| h != 1.0).count() as f64);
    fits.insert("representation_violations".into(), col("representation_holds").iter().filter(|&&h| h != 1.0).count() as f64);
    let plots = vec![
        Plot::line("primitive_audit.svg", "Measured primitive error against its bound", "bound", "measured")
            .scatter()
            .with("instances", &col("primitive_bound"), &col("primitive_measured")),
        Plot::line("representation_audit.svg", "Measured representation error against its bound", "bound", "measured")
            .scatter()
            .with("instances", &col("representation_bound"), &col("representation_measured")),
    ];
    Ok(Summary { table, fits, plots })
}

fn summarize_tv(cells: &[Finished]) -> Result<Summary> {
    let cols = ["states", "c", "lhs", "rhs", "epsilon", "holds"];
    let mut header = vec!["seed"];
    header.extend(cols);
    let mut table = Table::new(&header);
    for f in cells {
        let mut row = vec![f.spec.seed.into()];
        row.extend(cols.iter().map(|k| Cell::from(f.metrics.get(k).unwrap_or(f64::NAN))));
        table.push(row);
    }
    let holds = table.column("holds").unwrap_or_default();
    let mut fits = BTreeMap::new();
    fits.insert("instances".into(), cells.len() as f64);
    fits.insert("violations".into(), holds.iter().filter(|&&h| h != 1.0).count() as f64);
    let plots = vec![Plot::line("tv_audit.svg", "Value gap against the coupling bound", "bound", "|J₁ − J₂|")
        .scatter()
        .with("instances", &table.column("rhs").unwrap_or_default(), &table.column("lhs").unwrap_or_default())];
    Ok(Summary { table, fits, plots })
}
