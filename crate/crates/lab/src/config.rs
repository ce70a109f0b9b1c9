//! Versioned JSON experiment configuration and its validator.

use std::fmt;
use std::path::{Path, PathBuf};

use horl_core::data::SkillStyle;
use horl_core::flow::FlowConfig;
use horl_core::iql::IqlConfig;
use horl_core::nn::TrainSettings;
use horl_core::pevi::PeviConfig;
use horl_core::vae::VaeConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SkillLengthSweep,
    RateSweep,
    PessimismAudit,
    RepresentationContrast,
    DecompositionAudit,
    TvAudit,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SkillLengthSweep => "skill-length-sweep",
            Self::RateSweep => "rate-sweep",
            Self::PessimismAudit => "pessimism-audit",
            Self::RepresentationContrast => "representation-contrast",
            Self::DecompositionAudit => "decomposition-audit",
            Self::TvAudit => "tv-audit",
        }
    }

    /// Kinds whose cells span the full `c × N × seed` grid. The remaining
    /// kinds run one cell per seed and cycle through `c_list`.
    pub fn uses_grid(self) -> bool {
        matches!(self, Self::SkillLengthSweep | Self::RateSweep)
    }
}

/// Random linear-mixture instances. `d` and `num_states` are inclusive
/// ranges; each seed picks its own shape unless `instance_seed` pins one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedTask {
    pub d: [usize; 2],
    pub num_states: [usize; 2],
    pub num_actions: usize,
    pub num_skills: usize,
    pub styles: Vec<SkillStyle>,
    pub gamma: f64,
    #[serde(default = "one_f64")]
    pub r_max: f64,
    #[serde(default)]
    pub instance_seed: Option<u64>,
    /// Skill windows per sampled trajectory.
    #[serde(default = "one_usize")]
    pub windows: usize,
}

/// One-step bandit-like task whose per-state action gaps span four decades.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradedGapTask {
    pub decision_states: usize,
    /// Prior probability of the better skill in the behavior data.
    pub better_share: f64,
    pub gamma: f64,
    #[serde(default = "one_usize")]
    pub windows: usize,
}

/// Slippery chain with a rewarding right end and noisy repeated-action skills.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainTask {
    pub length: usize,
    pub slip: f64,
    /// Probability mass a skill spreads uniformly over all actions.
    pub noise: f64,
    pub gamma: f64,
    #[serde(default = "one_usize")]
    pub windows: usize,
}

/// Two-corridor point-mass testbed for the flow/VAE contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BimodalTask {
    pub trajectories: usize,
    pub horizon: usize,
    pub held_out: usize,
    /// Random latents decoded per model.
    pub decodes: usize,
    /// Latents are drawn uniformly from `[-latent_range, latent_range]`.
    pub latent_range: f64,
    /// L1 state radius of the similarity neighbourhood.
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomChainsTask {
    pub max_states: usize,
    pub max_c: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TaskSpec {
    Generated(GeneratedTask),
    GradedGap(GradedGapTask),
    Chain(ChainTask),
    Bimodal(BimodalTask),
    RandomChains(RandomChainsTask),
}

impl TaskSpec {
    fn is_tabular(&self) -> bool {
        matches!(self, Self::Generated(_) | Self::GradedGap(_) | Self::Chain(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureBasis {
    /// One-hot `(s, z)` features, an exact embedding of any hyper-MDP.
    #[default]
    Indicator,
    /// The hyper-MDP's own composed reward features.
    Composed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeviSettings {
    /// Absolute constant of the bonus schedule.
    #[serde(default = "one_f64")]
    pub constant: f64,
    /// Constants swept by the pessimism audit.
    #[serde(default = "default_constants")]
    pub constants: Vec<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "one_f64")]
    pub lambda_reg: f64,
    #[serde(default)]
    pub features: FeatureBasis,
}

impl Default for PeviSettings {
    fn default() -> Self {
        Self {
            constant: 1.0,
            constants: default_constants(),
            delta: default_delta(),
            lambda_reg: 1.0,
            features: FeatureBasis::Indicator,
        }
    }
}

impl PeviSettings {
    pub fn solver(&self, beta_scale: f64) -> PeviConfig {
        PeviConfig {
            lambda_reg: self.lambda_reg,
            beta_scale,
            ..PeviConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HighLearner {
    #[default]
    Pevi,
    Iql,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSettings {
    pub blocks: usize,
    pub hidden: usize,
    pub kl_weight: f64,
    pub clamp: f64,
}

impl Default for FlowSettings {
    fn default() -> Self {
        let base = FlowConfig::new(1, 1, 1);
        Self {
            blocks: base.blocks,
            hidden: base.hidden,
            kl_weight: base.kl_weight,
            clamp: base.clamp,
        }
    }
}

impl FlowSettings {
    pub fn model(&self, c: usize, action_dim: usize, state_dim: usize) -> FlowConfig {
        FlowConfig {
            blocks: self.blocks,
            hidden: self.hidden,
            kl_weight: self.kl_weight,
            clamp: self.clamp,
            ..FlowConfig::new(c, action_dim, state_dim)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeSettings {
    pub latent_dim: usize,
    pub hidden: usize,
    pub kl_weight: f64,
}

impl Default for VaeSettings {
    fn default() -> Self {
        let base = VaeConfig::new(1, 1, 1);
        Self {
            latent_dim: base.latent_dim,
            hidden: base.hidden,
            kl_weight: base.kl_weight,
        }
    }
}

impl VaeSettings {
    pub fn model(&self, c: usize, state_dim: usize, action_dim: usize) -> VaeConfig {
        VaeConfig {
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            kl_weight: self.kl_weight,
            ..VaeConfig::new(c, state_dim, action_dim)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillSettings {
    /// Additive smoothing of the tabular maximum-likelihood primitive.
    #[serde(default)]
    pub smoothing: f64,
    #[serde(default)]
    pub training: TrainSettings,
    #[serde(default)]
    pub flow: FlowSettings,
    #[serde(default)]
    pub vae: VaeSettings,
}

impl Default for SkillSettings {
    fn default() -> Self {
        Self {
            smoothing: 0.0,
            training: TrainSettings::default(),
            flow: FlowSettings::default(),
            vae: VaeSettings::default(),
        }
    }
}

/// Either an explicit list or `{"start": s, "count": n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedList {
    List(Vec<u64>),
    Range { start: u64, count: u64 },
}

impl Default for SeedList {
    fn default() -> Self {
        Self::List(Vec::new())
    }
}

impl SeedList {
    pub fn expand(&self) -> Vec<u64> {
        match self {
            Self::List(v) => v.clone(),
            Self::Range { start, count } => (*start..start + count).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub task: TaskSpec,
    #[serde(default)]
    pub c_list: Vec<usize>,
    #[serde(default)]
    pub n_list: Vec<usize>,
    #[serde(default)]
    pub seeds: SeedList,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub high_learner: HighLearner,
    #[serde(default)]
    pub pevi: PeviSettings,
    #[serde(default)]
    pub iql: IqlConfig,
    #[serde(default)]
    pub skills: SkillSettings,
}

fn one_f64() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_delta() -> f64 {
    0.1
}

fn default_constants() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// One problem found in a configuration document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigLoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}", format_errors(.0))]
    Invalid(Vec<ConfigError>),
}

fn format_errors(errors: &[ConfigError]) -> String {
    errors
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

impl ExperimentConfig {
    /// Parse without range checks. Syntax and schema errors carry the
    /// offending line.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| {
            let line = e.line();
            let source = text.lines().nth(line.saturating_sub(1)).unwrap_or("").trim();
            let field = format!("line {}, column {}", line, e.column());
            let message = if source.is_empty() {
                e.to_string()
            } else {
                format!("{e} (near `{source}`)")
            };
            ConfigError::new(field, message)
        })
    }

    pub fn from_json(text: &str) -> Result<Self, Vec<ConfigError>> {
        let config = Self::parse(text).map_err(|e| vec![e])?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("configuration serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn seed_list(&self) -> Vec<u64> {
        self.seeds.expand()
    }

    pub fn validate(&self) -> Result<(), Vec<ConfigError>> {
        let mut errors = Vec::new();
        let mut push = |field: String, message: String| errors.push(ConfigError::new(field, message));

        if self.schema_version != CONFIG_SCHEMA_VERSION {
            push(
                "schema_version".into(),
                format!("unsupported version {} (expected {CONFIG_SCHEMA_VERSION})", self.schema_version),
            );
        }
        if self.seed_list().is_empty() {
            push("seeds".into(), "missing seed list: give at least one seed".into());
        }
        if let Some(0) = self.workers {
            push("workers".into(), "must be at least 1".into());
        }

        let kind = self.kind;
        let needs_c = !matches!(kind, ExperimentKind::TvAudit);
        if needs_c && self.c_list.is_empty() {
            push("c_list".into(), "must list at least one skill length".into());
        }
        for (i, &c) in self.c_list.iter().enumerate() {
            if c < 1 {
                push(
                    format!("c_list[{i}]"),
                    "skill length must be at least 1 (SkillConfig invariant c ≥ 1)".into(),
                );
            }
        }
        let needs_n = self.task.is_tabular();
        if needs_n && self.n_list.is_empty() {
            push("n_list".into(), "must list at least one trajectory count".into());
        }
        for (i, &n) in self.n_list.iter().enumerate() {
            if n < 1 {
                push(format!("n_list[{i}]"), "trajectory count must be at least 1".into());
            }
        }

        let compatible = match kind {
            ExperimentKind::SkillLengthSweep
            | ExperimentKind::RateSweep
            | ExperimentKind::PessimismAudit
            | ExperimentKind::DecompositionAudit => self.task.is_tabular(),
            ExperimentKind::RepresentationContrast => matches!(self.task, TaskSpec::Bimodal(_)),
            ExperimentKind::TvAudit => matches!(self.task, TaskSpec::RandomChains(_)),
        };
        if !compatible {
            push("task.type".into(), format!("task is not usable by a {} experiment", kind.name()));
        }

        validate_task(&self.task, &mut push);
        self.validate_learners(&mut push);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    fn validate_learners(&self, push: &mut impl FnMut(String, String)) {
        let p = &self.pevi;
        if !(p.delta > 0.0 && p.delta < 1.0) {
            push("pevi.delta".into(), format!("{} is outside (0, 1)", p.delta));
        }
        if !(p.constant >= 0.0 && p.constant.is_finite()) {
            push("pevi.constant".into(), "must be finite and nonnegative".into());
        }
        for (i, c) in p.constants.iter().enumerate() {
            if !(*c >= 0.0 && c.is_finite()) {
                push(format!("pevi.constants[{i}]"), "must be finite and nonnegative".into());
            }
        }
        if self.kind == ExperimentKind::PessimismAudit && p.constants.is_empty() {
            push("pevi.constants".into(), "must list at least one constant".into());
        }
        if let Err(e) = p.solver(0.0).validate() {
            push("pevi.lambda_reg".into(), e.to_string());
        }
        if self.high_learner == HighLearner::Iql {
            if let Err(e) = self.iql.validate() {
                push("iql".into(), e.to_string());
            }
        }
        let s = &self.skills;
        if !(s.smoothing >= 0.0 && s.smoothing.is_finite()) {
            push("skills.smoothing".into(), "must be finite and nonnegative".into());
        }
        if self.kind == ExperimentKind::RepresentationContrast {
            if let Err(e) = s.training.validate() {
                push("skills.training".into(), e.to_string());
            }
            for &c in self.c_list.iter().filter(|&&c| c >= 1) {
                if let Err(e) = s.flow.model(c, 2, 2).validate() {
                    push("skills.flow".into(), e.to_string());
                }
                if let Err(e) = s.vae.model(c, 2, 2).validate() {
                    push("skills.vae".into(), e.to_string());
                }
            }
        }
    }
}

fn check_gamma(gamma: f64, push: &mut impl FnMut(String, String)) {
    if !(0.0..1.0).contains(&gamma) {
        push(
            "task.gamma".into(),
            format!("discount factor {gamma} is outside [0, 1), the range a discounted linear MDP requires"),
        );
    }
}

fn validate_task(task: &TaskSpec, push: &mut impl FnMut(String, String)) {
    match task {
        TaskSpec::Generated(t) => {
            check_gamma(t.gamma, push);
            if t.d[0] < 1 || t.d[0] > t.d[1] {
                push("task.d".into(), "need 1 ≤ d[0] ≤ d[1]".into());
            }
            if t.num_states[0] < 2 || t.num_states[0] > t.num_states[1] {
                push("task.num_states".into(), "need 2 ≤ num_states[0] ≤ num_states[1]".into());
            }
            if t.num_actions < 2 {
                push("task.num_actions".into(), "must be at least 2".into());
            }
            if t.num_skills < 1 {
                push("task.num_skills".into(), "must be at least 1".into());
            }
            if t.styles.is_empty() {
                push("task.styles".into(), "must list at least one skill style".into());
            }
            if t.styles.contains(&SkillStyle::ActionsAsSkills) && t.num_skills != t.num_actions {
                push("task.num_skills".into(), "actions-as-skills needs num_skills = num_actions".into());
            }
            if !(t.r_max > 0.0 && t.r_max.is_finite()) {
                push("task.r_max".into(), "must be positive".into());
            }
            if t.windows < 1 {
                push("task.windows".into(), "must be at least 1".into());
            }
        }
        TaskSpec::GradedGap(t) => {
            check_gamma(t.gamma, push);
            if t.decision_states < 2 {
                push("task.decision_states".into(), "must be at least 2".into());
            }
            if !(t.better_share > 0.0 && t.better_share < 1.0) {
                push("task.better_share".into(), "must lie in (0, 1)".into());
            }
            if t.windows < 1 {
                push("task.windows".into(), "must be at least 1".into());
            }
        }
        TaskSpec::Chain(t) => {
            check_gamma(t.gamma, push);
            if t.length < 2 {
                push("task.length".into(), "must be at least 2".into());
            }
            if !(0.0..=1.0).contains(&t.slip) {
                push("task.slip".into(), "must lie in [0, 1]".into());
            }
            if !(0.0..=1.0).contains(&t.noise) {
                push("task.noise".into(), "must lie in [0, 1]".into());
            }
            if t.windows < 1 {
                push("task.windows".into(), "must be at least 1".into());
            }
        }
        TaskSpec::Bimodal(t) => {
            if t.trajectories < 1 || t.held_out < 1 || t.decodes < 1 {
                push("task.trajectories".into(), "trajectory, held-out and decode counts must be at least 1".into());
            }
            if t.horizon < 1 {
                push("task.horizon".into(), "must be at least 1".into());
            }
            if !(t.latent_range > 0.0 && t.latent_range.is_finite()) {
                push("task.latent_range".into(), "must be positive".into());
            }
            if !(t.radius >= 0.0) {
                push("task.radius".into(), "must be nonnegative".into());
            }
        }
        TaskSpec::RandomChains(t) => {
            if t.max_states < 1 || t.max_c < 1 {
                push("task.max_states".into(), "max_states and max_c must be at least 1".into());
            }
        }
    }
}

/// Read, parse and validate a configuration file without side effects.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, ConfigLoadError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigLoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::from_json(&text).map_err(ConfigLoadError::Invalid)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{
  "schema_version": 1,
  "kind": "rate-sweep",
  "task": {"type": "graded-gap", "decision_states": 60, "better_share": 0.2, "gamma": 0.9},
  "c_list": [2],
  "n_list": [250, 1000],
  "seeds": {"start": 0, "count": 5}
}"#;

    #[test]
    fn known_good_config_is_accepted() {
        let config = ExperimentConfig::from_json(GOOD).unwrap();
        assert_eq!(config.seed_list(), vec![0, 1, 2, 3, 4]);
        assert_eq!(config.pevi.delta, 0.1);
        let again = ExperimentConfig::from_json(&config.to_json()).unwrap();
        assert_eq!(again, config);
        assert_eq!(again.hash(), config.hash());
    }

    #[test]
    fn zero_skill_length_names_the_invariant() {
        let errors = ExperimentConfig::from_json(&GOOD.replace("[2]", "[0]")).unwrap_err();
        assert_eq!(errors[0].field, "c_list[0]");
        assert!(errors[0].message.contains("SkillConfig invariant c ≥ 1"));
    }

    #[test]
    fn unit_discount_is_out_of_range() {
        let errors = ExperimentConfig::from_json(&GOOD.replace("\"gamma\": 0.9", "\"gamma\": 1.0")).unwrap_err();
        assert_eq!(errors[0].field, "task.gamma");
        assert!(errors[0].message.contains("[0, 1)"));
    }

    #[test]
    fn missing_seeds_names_the_field() {
        let text = GOOD.replace(",\n  \"seeds\": {\"start\": 0, \"count\": 5}", "");
        let errors = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(errors.iter().any(|e| e.field == "seeds"), "{errors:?}");
    }

    #[test]
    fn syntax_errors_report_the_line() {
        let errors = ExperimentConfig::from_json(&GOOD.replace("\"c_list\": [2],", "\"c_list\": [2]")).unwrap_err();
        assert!(errors[0].field.starts_with("line 6"), "{errors:?}");
        assert!(errors[0].message.contains("n_list"));
    }

    #[test]
    fn every_problem_is_reported() {
        let text = GOOD
            .replace("[2]", "[0, 3]")
            .replace("\"gamma\": 0.9", "\"gamma\": -0.5")
            .replace("[250, 1000]", "[]");
        let fields: Vec<String> = ExperimentConfig::from_json(&text).unwrap_err().into_iter().map(|e| e.field).collect();
        assert_eq!(fields, vec!["c_list[0]", "n_list", "task.gamma"]);
    }

    #[test]
    fn mismatched_task_is_rejected() {
        let text = GOOD.replace("rate-sweep", "tv-audit");
        let errors = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(errors.iter().any(|e| e.field == "task.type"));
    }
}
