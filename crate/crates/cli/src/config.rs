//! Declarative experiment configuration: priors, operators or circuits, merge
//! settings, oracle settings, and outputs, parsed from TOML with validation
//! that rejects inconsistent setups before any compute starts.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Deserialize;

use flowmerge_core::cfm::{NetConfig, PretrainConfig};
use flowmerge_core::critic::CriticTrainConfig;
use flowmerge_core::driver::{GammaSchedule, MergeConfig};
use flowmerge_core::error::{Error, Result};
use flowmerge_core::finetune::FineTuneConfig;
use flowmerge_core::mixture::{GaussianMixture, MixtureComponent};
use flowmerge_core::operators::{DivergenceKind, LambdaSchedule, MergeMode, RewardFn};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub prior: Vec<PriorConfig>,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub operator: Option<OperatorSection>,
    #[serde(default)]
    pub node: Vec<NodeSection>,
    #[serde(default)]
    pub merge: MergeSection,
    #[serde(default)]
    pub oracle: Option<OracleSection>,
    #[serde(default)]
    pub kn_study: Option<KnSection>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub grid: Option<GridSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub name: String,
    #[serde(default)]
    pub component: Vec<ComponentConfig>,
    /// Load a pretrained checkpoint instead of training on the mixture.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            steps: 5000,
            batch: 256,
            lr: 1e-3,
            hidden: vec![128, 128, 128],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSection {
    /// One tag per prior: "and", "or", or "w1".
    pub divergences: Vec<String>,
    pub alphas: Vec<f64>,
    /// 1-based index of the prior that seeds the fine-tuning.
    #[serde(default = "one_usize")]
    pub init_index: usize,
    #[serde(default)]
    pub reward: Option<RewardSection>,
    #[serde(default)]
    pub lambda: Option<LambdaSection>,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub kind: String,
    /// 1-based coordinate for coordinate-linear rewards.
    #[serde(default)]
    pub axis: Option<usize>,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub center: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSection {
    pub kind: String,
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub early: Option<f64>,
    #[serde(default)]
    pub late: Option<f64>,
    #[serde(default)]
    pub switch: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSection {
    pub id: String,
    pub op: String,
    /// Prior names or node ids.
    pub inputs: Vec<String>,
    pub alphas: Vec<f64>,
    #[serde(default = "one_usize")]
    pub init_index: usize,
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub reward: Option<RewardSection>,
    #[serde(default)]
    pub lambda: Option<LambdaSection>,
    #[serde(default)]
    pub outer_iters: Option<usize>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub inner_steps: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSection {
    pub mode: String,
    pub outer_iters: usize,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub gamma_schedule: Option<Vec<f64>>,
    /// Robbins-Monro gamma_0 / k schedule.
    #[serde(default)]
    pub gamma_decay: Option<f64>,
    pub inner_steps: usize,
    pub trajectories: usize,
    pub sde_steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub keep_best: bool,
    #[serde(default)]
    pub union_per_prior: bool,
    #[serde(default = "default_pool")]
    pub critic_pool: usize,
    #[serde(default = "default_objective_samples")]
    pub objective_samples: usize,
    #[serde(default = "default_hidden")]
    pub critic_hidden: Vec<usize>,
    #[serde(default)]
    pub plateau_tol: Option<f64>,
    #[serde(default)]
    pub critic_rkl: Option<CriticSection>,
    #[serde(default)]
    pub critic_w1: Option<CriticSection>,
}

fn default_pool() -> usize {
    4096
}

fn default_objective_samples() -> usize {
    16_384
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}

impl Default for MergeSection {
    fn default() -> Self {
        MergeSection {
            mode: "terminal".into(),
            outer_iters: 10,
            gamma: Some(1.0),
            gamma_schedule: None,
            gamma_decay: None,
            inner_steps: 20,
            trajectories: 128,
            sde_steps: 100,
            lr: 1e-3,
            keep_best: false,
            union_per_prior: false,
            critic_pool: default_pool(),
            objective_samples: default_objective_samples(),
            critic_hidden: default_hidden(),
            plateau_tol: None,
            critic_rkl: None,
            critic_w1: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub grad_penalty: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub gamma: f64,
    pub steps: usize,
    #[serde(default)]
    pub keep_iterates: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnSection {
    pub budgets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "yes")]
    pub export_samples: bool,
    #[serde(default = "yes")]
    pub export_grids: bool,
    #[serde(default)]
    pub export_trajectories: bool,
    #[serde(default = "default_sample_count")]
    pub sample_count: usize,
}

fn yes() -> bool {
    true
}

fn default_sample_count() -> usize {
    16_384
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub bounds: Vec<Vec<f64>>,
    pub resolution: Vec<usize>,
}

impl ExperimentConfig {
    /// Parse a TOML document, apply `key=value` overrides (dotted paths),
    /// and validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::config(format!("config parse error: {e}")))?;
        let mut value = toml::Value::Table(table);
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e| Error::config(format!("config field error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim must be positive"));
        }
        if self.prior.is_empty() {
            return Err(Error::config("at least one [[prior]] is required"));
        }
        let mut names = BTreeMap::new();
        for p in &self.prior {
            if names.insert(p.name.clone(), ()).is_some() {
                return Err(Error::config(format!("duplicate prior name {:?}", p.name)));
            }
            if p.checkpoint.is_none() && p.component.is_empty() {
                return Err(Error::config(format!(
                    "prior {:?} needs mixture components or a checkpoint path",
                    p.name
                )));
            }
            if let Some(path) = &p.checkpoint {
                if !path.exists() {
                    return Err(Error::config(format!(
                        "prior {:?} checkpoint does not exist: {}",
                        p.name,
                        path.display()
                    )));
                }
            }
            for c in &p.component {
                if c.mean.len() != self.dim || c.var.len() != self.dim {
                    return Err(Error::config(format!(
                        "prior {:?} component dimensions must match dim = {}",
                        p.name, self.dim
                    )));
                }
                if c.weight <= 0.0 || c.var.iter().any(|&v| v <= 0.0) {
                    return Err(Error::config(format!(
                        "prior {:?} component weights and variances must be positive",
                        p.name
                    )));
                }
            }
        }
        if let Some(op) = &self.operator {
            op.validate(self.prior.len(), &self.merge)?;
        }
        if !self.node.is_empty() {
            self.validate_circuit()?;
        }
        if self.merge.outer_iters == 0 {
            return Err(Error::config("merge.outer_iters must be at least 1"));
        }
        if let Some(g) = self.merge.gamma {
            if g <= 0.0 {
                return Err(Error::config("merge.gamma must be positive"));
            }
        }
        if let Some(gs) = &self.merge.gamma_schedule {
            if gs.iter().any(|&g| g <= 0.0) {
                return Err(Error::config("merge.gamma_schedule entries must be positive"));
            }
        }
        if let Some(kn) = &self.kn_study {
            if kn.budgets.is_empty() || kn.budgets.iter().any(|b| b.len() != 2) {
                return Err(Error::config("kn_study.budgets must be [K, N] pairs"));
            }
            let total = kn.budgets[0][0] * kn.budgets[0][1];
            if kn.budgets.iter().any(|b| b[0] * b[1] != total) {
                return Err(Error::config(format!(
                    "kn_study budgets must share one total K*N = {total}"
                )));
            }
        }
        if let Some(grid) = &self.grid {
            if grid.bounds.len() != self.dim
                || grid.resolution.len() != self.dim
                || grid.bounds.iter().any(|b| b.len() != 2 || b[0] >= b[1])
            {
                return Err(Error::config("grid bounds/resolution must match dim"));
            }
        }
        Ok(())
    }

    fn validate_circuit(&self) -> Result<()> {
        let prior_names: Vec<&str> = self.prior.iter().map(|p| p.name.as_str()).collect();
        let mut ids = BTreeMap::new();
        for n in &self.node {
            if prior_names.contains(&n.id.as_str()) {
                return Err(Error::config(format!(
                    "node id {:?} collides with a prior name",
                    n.id
                )));
            }
            if ids.insert(n.id.clone(), n).is_some() {
                return Err(Error::config(format!("duplicate node id {:?}", n.id)));
            }
        }
        let mut referenced = BTreeMap::new();
        for n in &self.node {
            DivergenceKind::from_str(&n.op)?;
            if n.inputs.len() != n.alphas.len() || n.inputs.is_empty() {
                return Err(Error::config(format!(
                    "node {:?} needs one weight per input",
                    n.id
                )));
            }
            if n.alphas.iter().any(|&a| a <= 0.0) {
                return Err(Error::config(format!("node {:?} weights must be positive", n.id)));
            }
            if n.init_index == 0 || n.init_index > n.inputs.len() {
                return Err(Error::config(format!(
                    "node {:?} init_index must be in 1..={}",
                    n.id,
                    n.inputs.len()
                )));
            }
            for input in &n.inputs {
                if !prior_names.contains(&input.as_str()) && !ids.contains_key(input) {
                    return Err(Error::config(format!(
                        "node {:?} references unknown input {:?}",
                        n.id, input
                    )));
                }
                *referenced.entry(input.clone()).or_insert(0usize) += 1;
            }
        }
        // Exactly one root: a node no other node references.
        let roots: Vec<&NodeSection> = self
            .node
            .iter()
            .filter(|n| !referenced.contains_key(&n.id))
            .collect();
        if roots.len() != 1 {
            return Err(Error::config(format!(
                "circuit must have exactly one root node, found {}",
                roots.len()
            )));
        }
        // Acyclicity: depth-first from the root must visit without revisits.
        fn visit<'a>(
            id: &'a str,
            nodes: &'a BTreeMap<String, &'a NodeSection>,
            stack: &mut Vec<&'a str>,
        ) -> Result<()> {
            if stack.contains(&id) {
                return Err(Error::config(format!("circuit cycle through node {id:?}")));
            }
            if let Some(n) = nodes.get(id) {
                stack.push(id);
                for input in &n.inputs {
                    visit(input, nodes, stack)?;
                }
                stack.pop();
            }
            Ok(())
        }
        let nodes: BTreeMap<String, &NodeSection> =
            self.node.iter().map(|n| (n.id.clone(), n)).collect();
        visit(&roots[0].id, &nodes, &mut Vec::new())?;
        Ok(())
    }

    pub fn mixture_for(&self, prior: &PriorConfig) -> Result<Option<GaussianMixture>> {
        if prior.component.is_empty() {
            return Ok(None);
        }
        let components = prior
            .component
            .iter()
            .map(|c| MixtureComponent {
                mean: c.mean.clone(),
                var: c.var.clone(),
                weight: c.weight,
            })
            .collect();
        GaussianMixture::new(components).map(Some)
    }

    pub fn pretrain_config(&self) -> (NetConfig, PretrainConfig) {
        (
            NetConfig::with_hidden(&self.pretrain.hidden),
            PretrainConfig {
                steps: self.pretrain.steps,
                batch: self.pretrain.batch,
                lr: self.pretrain.lr,
            },
        )
    }

    pub fn merge_mode(&self) -> Result<MergeMode> {
        parse_mode(&self.merge.mode)
    }

    pub fn gamma_schedule(&self) -> Result<GammaSchedule> {
        if let Some(gs) = &self.merge.gamma_schedule {
            return Ok(GammaSchedule::PerIteration(gs.clone()));
        }
        if let Some(g0) = self.merge.gamma_decay {
            return Ok(GammaSchedule::Decaying { gamma0: g0 });
        }
        match self.merge.gamma {
            Some(g) => Ok(GammaSchedule::Constant(g)),
            None => Err(Error::config("merge needs gamma, gamma_schedule, or gamma_decay")),
        }
    }

    pub fn merge_config(&self, out_dir: Option<PathBuf>) -> Result<MergeConfig> {
        let mut cfg = MergeConfig {
            outer_iters: self.merge.outer_iters,
            gamma: self.gamma_schedule()?,
            mode: self.merge_mode()?,
            finetune: FineTuneConfig {
                inner_steps: self.merge.inner_steps,
                trajectories: self.merge.trajectories,
                sde_steps: self.merge.sde_steps,
                gamma: 1.0,
                lr: self.merge.lr,
                seed: 0,
            },
            critic_hidden: self.merge.critic_hidden.clone(),
            critic_pool: self.merge.critic_pool,
            union_per_prior: self.merge.union_per_prior,
            objective_samples: self.merge.objective_samples,
            seed: self.seed,
            checkpoint_dir: out_dir,
            plateau_tol: self.merge.plateau_tol,
            keep_best: self.merge.keep_best,
            ..MergeConfig::default()
        };
        if let Some(c) = &self.merge.critic_rkl {
            cfg.critic_rkl = CriticTrainConfig {
                steps: c.steps,
                batch: c.batch,
                lr: c.lr,
                grad_penalty: 0.0,
            };
        }
        if let Some(c) = &self.merge.critic_w1 {
            cfg.critic_w1 = CriticTrainConfig {
                steps: c.steps,
                batch: c.batch,
                lr: c.lr,
                grad_penalty: c.grad_penalty,
            };
        }
        Ok(cfg)
    }

    pub fn grid_spec(&self) -> (Vec<(f64, f64)>, Vec<usize>) {
        if let Some(g) = &self.grid {
            return (
                g.bounds.iter().map(|b| (b[0], b[1])).collect(),
                g.resolution.clone(),
            );
        }
        match self.dim {
            1 => (
                vec![flowmerge_core::grid::DEFAULT_BOUNDS_1D],
                vec![flowmerge_core::grid::DEFAULT_RES_1D],
            ),
            2 => (
                vec![flowmerge_core::grid::DEFAULT_BOUNDS_2D; 2],
                vec![flowmerge_core::grid::DEFAULT_RES_2D; 2],
            ),
            d => (vec![(-5.0, 5.0); d], vec![51; d]),
        }
    }
}

impl OperatorSection {
    pub fn validate(&self, n_priors: usize, merge: &MergeSection) -> Result<()> {
        if self.divergences.len() != n_priors || self.alphas.len() != n_priors {
            return Err(Error::config(format!(
                "operator needs one divergence tag and one weight per prior ({n_priors})"
            )));
        }
        let kinds = self
            .divergences
            .iter()
            .map(|s| DivergenceKind::from_str(s))
            .collect::<Result<Vec<_>>>()?;
        if self.alphas.iter().any(|&a| a <= 0.0) {
            return Err(Error::config("operator weights must be positive"));
        }
        if self.init_index == 0 || self.init_index > n_priors {
            return Err(Error::config(format!(
                "operator init_index must be in 1..={n_priors}"
            )));
        }
        if parse_mode(&merge.mode)? == MergeMode::FlowProcess
            && kinds.iter().any(|&k| k != DivergenceKind::ForwardKl)
        {
            return Err(Error::config(
                "flow-process mode is only defined for \"and\" (forward-KL) divergences",
            ));
        }
        if let Some(r) = &self.reward {
            r.validate()?;
        }
        Ok(())
    }

    pub fn kinds(&self) -> Result<Vec<DivergenceKind>> {
        self.divergences
            .iter()
            .map(|s| DivergenceKind::from_str(s))
            .collect()
    }
}

impl RewardSection {
    pub fn validate(&self) -> Result<()> {
        match self.kind.as_str() {
            "none" => Ok(()),
            "coord-linear" => {
                if self.axis.unwrap_or(0) == 0 {
                    Err(Error::config("coord-linear reward needs a 1-based axis"))
                } else {
                    Ok(())
                }
            }
            "neg-quadratic-well" => {
                if self.center.is_none() {
                    Err(Error::config("neg-quadratic-well reward needs a center"))
                } else {
                    Ok(())
                }
            }
            other => Err(Error::config(format!(
                "unknown reward kind {other:?} (expected none, coord-linear, neg-quadratic-well)"
            ))),
        }
    }

    pub fn to_reward(&self, dim: usize) -> Result<RewardFn> {
        self.validate()?;
        match self.kind.as_str() {
            "none" => Ok(RewardFn::None),
            "coord-linear" => {
                let axis = self.axis.unwrap();
                if axis > dim {
                    return Err(Error::config(format!(
                        "reward axis {axis} exceeds dim {dim}"
                    )));
                }
                Ok(RewardFn::CoordLinear {
                    axis: axis - 1,
                    scale: self.scale,
                })
            }
            "neg-quadratic-well" => {
                let center = self.center.clone().unwrap();
                if center.len() != dim {
                    return Err(Error::config("reward center must match dim"));
                }
                Ok(RewardFn::NegQuadraticWell {
                    center,
                    scale: self.scale,
                })
            }
            _ => unreachable!(),
        }
    }
}

impl LambdaSection {
    pub fn to_lambda(&self) -> Result<LambdaSchedule> {
        match self.kind.as_str() {
            "flat" => Ok(LambdaSchedule::Flat(self.value.unwrap_or(1.0))),
            "two-phase" => Ok(LambdaSchedule::TwoPhase {
                early: self.early.unwrap_or(0.4),
                late: self.late.unwrap_or(0.2),
                switch: self.switch.unwrap_or(0.95),
            }),
            other => Err(Error::config(format!(
                "unknown lambda kind {other:?} (expected flat or two-phase)"
            ))),
        }
    }
}

pub fn parse_mode(s: &str) -> Result<MergeMode> {
    match s {
        "terminal" => Ok(MergeMode::Terminal),
        "flow-process" => Ok(MergeMode::FlowProcess),
        other => Err(Error::config(format!(
            "unknown merge mode {other:?} (expected terminal or flow-process)"
        ))),
    }
}

/// Apply one `dotted.path=value` override onto the parsed TOML document.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {spec:?} must be key=value")))?;
    let parsed: toml::Value = format!("x = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|t| t.get("x").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if last {
            match cur {
                toml::Value::Table(t) => {
                    t.insert(part.to_string(), parsed);
                    return Ok(());
                }
                _ => return Err(Error::config(format!("override path {path:?} not a table"))),
            }
        }
        cur = match cur {
            toml::Value::Table(t) => t
                .entry(part.to_string())
                .or_insert(toml::Value::Table(Default::default())),
            _ => return Err(Error::config(format!("override path {path:?} not a table"))),
        };
    }
    Ok(())
}
