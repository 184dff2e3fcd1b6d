//! Pipeline configuration: one TOML file plus `section.key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use geoharvest::align::{AlignTrainConfig, ConstraintMode, SamplerConfig};
use geoharvest::corpus::SynthConfig;
use geoharvest::crf::TrainConfig;
use geoharvest::features::{Ablation, FeatureOptions};
use geoharvest::joint::{JointConfig, JointTrainConfig, MoveConfig};
use geoharvest::optim::OptimConfig;
use geoharvest::parser::{FusionMethod, FusionParams, SplitTrainConfig};
use geoharvest::solver::SolverConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub gold: PathBuf,
    pub models: PathBuf,
    pub output: PathBuf,
    /// Problem file or directory of problem files.
    pub problems: Option<PathBuf>,
    pub axiom_names: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "work/corpus".into(),
            gold: "work/gold.json".into(),
            models: "work/models".into(),
            output: "work/out".into(),
            problems: None,
            axiom_names: None,
            lexicon: None,
        }
    }
}

/// Book ids per role; all empty splits the corpus in order, half for
/// training, a quarter for dev and the rest for test.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSplit {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Optim {
    pub max_iters: u64,
    pub grad_tolerance: f64,
    pub memory: usize,
}

impl Default for Optim {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            max_iters: o.max_iters,
            grad_tolerance: o.grad_tolerance,
            memory: o.memory,
        }
    }
}

impl Optim {
    fn to_core(&self) -> OptimConfig {
        OptimConfig {
            max_iters: self.max_iters,
            grad_tolerance: self.grad_tolerance,
            memory: self.memory,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentSection {
    pub lambda_grid: Vec<f64>,
    pub optim: Optim,
}

impl Default for IdentSection {
    fn default() -> Self {
        Self {
            lambda_grid: TrainConfig::default().lambda_grid,
            optim: Optim::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSection {
    pub mu_grid: Vec<f64>,
    pub nu_grid: Vec<f64>,
    pub mode: ConstraintMode,
    /// Global slot count at decoding; 0 keeps the trained model's choice.
    pub num_slots: usize,
    pub max_iters: usize,
    pub tolerance: f64,
    pub learning_rate: f64,
    pub burn_in: usize,
    pub num_samples: usize,
    pub thinning: usize,
    pub decode_sweeps: usize,
}

impl Default for AlignSection {
    fn default() -> Self {
        let a = AlignTrainConfig::default();
        Self {
            mu_grid: a.mu_grid,
            nu_grid: a.nu_grid,
            mode: a.mode,
            num_slots: 0,
            max_iters: a.max_iters,
            tolerance: a.tolerance,
            learning_rate: a.learning_rate,
            burn_in: a.sampler.burn_in,
            num_samples: a.sampler.num_samples,
            thinning: a.sampler.thinning,
            decode_sweeps: a.decode_sweeps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointSection {
    pub steps: usize,
    pub iterations: usize,
    pub steps_per_iteration: usize,
    pub learning_rate: f64,
    pub max_len: usize,
    pub window: usize,
    pub exact: bool,
}

impl Default for JointSection {
    fn default() -> Self {
        let t = JointTrainConfig::default();
        Self {
            steps: t.chain.steps,
            iterations: t.iterations,
            steps_per_iteration: t.steps_per_iteration,
            learning_rate: t.learning_rate,
            max_len: t.chain.moves.max_len,
            window: t.chain.moves.window,
            exact: t.chain.moves.exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub lambda_grid: Vec<f64>,
    pub beam_size: usize,
    pub span_k: usize,
    pub optim: Optim,
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = SplitTrainConfig::default();
        Self {
            lambda_grid: s.lambda_grid,
            beam_size: s.beam_size,
            span_k: s.span_k,
            optim: Optim::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub method: String,
    pub tau: f64,
    pub top: usize,
    /// One weight per book; empty learns them on dev when the method needs
    /// them.
    pub source_weights: Vec<f64>,
}

impl Default for FusionSection {
    fn default() -> Self {
        let p = FusionParams::default();
        Self {
            method: FusionMethod::PredicateScore.as_str().into(),
            tau: p.tau,
            top: p.top,
            source_weights: p.source_weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub max_depth: usize,
    pub tolerance: f64,
    pub grounding_cap: usize,
    pub choice_tolerance: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self {
            max_depth: s.max_depth,
            tolerance: s.tolerance,
            grounding_cap: s.grounding_cap,
            choice_tolerance: s.choice_tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// Identification then alignment.
    Pipeline,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub mode: DecodeMode,
    /// Use the jointly refined models when present.
    pub refined: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Joint,
            refined: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Feature groups switched off, by id or table row label.
    pub ablation: Vec<String>,
    pub paths: Paths,
    pub data: DataSplit,
    pub synth: SynthConfig,
    pub ident: IdentSection,
    pub align: AlignSection,
    pub joint: JointSection,
    pub split: SplitSection,
    pub fusion: FusionSection,
    pub solver: SolverSection,
    pub decode: DecodeSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            ablation: Vec::new(),
            paths: Paths::default(),
            data: DataSplit::default(),
            synth: SynthConfig::default(),
            ident: IdentSection::default(),
            align: AlignSection::default(),
            joint: JointSection::default(),
            split: SplitSection::default(),
            fusion: FusionSection::default(),
            solver: SolverSection::default(),
            decode: DecodeSection::default(),
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` in a TOML tree, creating tables on the way.
fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, init) = parts.split_last().expect("split yields one part");
    let mut cur = root;
    for p in init {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("`{p}` in override `{key}` is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Reads `path` (defaults when `None`) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Table = match path {
            Some(p) => std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?
                .parse()
                .with_context(|| format!("parsing config {}", p.display()))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("override `{o}` is not key=value");
            };
            set_path(&mut tree, k.trim(), parse_scalar(v.trim()))?;
        }
        let cfg: PipelineConfig = toml::Value::Table(tree).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        Ablation::from_names(&self.ablation)?;
        FusionMethod::parse(&self.fusion.method)?;
        if self.ident.lambda_grid.is_empty() || self.split.lambda_grid.is_empty() {
            bail!("lambda grids must be nonempty");
        }
        if self.align.mu_grid.is_empty() || self.align.nu_grid.is_empty() {
            bail!("align.mu_grid and align.nu_grid must be nonempty");
        }
        if self.split.beam_size == 0 || self.split.span_k == 0 {
            bail!("split.beam_size and split.span_k must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.fusion.tau) {
            bail!("fusion.tau must lie in [0,1]");
        }
        if self.align.num_samples == 0 || self.align.thinning == 0 {
            bail!("align.num_samples and align.thinning must be at least 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn feature_options(&self) -> Result<FeatureOptions> {
        Ok(FeatureOptions {
            ablation: Ablation::from_names(&self.ablation)?,
            ..FeatureOptions::default()
        })
    }

    pub fn ident_train(&self) -> TrainConfig {
        TrainConfig {
            lambda_grid: self.ident.lambda_grid.clone(),
            optim: self.ident.optim.to_core(),
        }
    }

    pub fn align_train(&self) -> AlignTrainConfig {
        let a = &self.align;
        AlignTrainConfig {
            mu_grid: a.mu_grid.clone(),
            nu_grid: a.nu_grid.clone(),
            mode: a.mode,
            max_iters: a.max_iters,
            tolerance: a.tolerance,
            learning_rate: a.learning_rate,
            sampler: SamplerConfig {
                burn_in: a.burn_in,
                num_samples: a.num_samples,
                thinning: a.thinning,
                seed: self.seed,
            },
            decode_sweeps: a.decode_sweeps,
        }
    }

    pub fn joint_chain(&self) -> JointConfig {
        let j = &self.joint;
        JointConfig {
            moves: MoveConfig {
                max_len: j.max_len,
                window: j.window,
                exact: j.exact,
            },
            steps: j.steps,
            seed: self.seed,
        }
    }

    pub fn joint_train(&self) -> JointTrainConfig {
        JointTrainConfig {
            iterations: self.joint.iterations,
            steps_per_iteration: self.joint.steps_per_iteration,
            learning_rate: self.joint.learning_rate,
            chain: self.joint_chain(),
        }
    }

    pub fn split_train(&self) -> SplitTrainConfig {
        SplitTrainConfig {
            lambda_grid: self.split.lambda_grid.clone(),
            optim: self.split.optim.to_core(),
            beam_size: self.split.beam_size,
            span_k: self.split.span_k,
        }
    }

    pub fn fusion_method(&self) -> FusionMethod {
        FusionMethod::parse(&self.fusion.method).expect("validated")
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.solver;
        SolverConfig {
            max_depth: s.max_depth,
            tolerance: s.tolerance,
            grounding_cap: s.grounding_cap,
            choice_tolerance: s.choice_tolerance,
        }
    }
}
