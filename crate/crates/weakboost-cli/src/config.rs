//! TOML experiment description.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use weakboost::cir::{CirParams, CirSchemeKind};
use weakboost::grids::{Coupling, Layout};
use weakboost::heston::{HestonKind, HestonParams};
use weakboost::multifactor::KernelNodes;

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Cir,
    Heston,
    Multifactor,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Nv,
    Exact,
    PhiA,
    PhiB,
    BernoulliNv,
    BernoulliEx,
    Poisson,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CouplingName {
    #[default]
    Standard,
    VolWeighted,
}

impl CouplingName {
    pub fn coupling(self) -> Coupling {
        match self {
            CouplingName::Standard => Coupling::Standard,
            CouplingName::VolWeighted => Coupling::VolatilityWeighted,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CouplingName::Standard => "standard",
            CouplingName::VolWeighted => "vol_weighted",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LayoutName {
    #[default]
    Shared,
    Independent,
}

impl LayoutName {
    pub fn layout(self) -> Layout {
        match self {
            LayoutName::Shared => Layout::Shared,
            LayoutName::Independent => Layout::Independent,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Payoff {
    /// `exp(-lambda x)` of the terminal CIR value.
    Laplace { lambda: f64 },
    Put { strike: f64 },
    AsianPut { strike: f64 },
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CirSection {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub x0: f64,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HestonSection {
    pub s0: f64,
    #[serde(default)]
    pub r: f64,
    #[serde(default)]
    pub delta: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    /// Built-in node set; only `bl2` exists.
    pub preset: Option<String>,
    /// CSV file with `k,rho,gamma` rows, relative to the config file.
    pub file: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PdeSection {
    pub steps: usize,
    pub dx: f64,
    #[serde(default = "default_width")]
    pub width_sd: f64,
}

fn default_width() -> f64 {
    6.0
}

fn default_levels() -> Vec<u8> {
    vec![1]
}

fn default_maturity() -> f64 {
    1.0
}

fn default_batches() -> u64 {
    10
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub model: Model,
    pub scheme: SchemeName,
    #[serde(default = "default_levels")]
    pub levels: Vec<u8>,
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default)]
    pub coupling: CouplingName,
    /// Couplings compared by `variance`; defaults to `[coupling]`.
    #[serde(default)]
    pub couplings: Vec<CouplingName>,
    #[serde(default)]
    pub layout: LayoutName,
    pub samples: Option<u64>,
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_maturity")]
    pub maturity: f64,
    /// Regress `|P(2n) - P(n)|` instead of the error against a reference.
    #[serde(default)]
    pub self_difference: bool,
    /// Batches used for the precision of variance estimates.
    #[serde(default = "default_batches")]
    pub batches: u64,
    pub cir: CirSection,
    pub heston: Option<HestonSection>,
    pub kernel: Option<KernelSection>,
    pub payoff: Payoff,
    pub pde: Option<PdeSection>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn cir_params(&self) -> anyhow::Result<CirParams<f64>> {
        let c = self.cir;
        Ok(CirParams::new(c.a, c.b, c.sigma, c.x0)?)
    }

    pub fn heston_params(&self) -> anyhow::Result<HestonParams<f64>> {
        let Some(h) = self.heston else { bail!("model needs a [heston] section") };
        Ok(HestonParams::new(h.s0, h.r, h.delta, h.rho, self.cir_params()?)?)
    }

    pub fn kernel_nodes(&self) -> anyhow::Result<KernelNodes<f64>> {
        match &self.kernel {
            None => Ok(KernelNodes::bl2()),
            Some(KernelSection { preset: Some(p), file: None }) if p == "bl2" => Ok(KernelNodes::bl2()),
            Some(KernelSection { preset: None, file: Some(f) }) => {
                let path = self.base_dir.join(f);
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                Ok(KernelNodes::from_csv(&text)?)
            }
            Some(k) => bail!("[kernel] needs exactly one of preset = \"bl2\" or file, got {k:?}"),
        }
    }

    pub fn cir_kind(&self) -> anyhow::Result<CirSchemeKind> {
        Ok(match self.scheme {
            SchemeName::Nv => CirSchemeKind::Nv,
            SchemeName::PhiA => CirSchemeKind::PhiA,
            SchemeName::PhiB => CirSchemeKind::PhiB,
            SchemeName::Exact => CirSchemeKind::Exact,
            SchemeName::Poisson => CirSchemeKind::Poisson,
            s => bail!("scheme {s:?} is not a CIR scheme"),
        })
    }

    pub fn heston_kind(&self) -> anyhow::Result<HestonKind> {
        Ok(match self.scheme {
            SchemeName::Nv => HestonKind::Nv,
            SchemeName::Exact => HestonKind::Ex,
            SchemeName::BernoulliNv => HestonKind::BernoulliNv,
            SchemeName::BernoulliEx => HestonKind::BernoulliEx,
            s => bail!("scheme {s:?} is not a log-Heston scheme"),
        })
    }

    pub fn couplings(&self) -> Vec<CouplingName> {
        if self.couplings.is_empty() {
            vec![self.coupling]
        } else {
            self.couplings.clone()
        }
    }

    /// Structural checks that do not need any sampling.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.maturity <= 0.0 || !self.maturity.is_finite() {
            bail!("maturity must be positive");
        }
        if self.levels.is_empty() || self.levels.iter().any(|l| !(1..=3).contains(l)) {
            bail!("levels must be a non-empty subset of {{1, 2, 3}}");
        }
        if self.n.contains(&0) {
            bail!("grid sizes must be >= 1");
        }
        if let Some(e) = self.epsilon {
            if e <= 0.0 || !e.is_finite() {
                bail!("epsilon must be positive");
            }
        }
        if self.samples == Some(0) {
            bail!("samples must be >= 1");
        }
        match (self.model, self.payoff) {
            (Model::Cir, Payoff::Laplace { .. }) => {}
            (Model::Heston, Payoff::Put { .. } | Payoff::AsianPut { .. }) => {}
            (Model::Multifactor, Payoff::Put { .. }) => {}
            (m, p) => bail!("payoff {p:?} is not available for model {m:?}"),
        }
        match self.model {
            Model::Cir => {
                self.cir_kind()?;
            }
            Model::Heston => {
                self.heston_kind()?;
            }
            Model::Multifactor => {
                if self.scheme != SchemeName::Nv {
                    bail!("the multifactor model only has the nv scheme");
                }
            }
        }
        if self.scheme == SchemeName::Poisson && self.levels.iter().any(|&l| l > 1) {
            bail!("the poisson scheme is first order and cannot be boosted");
        }
        if self.self_difference && self.levels.contains(&3) {
            bail!("self-difference mode supports levels 1 and 2");
        }
        Ok(())
    }
}
