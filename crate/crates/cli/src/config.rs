//! Run configuration: a TOML file whose values command-line flags override.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rsate::conformal::DEFAULT_FOLDS;
use rsate::csb::{default_grid, CsbConfig, CsbVariant};
use rsate::data::CovariateSchema;
use rsate::estimators::{DesignPropensity, EstimatorOptions};
use rsate::frt::{RandomizationScheme, Sided, DEFAULT_ENUMERATION_LIMIT};
use rsate::methods::{Method, MethodContext};
use rsate::multiregion::RegionCovariateMap;
use rsate::sim::{AuxRegionSpec, DgpConfig, FrtSettings, Scenario, SimConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// Worker threads; left out of every report so that outputs do not
    /// depend on it.
    #[serde(skip_serializing)]
    pub workers: Option<usize>,
    pub data: DataConfig,
    pub design: DesignPropensity,
    pub estimator: EstimatorOptions,
    pub conformal: ConformalConfig,
    pub csb: CsbSection,
    pub estimate: EstimateSection,
    pub frt: FrtSection,
    pub simulate: SimulateSection,
    #[serde(rename = "match")]
    pub matching: MatchSection,
    pub generate: GenerateSection,
    /// Auxiliary region label -> shared covariates jointly observed with the target.
    pub regions: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub shared: Vec<String>,
    pub target_only: Vec<String>,
    pub region_column: String,
    pub treatment_column: String,
    pub outcome_column: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            shared: Vec::new(),
            target_only: Vec::new(),
            region_column: "R".into(),
            treatment_column: "A".into(),
            outcome_column: "Y".into(),
        }
    }
}

impl DataConfig {
    pub fn schema(&self) -> CovariateSchema {
        let mut s = CovariateSchema::new(self.shared.clone(), self.target_only.clone());
        s.region_column = self.region_column.clone();
        s.treatment_column = self.treatment_column.clone();
        s.outcome_column = self.outcome_column.clone();
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformalConfig {
    pub folds: usize,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self { folds: DEFAULT_FOLDS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsbSection {
    pub grid: Vec<f64>,
    pub n_boot: usize,
}

impl Default for CsbSection {
    fn default() -> Self {
        Self { grid: default_grid(), n_boot: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSection {
    pub methods: Vec<String>,
    /// Write the borrowed record indices, not only their counts.
    pub include_indices: bool,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self {
            methods: ["DiM", "NB-Xonly", "NB-AllCov", "FB-Xonly", "FB-IVW", "CSB-Xonly", "CSB-IVW"]
                .map(String::from)
                .to_vec(),
            include_indices: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrtSection {
    pub statistics: Vec<String>,
    pub b: usize,
    pub sided: Sided,
    /// Complete randomization with the observed target arm sizes when absent.
    pub scheme: Option<RandomizationScheme>,
    pub include_draws: bool,
    /// Enumerate every complete-randomization assignment instead of sampling.
    pub exhaustive: bool,
    pub enumeration_limit: usize,
}

impl Default for FrtSection {
    fn default() -> Self {
        Self {
            statistics: vec!["CSB-IVW".into()],
            b: 1000,
            sided: Sided::Two,
            scheme: None,
            include_draws: false,
            exhaustive: false,
            enumeration_limit: DEFAULT_ENUMERATION_LIMIT,
        }
    }
}

/// Crossed scenario grid; an empty list keeps the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub eps: Vec<f64>,
    pub alpha0: Vec<f64>,
    pub b0: Vec<f64>,
    pub effect: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n_rep: usize,
    pub methods: Vec<String>,
    pub truth_mc: usize,
    /// Randomization-test draws per replicate; no test when absent.
    pub frt_b: Option<usize>,
    pub frt_sided: Sided,
    pub base: DgpConfig,
    pub grid: GridSection,
    /// Explicit scenarios, run after the grid.
    pub scenarios: Vec<Scenario>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            n_rep: 500,
            methods: Method::SIX.iter().map(|m| m.tag().to_string()).collect(),
            truth_mc: 200_000,
            frt_b: None,
            frt_sided: Sided::Two,
            base: DgpConfig::default(),
            grid: GridSection::default(),
            scenarios: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchSection {
    pub ratio: usize,
}

impl Default for MatchSection {
    fn default() -> Self {
        Self { ratio: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub dgp: DgpConfig,
    /// Several auxiliary regions instead of the single one described by `dgp`.
    pub regions: Vec<AuxRegionSpec>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::Config("a seed is required (set `seed` in the config or pass --seed)".into()))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("rsate-out"))
    }

    pub fn data_path(&self) -> Result<&Path, CliError> {
        self.data.path.as_deref().ok_or_else(|| CliError::Config("no dataset given (set data.path or pass --data)".into()))
    }

    pub fn csb_config(&self, variant: CsbVariant) -> CsbConfig {
        CsbConfig {
            folds: self.conformal.folds,
            grid: self.csb.grid.clone(),
            n_boot: self.csb.n_boot,
            variant,
            estimator: self.estimator,
        }
    }

    pub fn region_map(&self) -> Result<Option<RegionCovariateMap>, CliError> {
        if self.regions.is_empty() {
            return Ok(None);
        }
        Ok(Some(RegionCovariateMap::from_string_keys(&self.regions)?))
    }

    pub fn method_context(&self) -> Result<MethodContext, CliError> {
        Ok(MethodContext { design: self.design.clone(), csb: self.csb_config(CsbVariant::Ivw), regions: self.region_map()? })
    }

    /// Checks that hold for every command.
    pub fn validate(&self) -> Result<(), CliError> {
        self.seed()?;
        self.csb_config(CsbVariant::Ivw).check()?;
        if !(self.estimator.alpha > 0.0 && self.estimator.alpha < 1.0) {
            return Err(CliError::Config("estimator.alpha must lie in (0, 1)".into()));
        }
        if self.workers == Some(0) {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        Method::parse_list(&self.estimate.methods)?;
        Method::parse_list(&self.frt.statistics)?;
        Method::parse_list(&self.simulate.methods)?;
        if self.frt.b == 0 {
            return Err(CliError::Config("frt.b must be at least 1".into()));
        }
        if self.frt.statistics.is_empty() {
            return Err(CliError::Config("frt.statistics is empty".into()));
        }
        if self.simulate.frt_b == Some(0) {
            return Err(CliError::Config("simulate.frt_b must be at least 1".into()));
        }
        if self.matching.ratio == 0 {
            return Err(CliError::Config("match.ratio must be at least 1".into()));
        }
        self.region_map()?;
        Ok(())
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        let s = &self.simulate;
        let or_base = |v: &Vec<f64>, base: f64| if v.is_empty() { vec![base] } else { v.clone() };
        let grid_given = !(s.grid.eps.is_empty() && s.grid.alpha0.is_empty() && s.grid.b0.is_empty() && s.grid.effect.is_empty());
        let mut out = Vec::new();
        if grid_given || s.scenarios.is_empty() {
            for &eps in &or_base(&s.grid.eps, s.base.eps) {
                for &alpha0 in &or_base(&s.grid.alpha0, s.base.alpha0) {
                    for &b0 in &or_base(&s.grid.b0, s.base.b0) {
                        for &effect in &or_base(&s.grid.effect, s.base.effect) {
                            out.push(Scenario {
                                label: format!("eps={eps},alpha0={alpha0},b0={b0},effect={effect}"),
                                dgp: DgpConfig { eps, alpha0, b0, effect, ..s.base.clone() },
                            });
                        }
                    }
                }
            }
        }
        out.extend(s.scenarios.iter().cloned());
        out
    }

    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        Ok(SimConfig {
            methods: Method::parse_list(&self.simulate.methods)?,
            n_rep: self.simulate.n_rep,
            frt: self.simulate.frt_b.map(|b| FrtSettings { b, sided: self.simulate.frt_sided }),
            context: self.method_context()?,
            truth_mc: self.simulate.truth_mc,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_partial_file() {
        let cfg: RunConfig = toml::from_str(
            r#"
seed = 7
[data]
path = "trial.csv"
shared = ["X1", "X2"]
target_only = ["U"]
[design]
kind = "by_region"
target = 0.5
auxiliary = 0.6
[estimator]
alpha = 0.1
[regions]
2 = ["X1"]
"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.estimator.alpha, 0.1);
        assert_eq!(cfg.estimator.clip_eps, 0.01);
        assert_eq!(cfg.conformal.folds, 10);
        assert_eq!(cfg.region_map().unwrap().unwrap().shared_of[&2], vec!["X1".to_string()]);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_methods() {
        assert!(toml::from_str::<RunConfig>("sed = 1").is_err());
        let cfg = RunConfig {
            seed: Some(1),
            estimate: EstimateSection { methods: vec!["NB-Foo".into()], include_indices: false },
            ..RunConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("NB-Foo"));
        assert!(RunConfig::default().validate().is_err());
    }

    #[test]
    fn scenario_grid() {
        let mut cfg = RunConfig::default();
        cfg.simulate.grid.eps = vec![0.1, 0.5];
        cfg.simulate.grid.alpha0 = vec![1.0, 1.5];
        let s = cfg.scenarios();
        assert_eq!(s.len(), 4);
        assert_eq!(s[1].dgp.alpha0, 1.5);
        assert_eq!(RunConfig::default().scenarios().len(), 1);
    }
}
