//! Named estimators, so that simulations, randomization tests and the
//! command line can refer to them by tag.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::csb::{self, CsbConfig, CsbVariant};
use crate::data::{self, StudyDataset};
use crate::error::{Error, Result};
use crate::estimators::{self, DesignPropensity, TauEstimate};
use crate::multiregion::{self, RegionCovariateMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    DiM,
    NbXonly,
    NbAllCov,
    FbXonly,
    FbIvw,
    CsbXonly,
    CsbIvw,
    MrFbIvw,
    MrCsbIvw,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::DiM,
        Method::NbXonly,
        Method::NbAllCov,
        Method::FbXonly,
        Method::FbIvw,
        Method::CsbXonly,
        Method::CsbIvw,
        Method::MrFbIvw,
        Method::MrCsbIvw,
    ];

    /// The six borrowing-by-adjustment combinations compared in simulations.
    pub const SIX: [Method; 6] =
        [Method::NbXonly, Method::NbAllCov, Method::FbXonly, Method::FbIvw, Method::CsbXonly, Method::CsbIvw];

    pub fn tag(self) -> &'static str {
        match self {
            Method::DiM => "DiM",
            Method::NbXonly => "NB-Xonly",
            Method::NbAllCov => "NB-AllCov",
            Method::FbXonly => "FB-Xonly",
            Method::FbIvw => "FB-IVW",
            Method::CsbXonly => "CSB-Xonly",
            Method::CsbIvw => "CSB-IVW",
            Method::MrFbIvw => "MR-FB-IVW",
            Method::MrCsbIvw => "MR-CSB-IVW",
        }
    }

    pub fn is_selective(self) -> bool {
        matches!(self, Method::CsbXonly | Method::CsbIvw | Method::MrCsbIvw)
    }

    pub fn parse_list<S: AsRef<str>>(names: &[S]) -> Result<Vec<Method>> {
        names.iter().map(|s| s.as_ref().parse()).collect()
    }

    /// Runs the estimator. `seed` drives the conformal folds and bootstrap
    /// of the selective methods and is ignored by the others.
    pub fn run(self, dataset: &StudyDataset, ctx: &MethodContext, seed: u64) -> Result<TauEstimate> {
        let opts = &ctx.csb.estimator;
        let design = &ctx.design;
        match self {
            Method::DiM => data::difference_in_means(dataset, opts.alpha),
            Method::NbXonly => estimators::estimate_nb_xonly(dataset, design, opts),
            Method::NbAllCov => estimators::estimate_nb_allcov(dataset, design, opts),
            Method::FbXonly => estimators::estimate_fb_xonly(dataset, design, opts),
            Method::FbIvw => estimators::estimate_fb_ivw(dataset, design, opts),
            Method::CsbXonly => {
                csb::csb_pipeline(dataset, design, &CsbConfig { variant: CsbVariant::Xonly, ..ctx.csb.clone() }, seed)
            }
            Method::CsbIvw => {
                csb::csb_pipeline(dataset, design, &CsbConfig { variant: CsbVariant::Ivw, ..ctx.csb.clone() }, seed)
            }
            Method::MrFbIvw => multiregion::estimate_fb_ivw_multiregion(dataset, design, &ctx.region_map(dataset), opts),
            Method::MrCsbIvw => multiregion::select_by_region(
                dataset,
                design,
                &ctx.region_map(dataset),
                &CsbConfig { variant: CsbVariant::Ivw, ..ctx.csb.clone() },
                seed,
            ),
        }
    }

    /// The estimate as a randomization-test statistic of the assignment.
    pub fn statistic(self, ctx: &MethodContext) -> impl Fn(&StudyDataset, &[u8], u64) -> Result<f64> + Sync + '_ {
        move |ds: &StudyDataset, assignment: &[u8], seed: u64| {
            let re = ds.with_assignment(assignment)?;
            self.run(&re, ctx, seed).map(|e| e.tau_hat)
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let known: Vec<&str> = Method::ALL.iter().map(|m| m.tag()).collect();
                Error::Config(format!("unknown method '{s}' (known: {})", known.join(", ")))
            })
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.tag().to_string()
    }
}

/// Everything besides the data that the estimators need.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MethodContext {
    pub design: DesignPropensity,
    pub csb: CsbConfig,
    /// Covariates per auxiliary region for the multi-region methods; all
    /// shared covariates for every region when absent.
    pub regions: Option<RegionCovariateMap>,
}

impl MethodContext {
    fn region_map(&self, dataset: &StudyDataset) -> RegionCovariateMap {
        self.regions.clone().unwrap_or_else(|| RegionCovariateMap::full(dataset))
    }
}
