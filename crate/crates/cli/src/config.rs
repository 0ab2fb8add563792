//! The `--config` JSON document. Every section is optional; flags given on the command
//! line take precedence over the file, which takes precedence over built-in defaults.

use std::path::Path;

use gkdr_emulation::baselines::SliceSpec;
use gkdr_emulation::benchmarks::{build_elliptic, EllipticSpec, RidgeFunction, RidgeLink};
use gkdr_emulation::gkdr::GkdrConfig;
use gkdr_emulation::gp::FitOptions;
use gkdr_emulation::pipeline::{CvPlan, ReductionSettings, Simulator};
use serde::{Deserialize, Serialize};

use crate::error::CliResult;
use crate::io::read_json;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub reduction: Option<ReductionSettings>,
    pub fit: Option<FitOptions>,
    pub cv: Option<CvPlan>,
    pub problem: Option<ProblemConfig>,
    pub study: Option<StudyConfig>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            Some(p) => read_json(p),
            None => Ok(Self::default()),
        }
    }
}

/// A built-in simulator (used for gradients and lifted designs).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum ProblemConfig {
    Elliptic(EllipticSpec),
    Ridge(RidgeSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeSpec {
    pub m: usize,
    pub d: usize,
    #[serde(default = "default_link")]
    pub link: RidgeLink,
    #[serde(default)]
    pub noise_sd: f64,
    /// Seed of the random true basis.
    #[serde(default)]
    pub basis_seed: u64,
}

fn default_link() -> RidgeLink {
    RidgeLink::SinSquare
}

impl RidgeSpec {
    pub fn build(&self) -> CliResult<RidgeFunction> {
        Ok(RidgeFunction::random(self.m, self.d, self.link, self.noise_sd, self.basis_seed)?)
    }
}

impl ProblemConfig {
    pub fn simulator(&self) -> CliResult<Box<dyn Simulator>> {
        Ok(match self {
            ProblemConfig::Elliptic(spec) => Box::new(build_elliptic(*spec)?),
            ProblemConfig::Ridge(spec) => Box::new(spec.build()?),
        })
    }
}

/// Overrides for the elliptic benchmark protocol.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub n_test: Option<usize>,
    pub gkdr: Option<GkdrConfig>,
    pub slices: Option<SliceSpec>,
    pub reduced_fit: Option<FitOptions>,
    pub full_fit: Option<FitOptions>,
}
