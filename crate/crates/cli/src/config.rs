//! JSON run configurations. Unknown keys are rejected everywhere.

use errcalc::black_scholes::{BsModel, ErrorSwitches, Payoff, PiecewiseLinear, Quantity, Source};
use errcalc::level_vol::{HedgeGammaForm, LocalVolModel, RateCurve, VolSpec};
use errcalc::mc_ibp::{DiscreteScheme, SchemeVol, Xi};
use errcalc::wiener::ErrorKernel;
use errcalc::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsModelConfig {
    pub s0: f64,
    pub sigma: f64,
    pub r: f64,
    pub maturity: f64,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub switches: Option<ErrorSwitches>,
}

impl BsModelConfig {
    pub fn build(&self) -> Result<BsModel> {
        let m = BsModel::new(self.s0, self.sigma, self.r, self.maturity)?.with_kernel(self.kernel.build()?);
        Ok(match self.switches {
            Some(s) => m.with_switches(s),
            None => m,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    #[default]
    Ou,
    /// `α(t) = Σ c_k t^k`.
    WeightedOu { coeffs: Vec<f64> },
    /// `β(s) = e^{-rate·s}`.
    Beta { rate: f64 },
    Fractional {
        q: f64,
        #[serde(default = "default_truncation")]
        truncation: usize,
    },
}

fn default_truncation() -> usize {
    errcalc::wiener::FRACTIONAL_TERMS
}

impl KernelConfig {
    pub fn build(&self) -> Result<ErrorKernel> {
        Ok(match self {
            KernelConfig::Ou => ErrorKernel::Ou,
            KernelConfig::WeightedOu { coeffs } => {
                let c = coeffs.clone();
                ErrorKernel::weighted_ou(move |t| c.iter().rev().fold(0.0, |acc, a| acc * t + a))
            }
            KernelConfig::Beta { rate } => {
                if !(*rate > 0.0) {
                    return Err(errcalc::Error::Input(format!("beta kernel rate must be positive, got {rate}")));
                }
                let r = *rate;
                ErrorKernel::beta(move |s| (-r * s).exp())
            }
            KernelConfig::Fractional { q, truncation } => ErrorKernel::fractional(*q, *truncation)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffConfig {
    Call { strike: f64 },
    Put { strike: f64 },
    Forward {
        #[serde(default)]
        strike: f64,
    },
    Constant { value: f64 },
    SoftplusCall { strike: f64, width: f64 },
    Table { points: Vec<(f64, f64)> },
    Polynomial { coeffs: Vec<f64> },
    Portfolio { legs: Vec<LegConfig> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegConfig {
    pub weight: f64,
    pub payoff: PayoffConfig,
}

impl PayoffConfig {
    pub fn build(&self) -> Result<Payoff> {
        let p = match self {
            PayoffConfig::Call { strike } => Payoff::Call { strike: *strike },
            PayoffConfig::Put { strike } => Payoff::Put { strike: *strike },
            PayoffConfig::Forward { strike } => Payoff::Forward { strike: *strike },
            PayoffConfig::Constant { value } => Payoff::Constant(*value),
            PayoffConfig::SoftplusCall { strike, width } => Payoff::SoftplusCall { strike: *strike, width: *width },
            PayoffConfig::Table { points } => {
                let (xs, ys) = points.iter().copied().unzip();
                Payoff::Table(PiecewiseLinear::new(xs, ys)?)
            }
            PayoffConfig::Polynomial { coeffs } => Payoff::Polynomial(coeffs.clone()),
            PayoffConfig::Portfolio { legs } => {
                Payoff::Portfolio(legs.iter().map(|l| Ok((l.weight, l.payoff.build()?))).collect::<Result<_>>()?)
            }
        };
        p.validate()?;
        Ok(p)
    }

    pub fn label(&self) -> String {
        match self {
            PayoffConfig::Call { strike } => format!("call({strike})"),
            PayoffConfig::Put { strike } => format!("put({strike})"),
            PayoffConfig::Forward { strike } => format!("forward({strike})"),
            PayoffConfig::Constant { value } => format!("constant({value})"),
            PayoffConfig::SoftplusCall { strike, width } => format!("softplus_call({strike};{width})"),
            PayoffConfig::Table { points } => format!("table({})", points.len()),
            PayoffConfig::Polynomial { coeffs } => format!("polynomial({})", coeffs.len()),
            PayoffConfig::Portfolio { legs } => format!("portfolio({})", legs.len()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceConfig {
    pub model: BsModelConfig,
    pub payoff: PayoffConfig,
    pub times: Vec<f64>,
    pub spots: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensConfig {
    pub model: BsModelConfig,
    pub payoff: PayoffConfig,
    pub times: Vec<f64>,
    #[serde(default = "all_sources")]
    pub sources: Vec<Source>,
    #[serde(default)]
    pub paths: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn all_sources() -> Vec<Source> {
    Source::ALL.to_vec()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalVolConfig {
    pub x0: f64,
    pub vol: VolSpec,
    pub rate: RateCurve,
    pub maturity: f64,
}

impl LocalVolConfig {
    pub fn build(&self) -> Result<LocalVolModel> {
        LocalVolModel::new(self.x0, self.vol.clone(), self.rate, self.maturity)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelVolConfig {
    pub model: LocalVolConfig,
    pub payoff: PayoffConfig,
    pub times: Vec<f64>,
    #[serde(default)]
    pub paths: Option<usize>,
    pub n_inner: usize,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub hedge_form: HedgeGammaForm,
    #[serde(default)]
    pub cost_ceiling: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemeVolConfig {
    Constant { sigma: f64 },
    Affine { a: f64, b: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    #[serde(default)]
    pub n_steps: Option<usize>,
    pub x: f64,
    pub lambda: f64,
    pub vol: SchemeVolConfig,
    #[serde(default)]
    pub xi: Xi,
}

impl SchemeConfig {
    pub fn build(&self, steps: usize) -> Result<DiscreteScheme> {
        let vol = match self.vol {
            SchemeVolConfig::Constant { sigma } => SchemeVol::Constant(sigma),
            SchemeVolConfig::Affine { a, b } => SchemeVol::Affine { a, b },
        };
        DiscreteScheme::new(steps, self.x, self.lambda, vol, self.xi)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbpConfig {
    pub scheme: SchemeConfig,
    pub psi: PayoffConfig,
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
    #[serde(default)]
    pub paths: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    pub model: BsModelConfig,
    pub payoff: PayoffConfig,
    pub times: Vec<f64>,
    pub quantities: Vec<Quantity>,
    #[serde(default)]
    pub bias: bool,
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default)]
    pub paths: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_rel_tol() -> f64 {
    0.05
}

/// `[start, end, count]` sweep.
pub type Sweep = (f64, f64, usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriangleConfig {
    pub l1: Sweep,
    pub l2: Sweep,
    pub theta1: Sweep,
    pub theta2: Sweep,
}

pub fn sweep((a, b, n): Sweep) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}
