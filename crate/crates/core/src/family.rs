//! Distribution families and link functions.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{GlmmError, Result};
use crate::special::{digamma, ln_gamma, norm_cdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Binomial,
    Poisson,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Log,
    Logit,
    Probit,
    Inverse,
}

impl Family {
    pub fn parse(s: &str) -> Result<Family> {
        Ok(match s {
            "gaussian" => Family::Gaussian,
            "binomial" => Family::Binomial,
            "poisson" => Family::Poisson,
            "gamma" => Family::Gamma,
            "beta" => Family::Beta,
            _ => return Err(GlmmError::InvalidArgument(format!("unknown family `{s}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
            Family::Poisson => "poisson",
            Family::Gamma => "gamma",
            Family::Beta => "beta",
        }
    }

    pub fn default_link(&self) -> Link {
        match self {
            Family::Gaussian => Link::Identity,
            Family::Binomial | Family::Beta => Link::Logit,
            Family::Poisson | Family::Gamma => Link::Log,
        }
    }

    pub fn links(&self) -> &'static [Link] {
        match self {
            Family::Gaussian => &[Link::Identity, Link::Log],
            Family::Poisson => &[Link::Log, Link::Identity],
            Family::Binomial => &[Link::Logit, Link::Log, Link::Probit, Link::Identity],
            Family::Gamma => &[Link::Log, Link::Inverse, Link::Identity],
            Family::Beta => &[Link::Logit],
        }
    }

    /// Whether the family has a free scale parameter.
    pub fn has_phi(&self) -> bool {
        matches!(self, Family::Gaussian | Family::Gamma | Family::Beta)
    }
}

impl Link {
    pub fn parse(s: &str) -> Result<Link> {
        Ok(match s {
            "identity" => Link::Identity,
            "log" => Link::Log,
            "logit" => Link::Logit,
            "probit" => Link::Probit,
            "inverse" => Link::Inverse,
            _ => return Err(GlmmError::InvalidArgument(format!("unknown link `{s}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
            Link::Logit => "logit",
            Link::Probit => "probit",
            Link::Inverse => "inverse",
        }
    }

    /// Inverse link `h^{-1}(eta)`.
    pub fn mean(&self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
            Link::Logit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            Link::Probit => norm_cdf(eta),
            Link::Inverse => 1.0 / eta,
        }
    }

    /// `d h^{-1}(eta) / d eta`.
    pub fn dmu_deta(&self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Log => eta.exp(),
            Link::Logit => {
                let mu = self.mean(eta);
                mu * (1.0 - mu)
            }
            Link::Probit => (-0.5 * eta * eta).exp() / (2.0 * PI).sqrt(),
            Link::Inverse => -1.0 / (eta * eta),
        }
    }

    /// Link function `h(mu)`.
    pub fn link(&self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Log => mu.ln(),
            Link::Logit => (mu / (1.0 - mu)).ln(),
            Link::Probit => crate::special::norm_quantile(mu),
            Link::Inverse => 1.0 / mu,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sums over a group of outcomes that determine the grouped log density.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SufficientStats {
    pub count: f64,
    pub sum_y: f64,
    pub sum_y2: f64,
    /// `sum log y`, finite only for positive outcomes.
    pub sum_log: f64,
    /// `sum log (1 - y)`, finite only for outcomes below one.
    pub sum_log1m: f64,
    /// `sum log y!`.
    pub sum_lgamma: f64,
}

impl SufficientStats {
    pub fn of(y: f64) -> Self {
        let mut s = Self::default();
        s.add(y);
        s
    }

    pub fn add(&mut self, y: f64) {
        self.count += 1.0;
        self.sum_y += y;
        self.sum_y2 += y * y;
        self.sum_log += if y > 0.0 { y.ln() } else { 0.0 };
        self.sum_log1m += if y < 1.0 { (1.0 - y).ln() } else { 0.0 };
        self.sum_lgamma += if y >= 0.0 { ln_gamma(y + 1.0) } else { 0.0 };
    }
}

/// A validated family/link pair.
///
/// The scale parameter `phi` is the standard deviation for the gaussian
/// family, the shape for gamma and the precision for beta; it is unused for
/// binomial and poisson.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyLink {
    pub family: Family,
    pub link: Link,
}

impl FamilyLink {
    pub fn new(family: Family, link: Link) -> Result<Self> {
        if !family.links().contains(&link) {
            return Err(GlmmError::InvalidLink {
                family: family.name().into(),
                link: link.name().into(),
            });
        }
        Ok(Self { family, link })
    }

    pub fn parse(family: &str, link: Option<&str>) -> Result<Self> {
        let fam = Family::parse(family)?;
        let link = match link {
            Some(l) => Link::parse(l)?,
            None => fam.default_link(),
        };
        Self::new(fam, link)
    }

    pub fn check_mean(&self, mu: f64) -> Result<()> {
        let ok = match self.family {
            Family::Gaussian => mu.is_finite(),
            Family::Binomial | Family::Beta => mu > 0.0 && mu < 1.0,
            Family::Poisson | Family::Gamma => mu > 0.0 && mu.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(GlmmError::MeanOutOfSupport {
                family: self.family.name().into(),
                mu,
            })
        }
    }

    pub fn mean(&self, eta: f64) -> f64 {
        self.link.mean(eta)
    }

    /// Conditional variance `Var(y | u)` at mean `mu`.
    pub fn variance(&self, mu: f64, phi: f64) -> f64 {
        match self.family {
            Family::Gaussian => phi * phi,
            Family::Binomial => mu * (1.0 - mu),
            Family::Poisson => mu,
            Family::Gamma => mu * mu / phi,
            Family::Beta => mu * (1.0 - mu) / (1.0 + phi),
        }
    }

    /// GLM iterated weight `(dmu/deta)^2 / Var(y | u)`.
    pub fn weight(&self, eta: f64, phi: f64) -> Result<f64> {
        let mu = self.mean(eta);
        self.check_mean(mu)?;
        let d = self.link.dmu_deta(eta);
        Ok(d * d / self.variance(mu, phi))
    }

    pub fn log_density(&self, y: f64, mu: f64, phi: f64) -> f64 {
        match self.family {
            Family::Gaussian => {
                let r = y - mu;
                -0.5 * (2.0 * PI * phi * phi).ln() - r * r / (2.0 * phi * phi)
            }
            Family::Binomial => {
                if y > 0.5 {
                    mu.ln()
                } else {
                    (1.0 - mu).ln()
                }
            }
            Family::Poisson => y * mu.ln() - mu - ln_gamma(y + 1.0),
            Family::Gamma => {
                phi * (phi / mu).ln() - ln_gamma(phi) + (phi - 1.0) * y.ln() - phi * y / mu
            }
            Family::Beta => {
                let a = mu * phi;
                let b = (1.0 - mu) * phi;
                ln_gamma(phi) - ln_gamma(a) - ln_gamma(b)
                    + (a - 1.0) * y.ln()
                    + (b - 1.0) * (1.0 - y).ln()
            }
        }
    }

    /// `d log f(y | mu) / d mu`.
    pub fn dlogf_dmu(&self, y: f64, mu: f64, phi: f64) -> f64 {
        match self.family {
            Family::Gaussian => (y - mu) / (phi * phi),
            Family::Binomial => y / mu - (1.0 - y) / (1.0 - mu),
            Family::Poisson => y / mu - 1.0,
            Family::Gamma => phi * (y - mu) / (mu * mu),
            Family::Beta => {
                let a = mu * phi;
                let b = (1.0 - mu) * phi;
                phi * (digamma(b) - digamma(a) + y.ln() - (1.0 - y).ln())
            }
        }
    }

    /// Score with respect to the linear predictor.
    pub fn score_eta(&self, y: f64, eta: f64, phi: f64) -> f64 {
        let mu = self.mean(eta);
        self.dlogf_dmu(y, mu, phi) * self.link.dmu_deta(eta)
    }

    /// `(log f(y | eta), d log f / d eta)`, or `None` when the mean leaves
    /// the support.
    pub fn log_density_score(&self, y: f64, eta: f64, phi: f64) -> Option<(f64, f64)> {
        self.grouped_log_density_score(&SufficientStats::of(y), eta, phi)
    }

    /// Log density and its derivative in `eta` summed over a group of
    /// observations that share the same linear predictor.
    pub fn grouped_log_density_score(&self, s: &SufficientStats, eta: f64, phi: f64) -> Option<(f64, f64)> {
        let k = s.count;
        if let (Family::Binomial, Link::Logit) = (self.family, self.link) {
            let e = (-eta.abs()).exp();
            let softplus = eta.max(0.0) + e.ln_1p();
            let mu = if eta >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
            return Some((s.sum_y * eta - k * softplus, s.sum_y - k * mu));
        }
        let mu = self.mean(eta);
        self.check_mean(mu).ok()?;
        let (l, d) = match self.family {
            Family::Gaussian => {
                let v = phi * phi;
                let rss = s.sum_y2 - 2.0 * mu * s.sum_y + k * mu * mu;
                (
                    -0.5 * k * (2.0 * PI * v).ln() - rss / (2.0 * v),
                    (s.sum_y - k * mu) / v,
                )
            }
            Family::Binomial => (
                s.sum_y * mu.ln() + (k - s.sum_y) * (1.0 - mu).ln(),
                s.sum_y / mu - (k - s.sum_y) / (1.0 - mu),
            ),
            Family::Poisson => (s.sum_y * mu.ln() - k * mu - s.sum_lgamma, s.sum_y / mu - k),
            Family::Gamma => (
                k * (phi * (phi / mu).ln() - ln_gamma(phi)) + (phi - 1.0) * s.sum_log - phi * s.sum_y / mu,
                phi * (s.sum_y - k * mu) / (mu * mu),
            ),
            Family::Beta => {
                let a = mu * phi;
                let b = (1.0 - mu) * phi;
                (
                    k * (ln_gamma(phi) - ln_gamma(a) - ln_gamma(b))
                        + (a - 1.0) * s.sum_log
                        + (b - 1.0) * s.sum_log1m,
                    phi * (k * (digamma(b) - digamma(a)) + s.sum_log - s.sum_log1m),
                )
            }
        };
        Some((l, d * self.link.dmu_deta(eta)))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, mu: f64, phi: f64) -> Result<f64> {
        self.check_mean(mu)?;
        let bad = |e: String| GlmmError::InvalidArgument(e);
        Ok(match self.family {
            Family::Gaussian => Normal::new(mu, phi)
                .map_err(|e| bad(e.to_string()))?
                .sample(rng),
            Family::Binomial => f64::from(u8::from(
                Bernoulli::new(mu).map_err(|e| bad(e.to_string()))?.sample(rng),
            )),
            Family::Poisson => Poisson::new(mu).map_err(|e| bad(e.to_string()))?.sample(rng),
            Family::Gamma => Gamma::new(phi, mu / phi)
                .map_err(|e| bad(e.to_string()))?
                .sample(rng),
            Family::Beta => {
                let x = Gamma::new(mu * phi, 1.0)
                    .map_err(|e| bad(e.to_string()))?
                    .sample(rng);
                let y = Gamma::new((1.0 - mu) * phi, 1.0)
                    .map_err(|e| bad(e.to_string()))?
                    .sample(rng);
                x / (x + y)
            }
        })
    }
}
