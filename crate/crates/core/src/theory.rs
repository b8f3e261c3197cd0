//! Numerical checks of the projected-regression identity and of the
//! balanced-error optimality of group-prior-adjusted aggregation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, ols_fit, pseudo_inverse, residualize, Matrix, DEFAULT_PINV_TOL};
use crate::probe::argmax;
use crate::projection::ProjectionOperator;

/// Linear regression `y = Cβ + γs + noise` with a projection defined by
/// `proxies` acting on the core features.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionScenario {
    pub core: Matrix<f64>,
    pub spurious: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: f64,
    pub noise: Vec<f64>,
    pub proxies: Matrix<f64>,
}

impl RegressionScenario {
    /// Random scenario with `n` samples, `d` core features and `k` proxy
    /// rows. The spurious feature is partly explained by the core features so
    /// that projection moves its weight.
    pub fn random(n: usize, d: usize, k: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let core = Matrix::from_fn(n, d, |_, _| normal());
        let mix: Vec<f64> = (0..d).map(|_| normal()).collect();
        let spurious: Vec<f64> = (0..n).map(|i| 0.5 * dot(core.row(i), &mix) + normal()).collect();
        let beta = (0..d).map(|_| normal()).collect();
        let gamma = normal();
        let noise = (0..n).map(|_| sigma * normal()).collect();
        let proxies = Matrix::from_fn(k, d, |_, _| normal());
        Self {
            core,
            spurious,
            beta,
            gamma,
            noise,
            proxies,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.core.shape();
        if n <= d + 1 {
            return Err(Error::DegenerateScenario(format!("need n > d + 1, got n={n}, d={d}")));
        }
        if self.spurious.len() != n || self.noise.len() != n || self.beta.len() != d {
            return Err(Error::DimensionMismatch("scenario vector lengths".into()));
        }
        if self.proxies.rows() > 0 && self.proxies.cols() != d {
            return Err(Error::DimensionMismatch(format!(
                "proxies have {} columns for {d} core features",
                self.proxies.cols()
            )));
        }
        Ok(())
    }

    pub fn response(&self) -> Vec<f64> {
        (0..self.core.rows())
            .map(|i| dot(self.core.row(i), &self.beta) + self.gamma * self.spurious[i] + self.noise[i])
            .collect()
    }
}

/// Which coefficients the identity is evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coefficients {
    /// OLS estimates from the full fit. Exact at any noise level.
    Fitted,
    /// The generating `β`, `γ`. Exact only without noise.
    True,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub gamma_full: f64,
    pub gamma_projected: f64,
    pub shift: f64,
    pub residual: f64,
}

/// Compares the spurious weight of the projected fit with the weight
/// predicted from the full model: `γ + r_sᵀ r_o / r_sᵀ r_s`, where `r_s` and
/// `r_o` are `s` and the projected-out contribution `C(I − Π)β` residualized
/// against the projected core features.
pub fn verify_prop1(scn: &RegressionScenario, coefficients: Coefficients) -> Result<Prop1Report> {
    scn.validate()?;
    let (n, d) = scn.core.shape();
    let y = scn.response();
    let pi = ProjectionOperator::from_proxies(&scn.proxies, DEFAULT_PINV_TOL);

    let full = ols_fit(&scn.core.with_column(&scn.spurious)?, &y)?;
    let (beta, gamma) = match coefficients {
        Coefficients::Fitted => (full[..d].to_vec(), full[d]),
        Coefficients::True => (scn.beta.clone(), scn.gamma),
    };

    let projected_core = pi.project_rows(&scn.core)?;
    let proj_fit = ols_fit(&projected_core.with_column(&scn.spurious)?, &y)?;
    let gamma_projected = proj_fit[d];

    // C_o = C(I − Π) = C − CΠ
    let removed = scn.core.sub(&projected_core)?;
    let y_o = removed.matvec(&beta)?;
    let pinv = pseudo_inverse(&projected_core, DEFAULT_PINV_TOL);
    let r_s = residualize(&projected_core, &pinv, &scn.spurious)?;
    let r_o = residualize(&projected_core, &pinv, &y_o)?;
    let ss = dot(&r_s, &r_s);
    if ss.sqrt() < 1e-10 {
        return Err(Error::DegenerateScenario(
            "spurious feature lies in the span of the projected core features".into(),
        ));
    }
    let shift = dot(&r_s, &r_o) / ss;
    debug_assert_eq!(y.len(), n);
    Ok(Prop1Report {
        gamma_full: gamma,
        gamma_projected,
        shift,
        residual: (gamma_projected - (gamma + shift)).abs(),
    })
}

/// Finite joint distribution over points and (class, attribute) groups.
/// Group `g` has class `g / attributes` and attribute `g % attributes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteGroupWorld {
    classes: usize,
    attributes: usize,
    /// `joint[x][g] = P(x, g)`.
    joint: Vec<Vec<f64>>,
}

impl DiscreteGroupWorld {
    pub fn new(classes: usize, attributes: usize, joint: Vec<Vec<f64>>) -> Result<Self> {
        let groups = classes * attributes;
        if classes < 2 || attributes == 0 || joint.is_empty() {
            return Err(Error::InvalidArgument("world needs ≥ 2 classes and ≥ 1 point".into()));
        }
        if joint.iter().any(|row| row.len() != groups) {
            return Err(Error::DimensionMismatch(format!("every point needs {groups} entries")));
        }
        if joint.iter().flatten().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument("probabilities must be finite and ≥ 0".into()));
        }
        let total: f64 = joint.iter().flatten().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("joint sums to {total}")));
        }
        let w = Self {
            classes,
            attributes,
            joint,
        };
        if w.group_priors().iter().any(|&p| p <= 0.0) {
            return Err(Error::InvalidArgument("every group needs positive mass".into()));
        }
        if w.point_masses().iter().any(|&p| p <= 0.0) {
            return Err(Error::InvalidArgument("every point needs positive mass".into()));
        }
        Ok(w)
    }

    /// Random world with `points` inputs; group masses are skewed so that
    /// group priors differ markedly.
    pub fn random(points: usize, classes: usize, attributes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = classes * attributes;
        let skew: Vec<f64> = (0..groups).map(|_| rng.random_range(0.05..1.0)).collect();
        let mut joint: Vec<Vec<f64>> = (0..points)
            .map(|_| {
                (0..groups)
                    .map(|g| skew[g] * rng.random_range(0.01..1.0f64).powi(2))
                    .collect()
            })
            .collect();
        let total: f64 = joint.iter().flatten().sum();
        joint.iter_mut().flatten().for_each(|p| *p /= total);
        Self::new(classes, attributes, joint).expect("random world is valid")
    }

    pub fn points(&self) -> usize {
        self.joint.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn groups(&self) -> usize {
        self.classes * self.attributes
    }

    pub fn class_of(&self, g: usize) -> usize {
        g / self.attributes
    }

    pub fn point_masses(&self) -> Vec<f64> {
        self.joint.iter().map(|r| r.iter().sum()).collect()
    }

    /// `P(g)`.
    pub fn group_priors(&self) -> Vec<f64> {
        (0..self.groups())
            .map(|g| self.joint.iter().map(|r| r[g]).sum())
            .collect()
    }

    /// `P(g | x)`.
    pub fn posterior(&self, x: usize) -> Vec<f64> {
        let m: f64 = self.joint[x].iter().sum();
        self.joint[x].iter().map(|p| p / m).collect()
    }

    /// Balanced group error of a classifier given as one class per point:
    /// the mean over groups of `P(f(x) ≠ y_g | g)`.
    pub fn balanced_error(&self, f: &[usize]) -> f64 {
        let priors = self.group_priors();
        let per_group: f64 = (0..self.groups())
            .map(|g| {
                let wrong: f64 = (0..self.points())
                    .filter(|&x| f[x] != self.class_of(g))
                    .map(|x| self.joint[x][g])
                    .sum();
                wrong / priors[g]
            })
            .sum();
        per_group / self.groups() as f64
    }

    /// The same quantity as an expectation over `x` of
    /// `Σ_g P(g|x)/P(g) · 1[y_g ≠ f(x)]`, divided by the group count.
    pub fn balanced_error_pointwise(&self, f: &[usize]) -> f64 {
        let priors = self.group_priors();
        let masses = self.point_masses();
        let total: f64 = (0..self.points())
            .map(|x| {
                let post = self.posterior(x);
                let inner: f64 = (0..self.groups())
                    .filter(|&g| self.class_of(g) != f[x])
                    .map(|g| post[g] / priors[g])
                    .sum();
                masses[x] * inner
            })
            .sum();
        total / self.groups() as f64
    }

    /// `E_x[Σ_g P(g|x)/P(g) · P(y ≠ f(x) | x)] / |G|`, with the class error
    /// factored out of the group sum.
    pub fn balanced_error_factored(&self, f: &[usize]) -> f64 {
        let priors = self.group_priors();
        let masses = self.point_masses();
        let total: f64 = (0..self.points())
            .map(|x| {
                let post = self.posterior(x);
                let weight: f64 = post.iter().zip(&priors).map(|(p, q)| p / q).sum();
                let err: f64 = (0..self.groups())
                    .filter(|&g| self.class_of(g) != f[x])
                    .map(|g| post[g])
                    .sum();
                masses[x] * weight * err
            })
            .sum();
        total / self.groups() as f64
    }

    /// Prior-adjusted aggregation: `argmax_y Σ_{g ∈ G(y)} P(g|x) / P(g)^τ`.
    pub fn adjusted_rule(&self, tau: f64) -> Vec<usize> {
        let priors = self.group_priors();
        (0..self.points())
            .map(|x| {
                let post = self.posterior(x);
                let scores: Vec<f64> = (0..self.classes)
                    .map(|y| {
                        (0..self.attributes)
                            .map(|a| {
                                let g = y * self.attributes + a;
                                post[g] / priors[g].powf(tau)
                            })
                            .sum()
                    })
                    .collect();
                argmax(&scores)
            })
            .collect()
    }

    /// `argmax_y Σ_{g ∈ G(y)} (ln P(g|x) − τ ln P(g))`: adjusted group logits
    /// summed per class.
    pub fn logit_sum_rule(&self, tau: f64) -> Vec<usize> {
        let priors = self.group_priors();
        (0..self.points())
            .map(|x| {
                let post = self.posterior(x);
                let scores: Vec<f64> = (0..self.classes)
                    .map(|y| {
                        (0..self.attributes)
                            .map(|a| {
                                let g = y * self.attributes + a;
                                post[g].ln() - tau * priors[g].ln()
                            })
                            .sum()
                    })
                    .collect();
                argmax(&scores)
            })
            .collect()
    }

    /// Smallest balanced error over all deterministic classifiers.
    pub fn min_balanced_error(&self) -> Result<(f64, Vec<usize>)> {
        let m = self.points();
        let k = self.classes;
        let total = (k as u128).checked_pow(m as u32).filter(|&t| t <= 1 << 12);
        let Some(total) = total else {
            return Err(Error::DomainTooLarge(format!("{k}^{m} classifiers")));
        };
        let mut best = (f64::INFINITY, Vec::new());
        let mut f = vec![0usize; m];
        for code in 0..total {
            let mut c = code;
            for v in f.iter_mut() {
                *v = (c % k as u128) as usize;
                c /= k as u128;
            }
            let e = self.balanced_error(&f);
            if e < best.0 {
                best = (e, f.clone());
            }
        }
        Ok(best)
    }
}

/// `|direct − pointwise|` balanced error of classifier `f`.
pub fn verify_lemma1(world: &DiscreteGroupWorld, f: &[usize]) -> Result<f64> {
    if f.len() != world.points() || f.iter().any(|&y| y >= world.classes()) {
        return Err(Error::InvalidArgument(
            "classifier table does not match the world".into(),
        ));
    }
    Ok((world.balanced_error(f) - world.balanced_error_pointwise(f)).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Report {
    pub min_balanced_error: f64,
    pub rule_balanced_error: f64,
    /// `(τ, balanced error of the τ-adjusted rule)`.
    pub tau_curve: Vec<(f64, f64)>,
    /// Balanced error of the unadjusted class-posterior rule.
    pub plain_balanced_error: f64,
    /// Balanced error of the summed-logit rule at `τ = 1`.
    pub logit_sum_balanced_error: f64,
}

impl Prop2Report {
    pub fn rule_is_optimal(&self, tol: f64) -> bool {
        (self.rule_balanced_error - self.min_balanced_error).abs() <= tol
    }

    /// Whether no τ on the grid beats τ = 1 (and τ = 1 is on the grid).
    pub fn tau_one_is_best(&self, tol: f64) -> bool {
        let Some(&(_, at_one)) = self.tau_curve.iter().find(|(t, _)| *t == 1.0) else {
            return false;
        };
        self.tau_curve.iter().all(|&(_, e)| at_one <= e + tol)
    }

    pub fn logit_sum_is_optimal(&self, tol: f64) -> bool {
        (self.logit_sum_balanced_error - self.min_balanced_error).abs() <= tol
    }
}

pub fn verify_prop2(world: &DiscreteGroupWorld, tau_grid: &[f64]) -> Result<Prop2Report> {
    if world.points() > 12 {
        return Err(Error::DomainTooLarge(format!("{} points (at most 12)", world.points())));
    }
    let (min_balanced_error, _) = world.min_balanced_error()?;
    let plain: Vec<usize> = (0..world.points())
        .map(|x| {
            let post = world.posterior(x);
            let by_class: Vec<f64> = (0..world.classes())
                .map(|y| {
                    (0..world.groups())
                        .filter(|&g| world.class_of(g) == y)
                        .map(|g| post[g])
                        .sum()
                })
                .collect();
            argmax(&by_class)
        })
        .collect();
    Ok(Prop2Report {
        min_balanced_error,
        rule_balanced_error: world.balanced_error(&world.adjusted_rule(1.0)),
        tau_curve: tau_grid
            .iter()
            .map(|&t| (t, world.balanced_error(&world.adjusted_rule(t))))
            .collect(),
        plain_balanced_error: world.balanced_error(&plain),
        logit_sum_balanced_error: world.balanced_error(&world.logit_sum_rule(1.0)),
    })
}

/// Hand-built four-point world with skewed group priors.
pub fn reference_world() -> DiscreteGroupWorld {
    let joint = vec![
        vec![0.30, 0.02, 0.01, 0.03],
        vec![0.05, 0.04, 0.02, 0.08],
        vec![0.10, 0.01, 0.03, 0.06],
        vec![0.02, 0.03, 0.12, 0.08],
    ];
    DiscreteGroupWorld::new(2, 2, joint).expect("reference world is valid")
}
