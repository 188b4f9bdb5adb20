//! M-step: per-user, per-level linear support vector regression of ratings on
//! experience-dependent biases and facet proportions. The exponentiated facet
//! weights become the sampler's asymmetric Dirichlet prior.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, RatingScale};
use crate::error::{Error, Result};
use crate::sampler::PosteriorEstimates;

/// Number of bias features preceding the facet proportions in a feature row.
pub const BIAS_FEATURES: usize = 3;

/// Weights are clamped to this magnitude before exponentiation so every
/// concentration stays positive and finite.
const MAX_LOG_ALPHA: f64 = 30.0;

/// Experience-dependent rating offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTables {
    pub levels: usize,
    /// Mean training rating per level.
    pub beta_g: Vec<f64>,
    /// `[user][level]` flattened.
    pub beta_u: Vec<f64>,
    /// `[item][level]` flattened.
    pub beta_i: Vec<f64>,
}

impl BiasTables {
    pub fn user(&self, u: usize, e: usize) -> f64 {
        self.beta_u.get(u * self.levels + e).copied().unwrap_or(0.0)
    }

    /// Unknown items have no offset.
    pub fn item(&self, i: Option<usize>, e: usize) -> f64 {
        i.and_then(|i| self.beta_i.get(i * self.levels + e).copied()).unwrap_or(0.0)
    }

    pub fn features(&self, user: usize, item: Option<usize>, level: usize) -> [f64; BIAS_FEATURES] {
        [self.beta_g[level], self.user(user, level), self.item(item, level)]
    }
}

/// Shrunk mean offsets per level. `doc_levels[p]` is the level of
/// `corpus.docs[p]`.
pub fn compute_biases(corpus: &Corpus, doc_levels: &[usize], levels: usize, shrinkage: f64) -> BiasTables {
    let global = if corpus.docs.is_empty() {
        0.0
    } else {
        corpus.docs.iter().map(|d| d.rating).sum::<f64>() / corpus.docs.len() as f64
    };
    let mut sum = vec![0.0; levels];
    let mut count = vec![0usize; levels];
    for (d, &e) in corpus.docs.iter().zip(doc_levels) {
        sum[e] += d.rating;
        count[e] += 1;
    }
    let beta_g: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { global } else { s / c as f64 })
        .collect();

    let shrunk = |n_entities: usize, key: &dyn Fn(usize) -> usize| {
        let mut s = vec![0.0; n_entities * levels];
        let mut c = vec![0usize; n_entities * levels];
        for (p, (d, &e)) in corpus.docs.iter().zip(doc_levels).enumerate() {
            let k = key(p) * levels + e;
            s[k] += d.rating - beta_g[e];
            c[k] += 1;
        }
        s.iter()
            .zip(&c)
            .map(|(&s, &c)| s / (c as f64 + shrinkage))
            .collect::<Vec<f64>>()
    };
    let beta_u = shrunk(corpus.num_users(), &|p| corpus.docs[p].user);
    let beta_i = shrunk(corpus.num_items(), &|p| corpus.docs[p].item);
    BiasTables {
        levels,
        beta_g,
        beta_u,
        beta_i,
    }
}

/// Squared epsilon-insensitive regression with an L2 penalty:
/// `min_w 1/2 |w|^2 + C sum_d max(0, |r_d - w.x_d| - eps)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrProblem {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub c: f64,
    pub epsilon: f64,
}

impl SvrProblem {
    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn objective(&self, w: &[f64]) -> f64 {
        let reg = 0.5 * w.iter().map(|x| x * x).sum::<f64>();
        let loss: f64 = self
            .features
            .iter()
            .zip(&self.targets)
            .map(|(x, &r)| {
                let excess = (r - dot(w, x)).abs() - self.epsilon;
                if excess > 0.0 {
                    excess * excess
                } else {
                    0.0
                }
            })
            .sum();
        reg + self.c * loss
    }

    fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::invalid("regression needs at least one row"));
        }
        if self.features.len() != self.targets.len() {
            return Err(Error::contract("feature rows and targets differ in count"));
        }
        if !(self.c > 0.0 && self.c.is_finite()) || !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::contract("need C > 0 and epsilon >= 0"));
        }
        let dim = self.dim();
        for (i, (x, r)) in self.features.iter().zip(&self.targets).enumerate() {
            if x.len() != dim {
                return Err(Error::invalid(format!("row {i} has {} features, expected {dim}", x.len())));
            }
            if !r.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite value in regression row {i}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvrSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve the primal problem with a generalized Newton method and backtracking
/// line search. The objective is strongly convex (modulus 1) and
/// continuously differentiable, so stopping at `|grad| <= tol (1 + |f|)`
/// bounds the optimality gap by `|grad|^2 / 2`.
pub fn train_svr(problem: &SvrProblem, tol: f64, max_iter: usize) -> Result<SvrSolution> {
    problem.validate()?;
    let dim = problem.dim();
    let two_c = 2.0 * problem.c;
    let mut w = vec![0.0; dim];
    let mut f = problem.objective(&w);
    let mut iterations = 0;
    while iterations < max_iter {
        let mut grad = DVector::from_column_slice(&w);
        let mut hess = DMatrix::<f64>::identity(dim, dim);
        for (x, &r) in problem.features.iter().zip(&problem.targets) {
            let res = r - dot(&w, x);
            let excess = res.abs() - problem.epsilon;
            if excess > 0.0 {
                let coef = two_c * excess * res.signum();
                let xv = DVector::from_column_slice(x);
                grad.axpy(-coef, &xv, 1.0);
                hess.ger(two_c, &xv, &xv, 1.0);
            }
        }
        let gnorm = grad.norm();
        if gnorm <= tol * (1.0 + f.abs()) {
            break;
        }
        let chol = hess
            .cholesky()
            .ok_or_else(|| Error::Numerical("SVR Hessian not positive definite".into()))?;
        let step = -chol.solve(&grad);
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-20 {
            let trial: Vec<f64> = w.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
            let ft = problem.objective(&trial);
            if ft <= f + 1e-4 * t * slope {
                w = trial;
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // no representable descent left
            break;
        }
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("SVR produced non-finite weights".into()));
    }
    Ok(SvrSolution {
        weights: w,
        objective: f,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MStepConfig {
    pub c: f64,
    pub epsilon: f64,
    /// Minimum documents a user needs at a level to get an own regressor.
    pub min_docs: usize,
    pub shrinkage: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MStepConfig {
    fn default() -> Self {
        MStepConfig {
            c: 1.0,
            epsilon: 0.1,
            min_docs: 3,
            shrinkage: 10.0,
            tol: 1e-6,
            max_iter: 10_000,
        }
    }
}

/// Weight vectors of one user, one per level, each `3 + Z` long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRegressor {
    pub weights: Vec<Vec<f64>>,
    /// Whether the level's weights were fitted on the user's own documents
    /// (otherwise they are a copy of the community regressor).
    pub own: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regressors {
    pub users: Vec<UserRegressor>,
    /// Per level, fitted on every user's documents at that level (the pooled
    /// regressor for levels without documents).
    pub community: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
}

impl Regressors {
    pub fn weights(&self, user: Option<usize>, level: usize) -> &[f64] {
        match user.and_then(|u| self.users.get(u)) {
            Some(r) => &r.weights[level],
            None => &self.community[level],
        }
    }

    /// Number of learned per-user parameters, `U * E * (3 + Z)`.
    pub fn parameter_count(&self) -> usize {
        self.users
            .iter()
            .map(|r| r.weights.iter().map(Vec::len).sum::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct MStepOutput {
    pub regressors: Regressors,
    /// Unscaled `exp(weight)` prior, `[u][e][z]` flattened.
    pub alpha: Vec<f64>,
}

/// Feature row `<beta_g(e), beta_u(e), beta_i(e), facet proportions>`.
pub fn feature_row(biases: &BiasTables, user: usize, item: Option<usize>, level: usize, props: &[f64]) -> Vec<f64> {
    let mut row = biases.features(user, item, level).to_vec();
    row.extend_from_slice(props);
    row
}

/// Fit every user's regressors on the current level assignments and turn the
/// facet weights into the next prior.
pub fn m_step(
    corpus: &Corpus,
    doc_levels: &[usize],
    estimates: &PosteriorEstimates,
    biases: &BiasTables,
    config: &MStepConfig,
) -> Result<MStepOutput> {
    if corpus.docs.is_empty() {
        return Err(Error::invalid("M-step on an empty corpus"));
    }
    let (levels, facets) = (estimates.levels, estimates.facets);
    let rows: Vec<Vec<f64>> = corpus
        .docs
        .par_iter()
        .zip(doc_levels.par_iter())
        .map(|(d, &e)| {
            let props = estimates.facet_proportions(&d.tokens, e)?;
            Ok(feature_row(biases, d.user, Some(d.item), e, &props))
        })
        .collect::<Result<_>>()?;
    let solve = |idx: &[usize]| -> Result<Vec<f64>> {
        let problem = SvrProblem {
            features: idx.iter().map(|&p| rows[p].clone()).collect(),
            targets: idx.iter().map(|&p| corpus.docs[p].rating).collect(),
            c: config.c,
            epsilon: config.epsilon,
        };
        Ok(train_svr(&problem, config.tol, config.max_iter)?.weights)
    };

    let all: Vec<usize> = (0..corpus.docs.len()).collect();
    let pooled = solve(&all)?;
    let community: Vec<Vec<f64>> = (0..levels)
        .into_par_iter()
        .map(|e| {
            let idx: Vec<usize> = all.iter().copied().filter(|&p| doc_levels[p] == e).collect();
            if idx.is_empty() {
                Ok(pooled.clone())
            } else {
                solve(&idx)
            }
        })
        .collect::<Result<_>>()?;

    let users: Vec<UserRegressor> = corpus
        .per_user_docs
        .par_iter()
        .map(|docs| {
            let mut weights = Vec::with_capacity(levels);
            let mut own = Vec::with_capacity(levels);
            for e in 0..levels {
                let idx: Vec<usize> = docs.iter().copied().filter(|&p| doc_levels[p] == e).collect();
                if idx.len() >= config.min_docs.max(1) {
                    weights.push(solve(&idx)?);
                    own.push(true);
                } else {
                    weights.push(community[e].clone());
                    own.push(false);
                }
            }
            Ok(UserRegressor { weights, own })
        })
        .collect::<Result<_>>()?;
    debug!(
        "m-step: {} of {} user-level regressors fitted on own data",
        users.iter().flat_map(|r| &r.own).filter(|&&o| o).count(),
        users.len() * levels
    );

    let mut alpha = Vec::with_capacity(users.len() * levels * facets);
    for r in &users {
        for w in &r.weights {
            alpha.extend(
                w[BIAS_FEATURES..]
                    .iter()
                    .map(|x| x.clamp(-MAX_LOG_ALPHA, MAX_LOG_ALPHA).exp()),
            );
        }
    }
    Ok(MStepOutput {
        regressors: Regressors {
            users,
            community,
            pooled,
        },
        alpha,
    })
}

/// Rating prediction `w . <beta_g(e), beta_u(e), beta_i(e), props>`, clamped
/// to the rating scale.
pub fn predict(weights: &[f64], biases: &BiasTables, user: usize, item: Option<usize>, level: usize, props: &[f64], scale: &RatingScale) -> f64 {
    let row = feature_row(biases, user, item, level, props);
    scale.clamp(dot(weights, &row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusConfig, RawReview};

    fn corpus(ratings: &[(&str, &str, f64)]) -> Corpus {
        let reviews: Vec<RawReview> = ratings
            .iter()
            .enumerate()
            .map(|(t, (u, i, r))| RawReview {
                user_id: u.to_string(),
                item_id: i.to_string(),
                timestamp: t as i64,
                rating: *r,
                text: "malt hops".into(),
            })
            .collect();
        Corpus::build(
            &reviews,
            &CorpusConfig {
                min_user_reviews: 1,
                min_word_count: 1,
                ..CorpusConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn bias_of_single_doc() {
        let c = corpus(&[("a", "x", 4.0)]);
        let b = compute_biases(&c, &[0], 2, 10.0);
        assert_eq!(b.beta_g[0], 4.0);
        // empty level falls back to the global mean
        assert_eq!(b.beta_g[1], 4.0);
        assert_eq!(b.user(0, 1), 0.0);
        assert_eq!(b.user(0, 0), 0.0);
    }

    #[test]
    fn bias_mean_and_shrinkage() {
        let c = corpus(&[("a", "x", 3.0), ("b", "y", 5.0)]);
        let b = compute_biases(&c, &[0, 0], 1, 10.0);
        assert_eq!(b.beta_g[0], 4.0);
        assert!((b.user(1, 0) - 1.0 / 11.0).abs() < 1e-12);
        assert!((b.item(Some(0), 0) + 1.0 / 11.0).abs() < 1e-12);
        assert_eq!(b.item(None, 0), 0.0);
    }

    #[test]
    fn epsilon_tube_gives_zero_weights() {
        let p = SvrProblem {
            features: vec![vec![1.0]],
            targets: vec![1.0],
            c: 1.0,
            epsilon: 1.0,
        };
        let s = train_svr(&p, 1e-10, 100).unwrap();
        assert_eq!(s.weights, vec![0.0]);
        assert_eq!(s.objective, 0.0);
    }

    #[test]
    fn large_c_interpolates_consistent_data() {
        let p = SvrProblem {
            features: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            targets: vec![2.0, -1.0, 1.0],
            c: 1e6,
            epsilon: 0.0,
        };
        let s = train_svr(&p, 1e-12, 100).unwrap();
        assert!((s.weights[0] - 2.0).abs() < 1e-3);
        assert!((s.weights[1] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_rows() {
        let p = SvrProblem {
            features: vec![vec![1.0], vec![f64::NAN]],
            targets: vec![1.0, 2.0],
            c: 1.0,
            epsilon: 0.0,
        };
        let err = train_svr(&p, 1e-6, 10).unwrap_err();
        assert!(err.to_string().contains("row 1"));
        let empty = SvrProblem {
            features: vec![],
            targets: vec![],
            c: 1.0,
            epsilon: 0.0,
        };
        assert!(train_svr(&empty, 1e-6, 10).is_err());
    }

    #[test]
    fn more_iterations_never_hurt() {
        let p = SvrProblem {
            features: vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.2], vec![-1.0, 1.0]],
            targets: vec![1.0, 4.0, -2.0, 0.5],
            c: 3.0,
            epsilon: 0.2,
        };
        let mut last = f64::INFINITY;
        for iters in [1, 2, 4, 8, 16] {
            let s = train_svr(&p, 0.0, iters).unwrap();
            assert!(s.objective <= last);
            last = s.objective;
        }
    }

    #[test]
    fn predict_uses_bias_features() {
        let b = BiasTables {
            levels: 1,
            beta_g: vec![4.2],
            beta_u: vec![0.3],
            beta_i: vec![0.1],
        };
        let scale = RatingScale::default();
        let mut w = vec![0.0; 5];
        assert_eq!(predict(&w, &b, 0, Some(0), 0, &[0.2, 0.3], &scale), 1.0);
        w[0] = 1.0;
        assert!((predict(&w, &b, 0, Some(0), 0, &[0.2, 0.3], &scale) - 4.2).abs() < 1e-12);
        w[3] = 100.0;
        assert_eq!(predict(&w, &b, 0, Some(0), 0, &[0.2, 0.3], &scale), 5.0);
    }

    fn estimates(levels: usize, facets: usize, users: usize) -> PosteriorEstimates {
        PosteriorEstimates {
            users,
            levels,
            facets,
            vocab: 2,
            theta: vec![1.0 / facets as f64; users * levels * facets],
            phi: vec![0.5; levels * facets * 2],
            concentration: vec![1.0; users * levels * facets],
        }
    }

    #[test]
    fn m_step_shapes_and_alpha() {
        let c = corpus(&[
            ("a", "x", 4.0),
            ("a", "y", 4.5),
            ("a", "x", 3.5),
            ("a", "z", 4.0),
            ("b", "x", 2.0),
        ]);
        let levels = vec![0, 0, 0, 1, 0];
        let est = estimates(2, 3, 2);
        let b = compute_biases(&c, &levels, 2, 10.0);
        let out = m_step(&c, &levels, &est, &b, &MStepConfig::default()).unwrap();
        assert_eq!(out.regressors.parameter_count(), (2 * 3 + 3 * 2) * 2);
        assert_eq!(out.alpha.len(), 2 * 2 * 3);
        assert!(out.alpha.iter().all(|&a| a > 0.0 && a.is_finite()));
        assert!(out.regressors.users[0].own[0]);
        assert!(!out.regressors.users[0].own[1]);
        assert!(!out.regressors.users[1].own[0]);
        assert_eq!(out.regressors.users[1].weights[0], out.regressors.community[0]);
        // alpha is exp of the facet weights
        let w = &out.regressors.users[0].weights[0];
        for z in 0..3 {
            assert!((out.alpha[z] - w[BIAS_FEATURES + z].exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_of_weights() {
        let w: [f64; 2] = [2f64.ln(), 0.0];
        let alpha: Vec<f64> = w.iter().map(|x| x.exp()).collect();
        assert!((alpha[0] - 2.0).abs() < 1e-12);
        assert_eq!(alpha[1], 1.0);
    }
}
