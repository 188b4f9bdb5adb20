//! Comparison models without text: a biased matrix factorization, and one
//! parameter set per experience level with monotone level sequences per
//! user, fitted by alternating gradient epochs and exact reassignment.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{check_schema, Corpus, RatingScale};
use crate::error::{Error, Result};

pub const LFM_SCHEMA: &str = "lfm_v1";
pub const EXP_LFM_SCHEMA: &str = "explfm_v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfmConfig {
    pub rank: usize,
    pub lr: f64,
    pub reg: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Keep user offsets at zero.
    pub freeze_user_bias: bool,
    /// Keep item offsets at zero.
    pub freeze_item_bias: bool,
}

impl Default for LfmConfig {
    fn default() -> Self {
        LfmConfig {
            rank: 5,
            lr: 0.005,
            reg: 0.02,
            epochs: 50,
            seed: 0,
            freeze_user_bias: false,
            freeze_item_bias: false,
        }
    }
}

impl LfmConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.reg >= 0.0 && self.reg.is_finite()) {
            return Err(Error::invalid("need lr > 0 and reg >= 0"));
        }
        Ok(())
    }
}

/// `r = beta_g + beta_u + beta_i + <p_u, q_i>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfmParams {
    pub rank: usize,
    pub beta_g: f64,
    pub beta_u: Vec<f64>,
    pub beta_i: Vec<f64>,
    /// `[user][k]` flattened.
    pub user_factors: Vec<f64>,
    /// `[item][k]` flattened.
    pub item_factors: Vec<f64>,
}

impl LfmParams {
    pub fn zeros(users: usize, items: usize, rank: usize) -> LfmParams {
        LfmParams {
            rank,
            beta_g: 0.0,
            beta_u: vec![0.0; users],
            beta_i: vec![0.0; items],
            user_factors: vec![0.0; users * rank],
            item_factors: vec![0.0; items * rank],
        }
    }

    fn random(users: usize, items: usize, rank: usize, rng: &mut ChaCha8Rng) -> LfmParams {
        let normal = Normal::new(0.0, 0.1).expect("valid sd");
        let mut p = LfmParams::zeros(users, items, rank);
        p.user_factors.iter_mut().for_each(|x| *x = normal.sample(rng));
        p.item_factors.iter_mut().for_each(|x| *x = normal.sample(rng));
        p
    }

    /// Unclamped model output; unknown users or items contribute nothing.
    pub fn raw(&self, user: Option<usize>, item: Option<usize>) -> f64 {
        let mut r = self.beta_g;
        if let Some(u) = user.filter(|&u| u < self.beta_u.len()) {
            r += self.beta_u[u];
        }
        if let Some(i) = item.filter(|&i| i < self.beta_i.len()) {
            r += self.beta_i[i];
        }
        if let (Some(u), Some(i)) = (
            user.filter(|&u| u < self.beta_u.len()),
            item.filter(|&i| i < self.beta_i.len()),
        ) {
            let k = self.rank;
            r += self.user_factors[u * k..(u + 1) * k]
                .iter()
                .zip(&self.item_factors[i * k..(i + 1) * k])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        r
    }

    fn is_finite(&self) -> bool {
        self.beta_g.is_finite()
            && self.beta_u.iter().chain(&self.beta_i).all(|x| x.is_finite())
            && self.user_factors.iter().chain(&self.item_factors).all(|x| x.is_finite())
    }

    /// One pass of stochastic gradient descent over `docs` (corpus positions)
    /// in the given order.
    fn sgd_epoch(&mut self, corpus: &Corpus, order: &[usize], cfg: &LfmConfig) {
        let k = self.rank;
        for &p in order {
            let d = &corpus.docs[p];
            let (u, i) = (d.user, d.item);
            let err = d.rating - self.raw(Some(u), Some(i));
            self.beta_g += cfg.lr * err;
            if !cfg.freeze_user_bias {
                self.beta_u[u] += cfg.lr * (err - cfg.reg * self.beta_u[u]);
            }
            if !cfg.freeze_item_bias {
                self.beta_i[i] += cfg.lr * (err - cfg.reg * self.beta_i[i]);
            }
            for f in 0..k {
                let pu = self.user_factors[u * k + f];
                let qi = self.item_factors[i * k + f];
                self.user_factors[u * k + f] += cfg.lr * (err * qi - cfg.reg * pu);
                self.item_factors[i * k + f] += cfg.lr * (err * pu - cfg.reg * qi);
            }
        }
    }

    fn squared_error(&self, corpus: &Corpus, docs: &[usize]) -> f64 {
        docs.iter()
            .map(|&p| {
                let d = &corpus.docs[p];
                (d.rating - self.raw(Some(d.user), Some(d.item))).powi(2)
            })
            .sum()
    }
}

pub fn predict_lfm(params: &LfmParams, user: Option<usize>, item: Option<usize>, scale: &RatingScale) -> f64 {
    scale.clamp(params.raw(user, item))
}

fn positions(corpus: &Corpus, doc_ids: &[usize]) -> Result<Vec<usize>> {
    if doc_ids.is_empty() {
        return Err(Error::invalid("no training documents"));
    }
    doc_ids
        .iter()
        .map(|&id| {
            corpus
                .position_of(id)
                .ok_or_else(|| Error::invalid(format!("document {id} not in corpus")))
        })
        .collect()
}

fn divergence_error() -> Error {
    Error::Numerical("gradient descent diverged (non-finite parameters); try a smaller learning rate".into())
}

/// Fitted LFM with its training MSE after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfmModel {
    pub schema: String,
    pub config: LfmConfig,
    pub params: LfmParams,
    pub epoch_mse: Vec<f64>,
}

pub fn train_lfm(corpus: &Corpus, train_docs: &[usize], config: &LfmConfig) -> Result<LfmModel> {
    config.validate()?;
    let docs = positions(corpus, train_docs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = LfmParams::random(corpus.num_users(), corpus.num_items(), config.rank, &mut rng);
    let mut order = docs.clone();
    let mut epoch_mse = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        params.sgd_epoch(corpus, &order, config);
        if !params.is_finite() {
            return Err(divergence_error());
        }
        let mse = params.squared_error(corpus, &docs) / docs.len() as f64;
        debug!("lfm epoch {}: training mse {mse:.6}", epoch + 1);
        epoch_mse.push(mse);
    }
    Ok(LfmModel {
        schema: LFM_SCHEMA.to_string(),
        config: config.clone(),
        params,
        epoch_mse,
    })
}

impl LfmModel {
    pub fn predict(&self, user: Option<usize>, item: Option<usize>, scale: &RatingScale) -> f64 {
        predict_lfm(&self.params, user, item, scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpLfmConfig {
    pub levels: usize,
    pub lfm: LfmConfig,
    pub outer_iters: usize,
    /// Gradient epochs per level per outer iteration.
    pub epochs_per_iter: usize,
}

impl Default for ExpLfmConfig {
    fn default() -> Self {
        ExpLfmConfig {
            levels: 5,
            lfm: LfmConfig::default(),
            outer_iters: 10,
            epochs_per_iter: 5,
        }
    }
}

/// Minimum-cost non-decreasing level sequence for `costs[i][e]`, the cost of
/// putting document `i` at level `e`. Ties go to lower levels.
pub fn dp_monotone(costs: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = costs.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let levels = costs[0].len();
    // best[i][e]: minimal cost of docs 0..=i with doc i at level e
    let mut best = vec![vec![0.0; levels]; n];
    let mut from = vec![vec![0usize; levels]; n];
    best[0].clone_from(&costs[0]);
    for i in 1..n {
        let (mut run_min, mut run_arg) = (f64::INFINITY, 0);
        for e in 0..levels {
            if best[i - 1][e] < run_min {
                run_min = best[i - 1][e];
                run_arg = e;
            }
            best[i][e] = run_min + costs[i][e];
            from[i][e] = run_arg;
        }
    }
    let (mut e, total) = best[n - 1]
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (e, &c)| if c < acc.1 { (e, c) } else { acc });
    let mut seq = vec![0; n];
    for i in (0..n).rev() {
        seq[i] = e;
        e = from[i][e];
    }
    (seq, total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpLfmModel {
    pub schema: String,
    pub config: ExpLfmConfig,
    pub levels: Vec<LfmParams>,
    /// Level of every training document, by corpus position.
    pub doc_level: Vec<Option<usize>>,
    /// Level of each user's most recent training document (0 without any).
    pub last_level: Vec<usize>,
    /// Total squared training error after each outer iteration.
    pub objective: Vec<f64>,
}

impl ExpLfmModel {
    pub fn predict(&self, user: Option<usize>, item: Option<usize>, scale: &RatingScale) -> f64 {
        let level = user.and_then(|u| self.last_level.get(u).copied()).unwrap_or(0);
        predict_lfm(&self.levels[level], user, item, scale)
    }
}

fn objective(params: &[LfmParams], corpus: &Corpus, docs: &[usize], level: &[Option<usize>]) -> f64 {
    docs.iter()
        .map(|&p| {
            let d = &corpus.docs[p];
            let e = level[p].expect("training document has a level");
            (d.rating - params[e].raw(Some(d.user), Some(d.item))).powi(2)
        })
        .sum()
}

pub fn train_exp_lfm(corpus: &Corpus, train_docs: &[usize], config: &ExpLfmConfig) -> Result<ExpLfmModel> {
    config.lfm.validate()?;
    if config.levels == 0 {
        return Err(Error::invalid("need at least one level"));
    }
    let docs = positions(corpus, train_docs)?;
    let mut doc_level: Vec<Option<usize>> = vec![None; corpus.docs.len()];
    let in_train: std::collections::BTreeSet<usize> = docs.iter().copied().collect();
    let timelines: Vec<Vec<usize>> = corpus
        .per_user_docs
        .iter()
        .map(|ds| ds.iter().copied().filter(|p| in_train.contains(p)).collect())
        .collect();

    if config.levels == 1 {
        let lfm = train_lfm(corpus, train_docs, &config.lfm)?;
        for &p in &docs {
            doc_level[p] = Some(0);
        }
        let total = lfm.params.squared_error(corpus, &docs);
        return Ok(ExpLfmModel {
            schema: EXP_LFM_SCHEMA.to_string(),
            config: config.clone(),
            levels: vec![lfm.params],
            doc_level,
            last_level: vec![0; corpus.num_users()],
            objective: vec![total],
        });
    }

    let levels = config.levels;
    for tl in &timelines {
        for (i, &p) in tl.iter().enumerate() {
            doc_level[p] = Some(i * levels / tl.len());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.lfm.seed);
    let mut params: Vec<LfmParams> = (0..levels)
        .map(|_| LfmParams::random(corpus.num_users(), corpus.num_items(), config.lfm.rank, &mut rng))
        .collect();
    let mut history = Vec::with_capacity(config.outer_iters);
    let mut current = objective(&params, corpus, &docs, &doc_level);
    for it in 0..config.outer_iters {
        // (a) gradient epochs per level, kept only if they lower the objective
        let snapshot = params.clone();
        for (e, level_params) in params.iter_mut().enumerate() {
            let mut order: Vec<usize> = docs.iter().copied().filter(|&p| doc_level[p] == Some(e)).collect();
            for _ in 0..config.epochs_per_iter {
                order.shuffle(&mut rng);
                level_params.sgd_epoch(corpus, &order, &config.lfm);
            }
            if !level_params.is_finite() {
                return Err(divergence_error());
            }
        }
        let after_sgd = objective(&params, corpus, &docs, &doc_level);
        if after_sgd > current {
            params = snapshot;
        }
        // (b) exact monotone reassignment per user
        let assignments: Vec<Vec<usize>> = timelines
            .par_iter()
            .map(|tl| {
                let costs: Vec<Vec<f64>> = tl
                    .iter()
                    .map(|&p| {
                        let d = &corpus.docs[p];
                        params
                            .iter()
                            .map(|lp| (d.rating - lp.raw(Some(d.user), Some(d.item))).powi(2))
                            .collect()
                    })
                    .collect();
                dp_monotone(&costs).0
            })
            .collect();
        for (tl, seq) in timelines.iter().zip(&assignments) {
            for (&p, &e) in tl.iter().zip(seq) {
                doc_level[p] = Some(e);
            }
        }
        current = objective(&params, corpus, &docs, &doc_level);
        debug!("exp-lfm outer iteration {}: objective {current:.6}", it + 1);
        history.push(current);
    }
    let last_level = timelines
        .iter()
        .map(|tl| tl.last().and_then(|&p| doc_level[p]).unwrap_or(0))
        .collect();
    Ok(ExpLfmModel {
        schema: EXP_LFM_SCHEMA.to_string(),
        config: config.clone(),
        levels: params,
        doc_level,
        last_level,
        objective: history,
    })
}

macro_rules! json_io {
    ($ty:ty, $schema:expr) => {
        impl $ty {
            pub fn save(&self, path: &Path) -> Result<()> {
                serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
                Ok(())
            }

            pub fn load(path: &Path) -> Result<Self> {
                let m: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
                check_schema($schema, &m.schema)?;
                Ok(m)
            }
        }
    };
}

json_io!(LfmModel, LFM_SCHEMA);
json_io!(ExpLfmModel, EXP_LFM_SCHEMA);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusConfig, RawReview};

    fn corpus(n_users: usize, per_user: usize) -> Corpus {
        let mut reviews = Vec::new();
        for u in 0..n_users {
            for t in 0..per_user {
                reviews.push(RawReview {
                    user_id: format!("u{u}"),
                    item_id: format!("i{}", (u * 7 + t * 3) % 11),
                    timestamp: t as i64,
                    rating: 1.0 + ((u * 3 + t * 5) % 9) as f64 / 2.0,
                    text: "malt hops".into(),
                });
            }
        }
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

    fn all_ids(c: &Corpus) -> Vec<usize> {
        c.docs.iter().map(|d| d.doc_id).collect()
    }

    #[test]
    fn global_bias_converges_to_mean() {
        let c = corpus(10, 20);
        let mean = c.docs.iter().map(|d| d.rating).sum::<f64>() / c.docs.len() as f64;
        let cfg = LfmConfig {
            rank: 0,
            reg: 0.0,
            // constant-step SGD hovers within O(lr) of the optimum
            lr: 1e-4,
            epochs: 3000,
            freeze_user_bias: true,
            freeze_item_bias: true,
            ..LfmConfig::default()
        };
        let m = train_lfm(&c, &all_ids(&c), &cfg).unwrap();
        assert!((m.params.beta_g - mean).abs() < 1e-3, "{} vs {mean}", m.params.beta_g);
        assert!(m.params.beta_u.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn training_error_decreases() {
        let c = corpus(10, 20);
        let m = train_lfm(&c, &all_ids(&c), &LfmConfig::default()).unwrap();
        assert_eq!(m.epoch_mse.len(), 50);
        assert!(m.epoch_mse[49] <= m.epoch_mse[0]);
    }

    #[test]
    fn divergence_is_reported() {
        let c = corpus(4, 10);
        let cfg = LfmConfig {
            lr: 1e3,
            ..LfmConfig::default()
        };
        let err = train_lfm(&c, &all_ids(&c), &cfg).unwrap_err();
        assert!(err.to_string().contains("smaller learning rate"));
    }

    #[test]
    fn prediction_formula() {
        let scale = RatingScale::new(-100.0, 100.0).unwrap();
        let mut p = LfmParams::zeros(1, 1, 2);
        assert_eq!(predict_lfm(&p, Some(0), Some(0), &scale), 0.0);
        p.beta_g = 4.0;
        assert_eq!(predict_lfm(&p, Some(0), Some(0), &scale), 4.0);
        p.beta_g = 0.0;
        p.user_factors = vec![1.0, 2.0];
        p.item_factors = vec![3.0, 4.0];
        assert_eq!(predict_lfm(&p, Some(0), Some(0), &scale), 11.0);
        assert_eq!(predict_lfm(&p, Some(0), Some(0), &RatingScale::default()), 5.0);
        p.beta_g = 3.5;
        assert_eq!(predict_lfm(&p, None, None, &scale), 3.5);
    }

    #[test]
    fn dp_example() {
        let costs = vec![vec![0.0, 9.0], vec![9.0, 0.0], vec![9.0, 0.0]];
        assert_eq!(dp_monotone(&costs), (vec![0, 1, 1], 0.0));
        assert_eq!(dp_monotone(&[]), (vec![], 0.0));
    }

    #[test]
    fn single_level_reduces_to_lfm() {
        let c = corpus(6, 12);
        let ids = all_ids(&c);
        let cfg = ExpLfmConfig {
            levels: 1,
            ..ExpLfmConfig::default()
        };
        let exp = train_exp_lfm(&c, &ids, &cfg).unwrap();
        let plain = train_lfm(&c, &ids, &cfg.lfm).unwrap();
        assert_eq!(exp.levels[0], plain.params);
    }

    #[test]
    fn objective_never_increases_and_sequences_monotone() {
        let c = corpus(8, 15);
        let ids = all_ids(&c);
        let cfg = ExpLfmConfig {
            levels: 3,
            outer_iters: 6,
            ..ExpLfmConfig::default()
        };
        let m = train_exp_lfm(&c, &ids, &cfg).unwrap();
        assert!(m.objective.windows(2).all(|w| w[1] <= w[0] + 1e-6), "{:?}", m.objective);
        for docs in &c.per_user_docs {
            let seq: Vec<usize> = docs.iter().map(|&p| m.doc_level[p].unwrap()).collect();
            assert!(seq.windows(2).all(|w| w[0] <= w[1]));
            assert!(seq.iter().all(|&e| e < 3));
        }
    }
}
