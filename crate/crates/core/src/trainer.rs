//! Stochastic EM: Gibbs sweeps alternate with M-steps whose facet weights
//! become the next prior, with the prior scale chosen on validation data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{check_schema, Corpus, RawReview, Split};
use crate::error::{Error, Result};
use crate::regression::{compute_biases, m_step, predict, BiasTables, MStepConfig, Regressors};
use crate::sampler::{LevelInit, ModelState, PosteriorEstimates, SamplerConfig};

pub const MODEL_SCHEMA: &str = "model_v1";
pub const RUN_SCHEMA: &str = "emrun_v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sampler: SamplerConfig,
    pub em_iterations: usize,
    pub sweeps_per_em: usize,
    pub burn_in_sweeps: usize,
    pub rho_grid: Vec<f64>,
    pub mstep: MStepConfig,
    pub fold_in_iters: usize,
    /// Staircase exponents tried as starting points. Each start is burned
    /// in separately and the one with the highest collapsed log probability
    /// is kept. Empty means a single start from `sampler.level_init`.
    pub init_exponents: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sampler: SamplerConfig::default(),
            em_iterations: 10,
            sweeps_per_em: 20,
            burn_in_sweeps: 50,
            rho_grid: vec![1e0, 1e1, 1e2, 1e3, 1e4, 1e5],
            mstep: MStepConfig::default(),
            fold_in_iters: 20,
            init_exponents: vec![1.0, 2.0, 3.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.sweeps_per_em == 0 || self.fold_in_iters == 0 {
            return Err(Error::invalid("sweeps_per_em and fold_in_iters must be at least 1"));
        }
        if self.rho_grid.is_empty() || self.rho_grid.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::invalid("rho_grid must be a non-empty list of positive values"));
        }
        if self.init_exponents.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::invalid("init_exponents must be positive"));
        }
        if !(self.mstep.c > 0.0) || !(self.mstep.epsilon >= 0.0) {
            return Err(Error::invalid("SVR needs C > 0 and epsilon >= 0"));
        }
        Ok(())
    }
}

/// One line of the training log. `validation_mse` is present on evaluation
/// rows (`sweep == 0` before each M-step, and the final row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub em_iter: usize,
    pub sweep: usize,
    pub validation_mse: Option<f64>,
    pub docs_moved: usize,
    pub rho: f64,
}

pub fn write_log_csv<W: Write>(out: W, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Documents a model is evaluated on, taken from the corpus it was trained
/// from (same user, item and word indices).
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub corpus: &'a Corpus,
    pub doc_ids: &'a [usize],
}

/// Everything needed to predict: posterior snapshot, biases and regressors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub estimates: PosteriorEstimates,
    pub biases: BiasTables,
    pub regressors: Regressors,
    /// Most recent level per user; 0 for users without training documents.
    pub last_level: Vec<usize>,
    pub fold_in_iters: usize,
    pub seed: u64,
}

impl Predictor {
    fn fit(train: &Corpus, state: &ModelState, config: &TrainConfig) -> Result<(Predictor, Vec<f64>)> {
        let estimates = state.estimate_posteriors();
        let biases = compute_biases(train, &state.e_assign, state.levels(), config.mstep.shrinkage);
        let out = m_step(train, &state.e_assign, &estimates, &biases, &config.mstep)?;
        Ok((
            Predictor {
                estimates,
                biases,
                regressors: out.regressors,
                last_level: state.last_levels(train),
                fold_in_iters: config.fold_in_iters,
                seed: config.sampler.seed,
            },
            out.alpha,
        ))
    }

    /// Level used for a user with no identity: the most common last level.
    fn anonymous_level(&self) -> usize {
        let mut counts = vec![0usize; self.estimates.levels];
        for &e in &self.last_level {
            counts[e] += 1;
        }
        counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map_or(0, |(e, _)| e)
    }

    /// Rating for `user` (None: no background user either) on `item` at the
    /// user's most recent level. With tokens, facet features come from
    /// folding the document in; without, from the user's `theta`.
    pub fn predict(&self, user: Option<usize>, item: Option<usize>, tokens: Option<&[u32]>, salt: u64, scale: &crate::corpus::RatingScale) -> Result<f64> {
        let est = &self.estimates;
        let (u, level) = match user {
            Some(u) => (u, self.last_level[u]),
            None => {
                let level = self.anonymous_level();
                let props = self.mean_expected_proportions(level);
                let weights = &self.regressors.community[level];
                let mut row = vec![self.biases.beta_g[level], 0.0, 0.0];
                row.extend(props);
                let raw: f64 = weights.iter().zip(&row).map(|(w, x)| w * x).sum();
                return Ok(scale.clamp(raw));
            }
        };
        let props = match tokens {
            Some(tokens) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                est.fold_in(tokens, u, level, self.fold_in_iters, &mut rng)?.proportions
            }
            None => est.expected_facet_proportions(u, level),
        };
        Ok(predict(
            self.regressors.weights(Some(u), level),
            &self.biases,
            u,
            item,
            level,
            &props,
            scale,
        ))
    }

    fn mean_expected_proportions(&self, level: usize) -> Vec<f64> {
        let est = &self.estimates;
        let users: Vec<usize> = (0..est.users).filter(|&u| self.last_level[u] == level).collect();
        let mut mean = vec![0.0; est.facets];
        for &u in &users {
            for (m, p) in mean.iter_mut().zip(est.expected_facet_proportions(u, level)) {
                *m += p / users.len() as f64;
            }
        }
        mean
    }

    /// Mean squared error over documents of the corpus the model was
    /// trained from, folding in each document's text.
    pub fn evaluate(&self, set: EvalSet<'_>) -> Result<f64> {
        if set.doc_ids.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty document set"));
        }
        let errors: Vec<f64> = set
            .doc_ids
            .par_iter()
            .map(|&id| {
                let p = set
                    .corpus
                    .position_of(id)
                    .ok_or_else(|| Error::invalid(format!("document {id} not in corpus")))?;
                let d = &set.corpus.docs[p];
                let pred = self.predict(Some(d.user), Some(d.item), Some(&d.tokens), id as u64, &set.corpus.scale)?;
                Ok((d.rating - pred).powi(2))
            })
            .collect::<Result<_>>()?;
        Ok(errors.iter().sum::<f64>() / errors.len() as f64)
    }
}

/// Burn in from every configured start with the symmetric prior and keep
/// the state with the highest collapsed log probability.
pub fn burn_in(train: &Corpus, config: &TrainConfig) -> Result<(ModelState, Vec<LogRow>)> {
    let starts: Vec<SamplerConfig> = if config.init_exponents.is_empty() || config.sampler.levels == 1 {
        vec![config.sampler.clone()]
    } else {
        config
            .init_exponents
            .iter()
            .map(|&exponent| SamplerConfig {
                level_init: LevelInit::Staircase { exponent },
                ..config.sampler.clone()
            })
            .collect()
    };
    let runs: Vec<(ModelState, Vec<LogRow>, f64)> = starts
        .par_iter()
        .map(|sc| {
            let mut state = ModelState::init(train, sc)?;
            let mut log = Vec::with_capacity(config.burn_in_sweeps);
            for s in 0..config.burn_in_sweeps {
                let stats = state.sweep(train)?;
                log.push(LogRow {
                    em_iter: 0,
                    sweep: s + 1,
                    validation_mse: None,
                    docs_moved: stats.docs_moved,
                    rho: f64::NAN,
                });
            }
            let score = state.log_joint();
            debug!("burn-in from {:?}: log joint {score:.3}", sc.level_init);
            Ok((state, log, score))
        })
        .collect::<Result<_>>()?;
    let best = runs
        .into_iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.2.total_cmp(&b.2).then(j.cmp(i)))
        .map(|(_, r)| r)
        .ok_or_else(|| Error::Internal("no burn-in start".into()))?;
    Ok((best.0, best.1))
}

/// A resumable EM schedule at one prior scale. Serializing it mid-run and
/// resuming reproduces the uninterrupted run exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmRun {
    pub schema: String,
    pub config: TrainConfig,
    pub rho: f64,
    pub state: ModelState,
    /// M-steps completed.
    pub em_iter: usize,
    /// Sweeps completed since the last M-step.
    pub sweeps_in_iter: usize,
    pub log: Vec<LogRow>,
}

impl EmRun {
    pub fn new(burned: ModelState, burn_log: &[LogRow], rho: f64, config: &TrainConfig) -> EmRun {
        EmRun {
            schema: RUN_SCHEMA.to_string(),
            config: config.clone(),
            rho,
            state: burned,
            em_iter: 0,
            sweeps_in_iter: 0,
            log: burn_log.iter().map(|r| LogRow { rho, ..r.clone() }).collect(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.em_iter == self.config.em_iterations
            && (self.em_iter == 0 || self.sweeps_in_iter == self.config.sweeps_per_em)
    }

    /// Perform the next M-step or sweep. Returns false once the schedule is
    /// complete.
    pub fn step(&mut self, train: &Corpus, validation: Option<EvalSet<'_>>) -> Result<bool> {
        if self.is_finished() {
            return Ok(false);
        }
        if self.em_iter == 0 || self.sweeps_in_iter == self.config.sweeps_per_em {
            let (predictor, alpha) = Predictor::fit(train, &self.state, &self.config)?;
            let mse = validation.map(|v| predictor.evaluate(v)).transpose()?;
            self.log.push(LogRow {
                em_iter: self.em_iter,
                sweep: 0,
                validation_mse: mse,
                docs_moved: 0,
                rho: self.rho,
            });
            self.state.set_prior(alpha, self.rho)?;
            self.em_iter += 1;
            self.sweeps_in_iter = 0;
        } else {
            let stats = self.state.sweep(train)?;
            self.sweeps_in_iter += 1;
            self.log.push(LogRow {
                em_iter: self.em_iter,
                sweep: self.sweeps_in_iter,
                validation_mse: None,
                docs_moved: stats.docs_moved,
                rho: self.rho,
            });
        }
        Ok(true)
    }

    pub fn run_to_end(&mut self, train: &Corpus, validation: Option<EvalSet<'_>>) -> Result<()> {
        while self.step(train, validation)? {}
        Ok(())
    }

    /// Fit the final regressors on the finished state and evaluate them.
    pub fn finish(mut self, train: &Corpus, validation: Option<EvalSet<'_>>) -> Result<(Predictor, ModelState, Vec<LogRow>, Option<f64>)> {
        if !self.is_finished() {
            return Err(Error::contract("EM schedule not finished"));
        }
        let (predictor, _) = Predictor::fit(train, &self.state, &self.config)?;
        let mse = validation.map(|v| predictor.evaluate(v)).transpose()?;
        self.log.push(LogRow {
            em_iter: self.em_iter,
            sweep: self.sweeps_in_iter,
            validation_mse: mse,
            docs_moved: 0,
            rho: self.rho,
        });
        Ok((predictor, self.state, self.log, mse))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EmRun> {
        let run: EmRun = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        check_schema(RUN_SCHEMA, &run.schema)?;
        check_schema(crate::sampler::STATE_SCHEMA, &run.state.schema)?;
        Ok(run)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub schema: String,
    pub config: TrainConfig,
    pub rho: f64,
    pub validation_mse: Option<f64>,
    /// Final validation MSE per grid value, in grid order.
    pub rho_scores: Vec<(f64, Option<f64>)>,
    /// Corpus indices (users, items, vocabulary) without documents.
    pub index: Corpus,
    pub predictor: Predictor,
    /// Level sequence of each user's training documents in time order.
    pub trajectories: Vec<Vec<usize>>,
    /// Training tokens per `[level][facet]`.
    pub level_facet_counts: Vec<u32>,
    pub log: Vec<LogRow>,
}

/// Full training run on the given split; the corpus is the one the split
/// was drawn from.
pub fn run_em(corpus: &Corpus, split: &Split, config: &TrainConfig) -> Result<TrainedModel> {
    run_em_detailed(corpus, split, config).map(|(m, _, _)| m)
}

/// As [`run_em`], also returning the selected final sampler state and the
/// training corpus it indexes.
pub fn run_em_detailed(corpus: &Corpus, split: &Split, config: &TrainConfig) -> Result<(TrainedModel, ModelState, Corpus)> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if split.validation.is_empty() && config.rho_grid.len() > 1 {
        return Err(Error::invalid(
            "tuning rho over more than one value needs a validation set (use a validation fraction > 0 or a single rho)",
        ));
    }
    let train = corpus.subset(&split.train);
    if train.docs.is_empty() {
        return Err(Error::invalid("no training document found in the corpus"));
    }
    info!(
        "training on {} documents, {} users, {} words, E={} Z={}",
        train.docs.len(),
        train.num_users(),
        train.vocab_size(),
        config.sampler.levels,
        config.sampler.facets
    );
    let validation = (!split.validation.is_empty()).then_some(EvalSet {
        corpus,
        doc_ids: &split.validation,
    });
    let (burned, burn_log) = burn_in(&train, config)?;
    let results: Vec<(f64, Predictor, ModelState, Vec<LogRow>, Option<f64>)> = config
        .rho_grid
        .par_iter()
        .map(|&rho| {
            let mut run = EmRun::new(burned.clone(), &burn_log, rho, config);
            run.run_to_end(&train, validation)?;
            let (predictor, state, log, mse) = run.finish(&train, validation)?;
            info!("rho {rho}: validation mse {mse:?}");
            Ok((rho, predictor, state, log, mse))
        })
        .collect::<Result<_>>()?;
    let rho_scores: Vec<(f64, Option<f64>)> = results.iter().map(|r| (r.0, r.4)).collect();
    let best = results
        .into_iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| {
            let (x, y) = (a.4.unwrap_or(f64::INFINITY), b.4.unwrap_or(f64::INFINITY));
            x.total_cmp(&y).then(i.cmp(j))
        })
        .map(|(_, r)| r)
        .ok_or_else(|| Error::Internal("empty rho grid".into()))?;
    let (rho, predictor, state, log, mse) = best;
    let mut index = corpus.subset(&[]);
    index.d_avg = train.d_avg;
    let model = TrainedModel {
        schema: MODEL_SCHEMA.to_string(),
        config: config.clone(),
        rho,
        validation_mse: mse,
        rho_scores,
        index,
        predictor,
        trajectories: state.trajectories(&train),
        level_facet_counts: state.n_ez.clone(),
        log,
    };
    Ok((model, state, train))
}

impl TrainedModel {
    pub fn levels(&self) -> usize {
        self.predictor.estimates.levels
    }

    pub fn facets(&self) -> usize {
        self.predictor.estimates.facets
    }

    pub fn last_level(&self) -> &[usize] {
        &self.predictor.last_level
    }

    /// Predict a rating from raw identifiers. Unknown users map to the
    /// background user (or, without one, to community parameters) and
    /// unknown items get no item offset. Text is folded in when given.
    pub fn predict_rating(&self, user_id: &str, item_id: &str, text: Option<&str>) -> Result<f64> {
        let user = self.index.user_index(user_id);
        let item = self.index.item_index(item_id);
        let tokens = text.map(|t| self.index.encode(t));
        let salt = fnv1a(user_id.as_bytes()) ^ fnv1a(item_id.as_bytes()).rotate_left(17);
        self.predictor.predict(user, item, tokens.as_deref(), salt, &self.index.scale)
    }

    /// Mean squared error over documents of a corpus sharing this model's
    /// indices (the corpus the training split was drawn from).
    pub fn evaluate_mse(&self, corpus: &Corpus, doc_ids: &[usize]) -> Result<f64> {
        if corpus.vocab != self.index.vocab || corpus.users != self.index.users || corpus.items != self.index.items {
            return Err(Error::invalid("corpus indices differ from the model's; evaluate raw reviews instead"));
        }
        self.predictor.evaluate(EvalSet { corpus, doc_ids })
    }

    /// Mean squared error over raw reviews, folding in their text.
    pub fn evaluate_reviews(&self, reviews: &[RawReview]) -> Result<f64> {
        if reviews.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty review set"));
        }
        let errors: Vec<f64> = reviews
            .par_iter()
            .map(|r| Ok((r.rating - self.predict_rating(&r.user_id, &r.item_id, Some(&r.text))?).powi(2)))
            .collect::<Result<_>>()?;
        Ok(errors.iter().sum::<f64>() / errors.len() as f64)
    }

    pub fn parameter_count(&self) -> usize {
        self.predictor.regressors.parameter_count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainedModel> {
        let m: TrainedModel = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        check_schema(MODEL_SCHEMA, &m.schema)?;
        Ok(m)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Restrict each user's training documents to the first `ceil(q * n)` in
/// time order and retrain; validation and test are unchanged.
pub fn truncate_at_past_level(corpus: &Corpus, split: &Split, config: &TrainConfig, quantile: f64) -> Result<TrainedModel> {
    let truncated = truncate_split(corpus, split, quantile)?;
    run_em(corpus, &truncated, config)
}

pub fn truncate_split(corpus: &Corpus, split: &Split, quantile: f64) -> Result<Split> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::contract(format!("quantile {quantile} outside (0, 1]")));
    }
    let train = corpus.subset(&split.train);
    let mut kept = Vec::with_capacity(split.train.len());
    for docs in &train.per_user_docs {
        let n = (quantile * docs.len() as f64).ceil() as usize;
        kept.extend(docs[..n.min(docs.len())].iter().map(|&p| train.docs[p].doc_id));
    }
    kept.sort_unstable();
    Ok(Split {
        train: kept,
        ..split.clone()
    })
}
