//! Collapsed Gibbs sampler for the joint experience / facet model.
//!
//! Each document carries one experience level and each token one facet.
//! Levels follow a left-to-right chain per user: a document either stays at
//! the level of the user's previous document or moves one level up. Levels
//! are 0-based throughout the library; level 0 is the entry level.
//!
//! A sweep visits users in index order and their documents in time order.
//! For every document it first picks the experience level maximizing the
//! collapsed conditional (transition term times the facet and word terms of
//! all its tokens), then redraws every token's facet from its collapsed
//! conditional given that level.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{check_schema, Corpus};
use crate::error::{Error, Result};

pub const STATE_SCHEMA: &str = "state_v1";

/// How document levels are set before the first sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LevelInit {
    /// Every document starts at the entry level.
    FirstLevel,
    /// Document `i` of a user with `n` documents starts at the highest level
    /// `k` with `i / n >= (k / E)^exponent`, capped to unit steps. Exponent 1
    /// cuts the timeline into equal slices; larger exponents shorten the
    /// early levels.
    Staircase { exponent: f64 },
}

impl Default for LevelInit {
    fn default() -> Self {
        LevelInit::Staircase { exponent: 1.0 }
    }
}

/// How a document's tokens enter the level score of E-step 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LevelScoring {
    /// Each token keeps its current facet label under every candidate level.
    #[default]
    FixedFacets,
    /// Each token's facet is summed out under the candidate level's tables.
    MarginalFacets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of experience levels `E`.
    pub levels: usize,
    /// Number of facets `Z`.
    pub facets: usize,
    /// Symmetric Dirichlet prior on facet-word distributions.
    pub delta: f64,
    /// Weight of the time gap (in days) in the activity prior.
    pub lambda: f64,
    /// Scale applied to learned Dirichlet concentrations.
    pub rho: f64,
    pub seed: u64,
    pub level_init: LevelInit,
    pub level_scoring: LevelScoring,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            levels: 5,
            facets: 20,
            delta: 0.01,
            lambda: 1e-6,
            rho: 1.0,
            seed: 0,
            level_init: LevelInit::default(),
            level_scoring: LevelScoring::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.facets == 0 {
            return Err(Error::invalid("need at least one level and one facet"));
        }
        if let LevelInit::Staircase { exponent } = self.level_init {
            if !(exponent > 0.0 && exponent.is_finite()) {
                return Err(Error::invalid(format!("staircase exponent must be > 0, got {exponent}")));
            }
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid(format!("rho must be > 0, got {}", self.rho)));
        }
        Ok(())
    }

    /// Symmetric concentration used before any supervision is available.
    pub fn initial_alpha(&self) -> f64 {
        50.0 / self.facets as f64
    }
}

/// User activity prior `D_u / (D_u + D_avg) + lambda * dt`.
pub fn activity_prior(user_docs: usize, d_avg: f64, lambda: f64, dt_days: i64) -> f64 {
    let d_u = user_docs as f64;
    d_u / (d_u + d_avg) + lambda * dt_days as f64
}

/// Collapsed transition probability of moving from `from` to `to`, given
/// transition counts (row-major `E x E`) that exclude the document being
/// resampled.
pub fn transition_score(from: usize, to: usize, gamma: f64, m_trans: &[u32], levels: usize) -> Result<f64> {
    if from >= levels || !(to == from || to == from + 1) || to >= levels {
        return Err(Error::contract(format!(
            "transition {from} -> {to} outside the stay-or-advance candidates (E = {levels})"
        )));
    }
    let row = &m_trans[from * levels..(from + 1) * levels];
    let row_total: u32 = row.iter().sum();
    let stay = if from == to { 1.0 } else { 0.0 };
    Ok((row[to] as f64 + stay + gamma) / (row_total as f64 + stay + levels as f64 * gamma))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepStats {
    pub docs_moved: usize,
    pub tokens_reassigned: usize,
}

/// Count tables derived from assignments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counts {
    pub n_uez: Vec<u32>,
    pub n_ezv: Vec<u32>,
    pub n_ez: Vec<u32>,
    pub n_ue: Vec<u32>,
    pub m_trans: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelState {
    pub schema: String,
    pub config: SamplerConfig,
    pub users: usize,
    pub vocab: usize,
    /// Facet of every token, indexed by document position in the corpus.
    pub z_assign: Vec<Vec<u32>>,
    /// Experience level of every document.
    pub e_assign: Vec<usize>,
    pub n_uez: Vec<u32>,
    pub n_ezv: Vec<u32>,
    pub n_ez: Vec<u32>,
    pub n_ue: Vec<u32>,
    /// Level transitions over all users, row = from, column = to. Every
    /// user's first document counts as a transition from the entry level.
    pub m_trans: Vec<u32>,
    /// Unscaled prior `alpha[u, e, z]`; the concentration in use is
    /// `alpha_scale * alpha`.
    pub alpha: Vec<f64>,
    pub alpha_scale: f64,
    alpha_sum: Vec<f64>,
    rng: ChaCha8Rng,
}

impl ModelState {
    pub fn levels(&self) -> usize {
        self.config.levels
    }

    pub fn facets(&self) -> usize {
        self.config.facets
    }

    #[inline]
    fn uez(&self, u: usize, e: usize, z: usize) -> usize {
        (u * self.config.levels + e) * self.config.facets + z
    }

    #[inline]
    fn ezv(&self, e: usize, z: usize, v: usize) -> usize {
        (e * self.config.facets + z) * self.vocab + v
    }

    #[inline]
    fn ez(&self, e: usize, z: usize) -> usize {
        e * self.config.facets + z
    }

    #[inline]
    fn ue(&self, u: usize, e: usize) -> usize {
        u * self.config.levels + e
    }

    /// Dirichlet concentration on facet `z` for user `u` at level `e`.
    #[inline]
    pub fn concentration(&self, u: usize, e: usize, z: usize) -> f64 {
        self.alpha_scale * self.alpha[self.uez(u, e, z)]
    }

    /// Random facets, levels per `config.level_init`, symmetric prior `50 / Z`.
    pub fn init(corpus: &Corpus, config: &SamplerConfig) -> Result<ModelState> {
        config.validate()?;
        if corpus.docs.is_empty() {
            return Err(Error::invalid("cannot initialize a sampler on an empty corpus"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let z_assign: Vec<Vec<u32>> = corpus
            .docs
            .iter()
            .map(|d| {
                d.tokens
                    .iter()
                    .map(|_| rng.random_range(0..config.facets) as u32)
                    .collect()
            })
            .collect();
        let mut e_assign = vec![0usize; corpus.docs.len()];
        if let LevelInit::Staircase { exponent } = config.level_init {
            for docs in &corpus.per_user_docs {
                let n = docs.len() as f64;
                let mut prev = 0usize;
                for (i, &p) in docs.iter().enumerate() {
                    let frac = i as f64 / n;
                    let mut target = 0;
                    while target + 1 < config.levels
                        && frac >= ((target + 1) as f64 / config.levels as f64).powf(exponent)
                    {
                        target += 1;
                    }
                    let level = if i == 0 { 0 } else { target.min(prev + 1) };
                    e_assign[p] = level;
                    prev = level;
                }
            }
        }
        Self::from_parts(corpus, config, z_assign, e_assign, rng)
    }

    /// Build a state from explicit assignments (e.g. a planted ground truth).
    pub fn from_assignments(
        corpus: &Corpus,
        config: &SamplerConfig,
        z_assign: Vec<Vec<u32>>,
        e_assign: Vec<usize>,
    ) -> Result<ModelState> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::from_parts(corpus, config, z_assign, e_assign, rng)
    }

    fn from_parts(
        corpus: &Corpus,
        config: &SamplerConfig,
        z_assign: Vec<Vec<u32>>,
        e_assign: Vec<usize>,
        rng: ChaCha8Rng,
    ) -> Result<ModelState> {
        if z_assign.len() != corpus.docs.len() || e_assign.len() != corpus.docs.len() {
            return Err(Error::invalid("assignment shape does not match the corpus"));
        }
        for (d, zs) in corpus.docs.iter().zip(&z_assign) {
            if zs.len() != d.tokens.len() || zs.iter().any(|&z| z as usize >= config.facets) {
                return Err(Error::invalid(format!("bad facet assignment for document {}", d.doc_id)));
            }
        }
        if e_assign.iter().any(|&e| e >= config.levels) {
            return Err(Error::invalid("experience level out of range"));
        }
        let (u, e, z) = (corpus.num_users(), config.levels, config.facets);
        let mut state = ModelState {
            schema: STATE_SCHEMA.to_string(),
            config: config.clone(),
            users: u,
            vocab: corpus.vocab_size(),
            z_assign,
            e_assign,
            n_uez: Vec::new(),
            n_ezv: Vec::new(),
            n_ez: Vec::new(),
            n_ue: Vec::new(),
            m_trans: Vec::new(),
            alpha: vec![config.initial_alpha(); u * e * z],
            alpha_scale: 1.0,
            alpha_sum: Vec::new(),
            rng,
        };
        state.check_chains(corpus)?;
        let counts = state.recount(corpus);
        state.n_uez = counts.n_uez;
        state.n_ezv = counts.n_ezv;
        state.n_ez = counts.n_ez;
        state.n_ue = counts.n_ue;
        state.m_trans = counts.m_trans;
        state.refresh_alpha_sums();
        Ok(state)
    }

    /// Install a new prior. `alpha` is indexed `[u][e][z]` flattened.
    pub fn set_prior(&mut self, alpha: Vec<f64>, scale: f64) -> Result<()> {
        if alpha.len() != self.alpha.len() {
            return Err(Error::contract("prior table has the wrong size"));
        }
        if alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) || !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Numerical("Dirichlet concentrations must be positive and finite".into()));
        }
        self.alpha = alpha;
        self.alpha_scale = scale;
        self.refresh_alpha_sums();
        Ok(())
    }

    fn refresh_alpha_sums(&mut self) {
        let (u, e, z) = (self.users, self.config.levels, self.config.facets);
        let mut sums = vec![0.0; u * e];
        for (ue, s) in sums.iter_mut().enumerate() {
            *s = self.alpha_scale * self.alpha[ue * z..(ue + 1) * z].iter().sum::<f64>();
        }
        self.alpha_sum = sums;
    }

    /// Recompute every count table from the current assignments.
    pub fn recount(&self, corpus: &Corpus) -> Counts {
        let (u_n, e_n, z_n, v_n) = (self.users, self.config.levels, self.config.facets, self.vocab);
        let mut c = Counts {
            n_uez: vec![0; u_n * e_n * z_n],
            n_ezv: vec![0; e_n * z_n * v_n],
            n_ez: vec![0; e_n * z_n],
            n_ue: vec![0; u_n * e_n],
            m_trans: vec![0; e_n * e_n],
        };
        for (p, d) in corpus.docs.iter().enumerate() {
            let e = self.e_assign[p];
            for (&w, &z) in d.tokens.iter().zip(&self.z_assign[p]) {
                let z = z as usize;
                c.n_uez[self.uez(d.user, e, z)] += 1;
                c.n_ezv[self.ezv(e, z, w as usize)] += 1;
                c.n_ez[self.ez(e, z)] += 1;
                c.n_ue[self.ue(d.user, e)] += 1;
            }
        }
        for docs in &corpus.per_user_docs {
            let mut prev = 0usize;
            for &p in docs {
                let e = self.e_assign[p];
                c.m_trans[prev * e_n + e] += 1;
                prev = e;
            }
        }
        c
    }

    /// Verify the monotone unit-step chain of every user.
    pub fn check_chains(&self, corpus: &Corpus) -> Result<()> {
        for (u, docs) in corpus.per_user_docs.iter().enumerate() {
            let mut prev: Option<usize> = None;
            for &p in docs {
                let e = self.e_assign[p];
                let ok = match prev {
                    None => e == 0,
                    Some(q) => e == q || e == q + 1,
                };
                if !ok {
                    return Err(Error::Internal(format!(
                        "user {u}: level sequence breaks the stay-or-advance chain at document {}",
                        corpus.docs[p].doc_id
                    )));
                }
                prev = Some(e);
            }
        }
        Ok(())
    }

    /// Full consistency audit: chains plus incremental tables against a recount.
    pub fn check_consistency(&self, corpus: &Corpus) -> Result<()> {
        self.check_chains(corpus)?;
        let c = self.recount(corpus);
        if c.n_uez != self.n_uez
            || c.n_ezv != self.n_ezv
            || c.n_ez != self.n_ez
            || c.n_ue != self.n_ue
            || c.m_trans != self.m_trans
        {
            return Err(Error::Internal("incremental count tables diverged from assignments".into()));
        }
        Ok(())
    }

    /// Collapsed log probability of the facet and word assignments,
    /// `ln p(Z | E) + ln p(W | Z, E)`, with `Theta` and `Phi` integrated out.
    pub fn log_joint(&self) -> f64 {
        use libm::lgamma;
        let (levels, facets) = (self.config.levels, self.config.facets);
        let mut total = 0.0;
        for u in 0..self.users {
            for e in 0..levels {
                let ue = self.ue(u, e);
                total += lgamma(self.alpha_sum[ue]) - lgamma(self.n_ue[ue] as f64 + self.alpha_sum[ue]);
                for z in 0..facets {
                    let a = self.concentration(u, e, z);
                    total += lgamma(self.n_uez[self.uez(u, e, z)] as f64 + a) - lgamma(a);
                }
            }
        }
        let delta = self.config.delta;
        let v_delta = self.vocab as f64 * delta;
        for e in 0..levels {
            for z in 0..facets {
                let ez = self.ez(e, z);
                total += lgamma(v_delta) - lgamma(self.n_ez[ez] as f64 + v_delta);
                for v in 0..self.vocab {
                    let n = self.n_ezv[self.ezv(e, z, v)];
                    if n > 0 {
                        total += lgamma(n as f64 + delta) - lgamma(delta);
                    }
                }
            }
        }
        total
    }

    pub fn total_tokens(&self) -> u64 {
        self.n_ez.iter().map(|&c| c as u64).sum()
    }

    fn add_tokens(&mut self, corpus: &Corpus, p: usize, e: usize) {
        let d = &corpus.docs[p];
        let ue = self.ue(d.user, e);
        for (j, &w) in d.tokens.iter().enumerate() {
            let z = self.z_assign[p][j] as usize;
            let (a, b, c) = (self.uez(d.user, e, z), self.ezv(e, z, w as usize), self.ez(e, z));
            self.n_uez[a] += 1;
            self.n_ezv[b] += 1;
            self.n_ez[c] += 1;
        }
        self.n_ue[ue] += d.tokens.len() as u32;
    }

    fn remove_tokens(&mut self, corpus: &Corpus, p: usize, e: usize) {
        let d = &corpus.docs[p];
        let ue = self.ue(d.user, e);
        for (j, &w) in d.tokens.iter().enumerate() {
            let z = self.z_assign[p][j] as usize;
            let (a, b, c) = (self.uez(d.user, e, z), self.ezv(e, z, w as usize), self.ez(e, z));
            self.n_uez[a] -= 1;
            self.n_ezv[b] -= 1;
            self.n_ez[c] -= 1;
        }
        self.n_ue[ue] -= d.tokens.len() as u32;
    }

    /// Log collapsed score of every admissible level for the document at
    /// position `idx` of `user`'s timeline. The document's tokens and its
    /// incoming/outgoing transitions must already be removed from the counts.
    fn level_scores(&self, corpus: &Corpus, user: usize, idx: usize) -> Result<Vec<(usize, f64)>> {
        let timeline = &corpus.per_user_docs[user];
        let p = timeline[idx];
        let levels = self.config.levels;
        if idx == 0 {
            return Ok(vec![(0, 0.0)]);
        }
        let prev_pos = timeline[idx - 1];
        let prev = self.e_assign[prev_pos];
        let next = timeline.get(idx + 1).map(|&q| self.e_assign[q]);
        let candidates: Vec<usize> = [prev, prev + 1]
            .into_iter()
            .filter(|&c| c < levels)
            .filter(|&c| next.is_none_or(|n| c + 1 >= n && c <= n))
            .collect();
        if candidates.is_empty() {
            return Err(Error::Internal(format!(
                "no admissible level for document {} (prev {prev}, next {next:?})",
                corpus.docs[p].doc_id
            )));
        }
        let doc = &corpus.docs[p];
        let dt = doc.time - corpus.docs[prev_pos].time;
        let gamma = activity_prior(timeline.len(), corpus.d_avg, self.config.lambda, dt);
        let delta = self.config.delta;
        let v_delta = self.vocab as f64 * delta;
        let mut out = Vec::with_capacity(candidates.len());
        for e in candidates {
            let mut score = transition_score(prev, e, gamma, &self.m_trans, levels)?.ln();
            let ue = self.ue(user, e);
            let facet_norm = (self.n_ue[ue] as f64 + self.alpha_sum[ue]).ln();
            match self.config.level_scoring {
                LevelScoring::FixedFacets => {
                    for (&w, &z) in doc.tokens.iter().zip(&self.z_assign[p]) {
                        let z = z as usize;
                        let theta = self.n_uez[self.uez(user, e, z)] as f64 + self.concentration(user, e, z);
                        let phi = self.n_ezv[self.ezv(e, z, w as usize)] as f64 + delta;
                        let phi_norm = self.n_ez[self.ez(e, z)] as f64 + v_delta;
                        score += theta.ln() - facet_norm + phi.ln() - phi_norm.ln();
                    }
                }
                LevelScoring::MarginalFacets => {
                    let facets = self.config.facets;
                    let theta: Vec<f64> = (0..facets)
                        .map(|z| {
                            (self.n_uez[self.uez(user, e, z)] as f64 + self.concentration(user, e, z))
                                / (self.n_ez[self.ez(e, z)] as f64 + v_delta)
                        })
                        .collect();
                    for &w in &doc.tokens {
                        let mix: f64 = (0..facets)
                            .map(|z| theta[z] * (self.n_ezv[self.ezv(e, z, w as usize)] as f64 + delta))
                            .sum();
                        score += mix.ln() - facet_norm;
                    }
                }
            }
            out.push((e, score));
        }
        Ok(out)
    }

    /// Log scores of the admissible levels for the document at timeline
    /// position `idx` of `user`, computed with that document excluded from
    /// all counts. The state is left unchanged.
    pub fn experience_log_scores(
        &mut self,
        corpus: &Corpus,
        user: usize,
        idx: usize,
    ) -> Result<Vec<(usize, f64)>> {
        let p = corpus.per_user_docs[user][idx];
        let e_old = self.e_assign[p];
        self.detach_doc(corpus, user, idx, e_old);
        let scores = self.level_scores(corpus, user, idx);
        self.attach_doc(corpus, user, idx, e_old);
        scores
    }

    fn detach_doc(&mut self, corpus: &Corpus, user: usize, idx: usize, e: usize) {
        let timeline = &corpus.per_user_docs[user];
        let levels = self.config.levels;
        let p = timeline[idx];
        self.remove_tokens(corpus, p, e);
        let prev = if idx == 0 { 0 } else { self.e_assign[timeline[idx - 1]] };
        self.m_trans[prev * levels + e] -= 1;
        if let Some(&q) = timeline.get(idx + 1) {
            self.m_trans[e * levels + self.e_assign[q]] -= 1;
        }
    }

    fn attach_doc(&mut self, corpus: &Corpus, user: usize, idx: usize, e: usize) {
        let timeline = &corpus.per_user_docs[user];
        let levels = self.config.levels;
        let p = timeline[idx];
        self.e_assign[p] = e;
        self.add_tokens(corpus, p, e);
        let prev = if idx == 0 { 0 } else { self.e_assign[timeline[idx - 1]] };
        self.m_trans[prev * levels + e] += 1;
        if let Some(&q) = timeline.get(idx + 1) {
            self.m_trans[e * levels + self.e_assign[q]] += 1;
        }
    }

    /// Experience step for one document: pick the admissible level with the
    /// highest collapsed conditional. Ties go to the lower level.
    pub fn resample_experience(&mut self, corpus: &Corpus, user: usize, idx: usize) -> Result<usize> {
        let p = corpus.per_user_docs[user][idx];
        let e_old = self.e_assign[p];
        self.detach_doc(corpus, user, idx, e_old);
        let scores = self.level_scores(corpus, user, idx);
        let chosen = match scores {
            Ok(scores) => scores
                .iter()
                .fold(None::<(usize, f64)>, |best, &(e, s)| match best {
                    Some((_, bs)) if bs >= s => best,
                    _ => Some((e, s)),
                })
                .map(|(e, _)| e)
                .unwrap_or(e_old),
            Err(err) => {
                self.attach_doc(corpus, user, idx, e_old);
                return Err(err);
            }
        };
        self.attach_doc(corpus, user, idx, chosen);
        Ok(chosen)
    }

    /// Normalized collapsed conditional over facets for token `j` of the
    /// document at corpus position `p`, excluding the token's own assignment.
    pub fn facet_conditional(&self, corpus: &Corpus, p: usize, j: usize) -> Vec<f64> {
        let mut weights = vec![0.0; self.config.facets];
        self.facet_weights(corpus, p, j, true, &mut weights);
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        weights
    }

    fn facet_weights(&self, corpus: &Corpus, p: usize, j: usize, exclude_self: bool, out: &mut [f64]) {
        let d = &corpus.docs[p];
        let e = self.e_assign[p];
        let w = d.tokens[j] as usize;
        let cur = self.z_assign[p][j] as usize;
        let own = |z: usize| if exclude_self && z == cur { 1.0 } else { 0.0 };
        let ue = self.ue(d.user, e);
        let facet_norm = self.n_ue[ue] as f64 - if exclude_self { 1.0 } else { 0.0 } + self.alpha_sum[ue];
        let v_delta = self.vocab as f64 * self.config.delta;
        for (z, slot) in out.iter_mut().enumerate() {
            let theta = (self.n_uez[self.uez(d.user, e, z)] as f64 - own(z) + self.concentration(d.user, e, z))
                / facet_norm;
            let phi = (self.n_ezv[self.ezv(e, z, w)] as f64 - own(z) + self.config.delta)
                / (self.n_ez[self.ez(e, z)] as f64 - own(z) + v_delta);
            *slot = theta * phi;
        }
    }

    /// Facet step for one token: remove it, draw a facet from the collapsed
    /// conditional, add it back.
    pub fn resample_facet(&mut self, corpus: &Corpus, p: usize, j: usize, buf: &mut Vec<f64>) -> usize {
        let d = &corpus.docs[p];
        let e = self.e_assign[p];
        let w = d.tokens[j] as usize;
        let old = self.z_assign[p][j] as usize;
        let (a, b, c, ue) = (self.uez(d.user, e, old), self.ezv(e, old, w), self.ez(e, old), self.ue(d.user, e));
        self.n_uez[a] -= 1;
        self.n_ezv[b] -= 1;
        self.n_ez[c] -= 1;
        self.n_ue[ue] -= 1;

        buf.resize(self.config.facets, 0.0);
        self.facet_weights(corpus, p, j, false, buf);
        let z = sample_discrete(&mut self.rng, buf);

        self.z_assign[p][j] = z as u32;
        let (a, b, c) = (self.uez(d.user, e, z), self.ezv(e, z, w), self.ez(e, z));
        self.n_uez[a] += 1;
        self.n_ezv[b] += 1;
        self.n_ez[c] += 1;
        self.n_ue[ue] += 1;
        z
    }

    /// One full Gibbs pass over the corpus.
    pub fn sweep(&mut self, corpus: &Corpus) -> Result<SweepStats> {
        let mut stats = SweepStats::default();
        let mut buf = Vec::with_capacity(self.config.facets);
        for user in 0..corpus.per_user_docs.len() {
            for idx in 0..corpus.per_user_docs[user].len() {
                let p = corpus.per_user_docs[user][idx];
                let before = self.e_assign[p];
                if idx > 0 && self.config.levels > 1 {
                    let after = self.resample_experience(corpus, user, idx)?;
                    if after != before {
                        stats.docs_moved += 1;
                    }
                }
                for j in 0..corpus.docs[p].tokens.len() {
                    let old = self.z_assign[p][j] as usize;
                    if self.resample_facet(corpus, p, j, &mut buf) != old {
                        stats.tokens_reassigned += 1;
                    }
                }
            }
        }
        if cfg!(debug_assertions) {
            self.check_chains(corpus)?;
        }
        Ok(stats)
    }

    /// Posterior-mean estimates of the user/level facet preferences and the
    /// level/facet word distributions under the current counts and prior.
    pub fn estimate_posteriors(&self) -> PosteriorEstimates {
        let (u_n, e_n, z_n, v_n) = (self.users, self.config.levels, self.config.facets, self.vocab);
        let mut theta = vec![0.0; u_n * e_n * z_n];
        let mut concentration = vec![0.0; u_n * e_n * z_n];
        for u in 0..u_n {
            for e in 0..e_n {
                let ue = self.ue(u, e);
                let norm = self.n_ue[ue] as f64 + self.alpha_sum[ue];
                for z in 0..z_n {
                    let i = self.uez(u, e, z);
                    concentration[i] = self.concentration(u, e, z);
                    theta[i] = (self.n_uez[i] as f64 + concentration[i]) / norm;
                }
            }
        }
        let delta = self.config.delta;
        let mut phi = vec![0.0; e_n * z_n * v_n];
        for e in 0..e_n {
            for z in 0..z_n {
                let norm = self.n_ez[self.ez(e, z)] as f64 + v_n as f64 * delta;
                for v in 0..v_n {
                    let i = self.ezv(e, z, v);
                    phi[i] = (self.n_ezv[i] as f64 + delta) / norm;
                }
            }
        }
        PosteriorEstimates {
            users: u_n,
            levels: e_n,
            facets: z_n,
            vocab: v_n,
            theta,
            phi,
            concentration,
        }
    }

    /// Level of the most recent document of every user (entry level for users
    /// without documents).
    pub fn last_levels(&self, corpus: &Corpus) -> Vec<usize> {
        corpus
            .per_user_docs
            .iter()
            .map(|docs| docs.last().map_or(0, |&p| self.e_assign[p]))
            .collect()
    }

    /// Levels of every user's documents in time order.
    pub fn trajectories(&self, corpus: &Corpus) -> Vec<Vec<usize>> {
        corpus
            .per_user_docs
            .iter()
            .map(|docs| docs.iter().map(|&p| self.e_assign[p]).collect())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelState> {
        let state: ModelState = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        check_schema(STATE_SCHEMA, &state.schema)?;
        Ok(state)
    }
}

/// Draw an index proportional to non-negative `weights`.
pub(crate) fn sample_discrete<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // floating-point slack: fall back to the last positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Immutable snapshot of the posterior means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEstimates {
    pub users: usize,
    pub levels: usize,
    pub facets: usize,
    pub vocab: usize,
    /// `theta[u][e][z]`, flattened.
    pub theta: Vec<f64>,
    /// `phi[e][z][v]`, flattened.
    pub phi: Vec<f64>,
    /// Dirichlet concentration in force when the snapshot was taken,
    /// `[u][e][z]` flattened.
    pub concentration: Vec<f64>,
}

impl PosteriorEstimates {
    pub fn theta(&self, u: usize, e: usize) -> &[f64] {
        let start = (u * self.levels + e) * self.facets;
        &self.theta[start..start + self.facets]
    }

    pub fn phi(&self, e: usize, z: usize) -> &[f64] {
        let start = (e * self.facets + z) * self.vocab;
        &self.phi[start..start + self.vocab]
    }

    #[inline]
    pub fn phi_word(&self, e: usize, z: usize, v: usize) -> f64 {
        self.phi[(e * self.facets + z) * self.vocab + v]
    }

    pub fn concentration(&self, u: usize, e: usize) -> &[f64] {
        let start = (u * self.levels + e) * self.facets;
        &self.concentration[start..start + self.facets]
    }

    /// Mean of `phi[e][z](w)` over the document's tokens, for each facet.
    pub fn facet_proportions(&self, tokens: &[u32], level: usize) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::contract("facet proportions of an empty document"));
        }
        let n = tokens.len() as f64;
        Ok((0..self.facets)
            .map(|z| tokens.iter().map(|&w| self.phi_word(level, z, w as usize)).sum::<f64>() / n)
            .collect())
    }

    /// Facet proportions a document by `user` at `level` has in expectation
    /// when its words are drawn from `sum_z theta(z) phi[level][z]`.
    pub fn expected_facet_proportions(&self, user: usize, level: usize) -> Vec<f64> {
        let theta = self.theta(user, level);
        let mut word_prob = vec![0.0; self.vocab];
        for (z, &t) in theta.iter().enumerate() {
            for (p, &f) in word_prob.iter_mut().zip(self.phi(level, z)) {
                *p += t * f;
            }
        }
        (0..self.facets)
            .map(|z| self.phi(level, z).iter().zip(&word_prob).map(|(f, p)| f * p).sum())
            .collect()
    }

    /// Infer facets for an unseen document with `phi` and the prior frozen.
    ///
    /// Runs `n_iters` passes of the facet step over the document's tokens
    /// using document-local counts plus the concentration of `(user, level)`.
    /// The returned features are the document's facet proportions; an empty
    /// document falls back to the expectation under `theta[user][level]`.
    pub fn fold_in<R: Rng>(
        &self,
        tokens: &[u32],
        user: usize,
        level: usize,
        n_iters: usize,
        rng: &mut R,
    ) -> Result<FoldIn> {
        if n_iters == 0 {
            return Err(Error::contract("fold-in needs at least one iteration"));
        }
        if tokens.is_empty() {
            return Ok(FoldIn {
                proportions: self.expected_facet_proportions(user, level),
                assignments: Vec::new(),
            });
        }
        let prior = self.concentration(user, level);
        let mut local = vec![0u32; self.facets];
        let mut assignments: Vec<u32> = tokens
            .iter()
            .map(|_| rng.random_range(0..self.facets) as u32)
            .collect();
        for &z in &assignments {
            local[z as usize] += 1;
        }
        let mut weights = vec![0.0; self.facets];
        for _ in 0..n_iters {
            for (j, &w) in tokens.iter().enumerate() {
                let old = assignments[j] as usize;
                local[old] -= 1;
                for (z, slot) in weights.iter_mut().enumerate() {
                    *slot = (local[z] as f64 + prior[z]) * self.phi_word(level, z, w as usize);
                }
                let z = sample_discrete(rng, &weights);
                local[z] += 1;
                assignments[j] = z as u32;
            }
        }
        Ok(FoldIn {
            proportions: self.facet_proportions(tokens, level)?,
            assignments,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldIn {
    pub proportions: Vec<f64>,
    pub assignments: Vec<u32>,
}
