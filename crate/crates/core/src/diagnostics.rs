//! Analyses of corpora and trained models: divergence between language
//! models and facet preferences across experience levels or proxy bins,
//! salient words, experience distributions, and ranking metrics for
//! identifying experienced users.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::regression::{train_svr, MStepConfig, SvrProblem};
use crate::sampler::{LevelInit, ModelState, SamplerConfig};
use crate::trainer::TrainedModel;

/// Additive smoothing applied to both arguments of [`kl_divergence`] by default.
pub const DEFAULT_SMOOTHING: f64 = 1e-9;
/// Add-delta smoothing of the per-bin unigram language models.
pub const BIN_LM_DELTA: f64 = 0.01;

/// `sum_i p'_i ln(p'_i / q'_i)` in nats, where `x' = (x + s) / (1 + n s)`.
/// Identical inputs give exactly 0.
pub fn kl_divergence(p: &[f64], q: &[f64], smoothing: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "distributions over different supports ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::invalid("empty distribution"));
    }
    for (name, d) in [("p", p), ("q", q)] {
        let total: f64 = d.iter().sum();
        if d.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("{name} is not a distribution (sum {total})")));
        }
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::invalid("smoothing must be non-negative"));
    }
    if p == q {
        return Ok(0.0);
    }
    let norm = 1.0 + p.len() as f64 * smoothing;
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = ((a + smoothing) / norm, (b + smoothing) / norm);
            if a == 0.0 {
                0.0
            } else {
                a * (a / b).ln()
            }
        })
        .sum();
    Ok(kl.max(0.0))
}

/// Pairwise divergences; row = first argument, column = second. `labels`
/// are the 0-based levels or bins the rows stand for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceMatrix {
    pub labels: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    /// Levels left out for lack of documents.
    pub excluded: Vec<usize>,
}

impl DivergenceMatrix {
    pub fn from_distributions(labels: Vec<usize>, dists: &[Vec<f64>], excluded: Vec<usize>) -> Result<DivergenceMatrix> {
        let mut values = vec![vec![0.0; dists.len()]; dists.len()];
        for (i, p) in dists.iter().enumerate() {
            for (j, q) in dists.iter().enumerate() {
                if i != j {
                    values[i][j] = kl_divergence(p, q, DEFAULT_SMOOTHING)?;
                }
            }
        }
        Ok(DivergenceMatrix {
            labels,
            values,
            excluded,
        })
    }

    /// Entry for labels `(a, b)`, if both are present.
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        let i = self.labels.iter().position(|&l| l == a)?;
        let j = self.labels.iter().position(|&l| l == b)?;
        Some(self.values[i][j])
    }

    /// CSV with 1-based labels as row and column headers.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["level".to_string()];
        header.extend(self.labels.iter().map(|l| (l + 1).to_string()));
        w.write_record(&header)?;
        for (l, row) in self.labels.iter().zip(&self.values) {
            let mut rec = vec![(l + 1).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Bin of every user (None for the background user and users left out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyBins {
    pub bins: usize,
    pub user_bin: Vec<Option<usize>>,
}

/// Equal-frequency bins by ascending score (ties by user index); bin 0 holds
/// the lowest scores. `scores[u]` of None leaves user `u` out.
pub fn equal_frequency_bins(scores: &[Option<f64>], bins: usize) -> Result<ProxyBins> {
    let mut users: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .filter_map(|(u, s)| s.map(|s| (u, s)))
        .collect();
    if bins == 0 || users.len() < bins {
        return Err(Error::invalid(format!("{} users cannot fill {bins} bins", users.len())));
    }
    if users.iter().any(|(_, s)| !s.is_finite()) {
        return Err(Error::invalid("proxy scores must be finite"));
    }
    users.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let n = users.len();
    let mut user_bin = vec![None; scores.len()];
    for (rank, &(u, _)) in users.iter().enumerate() {
        user_bin[u] = Some(rank * bins / n);
    }
    Ok(ProxyBins { bins, user_bin })
}

fn bin_scores(corpus: &Corpus, proxy_scores: &[f64]) -> Result<Vec<Option<f64>>> {
    if proxy_scores.len() != corpus.num_users() {
        return Err(Error::invalid(format!(
            "{} proxy scores for {} users",
            proxy_scores.len(),
            corpus.num_users()
        )));
    }
    Ok(proxy_scores
        .iter()
        .enumerate()
        .map(|(u, &s)| (Some(u) != corpus.background && corpus.user_doc_count(u) > 0).then_some(s))
        .collect())
}

/// Unigram language model per proxy bin and their pairwise divergences.
pub fn proxy_bin_study(corpus: &Corpus, proxy_scores: &[f64], bins: usize) -> Result<(ProxyBins, DivergenceMatrix)> {
    let binned = equal_frequency_bins(&bin_scores(corpus, proxy_scores)?, bins)?;
    let v = corpus.vocab_size();
    let mut counts = vec![vec![0.0; v]; bins];
    for d in &corpus.docs {
        if let Some(b) = binned.user_bin[d.user] {
            for &w in &d.tokens {
                counts[b][w as usize] += 1.0;
            }
        }
    }
    let lms: Vec<Vec<f64>> = counts
        .into_iter()
        .map(|c| {
            let total = c.iter().sum::<f64>() + v as f64 * BIN_LM_DELTA;
            c.into_iter().map(|x| (x + BIN_LM_DELTA) / total).collect()
        })
        .collect();
    let matrix = DivergenceMatrix::from_distributions((0..bins).collect(), &lms, Vec::new())?;
    Ok((binned, matrix))
}

/// Per-user facet preference weights from plain topic modeling: a
/// single-level sampler run, then a regression of each user's ratings on the
/// facet proportions of their reviews. Users with fewer than two reviews get
/// None.
pub fn facet_preferences(corpus: &Corpus, facets: usize, sweeps: usize, seed: u64, svr: &MStepConfig) -> Result<Vec<Option<Vec<f64>>>> {
    let config = SamplerConfig {
        levels: 1,
        facets,
        seed,
        level_init: LevelInit::FirstLevel,
        ..SamplerConfig::default()
    };
    let mut state = ModelState::init(corpus, &config)?;
    for _ in 0..sweeps {
        state.sweep(corpus)?;
    }
    let est = state.estimate_posteriors();
    corpus
        .per_user_docs
        .iter()
        .map(|docs| {
            if docs.len() < 2 {
                return Ok(None);
            }
            let features = docs
                .iter()
                .map(|&p| est.facet_proportions(&corpus.docs[p].tokens, 0))
                .collect::<Result<Vec<_>>>()?;
            let problem = SvrProblem {
                features,
                targets: docs.iter().map(|&p| corpus.docs[p].rating).collect(),
                c: svr.c,
                epsilon: svr.epsilon,
            };
            Ok(Some(train_svr(&problem, svr.tol, svr.max_iter)?.weights))
        })
        .collect()
}

/// Per bin, `sum_u exp(w_u) / #u` normalized to a distribution, and the
/// pairwise divergences between bins.
pub fn aggregate_preferences(weights: &[Option<Vec<f64>>], bins: &ProxyBins) -> Result<DivergenceMatrix> {
    let dim = weights
        .iter()
        .flatten()
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::invalid("no user has preference weights"))?;
    let mut sums = vec![vec![0.0; dim]; bins.bins];
    let mut members = vec![0usize; bins.bins];
    for (w, b) in weights.iter().zip(&bins.user_bin) {
        if let (Some(w), Some(b)) = (w, b) {
            for (s, x) in sums[*b].iter_mut().zip(w) {
                *s += x.exp();
            }
            members[*b] += 1;
        }
    }
    if let Some(b) = members.iter().position(|&m| m == 0) {
        return Err(Error::invalid(format!("bin {} has no user with preference weights", b + 1)));
    }
    let dists: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&members)
        .map(|(s, &m)| {
            let mean: Vec<f64> = s.iter().map(|x| x / m as f64).collect();
            let total: f64 = mean.iter().sum();
            mean.into_iter().map(|x| x / total).collect()
        })
        .collect();
    if dists.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("facet preference aggregate overflowed".into()));
    }
    DivergenceMatrix::from_distributions((0..bins.bins).collect(), &dists, Vec::new())
}

pub fn facet_preference_study(corpus: &Corpus, bins: &ProxyBins, facets: usize, sweeps: usize, seed: u64) -> Result<DivergenceMatrix> {
    let weights = facet_preferences(corpus, facets, sweeps, seed, &MStepConfig::default())?;
    aggregate_preferences(&weights, bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DivergenceKind {
    Language,
    Facet,
}

/// Divergence between levels of a trained model. Language: the level's
/// word distribution mixes its facets by their token share. Facet: the mean
/// `theta` over users with at least one document at the level.
pub fn model_divergence(model: &TrainedModel, kind: DivergenceKind) -> Result<DivergenceMatrix> {
    let est = &model.predictor.estimates;
    let (levels, facets) = (est.levels, est.facets);
    let mut labels = Vec::new();
    let mut excluded = Vec::new();
    let mut dists = Vec::new();
    for e in 0..levels {
        let dist = match kind {
            DivergenceKind::Language => {
                let counts = &model.level_facet_counts[e * facets..(e + 1) * facets];
                let total: u64 = counts.iter().map(|&c| c as u64).sum();
                (total > 0).then(|| {
                    let mut lm = vec![0.0; est.vocab];
                    for (z, &c) in counts.iter().enumerate() {
                        let weight = c as f64 / total as f64;
                        for (x, &f) in lm.iter_mut().zip(est.phi(e, z)) {
                            *x += weight * f;
                        }
                    }
                    lm
                })
            }
            DivergenceKind::Facet => {
                let users: Vec<usize> = model
                    .trajectories
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.contains(&e))
                    .map(|(u, _)| u)
                    .collect();
                (!users.is_empty()).then(|| {
                    let mut mean = vec![0.0; facets];
                    for &u in &users {
                        for (m, &t) in mean.iter_mut().zip(est.theta(u, e)) {
                            *m += t / users.len() as f64;
                        }
                    }
                    mean
                })
            }
        };
        match dist {
            Some(d) => {
                labels.push(e);
                dists.push(d);
            }
            None => excluded.push(e),
        }
    }
    if !excluded.is_empty() {
        log::warn!("levels without documents left out: {excluded:?}");
    }
    DivergenceMatrix::from_distributions(labels, &dists, excluded)
}

/// Top `k` words of facet `z` at level `e` by `phi(v) ln(phi(v) / p(v))`,
/// with `p` the training unigram distribution; ties by vocabulary index.
pub fn salient_words(model: &TrainedModel, level: usize, facet: usize, k: usize) -> Result<Vec<(String, f64)>> {
    let est = &model.predictor.estimates;
    if level >= est.levels || facet >= est.facets {
        return Err(Error::invalid(format!("no facet {facet} at level {level}")));
    }
    let counts = &model.index.word_counts;
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let phi = est.phi(level, facet);
    let mut scored: Vec<(usize, f64)> = phi
        .iter()
        .enumerate()
        .map(|(v, &f)| {
            let p = counts[v] as f64 / total;
            let s = if f > 0.0 && p > 0.0 { f * (f / p).ln() } else { 0.0 };
            (v, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(v, s)| (model.index.vocab[v].clone(), s))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceTables {
    /// Share of qualifying users whose last level is `e`.
    pub user_distribution: Vec<f64>,
    /// Share of reviews written at level `e` by users who later advanced
    /// past `e`, among all such reviews.
    pub review_proportions: Vec<f64>,
    pub qualifying_users: usize,
}

pub fn experience_tables(model: &TrainedModel, min_reviews: usize) -> ExperienceTables {
    let levels = model.levels();
    let mut users = vec![0usize; levels];
    let mut reviews = vec![0usize; levels];
    let mut qualifying = 0;
    for (u, traj) in model.trajectories.iter().enumerate() {
        if Some(u) == model.index.background || traj.is_empty() || traj.len() < min_reviews {
            continue;
        }
        qualifying += 1;
        let last = *traj.last().expect("non-empty");
        users[last] += 1;
        for &e in traj.iter().filter(|&&e| e < last) {
            reviews[e] += 1;
        }
    }
    let normalize = |c: &[usize]| {
        let total: usize = c.iter().sum();
        c.iter()
            .map(|&x| if total == 0 { 0.0 } else { x as f64 / total as f64 })
            .collect::<Vec<f64>>()
    };
    ExperienceTables {
        user_distribution: normalize(&users),
        review_proportions: normalize(&reviews),
        qualifying_users: qualifying,
    }
}

/// `DCG_p / IDCG_p` with `DCG_p = rel_1 + sum_{i=2..p} rel_i / log2(i)`.
pub fn ndcg(relevances: &[u8], p: usize) -> Result<f64> {
    if p == 0 || p > relevances.len() {
        return Err(Error::invalid(format!("cutoff {p} outside 1..={}", relevances.len())));
    }
    let dcg = |rel: &[u8]| -> f64 {
        rel.iter()
            .take(p)
            .enumerate()
            .map(|(i, &r)| if i == 0 { r as f64 } else { r as f64 / ((i + 1) as f64).log2() })
            .sum()
    };
    let mut ideal = relevances.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        return Err(Error::invalid("no relevant item; NDCG undefined"));
    }
    Ok(dcg(relevances) / idcg)
}

/// `2PR / (P + R)`, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedUser {
    pub user: usize,
    pub last_level: usize,
    /// Training documents at the last level.
    pub tenure: usize,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertReport {
    pub f1: f64,
    pub ndcg: f64,
    pub precision: f64,
    pub recall: f64,
    pub ranking: Vec<RankedUser>,
}

/// Rank users with a ground-truth label by last level, then tenure at that
/// level (both descending), then index; users at or above
/// `threshold_level` (0-based) are predicted experienced.
pub fn identify_experts(model: &TrainedModel, ground_truth: &[Option<bool>], threshold_level: usize) -> Result<ExpertReport> {
    let mut ranking: Vec<RankedUser> = ground_truth
        .iter()
        .enumerate()
        .filter(|&(u, _)| Some(u) != model.index.background)
        .filter_map(|(u, g)| g.map(|g| (u, g)))
        .filter(|&(u, _)| u < model.trajectories.len())
        .map(|(u, relevant)| {
            let traj = &model.trajectories[u];
            let last_level = model.predictor.last_level[u];
            RankedUser {
                user: u,
                last_level,
                tenure: traj.iter().filter(|&&e| e == last_level).count(),
                relevant,
            }
        })
        .collect();
    if !ranking.iter().any(|r| r.relevant) {
        return Err(Error::invalid("ground truth has no experienced user"));
    }
    ranking.sort_by(|a, b| {
        b.last_level
            .cmp(&a.last_level)
            .then(b.tenure.cmp(&a.tenure))
            .then(a.user.cmp(&b.user))
    });
    let predicted = |r: &RankedUser| r.last_level >= threshold_level;
    let tp = ranking.iter().filter(|r| r.relevant && predicted(r)).count() as f64;
    let n_pred = ranking.iter().filter(|r| predicted(r)).count() as f64;
    let n_rel = ranking.iter().filter(|r| r.relevant).count() as f64;
    let precision = if n_pred == 0.0 { 0.0 } else { tp / n_pred };
    let recall = tp / n_rel;
    let rel: Vec<u8> = ranking.iter().map(|r| r.relevant as u8).collect();
    Ok(ExpertReport {
        f1: f1_score(precision, recall),
        ndcg: ndcg(&rel, rel.len())?,
        precision,
        recall,
        ranking,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusConfig, RawReview};

    #[test]
    fn kl_hand_value_and_asymmetry() {
        let p = [0.5, 0.5];
        let q = [0.9, 0.1];
        let expected = 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5.0f64.ln();
        let forward = kl_divergence(&p, &q, 0.0).unwrap();
        assert!((forward - expected).abs() < 1e-12);
        assert!((forward - 0.5108).abs() < 1e-4);
        let backward = kl_divergence(&q, &p, 0.0).unwrap();
        assert!((forward - backward).abs() > 1e-3);
        assert_eq!(kl_divergence(&p, &p, 1e-9).unwrap(), 0.0);
        assert!(kl_divergence(&p, &[1.0], 1e-9).is_err());
        assert!(kl_divergence(&[0.2, 0.2], &q, 1e-9).is_err());
    }

    #[test]
    fn ndcg_values() {
        let v = ndcg(&[0, 1, 1], 3).unwrap();
        let expected = (1.0 + 1.0 / 3f64.log2()) / 2.0;
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.8155).abs() < 1e-4);
        assert_eq!(ndcg(&[1, 1, 0], 3).unwrap(), 1.0);
        assert_eq!(ndcg(&[1, 0, 0], 3).unwrap(), 1.0);
        assert!(ndcg(&[0, 0], 2).is_err());
        assert!(ndcg(&[1], 2).is_err());
    }

    #[test]
    fn f1_values() {
        assert_eq!(f1_score(0.75, 0.75), 0.75);
        assert_eq!(f1_score(1.0, 1.0), 1.0);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn equal_frequency_binning() {
        let scores: Vec<Option<f64>> = vec![Some(5.0), Some(1.0), None, Some(3.0), Some(2.0)];
        let b = equal_frequency_bins(&scores, 2).unwrap();
        assert_eq!(b.user_bin, vec![Some(1), Some(0), None, Some(1), Some(0)]);
        assert!(equal_frequency_bins(&scores, 5).is_err());
    }

    fn review(user: &str, t: i64, text: &str) -> RawReview {
        RawReview {
            user_id: user.into(),
            item_id: "i".into(),
            timestamp: t,
            rating: 3.0,
            text: text.into(),
        }
    }

    fn lenient(reviews: &[RawReview]) -> Corpus {
        Corpus::build(
            reviews,
            &CorpusConfig {
                min_user_reviews: 1,
                min_word_count: 1,
                ..CorpusConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn identical_bins_have_zero_divergence() {
        let reviews: Vec<RawReview> = (0..4).map(|u| review(&format!("u{u}"), 0, "malt hops citrus")).collect();
        let c = lenient(&reviews);
        let (_, m) = proxy_bin_study(&c, &[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert!(m.values.iter().flatten().all(|&x| x.abs() <= 1e-9));
    }

    #[test]
    fn drifting_vocabulary_orders_bin_divergence() {
        // bins 1..3 share progressively fewer words with bin 1
        let texts = [
            "aa bb cc dd",
            "aa bb cc dd",
            "cc dd ee ff",
            "cc dd ee ff",
            "ee ff gg hh",
            "ee ff gg hh",
        ];
        let reviews: Vec<RawReview> = texts
            .iter()
            .enumerate()
            .map(|(u, t)| review(&format!("u{u}"), 0, t))
            .collect();
        let c = lenient(&reviews);
        let scores: Vec<f64> = (0..6).map(|u| u as f64).collect();
        let (_, m) = proxy_bin_study(&c, &scores, 3).unwrap();
        assert!(m.values[0][2] > m.values[0][1]);
        assert!(m.values[0][1] > 0.0);
        assert_eq!(m.values[1][1], 0.0);
    }

    #[test]
    fn shared_weights_give_zero_preference_divergence() {
        let weights = vec![Some(vec![0.3, -0.1, 1.0]); 4];
        let bins = ProxyBins {
            bins: 2,
            user_bin: vec![Some(0), Some(0), Some(1), Some(1)],
        };
        let m = aggregate_preferences(&weights, &bins).unwrap();
        assert!(m.values.iter().flatten().all(|&x| x == 0.0));
        let single = ProxyBins {
            bins: 1,
            user_bin: vec![Some(0); 4],
        };
        assert_eq!(aggregate_preferences(&weights, &single).unwrap().values, vec![vec![0.0]]);
    }

    #[test]
    fn disjoint_preferences_diverge() {
        let weights = vec![Some(vec![3.0, -3.0]), Some(vec![-3.0, 3.0])];
        let bins = ProxyBins {
            bins: 2,
            user_bin: vec![Some(0), Some(1)],
        };
        let m = aggregate_preferences(&weights, &bins).unwrap();
        assert!(m.values[0][1] > 0.0 && m.values[1][0] > 0.0);
        let empty_bin = ProxyBins {
            bins: 3,
            user_bin: vec![Some(0), Some(1)],
        };
        assert!(aggregate_preferences(&weights, &empty_bin).is_err());
    }

    #[test]
    fn matrix_csv_uses_one_based_labels() {
        let m = DivergenceMatrix {
            labels: vec![0, 2],
            values: vec![vec![0.0, 1.5], vec![0.25, 0.0]],
            excluded: vec![1],
        };
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "level,1,3\n1,0,1.5\n3,0.25,0\n");
        assert_eq!(m.get(2, 0), Some(0.25));
        assert_eq!(m.get(1, 0), None);
    }
}
