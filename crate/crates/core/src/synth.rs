//! Synthetic review corpora drawn from the model's own generative story,
//! with the latent levels and facets kept as ground truth.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{check_schema, Corpus, CorpusConfig, RatingScale, RawReview};
use crate::error::{Error, Result};
use crate::sampler::{sample_discrete, ModelState};

pub const TRUTH_SCHEMA: &str = "truth_v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub levels: usize,
    pub facets: usize,
    pub vocab: usize,
    pub items: usize,
    /// Inclusive range of documents per user.
    pub docs_per_user: (usize, usize),
    /// Inclusive range of tokens per document.
    pub doc_length: (usize, usize),
    /// Row-stochastic `E x E` matrix; row `e` may only put mass on `e` and `e + 1`.
    pub transition: Vec<Vec<f64>>,
    /// Facet concentration per `[archetype][level]`. User `u` has archetype
    /// `u % archetypes`.
    pub alpha_true: Vec<Vec<Vec<f64>>>,
    pub phi_concentration: f64,
    /// When set, level `e`'s word distributions are supported on a window of
    /// this many consecutive words; windows are spaced evenly from the start
    /// to the end of the vocabulary, so vocabulary drifts with experience.
    #[serde(default)]
    pub vocab_window: Option<usize>,
    /// Rating weights over facet proportions per `[archetype][level]`.
    pub rating_weights: Vec<Vec<Vec<f64>>>,
    pub rating_noise_sd: f64,
    pub scale: RatingScale,
    pub seed: u64,
}

impl SynthConfig {
    /// Three levels, five facets, sharply separated word distributions and
    /// ratings whose dependence on facets shifts with experience.
    pub fn planted(seed: u64) -> SynthConfig {
        let (levels, facets) = (3, 5);
        let alpha_true = vec![
            vec![vec![0.5; facets]; levels],
            vec![vec![0.5; facets]; levels],
        ];
        let rating_weights = vec![
            vec![
                vec![2.0, 2.5, 3.0, 3.5, 4.0],
                vec![3.0, 2.0, 4.5, 2.5, 3.5],
                vec![4.5, 1.5, 4.0, 2.0, 3.0],
            ],
            vec![
                vec![4.0, 3.5, 3.0, 2.5, 2.0],
                vec![2.0, 4.0, 2.5, 4.5, 3.0],
                vec![1.5, 4.5, 1.5, 4.5, 4.0],
            ],
        ];
        SynthConfig {
            users: 50,
            levels,
            facets,
            vocab: 200,
            items: 100,
            docs_per_user: (30, 30),
            doc_length: (40, 60),
            transition: vec![
                vec![0.8, 0.2, 0.0],
                vec![0.0, 0.8, 0.2],
                vec![0.0, 0.0, 1.0],
            ],
            alpha_true,
            phi_concentration: 0.05,
            vocab_window: None,
            rating_weights,
            rating_noise_sd: 0.1,
            scale: RatingScale::default(),
            seed,
        }
    }

    fn archetypes(&self) -> usize {
        self.alpha_true.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synth config: {m}")));
        if self.users == 0 || self.levels == 0 || self.facets == 0 || self.vocab == 0 || self.items == 0 {
            return bad("all sizes must be positive");
        }
        if self.docs_per_user.0 == 0 || self.docs_per_user.0 > self.docs_per_user.1 {
            return bad("docs_per_user must be a non-empty range starting at 1 or more");
        }
        if self.doc_length.0 == 0 || self.doc_length.0 > self.doc_length.1 {
            return bad("doc_length must be a non-empty range starting at 1 or more");
        }
        if self.transition.len() != self.levels {
            return bad("transition must be E x E");
        }
        for (e, row) in self.transition.iter().enumerate() {
            if row.len() != self.levels || row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return bad("transition rows must be non-negative with E entries");
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("transition rows must sum to 1");
            }
            if row.iter().enumerate().any(|(to, &p)| p > 0.0 && to != e && to != e + 1) {
                return bad("transitions may only stay or advance one level");
            }
        }
        if self.archetypes() == 0 || self.rating_weights.len() != self.archetypes() {
            return bad("alpha_true and rating_weights need the same number of archetypes");
        }
        for table in self.alpha_true.iter().chain(&self.rating_weights) {
            if table.len() != self.levels || table.iter().any(|r| r.len() != self.facets) {
                return bad("per-archetype tables must be E x Z");
            }
        }
        if self.alpha_true.iter().flatten().flatten().any(|&a| !(a > 0.0 && a.is_finite())) {
            return bad("alpha_true entries must be positive");
        }
        if self.vocab_window.is_some_and(|w| w == 0 || w > self.vocab) {
            return bad("vocab_window must be between 1 and vocab");
        }
        if !(self.phi_concentration > 0.0 && self.phi_concentration.is_finite()) {
            return bad("phi_concentration must be positive");
        }
        if !(self.rating_noise_sd >= 0.0 && self.rating_noise_sd.is_finite()) {
            return bad("rating_noise_sd must be non-negative");
        }
        Ok(())
    }

    /// First word and width of level `e`'s vocabulary window.
    pub fn level_window(&self, e: usize) -> (usize, usize) {
        match self.vocab_window {
            None => (0, self.vocab),
            Some(w) if self.levels == 1 => (0, w),
            Some(w) => ((self.vocab - w) * e / (self.levels - 1), w),
        }
    }

    pub fn word(v: usize) -> String {
        format!("w{v:04}")
    }

    pub fn user(u: usize) -> String {
        format!("u{u:04}")
    }

    pub fn item(i: usize) -> String {
        format!("i{i:04}")
    }

    /// Corpus settings that keep every generated token and user.
    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            min_user_reviews: 1,
            min_word_count: 1,
            remove_stopwords: true,
            scale: self.scale,
        }
    }
}

/// Latent variables behind a generated corpus. Documents are indexed by
/// their id in the emitted corpus; word indices refer to the generator's
/// vocabulary `w0000 .. w{V-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub schema: String,
    pub levels: usize,
    pub facets: usize,
    pub vocab: usize,
    pub archetype: Vec<usize>,
    pub doc_level: Vec<usize>,
    pub token_facet: Vec<Vec<u32>>,
    /// `[e][z][v]` flattened.
    pub phi: Vec<f64>,
    /// `[u][e][z]` flattened.
    pub theta: Vec<f64>,
    pub noiseless_rating: Vec<f64>,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GroundTruth> {
        let t: GroundTruth = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        check_schema(TRUTH_SCHEMA, &t.schema)?;
        Ok(t)
    }

    pub fn phi(&self, e: usize, z: usize) -> &[f64] {
        let start = (e * self.facets + z) * self.vocab;
        &self.phi[start..start + self.vocab]
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub reviews: Vec<RawReview>,
    pub corpus: Corpus,
    pub truth: GroundTruth,
}

fn dirichlet<R: Rng>(rng: &mut R, alpha: &[f64]) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
            .collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|x| x / total).collect();
        }
    }
}

/// Draw a corpus: word distributions per (level, facet), then per user a
/// level chain starting at the entry level, facet preferences per level,
/// tokens, and a rating linear in the document's facet proportions.
pub fn generate(config: &SynthConfig) -> Result<Synthetic> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (e_n, z_n, v_n) = (config.levels, config.facets, config.vocab);

    let mut phi = Vec::with_capacity(e_n * z_n * v_n);
    for e in 0..e_n {
        let (start, width) = config.level_window(e);
        let prior = vec![config.phi_concentration; width];
        for _ in 0..z_n {
            let mut row = vec![0.0; v_n];
            row[start..start + width].copy_from_slice(&dirichlet(&mut rng, &prior));
            phi.extend(row);
        }
    }
    let noise = Normal::new(0.0, config.rating_noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let words: Vec<String> = (0..v_n).map(SynthConfig::word).collect();

    let mut reviews = Vec::new();
    let mut doc_level = Vec::new();
    let mut token_facet = Vec::new();
    let mut noiseless_rating = Vec::new();
    let mut theta = Vec::with_capacity(config.users * e_n * z_n);
    let mut archetype = Vec::with_capacity(config.users);

    for u in 0..config.users {
        let arch = u % config.archetypes();
        archetype.push(arch);
        let user_theta: Vec<Vec<f64>> = (0..e_n)
            .map(|e| dirichlet(&mut rng, &config.alpha_true[arch][e]))
            .collect();
        theta.extend(user_theta.iter().flatten());
        let n_docs = rng.random_range(config.docs_per_user.0..=config.docs_per_user.1);
        let mut level = 0usize;
        for i in 0..n_docs {
            if i > 0 {
                level = sample_discrete(&mut rng, &config.transition[level]);
            }
            let len = rng.random_range(config.doc_length.0..=config.doc_length.1);
            let mut facets = Vec::with_capacity(len);
            let mut text = Vec::with_capacity(len);
            let mut facet_counts = vec![0usize; z_n];
            for _ in 0..len {
                let z = sample_discrete(&mut rng, &user_theta[level]);
                let start = (level * z_n + z) * v_n;
                let w = sample_discrete(&mut rng, &phi[start..start + v_n]);
                facets.push(z as u32);
                facet_counts[z] += 1;
                text.push(words[w].as_str());
            }
            let clean: f64 = config.rating_weights[arch][level]
                .iter()
                .zip(&facet_counts)
                .map(|(w, &c)| w * c as f64 / len as f64)
                .sum();
            let jitter = if config.rating_noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let item = rng.random_range(0..config.items);
            reviews.push(RawReview {
                user_id: SynthConfig::user(u),
                item_id: SynthConfig::item(item),
                timestamp: i as i64,
                rating: config.scale.clamp(clean + jitter),
                text: text.join(" "),
            });
            doc_level.push(level);
            token_facet.push(facets);
            noiseless_rating.push(clean);
        }
    }

    let corpus = Corpus::build(&reviews, &config.corpus_config())?;
    if corpus.docs.len() != reviews.len() {
        return Err(Error::Internal("generated documents were dropped during corpus build".into()));
    }
    Ok(Synthetic {
        reviews,
        corpus,
        truth: GroundTruth {
            schema: TRUTH_SCHEMA.to_string(),
            levels: e_n,
            facets: z_n,
            vocab: v_n,
            archetype,
            doc_level,
            token_facet,
            phi,
            theta,
            noiseless_rating,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub level_accuracy: f64,
    pub facet_nmi: f64,
}

/// Compare inferred assignments against the ground truth over the documents
/// present in `corpus` (the corpus the state was trained on).
///
/// Level accuracy is taken under the best relabeling of levels (searched
/// exhaustively for `E <= 8`, identity otherwise). Facet labels are only
/// meaningful within a level, so the facet score is the normalized mutual
/// information between true and inferred `(level, facet)` token labels.
pub fn score_recovery(truth: &GroundTruth, state: &ModelState, corpus: &Corpus) -> Result<Recovery> {
    if state.e_assign.len() != corpus.docs.len() || truth.levels != state.levels() {
        return Err(Error::invalid("state, corpus and ground truth disagree in shape"));
    }
    let e_n = truth.levels;
    let mut confusion = vec![vec![0usize; e_n]; e_n];
    let mut true_tokens = Vec::new();
    let mut inferred_tokens = Vec::new();
    for (p, d) in corpus.docs.iter().enumerate() {
        let id = d.doc_id;
        if id >= truth.doc_level.len() || truth.token_facet[id].len() != d.tokens.len() {
            return Err(Error::invalid(format!("document {id} has no matching ground truth")));
        }
        let (te, ie) = (truth.doc_level[id], state.e_assign[p]);
        confusion[te][ie] += 1;
        for (&tz, &iz) in truth.token_facet[id].iter().zip(&state.z_assign[p]) {
            true_tokens.push(te * truth.facets + tz as usize);
            inferred_tokens.push(ie * state.facets() + iz as usize);
        }
    }
    let total = corpus.docs.len().max(1) as f64;
    let best = if e_n <= 8 {
        best_permutation_matches(&confusion)
    } else {
        (0..e_n).map(|e| confusion[e][e]).sum()
    };
    Ok(Recovery {
        level_accuracy: best as f64 / total,
        facet_nmi: normalized_mutual_information(&true_tokens, &inferred_tokens),
    })
}

fn best_permutation_matches(confusion: &[Vec<usize>]) -> usize {
    fn search(row: usize, used: &mut Vec<bool>, confusion: &[Vec<usize>]) -> usize {
        if row == confusion.len() {
            return 0;
        }
        let mut best = 0;
        for col in 0..confusion.len() {
            if !used[col] {
                used[col] = true;
                best = best.max(confusion[row][col] + search(row + 1, used, confusion));
                used[col] = false;
            }
        }
        best
    }
    search(0, &mut vec![false; confusion.len()], confusion)
}

/// `2 I(A; B) / (H(A) + H(B))` over paired labels.
pub fn normalized_mutual_information(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let entropy = |c: &HashMap<usize, usize>| -> f64 {
        c.values()
            .map(|&k| {
                let p = k as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hb) = (entropy(&ca), entropy(&cb));
    if ha + hb == 0.0 {
        return 1.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &k)| {
            let pxy = k as f64 / n;
            pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    (2.0 * mi / (ha + hb)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SamplerConfig;

    fn tiny(seed: u64) -> SynthConfig {
        SynthConfig {
            users: 6,
            docs_per_user: (5, 8),
            doc_length: (5, 10),
            vocab: 30,
            items: 5,
            ..SynthConfig::planted(seed)
        }
    }

    #[test]
    fn degenerate_single_level_single_facet() {
        let cfg = SynthConfig {
            levels: 1,
            facets: 1,
            transition: vec![vec![1.0]],
            alpha_true: vec![vec![vec![1.0]]],
            rating_weights: vec![vec![vec![3.0]]],
            ..tiny(3)
        };
        let s = generate(&cfg).unwrap();
        assert!(s.truth.doc_level.iter().all(|&e| e == 0));
        assert!(s.truth.token_facet.iter().flatten().all(|&z| z == 0));
    }

    #[test]
    fn zero_noise_ratings_are_noiseless_form() {
        let cfg = SynthConfig {
            rating_noise_sd: 0.0,
            ..tiny(4)
        };
        let s = generate(&cfg).unwrap();
        for (r, clean) in s.reviews.iter().zip(&s.truth.noiseless_rating) {
            assert_eq!(r.rating, cfg.scale.clamp(*clean));
        }
    }

    #[test]
    fn chains_are_monotone_unit_steps() {
        let s = generate(&tiny(5)).unwrap();
        for docs in &s.corpus.per_user_docs {
            let levels: Vec<usize> = docs.iter().map(|&p| s.truth.doc_level[p]).collect();
            assert_eq!(levels[0], 0);
            assert!(levels.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate(&tiny(9)).unwrap();
        let b = generate(&tiny(9)).unwrap();
        assert_eq!(a.reviews, b.reviews);
        assert_eq!(a.truth, b.truth);
        assert_ne!(a.reviews, generate(&tiny(10)).unwrap().reviews);
    }

    #[test]
    fn corpus_tokens_align_with_truth() {
        let s = generate(&tiny(6)).unwrap();
        for (d, zs) in s.corpus.docs.iter().zip(&s.truth.token_facet) {
            assert_eq!(d.tokens.len(), zs.len());
        }
    }

    #[test]
    fn rejects_skipping_transitions() {
        let mut cfg = tiny(1);
        cfg.transition[0] = vec![0.5, 0.0, 0.5];
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn truth_state_scores_perfectly() {
        let s = generate(&tiny(7)).unwrap();
        let sc = SamplerConfig {
            levels: 3,
            facets: 5,
            ..SamplerConfig::default()
        };
        let state = ModelState::from_assignments(
            &s.corpus,
            &sc,
            s.truth.token_facet.clone(),
            s.truth.doc_level.clone(),
        )
        .unwrap();
        let r = score_recovery(&s.truth, &state, &s.corpus).unwrap();
        assert_eq!(r.level_accuracy, 1.0);
        assert!((r.facet_nmi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_state_has_near_zero_nmi() {
        let cfg = SynthConfig {
            levels: 1,
            facets: 4,
            transition: vec![vec![1.0]],
            alpha_true: vec![vec![vec![1.0; 4]]],
            rating_weights: vec![vec![vec![3.0; 4]]],
            users: 20,
            docs_per_user: (10, 10),
            doc_length: (50, 50),
            ..tiny(8)
        };
        let s = generate(&cfg).unwrap();
        assert!(s.corpus.num_tokens() >= 10_000);
        let sc = SamplerConfig {
            levels: 1,
            facets: 4,
            seed: 99,
            ..SamplerConfig::default()
        };
        let state = ModelState::init(&s.corpus, &sc).unwrap();
        let r = score_recovery(&s.truth, &state, &s.corpus).unwrap();
        assert!(r.facet_nmi < 0.05, "nmi {}", r.facet_nmi);
        assert!((0.0..=1.0).contains(&r.level_accuracy));
    }

    #[test]
    fn transition_frequencies_match_config() {
        let cfg = SynthConfig {
            users: 250,
            docs_per_user: (50, 50),
            doc_length: (1, 1),
            ..SynthConfig::planted(21)
        };
        let s = generate(&cfg).unwrap();
        let mut counts = vec![vec![0usize; 3]; 3];
        for docs in &s.corpus.per_user_docs {
            for w in docs.windows(2) {
                counts[s.truth.doc_level[w[0]]][s.truth.doc_level[w[1]]] += 1;
            }
        }
        let total: usize = counts.iter().flatten().sum();
        assert!(total >= 10_000);
        for (from, row) in counts.iter().enumerate() {
            let n: usize = row.iter().sum();
            for (to, &c) in row.iter().enumerate() {
                let freq = c as f64 / n as f64;
                assert!((freq - cfg.transition[from][to]).abs() < 0.02, "{from}->{to}: {freq}");
            }
        }
    }

    #[test]
    fn nmi_edge_cases() {
        assert_eq!(normalized_mutual_information(&[0, 0, 1, 1], &[5, 5, 7, 7]), 1.0);
        assert_eq!(normalized_mutual_information(&[0, 0], &[1, 1]), 1.0);
        assert!(normalized_mutual_information(&[0, 1, 0, 1], &[0, 0, 1, 1]) < 1e-12);
    }

    #[test]
    fn vocab_windows_drift_with_level() {
        let cfg = SynthConfig {
            vocab_window: Some(100),
            ..tiny(12)
        };
        let cfg = SynthConfig { vocab: 200, ..cfg };
        assert_eq!(cfg.level_window(0), (0, 100));
        assert_eq!(cfg.level_window(1), (50, 100));
        assert_eq!(cfg.level_window(2), (100, 100));
        let s = generate(&cfg).unwrap();
        for e in 0..3 {
            let (start, width) = cfg.level_window(e);
            for z in 0..5 {
                let phi = s.truth.phi(e, z);
                assert!((phi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(phi[..start].iter().chain(&phi[start + width..]).all(|&x| x == 0.0));
            }
        }
        assert!(generate(&SynthConfig { vocab_window: Some(0), ..cfg }).is_err());
    }
}
