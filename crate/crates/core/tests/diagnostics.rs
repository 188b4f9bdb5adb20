use std::sync::OnceLock;

use xprec::corpus::split_train_test;
use xprec::diagnostics::{
    equal_frequency_bins, experience_tables, facet_preference_study, identify_experts, model_divergence,
    proxy_bin_study, salient_words, DivergenceKind,
};
use xprec::sampler::SamplerConfig;
use xprec::synth::{generate, Synthetic, SynthConfig};
use xprec::trainer::{run_em, TrainConfig, TrainedModel};

fn planted() -> &'static (Synthetic, TrainedModel) {
    static CELL: OnceLock<(Synthetic, TrainedModel)> = OnceLock::new();
    CELL.get_or_init(|| {
        let s = generate(&SynthConfig::planted(1)).unwrap();
        let split = split_train_test(&s.corpus, 3, 0.1).unwrap();
        let config = TrainConfig {
            sampler: SamplerConfig {
                levels: 3,
                facets: 5,
                seed: 1,
                ..SamplerConfig::default()
            },
            ..TrainConfig::default()
        };
        let model = run_em(&s.corpus, &split, &config).unwrap();
        (s, model)
    })
}

fn quick_model(levels: usize, users: usize) -> TrainedModel {
    let mut sc = SynthConfig::planted(5);
    sc.users = users;
    sc.levels = levels;
    sc.transition = (0..levels)
        .map(|e| (0..levels).map(|f| if f == e { 1.0 } else { 0.0 }).collect())
        .collect();
    sc.alpha_true = vec![vec![vec![0.5; 5]; levels]; 2];
    sc.rating_weights = vec![vec![vec![3.0; 5]; levels]; 2];
    let s = generate(&sc).unwrap();
    let split = split_train_test(&s.corpus, 3, 0.1).unwrap();
    let config = TrainConfig {
        sampler: SamplerConfig {
            levels,
            facets: 5,
            seed: 5,
            ..SamplerConfig::default()
        },
        burn_in_sweeps: 10,
        em_iterations: 1,
        sweeps_per_em: 2,
        rho_grid: vec![1.0],
        ..TrainConfig::default()
    };
    run_em(&s.corpus, &split, &config).unwrap()
}

#[test]
fn planted_experts_are_identified() {
    let (s, model) = planted();
    let top = s.truth.levels - 1;
    let mut truth = vec![None; model.index.num_users()];
    for (u, docs) in s.corpus.per_user_docs.iter().enumerate() {
        let last = *docs.last().unwrap();
        truth[u] = Some(s.truth.doc_level[s.corpus.docs[last].doc_id] == top);
    }
    let report = identify_experts(model, &truth, top).unwrap();
    assert!(report.f1 >= 0.9, "F1 {}", report.f1);
    assert!(report.ndcg > 0.9, "NDCG {}", report.ndcg);
    assert!(report
        .ranking
        .windows(2)
        .all(|w| (w[0].last_level, w[0].tenure) >= (w[1].last_level, w[1].tenure)));
}

#[test]
fn identity_predictions_give_unit_f1() {
    let (_, model) = planted();
    let threshold = 1;
    let truth: Vec<Option<bool>> = model.last_level().iter().map(|&e| Some(e >= threshold)).collect();
    let report = identify_experts(model, &truth, threshold).unwrap();
    assert_eq!(report.f1, 1.0);
    assert_eq!(report.ndcg, 1.0);
    let none = vec![Some(false); truth.len()];
    assert!(identify_experts(model, &none, threshold).is_err());
}

#[test]
fn experience_tables_are_distributions() {
    let (_, model) = planted();
    let t = experience_tables(model, 20);
    assert_eq!(t.qualifying_users, 50);
    assert!((t.user_distribution.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    assert!((t.review_proportions.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    // nobody advances past the top level
    assert_eq!(*t.review_proportions.last().unwrap(), 0.0);
}

#[test]
fn users_who_never_advance_sit_at_entry_level() {
    let model = quick_model(1, 6);
    let t = experience_tables(&model, 1);
    assert_eq!(t.user_distribution, vec![1.0]);
    assert_eq!(t.review_proportions, vec![0.0]);
    let m = model_divergence(&model, DivergenceKind::Language).unwrap();
    assert_eq!(m.values, vec![vec![0.0]]);
    let m = model_divergence(&model, DivergenceKind::Facet).unwrap();
    assert_eq!(m.values, vec![vec![0.0]]);
}

#[test]
fn empty_levels_are_excluded() {
    let mut model = quick_model(3, 6);
    // pretend nothing reached the top level
    for t in &mut model.trajectories {
        t.iter_mut().for_each(|e| *e = (*e).min(1));
    }
    let facets = model.facets();
    model.level_facet_counts[2 * facets..].iter_mut().for_each(|c| *c = 0);
    for kind in [DivergenceKind::Language, DivergenceKind::Facet] {
        let m = model_divergence(&model, kind).unwrap();
        assert_eq!(m.excluded, vec![2]);
        assert_eq!(m.labels, vec![0, 1]);
    }
}

#[test]
fn identical_word_distributions_give_zero_language_divergence() {
    let mut model = quick_model(2, 6);
    let est = &mut model.predictor.estimates;
    let half = est.phi.len() / 2;
    let first: Vec<f64> = est.phi[..half].to_vec();
    est.phi[half..].copy_from_slice(&first);
    let facets = est.facets;
    let counts: Vec<u32> = model.level_facet_counts[..facets].to_vec();
    model.level_facet_counts[facets..].copy_from_slice(&counts);
    let m = model_divergence(&model, DivergenceKind::Language).unwrap();
    assert!(m.values.iter().flatten().all(|&x| x.abs() <= 1e-9), "{:?}", m.values);
}

#[test]
fn salient_words_prefer_concentrated_mass() {
    let mut model = quick_model(1, 6);
    let vocab = model.index.vocab_size();
    let est = &mut model.predictor.estimates;
    let target = 7;
    let facet = est.phi[..vocab].iter_mut();
    for (v, p) in facet.enumerate() {
        *p = if v == target { 0.9 } else { 0.1 / (vocab - 1) as f64 };
    }
    let words = salient_words(&model, 0, 0, 3).unwrap();
    assert_eq!(words[0].0, model.index.vocab[target]);
    assert_eq!(words, salient_words(&model, 0, 0, 3).unwrap());
    assert!(salient_words(&model, 0, 0, 0).unwrap().is_empty());
    assert_eq!(salient_words(&model, 0, 0, vocab + 10).unwrap().len(), vocab);
    assert!(salient_words(&model, 1, 0, 3).is_err());
}

#[test]
fn planted_level_vocabularies_separate_proxy_bins() {
    let mut sc = SynthConfig::planted(8);
    sc.vocab_window = Some(100);
    sc.users = 60;
    let s = generate(&sc).unwrap();
    let c = &s.corpus;
    // proxy: mean true level of the user's reviews
    let scores: Vec<f64> = c
        .per_user_docs
        .iter()
        .map(|docs| docs.iter().map(|&p| s.truth.doc_level[c.docs[p].doc_id] as f64).sum::<f64>() / docs.len() as f64)
        .collect();
    let (bins, m) = proxy_bin_study(c, &scores, 3).unwrap();
    assert!(bins.user_bin.iter().all(Option::is_some));
    assert!(m.values[0][2] > m.values[0][1], "{:?}", m.values);
    assert!(m.values[2][0] > m.values[2][1], "{:?}", m.values);
    assert!(proxy_bin_study(c, &scores[..10], 3).is_err());
    assert!(proxy_bin_study(c, &scores, 61).is_err());
}

#[test]
fn opposite_rating_weights_give_distinct_preferences() {
    let mut sc = SynthConfig::planted(9);
    sc.users = 20;
    sc.rating_weights = vec![
        vec![vec![5.0, 5.0, 1.0, 1.0, 1.0]; 3],
        vec![vec![1.0, 1.0, 1.0, 5.0, 5.0]; 3],
    ];
    let s = generate(&sc).unwrap();
    // archetype of user u is u % 2; bin by archetype
    let scores: Vec<Option<f64>> = (0..sc.users).map(|u| Some((u % 2) as f64)).collect();
    let bins = equal_frequency_bins(&scores, 2).unwrap();
    let m = facet_preference_study(&s.corpus, &bins, 5, 50, 9).unwrap();
    assert!(m.values[0][1] > 0.0 && m.values[1][0] > 0.0, "{:?}", m.values);
    assert_eq!(m.values[0][0], 0.0);
}
