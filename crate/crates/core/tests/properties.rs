//! Cross-module invariants, checked on generated inputs.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use adtg::config::RunConfig;
use adtg::corpus::{
    compressed_sequence, condition_windows, framewise_labels, split_corpus, split_dataset, synth, ActionId,
    ActionVocabulary,
};
use adtg::embedding::{
    condition_features, cont_loss, disc_loss, disc_losses, predict_post, EmbeddingBundle, EmbeddingConfig, TableKind,
};
use adtg::eval::{
    accuracy, accuracy_excl_null, evaluate, run_ablation, train_model, EvalMode, EvalOptions, Guide, Variant,
};
use adtg::graph::{build_graph, Adtg};
use adtg::guidance::{Guidance, GuidanceBundle, GuidanceConfig};
use adtg::numkit::{cosine_distance, log_softmax, mlp2_forward, Activation, AdamState, Mlp2Params, Tensor};

fn finite(lo: f64, hi: f64, n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_distribution(logits in finite(-30.0, 30.0, 1..12), c in -50.0..50.0f64) {
        let lp = log_softmax(&logits);
        let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
        for (a, b) in log_softmax(&shifted).iter().zip(&lp) {
            prop_assert!((a.exp() - b.exp()).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_distance_is_symmetric_and_scale_free(
        pair in (1usize..16).prop_flat_map(|n| (finite(-5.0, 5.0, n..n + 1), finite(-5.0, 5.0, n..n + 1))),
        alpha in 0.01..100.0f64,
        beta in 0.01..100.0f64,
    ) {
        let (u, v) = pair;
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let d = cosine_distance(&u, &v).unwrap();
        prop_assert!((d - cosine_distance(&v, &u).unwrap()).abs() <= 1e-12);
        let su: Vec<f64> = u.iter().map(|x| alpha * x).collect();
        let sv: Vec<f64> = v.iter().map(|x| beta * x).collect();
        prop_assert!((d - cosine_distance(&su, &sv).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn adam_with_zero_lr_leaves_parameters_alone(w in finite(-3.0, 3.0, 1..10), seed in any::<u64>()) {
        let mut t = Tensor::vector(w.clone()).unwrap();
        let mut adam = AdamState::new([("w".to_string(), &t)]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let g = Tensor::uniform_init(&[w.len()], 1, &mut rng).into_vec();
            adam.step(&mut [&mut t], &[g], 0.0).unwrap();
        }
        prop_assert_eq!(t.as_slice(), &w[..]);
    }

    #[test]
    fn forward_passes_are_bitwise_repeatable(seed in any::<u64>(), x in finite(-2.0, 2.0, 7..8)) {
        let p = Mlp2Params::init(7, 9, 3, Activation::Relu, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = mlp2_forward(&p, &x).unwrap();
        let b = mlp2_forward(&p.clone(), &x).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn split_partitions_the_videos(n in 3usize..200, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("v{i:04}")).collect();
        let s = split_dataset(&ids, seed).unwrap();
        let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        prop_assert_eq!(all.len(), n);
        all.sort();
        prop_assert_eq!(all, ids);
        prop_assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty());
    }
}

/// Transitive closure of a spec's precedence pairs, by action index.
fn precedes(vocab: &ActionVocabulary, order: &[(String, String)]) -> Vec<Vec<bool>> {
    let n = vocab.len();
    let mut before = vec![vec![false; n]; n];
    for (a, b) in order {
        before[vocab.id(a).unwrap().index() - 1][vocab.id(b).unwrap().index() - 1] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                before[i][j] |= before[i][k] && before[k][j];
            }
        }
    }
    before
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthesis_is_reproducible_and_topological(n in 2usize..8, seed in any::<u64>()) {
        let mut spec = synth::random_dag_spec("t", n, seed);
        spec.n_videos = 8;
        let a = synth::generate(&spec).unwrap();
        let b = synth::generate(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        let vocab = &a.task.vocab;
        let before = precedes(vocab, &spec.partial_order);
        for v in &a.task.videos {
            let seq = compressed_sequence(&framewise_labels(v, vocab).unwrap());
            prop_assert_eq!(seq.len(), n);
            for (i, x) in seq.iter().enumerate() {
                for y in &seq[i + 1..] {
                    prop_assert!(!before[y.index() - 1][x.index() - 1], "{:?} placed before {:?}", x, y);
                }
            }
            for s in &v.segments {
                let w = condition_windows(v, s);
                prop_assert_eq!(w.pre.shape(), &[2, spec.feature_dim]);
                prop_assert_eq!(w.post.shape(), &[2, spec.feature_dim]);
            }
        }
    }

    #[test]
    fn excl_null_accuracy_is_accuracy_on_the_filtered_positions(
        pairs in prop::collection::vec((0u32..4, 0u32..4), 1..40)
    ) {
        let pred: Vec<ActionId> = pairs.iter().map(|p| ActionId(p.0)).collect();
        let gt: Vec<ActionId> = pairs.iter().map(|p| ActionId(p.1)).collect();
        let (fp, fg): (Vec<ActionId>, Vec<ActionId>) =
            pred.iter().zip(&gt).filter(|(_, g)| !g.is_null()).map(|(p, g)| (*p, *g)).unzip();
        let got = accuracy_excl_null(&pred, &gt).unwrap();
        if fg.is_empty() {
            prop_assert_eq!(got, None);
        } else {
            prop_assert_eq!(got, Some(accuracy(&fp, &fg).unwrap()));
        }
    }
}

fn small_embedding(seed: u64, margin: f64) -> (EmbeddingBundle, ActionVocabulary) {
    let vocab = ActionVocabulary::new("t", ["a", "b", "c", "d"].map(String::from).to_vec()).unwrap();
    let cfg = EmbeddingConfig { cond_dim: 6, embed_dim: 5, hidden: 7, margin, ..Default::default() };
    (EmbeddingBundle::init(&[&vocab], 4, &cfg, TableKind::Trained, seed).unwrap(), vocab)
}

fn window(v: &[f64]) -> Tensor {
    Tensor::matrix(2, 4, v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_loss_properties(
        seed in any::<u64>(),
        pre in finite(-2.0, 2.0, 8..9),
        post in finite(-2.0, 2.0, 8..9),
        margin in 0.0..2.0f64,
        alpha in 0.01..100.0f64,
        rot in 0usize..3,
    ) {
        let (b, vocab) = small_embedding(seed, margin);
        let rows: Vec<usize> = vocab.action_ids().map(|a| b.row("t", a).unwrap()).collect();
        let (xp, xq) = (window(&pre), window(&post));
        let negs = &rows[1..];
        let c = cont_loss(&b, &xp, &xq, rows[0], negs).unwrap();
        prop_assert!(c >= 0.0);
        let d = disc_losses(&b, &xp, &xq, negs).unwrap();
        if d.iter().all(|x| *x >= margin) {
            prop_assert_eq!(c, 0.0);
        }
        let mut shuffled = negs.to_vec();
        shuffled.rotate_left(rot);
        prop_assert!((cont_loss(&b, &xp, &xq, rows[0], &shuffled).unwrap() - c).abs() <= 1e-12);

        // Rescaling the observed post-condition features changes no distance.
        let f_pre = condition_features(&b, &xp).unwrap();
        let f_post: Vec<f64> = condition_features(&b, &xq).unwrap().iter().map(|x| alpha * x).collect();
        prop_assume!(f_post.iter().any(|x| x.abs() > 1e-9));
        for &r in &rows {
            let pred = predict_post(&b, &f_pre, b.embedding(r)).unwrap();
            prop_assume!(pred.iter().any(|x| x.abs() > 1e-9));
            let scaled = cosine_distance(&pred, &f_post).unwrap();
            prop_assert!((scaled - disc_loss(&b, &xp, &xq, r).unwrap()).abs() <= 1e-12);
        }
    }
}

/// Untrained guidance over a random graph on four actions.
fn guidance_fixture(seed: u64, seqs: &[Vec<u32>]) -> (EmbeddingBundle, GuidanceBundle, Adtg, ActionVocabulary) {
    let (emb, vocab) = small_embedding(seed, 0.5);
    let seqs: Vec<Vec<ActionId>> = seqs.iter().map(|s| s.iter().map(|a| ActionId(*a)).collect()).collect();
    let graph = build_graph(&vocab, &seqs).unwrap().graph;
    let cfg = GuidanceConfig { rnn_hidden: 6, scorer_hidden: 8, ..Default::default() };
    let graphs = BTreeMap::from([("t".to_string(), graph.clone())]);
    let g = GuidanceBundle::init(&emb, &graphs, &cfg, seed ^ 1).unwrap();
    (emb, g, graph, vocab)
}

fn demos() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(1u32..5, 1..6), 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scorer_outputs_are_distributions(seed in any::<u64>(), seqs in demos(), x in finite(-2.0, 2.0, 4..5), shift in -5.0..5.0f64) {
        let (emb, mut g, graph, vocab) = guidance_fixture(seed, &seqs);
        let hist: Vec<ActionId> = seqs[0].iter().map(|a| ActionId(*a)).collect();
        let cands: Vec<ActionId> = std::iter::once(ActionId(0)).chain(vocab.action_ids()).collect();
        let (track, rec) = {
            let view = Guidance::new(&emb, &g).unwrap();
            let state = view.state_after("t", &hist).unwrap();
            let (_, tl) = view.track_step("t", &state, &x, &cands).unwrap();
            let (_, _, rl) = view.recommend(&graph, &state).unwrap();
            (tl, rl)
        };
        for lp in [&track, &rec] {
            prop_assert!((lp.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        // A constant added to every logit through the output bias.
        g.track.b2.as_mut_slice()[0] += shift;
        g.rec.b2.as_mut_slice()[0] += shift;
        let view = Guidance::new(&emb, &g).unwrap();
        let state = view.state_after("t", &hist).unwrap();
        let (_, tl) = view.track_step("t", &state, &x, &cands).unwrap();
        let (_, _, rl) = view.recommend(&graph, &state).unwrap();
        for (a, b) in tl.iter().zip(&track).chain(rl.iter().zip(&rec)) {
            prop_assert!((a.exp() - b.exp()).abs() <= 1e-12);
        }
        prop_assert_eq!(adtg::numkit::argmax(&tl), adtg::numkit::argmax(&track));
        prop_assert_eq!(adtg::numkit::argmax(&rl), adtg::numkit::argmax(&rec));
    }

    #[test]
    fn plans_are_bounded_graph_paths(
        seed in any::<u64>(),
        seqs in demos(),
        x in finite(-2.0, 2.0, 4..5),
        k in 1usize..6,
        max_len in 1usize..10,
    ) {
        let (emb, g, graph, _) = guidance_fixture(seed, &seqs);
        let view = Guidance::new(&emb, &g).unwrap();
        let plan = view.plan(&graph, &x, &[], k, max_len).unwrap();
        let a = &plan.actions;
        prop_assert!(!a.is_empty() && a.len() <= max_len);
        prop_assert!(a.windows(2).all(|w| graph.has_edge(w[0], w[1])));
        if plan.finished {
            prop_assert!(graph.has_edge(*a.last().unwrap(), graph.eos()));
        } else {
            prop_assert_eq!(a.len(), max_len);
        }
        // Trace: one localization step, then one step per chosen successor.
        prop_assert_eq!(plan.trace.len(), a.len() + usize::from(plan.finished));
        if k == 1 {
            prop_assert_eq!(a, &view.greedy_plan(&graph, &x, &[], max_len).unwrap());
        }
    }
}

#[test]
fn ablation_of_full_equals_the_default_pipeline() {
    let mut spec = synth::chain_spec(4, 5);
    spec.n_videos = 12;
    spec.feature_dim = 8;
    let (corpus, _) = synth::generate_suite(&[spec]).unwrap();
    let data = split_corpus(&corpus, 0).unwrap();
    let mut cfg = RunConfig { seeds: vec![0, 1], ..Default::default() };
    cfg.embedding.epochs = 2;
    cfg.guidance.tracker_epochs = 2;
    cfg.guidance.recommender_epochs = 2;

    let via_ablation = run_ablation(Variant::Full, &data, &cfg, &EvalMode::ALL).unwrap();
    let models: Vec<_> = cfg.seeds.iter().map(|s| train_model(&data.train, &cfg, *s).unwrap()).collect();
    let refs: Vec<(u64, &dyn Guide)> = models.iter().map(|m| (m.seed, m as &dyn Guide)).collect();
    let opts = EvalOptions::from_config(&cfg);
    for (mode, r) in EvalMode::ALL.into_iter().zip(&via_ablation) {
        let direct = evaluate(&data.test, &refs, &cfg.seeds, mode, &opts).unwrap();
        assert_eq!(direct.to_json(), r.to_json());
        let again = evaluate(&data.test, &refs, &cfg.seeds, mode, &opts).unwrap();
        assert_eq!(direct.to_json(), again.to_json());
    }
}
