use super::*;
use crate::datagen::{CorpusSpec, Generator, GeneratorConfig, ProfileMix};
use crate::model::ModelConfig;

fn tiny_config(n_units: usize) -> ModelConfig {
    ModelConfig { embed_dim: 16, heads: 2, ffn_dim: 32, frontend_dim: 16, layers: 2, n_clusters: 8, n_units, ..Default::default() }
}

fn decoder_model(n_units: usize, seed: u64) -> Model {
    let mut m = Model::new(tiny_config(n_units), seed).unwrap().with_task_head(Task::Seq2Seq, seed + 1).unwrap();
    m.jitter(0.4, seed + 2);
    m
}

fn memory(rows: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, 16], 1.0, &mut rng::stream(seed, "memory"))
}

fn corpus(n: usize, mix: ProfileMix) -> Corpus {
    let generator = Generator::new(GeneratorConfig { seed: 3, ..Default::default() }).unwrap();
    generator.corpus(&CorpusSpec { name: "ft".into(), n_utts: n, min_frames: 20, max_frames: 35, mix }).unwrap()
}

/// Log-probability of `tokens` from one full teacher-forced decoder pass.
fn sequence_log_prob(model: &Model, enc: &Tensor, tokens: &[usize]) -> f64 {
    let mut input = vec![model.bos()];
    input.extend_from_slice(&tokens[..tokens.len() - 1]);
    let lp = model.decoder_step(enc, &input).unwrap();
    tokens.iter().enumerate().map(|(i, &t)| lp.row(i)[t]).sum()
}

/// Every sequence a search of length `max_len` can return, scored.
fn enumerate(model: &Model, enc: &Tensor, max_len: usize, alpha: f64) -> Vec<Hypothesis> {
    let eos = model.eos();
    let units: Vec<usize> = (0..model.config.n_units).collect();
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for len in 1..=max_len {
        let mut next = Vec::new();
        for p in &frontier {
            let mut done = p.clone();
            done.push(eos);
            let lp = sequence_log_prob(model, enc, &done);
            out.push(Hypothesis { score: length_normalized(lp, len, alpha), tokens: done, log_prob: lp, forced: false });
            for &u in &units {
                let mut q = p.clone();
                q.push(u);
                next.push(q);
            }
        }
        frontier = next;
    }
    for p in frontier {
        let lp = sequence_log_prob(model, enc, &p);
        out.push(Hypothesis { score: length_normalized(lp, max_len, alpha), tokens: p, log_prob: lp, forced: true });
    }
    out
}

#[test]
fn wide_beam_matches_exhaustive_search() {
    for seed in 0..3 {
        let model = decoder_model(2, 10 * seed);
        let enc = memory(5, seed);
        for alpha in [0.0, 0.5, 1.0] {
            let all = enumerate(&model, &enc, 4, alpha);
            // 1 + 2 + 4 + 8 finished plus 16 forced.
            assert_eq!(all.len(), 31);
            let best = all.iter().max_by(|a, b| a.score.total_cmp(&b.score).then_with(|| b.tokens.cmp(&a.tokens))).unwrap();
            let found = beam_search(&model, &enc, 64, alpha, 4).unwrap();
            assert_eq!(found.tokens, best.tokens, "seed {seed}, alpha {alpha}");
            assert!((found.score - best.score).abs() < 1e-9);
            assert!((found.log_prob - best.log_prob).abs() < 1e-9);
            assert_eq!(found.forced, best.forced);
            assert_eq!(beam_search_all(&model, &enc, 64, alpha, 4).unwrap().len(), 31);
            for b in 1..4 {
                assert!(beam_search(&model, &enc, b, alpha, 4).unwrap().score <= found.score + 1e-12);
            }
        }
    }
}

#[test]
fn unit_beam_is_greedy() {
    for seed in 0..4 {
        let model = decoder_model(5, seed);
        let enc = memory(7, 100 + seed);
        let g = greedy_decode(&model, &enc, 9).unwrap();
        for alpha in [0.0, 1.0] {
            let b = beam_search(&model, &enc, 1, alpha, 9).unwrap();
            assert_eq!(b.tokens, g.tokens);
            assert!((b.log_prob - g.log_prob).abs() < 1e-12);
        }
        assert!((sequence_log_prob(&model, &enc, &g.tokens) - g.log_prob).abs() < 1e-9);
    }
}

#[test]
fn zero_alpha_ranks_by_log_prob() {
    let model = decoder_model(3, 7);
    let ranked = beam_search_all(&model, &memory(4, 7), 8, 0.0, 5).unwrap();
    for w in ranked.windows(2) {
        assert!(w[0].log_prob >= w[1].log_prob);
        assert_eq!(w[0].score, w[0].log_prob);
    }
    assert!(ranked.iter().all(|h| h.forced == (h.tokens.last() != Some(&model.eos()))));
}

#[test]
fn search_rejects_bad_arguments() {
    let model = decoder_model(3, 1);
    let enc = memory(3, 1);
    assert!(beam_search(&model, &enc, 0, 0.0, 3).is_err());
    assert!(beam_search(&model, &enc, 2, -1.0, 3).is_err());
    let plain = Model::new(tiny_config(3), 1).unwrap();
    assert!(greedy_decode(&plain, &enc, 3).is_err());
    assert!(length_normalized(-3.0, 0, 1.0) == -3.0);
    assert!((length_normalized(-3.0, 4, 0.5) + 1.5).abs() < 1e-15);
}

#[test]
fn word_error_rate_table() {
    let cases: [(&str, &str, f64); 10] = [
        ("a b c", "a b c", 0.0),
        ("a b c", "a x c", 1.0 / 3.0),
        ("a", "a b c", 2.0),
        ("a b c", "", 1.0),
        ("a b c d", "b c d", 0.25),
        ("a b c d", "a b c d e", 0.25),
        ("a b", "b a", 1.0),
        ("a a a", "a", 2.0 / 3.0),
        ("x y z", "p q r", 1.0),
        ("a b c d e f", "a c d x f g", 0.5),
    ];
    for (r, h, want) in cases {
        let r: Vec<&str> = r.split_whitespace().collect();
        let h: Vec<&str> = h.split_whitespace().collect();
        assert!((wer(&r, &h).unwrap() - want).abs() < 1e-12, "{r:?} / {h:?}");
        let al = align(&r, &h);
        assert_eq!(al.reference_len(), r.len());
        assert_eq!(al.hits + al.substitutions + al.insertions, h.len());
        // Swapping the roles exchanges insertions and deletions.
        let back = align(&h, &r);
        assert_eq!(back.edits(), al.edits());
        assert_eq!((back.insertions, back.deletions), (al.deletions, al.insertions));
    }
    assert!(wer::<usize>(&[], &[1]).is_err());
    let sub = align(&["a", "b", "c"], &["a", "x", "c"]);
    assert_eq!(sub, Alignment { hits: 2, substitutions: 1, insertions: 0, deletions: 0 });
}

fn ft_config(updates: usize, n_frz: usize, l_frz: usize) -> FinetuneConfig {
    FinetuneConfig { updates, n_frz, l_frz, frame_budget: 100, log_interval: 2, lr: 3e-3, seed: 4, ..Default::default() }
}

#[test]
fn config_validation() {
    assert!(FinetuneConfig::default().validate(3).is_ok());
    assert!(ft_config(10, 2, 3).validate(2).is_err());
    assert!(ft_config(10, 11, 0).validate(2).is_err());
    assert!(FinetuneConfig { lr: 0.0, ..Default::default() }.validate(3).is_err());
    assert!(permanently_frozen("frontend_a.fc1.weight", 1, 2));
    assert!(!permanently_frozen("frontend_a.fc1.weight", 0, 2));
}

#[test]
fn frozen_layers_stay_bitwise_fixed() {
    let model = Model::new(tiny_config(20), 2).unwrap();
    let data = corpus(6, ProfileMix::AB_ONLY);
    for l_frz in [1, 2] {
        let before = frozen_snapshot(&model, l_frz);
        assert!(!before.is_empty());
        let tuned = finetune(&model, &data, &ft_config(4, 1, l_frz)).unwrap().model;
        assert_eq!(frozen_snapshot(&tuned, l_frz), before);
        let moved = tuned
            .params
            .iter()
            .filter(|(_, n, _)| stage_of(n) != Stage::Head && !permanently_frozen(n, l_frz, 2))
            .any(|(_, n, t)| model.params.iter().find(|(_, m, _)| *m == n).is_some_and(|(_, _, u)| u != t));
        assert_eq!(moved, l_frz < 2, "l_frz {l_frz}");
    }
}

#[test]
fn head_only_phase_leaves_encoder_untouched() {
    let model = Model::new(tiny_config(20), 2).unwrap();
    let data = corpus(6, ProfileMix::AB_ONLY);
    let tuned = finetune(&model, &data, &ft_config(3, 3, 0)).unwrap().model;
    for (_, name, t) in model.params.iter().filter(|(_, n, _)| stage_of(n) != Stage::Head) {
        let after = tuned.params.iter().find(|(_, n, _)| *n == name).unwrap().2;
        assert_eq!(after, t, "{name}");
    }
}

#[test]
fn finetune_is_deterministic_and_learns() {
    let model = Model::new(tiny_config(20), 6).unwrap();
    let data = corpus(10, ProfileMix { ab: 2.0, a: 1.0, b: 1.0 });
    let cfg = FinetuneConfig { updates: 40, n_frz: 0, lr: 5e-3, frame_budget: 120, log_interval: 10, seed: 1, ..Default::default() };
    let a = finetune(&model, &data, &cfg).unwrap();
    let b = finetune(&model, &data, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 4);
    assert!(a.log[3].loss < a.log[0].loss, "{:?}", a.log);
}

#[test]
fn modality_b_needs_a_b_frontend() {
    let cfg = ModelConfig { dim_b: 0, ..tiny_config(20) };
    let model = Model::new(cfg, 1).unwrap();
    let data = corpus(4, ProfileMix::AB_ONLY);
    let err = finetune(&model, &data, &FinetuneConfig { modality: Profile::B, ..ft_config(2, 0, 0) }).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn collapsed_ground_truth_scores_zero_error() {
    let data = corpus(5, ProfileMix::AB_ONLY);
    for u in &data.utterances {
        assert_eq!(wer(&u.transcript, &collapse(&u.unit_labels)).unwrap(), 0.0);
    }
}

#[test]
fn evaluation_is_deterministic_and_checks_streams() {
    let model = Model::new(tiny_config(20), 8).unwrap().with_task_head(Task::FrameTranscription, 1).unwrap();
    let data = corpus(6, ProfileMix::AB_ONLY);
    let decode = DecodeConfig { seed: 5, ..Default::default() };
    let report = evaluate_conditions(&model, &data, &TestCondition::ALL, &decode).unwrap();
    assert_eq!(report, evaluate_conditions(&model, &data, &TestCondition::ALL, &decode).unwrap());
    assert_eq!(report.entries.len(), 5);
    for e in &report.entries {
        assert!(e.wer >= 0.0 && (0.0..=1.0).contains(&e.token_accuracy));
        assert_eq!(e.utterances, 6);
    }
    assert_eq!(report.to_jsonl().lines().count(), 5);
    let a_only = corpus(3, ProfileMix::A_ONLY);
    assert!(evaluate(&model, &a_only, TestCondition::B, &decode).is_err());
    assert!(evaluate(&model, &a_only, TestCondition::AClean, &decode).is_ok());
}

#[test]
fn evaluation_zero_fills_absent_streams() {
    // Restricting the corpus to A gives the same transcripts as the A condition.
    let model = Model::new(tiny_config(20), 9).unwrap().with_task_head(Task::FrameTranscription, 2).unwrap();
    let data = corpus(4, ProfileMix::AB_ONLY);
    let mut restricted = data.clone();
    restricted.utterances = data.utterances.iter().map(|u| u.restricted(Profile::A)).collect();
    let decode = DecodeConfig::default();
    assert_eq!(
        evaluate(&model, &data, TestCondition::AClean, &decode).unwrap().wer,
        evaluate(&model, &restricted, TestCondition::AClean, &decode).unwrap().wer
    );
    for u in &data.utterances {
        let a = u.features_a.as_ref().unwrap();
        let zeros = Tensor::zeros(&[u.frames, u.features_b.as_ref().unwrap().last_dim()]);
        let lhs = transcribe(&model, ModalityInput::new(Some(a), None).unwrap(), &decode).unwrap();
        let rhs = transcribe(&model, ModalityInput::new(Some(a), Some(&zeros)).unwrap(), &decode).unwrap();
        assert_eq!(lhs, rhs);
    }
}

#[test]
fn seq2seq_transcription_respects_length_limit() {
    let model = decoder_model(20, 3);
    let data = corpus(2, ProfileMix::AB_ONLY);
    let decode = DecodeConfig { beam: Some(2), max_len: Some(3), ..Default::default() };
    let u = &data.utterances[0];
    let (tokens, _) = transcribe(&model, ModalityInput::new(u.features_a.as_ref(), u.features_b.as_ref()).unwrap(), &decode).unwrap();
    assert!(tokens.len() <= 3);
    assert!(tokens.iter().all(|&t| t < 20));
}
