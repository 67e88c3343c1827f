//! Brute-force oracles, mechanical invariants and decoder degeneracies.

use rand::Rng as _;

use super::{small_model, Check, Scale};
use crate::cli::{Checkpoint, Provenance};
use crate::clustering::{build_targets, kmeans_fit_with, CodebookSource, KMeansConfig, TargetConfig};
use crate::datagen::{add_noise, generate_corpus, CorpusSpec, GeneratorConfig, Profile, ProfileMix};
use crate::error::Result;
use crate::finetune::{
    beam_search, beam_search_all, evaluate, finetune, greedy_decode, length_normalized, permanently_frozen, wer, DecodeConfig,
    FinetuneConfig, TestCondition,
};
use crate::metrics::pnmi;
use crate::model::{stage_of, ModalityInput, Model, ModelConfig, Stage, Task};
use crate::numcore::Tensor;
use crate::pretrain::{pretrain, sample_modalities, ModalityDropoutConfig, PretrainConfig};
use crate::rng;

/// Lowest within-cluster sum of squares over every split into two
/// non-empty groups.
fn best_two_partition(x: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let sse = |members: &[&Vec<f64>]| -> f64 {
        let d = members[0].len();
        let mean: Vec<f64> = (0..d).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
        members.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum()
    };
    let mut best = f64::INFINITY;
    // Point 0 always sits in the first group, so each split is seen once.
    for bits in 0..(1u32 << (n - 1)) {
        let (mut a, mut b) = (vec![&x[0]], Vec::new());
        for (i, p) in x.iter().enumerate().skip(1) {
            if bits >> (i - 1) & 1 == 1 {
                b.push(p);
            } else {
                a.push(p);
            }
        }
        if !b.is_empty() {
            best = best.min(sse(&a) + sse(&b));
        }
    }
    best
}

fn kmeans_instances(count: usize) -> Result<(usize, f64)> {
    let mut matched = 0;
    let mut worst: f64 = 0.0;
    for i in 0..count as u64 {
        let mut r = rng::stream(i, "oracle/kmeans");
        let n = r.random_range(3..=12);
        let d = r.random_range(1..=3);
        let spread = if i % 2 == 0 { 1.0 } else { 5.0 };
        let x: Vec<Vec<f64>> = (0..n)
            .map(|p| (0..d).map(|_| r.random::<f64>() * 2.0 - 1.0 + spread * (p % 2) as f64 * r.random::<f64>()).collect())
            .collect();
        let t = Tensor::matrix(n, d, x.concat())?;
        let cfg = KMeansConfig { k: 2, max_iters: 100, restarts: 8, max_frames: 1000, seed: i };
        let fit = kmeans_fit_with(&t, &cfg, CodebookSource::A)?;
        let opt = best_two_partition(&x);
        let err = (fit.stats.inertia - opt).abs() / opt.max(1e-12);
        worst = worst.max(err);
        if err <= 1e-9 {
            matched += 1;
        }
    }
    Ok((matched, worst))
}

/// All hypotheses a search limited to `max_len` can return, each scored
/// by one teacher-forced pass over the whole sequence.
fn enumerate_hypotheses(model: &Model, enc: &Tensor, max_len: usize, alpha: f64) -> Result<Vec<(Vec<usize>, f64)>> {
    let eos = model.eos();
    let score = |tokens: &[usize]| -> Result<f64> {
        let mut input = vec![model.bos()];
        input.extend_from_slice(&tokens[..tokens.len() - 1]);
        let lp = model.decoder_step(enc, &input)?;
        let total: f64 = tokens.iter().enumerate().map(|(i, &t)| lp.row(i)[t]).sum();
        Ok(length_normalized(total, tokens.len(), alpha))
    };
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            let mut done = p.clone();
            done.push(eos);
            out.push((done.clone(), score(&done)?));
            for u in 0..model.config.n_units {
                let mut q = p.clone();
                q.push(u);
                next.push(q);
            }
        }
        frontier = next;
    }
    for p in frontier {
        let s = score(&p)?;
        out.push((p, s));
    }
    Ok(out)
}

fn decoder_model(n_units: usize, seed: u64) -> Result<Model> {
    let cfg = ModelConfig { n_units, ..small_model() };
    let mut m = Model::new(cfg, seed)?.with_task_head(Task::Seq2Seq, seed)?;
    m.jitter(0.4, seed);
    Ok(m)
}

fn beam_instances(count: usize) -> Result<(usize, usize)> {
    let (mut matched, mut total) = (0, 0);
    for i in 0..count as u64 {
        let model = decoder_model(2, i)?;
        let enc = Tensor::randn(&[5, model.config.embed_dim], 1.0, &mut rng::stream(i, "oracle/memory"));
        for alpha in [0.0, 0.5, 1.0] {
            let all = enumerate_hypotheses(&model, &enc, 4, alpha)?;
            let best = all.iter().max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0))).expect("non-empty");
            let found = beam_search(&model, &enc, 64, alpha, 4)?;
            total += 1;
            if found.tokens == best.0 && (found.score - best.1).abs() <= 1e-9 {
                matched += 1;
            }
        }
    }
    Ok((matched, total))
}

/// Ten hand-aligned cases: (reference, hypothesis, expected rate).
const WER_TABLE: [(&str, &str, f64); 10] = [
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

pub(super) fn exact_oracles(scale: Scale) -> Result<Vec<Check>> {
    let (n_kmeans, n_beam) = if scale == Scale::Full { (100, 8) } else { (10, 1) };
    let (matched, worst) = kmeans_instances(n_kmeans)?;
    let mut checks = vec![Check::at_least("k-means instances at the exhaustive optimum", matched as f64, n_kmeans as f64)
        .with_detail(format!("worst relative gap {worst:.2e}"))];
    let (b_matched, b_total) = beam_instances(n_beam)?;
    checks.push(Check::at_least("beam searches equal to exhaustive enumeration", b_matched as f64, b_total as f64));

    // Joint counts [[2, 1], [0, 3]]: I = (ln 2)/6 + (1/2) ln(3/2), H(Y) = ln 2.
    let hand = (2f64.ln() / 6.0 + 0.5 * 1.5f64.ln()) / 2f64.ln();
    let got = pnmi(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 1, 1])?;
    let independent = pnmi(&[0, 0, 1, 1], &[0, 1, 0, 1])?;
    let perfect = pnmi(&[0, 0, 0, 1, 1, 1], &[5, 5, 5, 2, 2, 2])?;
    let pnmi_err = (got - hand).abs().max(independent.abs()).max((perfect - 1.0).abs());
    checks.push(Check::at_most("PNMI error on hand tables", pnmi_err, 1e-12));

    let mut wer_err: f64 = 0.0;
    for (r, h, want) in WER_TABLE {
        let r: Vec<&str> = r.split_whitespace().collect();
        let h: Vec<&str> = h.split_whitespace().collect();
        wer_err = wer_err.max((wer(&r, &h)? - want).abs());
    }
    checks.push(Check::at_most("WER error on the hand-aligned table", wer_err, 1e-12));
    Ok(checks)
}

fn bitwise_equal(a: &Model, b: &Model) -> bool {
    a.params.iter().zip(b.params.iter()).all(|((_, n, x), (_, m, y))| n == m && x == y) && a.params.len() == b.params.len()
}

pub(super) fn invariants(scale: Scale) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let generator = GeneratorConfig { seed: 31, ..Default::default() };
    let spec = CorpusSpec { name: "inv".into(), n_utts: 12, min_frames: 20, max_frames: 40, mix: ProfileMix::AB_ONLY };
    let corpus = generate_corpus(&generator, &spec)?;
    let model = Model::new(small_model(), 7)?;

    // Zero-fill: a missing stream behaves exactly like a zero stream.
    let mut zero_fill = true;
    for u in &corpus.utterances {
        let (a, b) = (u.features_a.as_ref().expect("AB"), u.features_b.as_ref().expect("AB"));
        let za = Tensor::zeros(a.shape());
        let zb = Tensor::zeros(b.shape());
        zero_fill &= model.encode(ModalityInput::new(Some(a), None)?, None)? == model.encode(ModalityInput::new(Some(a), Some(&zb))?, None)?;
        zero_fill &= model.encode(ModalityInput::new(None, Some(b))?, None)? == model.encode(ModalityInput::new(Some(&za), Some(b))?, None)?;
    }
    checks.push(Check::flag("zero-fill equals explicit zeros at every layer", zero_fill));

    // Freezing.
    let layers = model.config.layers;
    let frozen_run = |l_frz: usize, n_frz: usize, updates: usize| -> Result<Model> {
        let cfg = FinetuneConfig { updates, n_frz, l_frz, frame_budget: 120, log_interval: 2, seed: 3, ..Default::default() };
        Ok(finetune(&model, &corpus, &cfg)?.model)
    };
    let encoder_of = |m: &Model, l_frz: usize| -> Vec<(String, Tensor)> {
        m.params.iter().filter(|(_, n, _)| permanently_frozen(n, l_frz, layers)).map(|(_, n, t)| (n.to_string(), t.clone())).collect()
    };
    let mut frozen_ok = true;
    for l_frz in 1..=layers {
        frozen_ok &= encoder_of(&frozen_run(l_frz, 1, 4)?, l_frz) == encoder_of(&model, l_frz);
    }
    let head_only = frozen_run(0, 4, 4)?;
    let untouched = |m: &Model| m.params.iter().filter(|(_, n, _)| stage_of(n) != Stage::Head).map(|(_, n, t)| (n.to_string(), t.clone())).collect::<Vec<_>>();
    frozen_ok &= untouched(&head_only) == untouched(&model);
    checks.push(Check::flag("frozen layers and frozen steps leave parameters bitwise unchanged", frozen_ok));

    // Modality sampling frequencies.
    let draws = 100_000usize;
    let mut counts = [0usize; 3];
    let mut r = rng::stream(5, "oracle/modality");
    for _ in 0..draws {
        match sample_modalities(&ModalityDropoutConfig::DEFAULT, Profile::AB, &mut r) {
            Profile::AB => counts[0] += 1,
            Profile::A => counts[1] += 1,
            Profile::B => counts[2] += 1,
        }
    }
    let mut worst_z: f64 = 0.0;
    for (c, p) in counts.iter().zip([0.5, 0.25, 0.25]) {
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        worst_z = worst_z.max((*c as f64 - draws as f64 * p).abs() / sd);
    }
    checks.push(Check::at_most("modality frequencies, largest deviation in standard deviations", worst_z, 3.0).with_detail(format!("{counts:?}")));

    // Noise mixer.
    let mut worst_db: f64 = 0.0;
    let mut r = rng::stream(6, "oracle/noise");
    for u in &corpus.utterances {
        let a = u.features_a.as_ref().expect("AB");
        let (noisy, _) = add_noise(a, 0.0, 1.0, &mut r)?;
        let ps: f64 = a.data().iter().map(|x| x * x).sum();
        let pn: f64 = noisy.data().iter().zip(a.data()).map(|(y, x)| (y - x) * (y - x)).sum();
        worst_db = worst_db.max((10.0 * (ps / pn).log10()).abs());
    }
    checks.push(Check::at_most("noise mixer deviation from 0 dB", worst_db, 0.1));

    // End-to-end reproducibility.
    let updates = if scale == Scale::Full { 6 } else { 2 };
    let pipeline = || -> Result<(Vec<u8>, f64)> {
        let corpus = generate_corpus(&generator, &spec)?;
        let tc = TargetConfig { kmeans: KMeansConfig { k: 8, max_iters: 20, restarts: 2, max_frames: 5000, seed: 1 }, ..Default::default() };
        let targets = build_targets(None, &corpus, 1, &tc)?;
        let pre = pretrain(Model::new(small_model(), 8)?, &corpus, &targets.labels, &PretrainConfig { updates, frame_budget: 120, log_interval: 2, seed: 9, ..Default::default() })?;
        let ck = Checkpoint::new(pre.model.clone(), Some(pre.optimizer), Provenance::new("pipeline", updates as u64)).to_bytes()?;
        let ft = FinetuneConfig { updates, n_frz: 1, frame_budget: 120, log_interval: 2, seed: 10, ..Default::default() };
        let tuned = finetune(&pre.model, &corpus, &ft)?.model;
        let w = evaluate(&tuned, &corpus, TestCondition::AbNoisy, &DecodeConfig::default())?.wer;
        let mut bytes = ck;
        bytes.extend(Checkpoint::new(tuned, None, Provenance::new("pipeline", 0)).to_bytes()?);
        Ok((bytes, w))
    };
    let (first, second) = (pipeline()?, pipeline()?);
    checks.push(Check::flag("pipeline is bitwise reproducible from config and seed", first.0 == second.0 && first.1.to_bits() == second.1.to_bits()));

    // Checkpoint round trip.
    let mut opt_model = model.clone();
    opt_model.jitter(0.1, 3);
    let pre = pretrain(opt_model, &corpus, &corpus.utterances.iter().map(|u| Some(u.unit_labels.iter().map(|&x| x % 8).collect())).collect::<Vec<_>>(), &PretrainConfig { updates: 2, frame_budget: 100, log_interval: 1, seed: 2, ..Default::default() })?;
    let ck = Checkpoint::new(pre.model, Some(pre.optimizer), Provenance::new("round-trip", 2));
    let bytes = ck.to_bytes()?;
    let loaded = Checkpoint::from_bytes(&bytes, std::path::Path::new("<memory>"))?;
    let again = loaded.to_bytes()?;
    let reloaded = Checkpoint::from_bytes(&again, std::path::Path::new("<memory>"))?;
    checks.push(Check::flag("checkpoint load-save-load is bitwise stable", bytes == again && loaded == ck && reloaded == loaded && bitwise_equal(&loaded.model, &ck.model)));
    Ok(checks)
}

pub(super) fn beam_degeneracy(scale: Scale) -> Result<Vec<Check>> {
    let generator = GeneratorConfig { seed: 41, ..Default::default() };
    let n_utts = if scale == Scale::Full { 100 } else { 10 };
    let train = generate_corpus(&generator, &CorpusSpec { name: "train".into(), n_utts: 60, min_frames: 20, max_frames: 40, mix: ProfileMix::AB_ONLY })?;
    let test = generate_corpus(&generator, &CorpusSpec { name: "beam".into(), n_utts, min_frames: 15, max_frames: 30, mix: ProfileMix::AB_ONLY })?;
    let base = Model::new(small_model(), 12)?;
    let ft = FinetuneConfig {
        task: Task::Seq2Seq,
        updates: if scale == Scale::Full { 60 } else { 4 },
        n_frz: 0,
        lr: 3e-3,
        frame_budget: 300,
        log_interval: 10,
        seed: 13,
        ..Default::default()
    };
    let model = finetune(&base, &train, &ft)?.model;
    let mut identical = 0;
    let mut ranked_ok = true;
    for (i, u) in test.utterances.iter().enumerate() {
        let enc = model.encode(ModalityInput::new(u.features_a.as_ref(), u.features_b.as_ref())?, None)?.final_features;
        let max_len = u.transcript.len() + 5;
        let g = greedy_decode(&model, &enc, max_len)?;
        let b = beam_search(&model, &enc, 1, 1.0, max_len)?;
        if g.tokens == b.tokens {
            identical += 1;
        }
        if i < 20 {
            let all = beam_search_all(&model, &enc, 4, 0.0, max_len.min(12))?;
            ranked_ok &= all.windows(2).all(|w| w[0].log_prob >= w[1].log_prob) && all.iter().all(|h| h.score == h.log_prob);
        }
    }
    Ok(vec![
        Check::at_least("utterances where beam 1 equals greedy", identical as f64, n_utts as f64),
        Check::flag("zero length weight ranks by raw log-probability", ranked_ok),
    ])
}
