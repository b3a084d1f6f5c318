//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

mod common;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use chatprof_autograd::gradcheck::{check_gradients, GradCheckReport};
use chatprof_autograd::transformer::{packed_positions, FeedForward, LayerNorm, MultiHeadAttention};
use chatprof_autograd::{
    AttentionLayout, Decoder, Encoder, Graph, Init, Linear, ParameterStore, Tensor, TransformerConfig,
};
use chatprof_core::corpus::{generate_synthetic_corpus, SyntheticSpec, Vocabulary};
use chatprof_core::encoders::{HistoryInput, ProfileEncoders, Slot};
use chatprof_core::generator::{beam_search, greedy_search, GenerationConfig, Generator, SearchTokens};
use chatprof_core::metrics::{bleu_n, embedding_similarity, persona_coverage, persona_f1, rouge_l};
use chatprof_core::mining::{
    compute_interval_quantiles, consecutive_gaps, mine_response_pairs, mine_user_pairs, nearest_rank, MinedPairs,
    MinerConfig,
};
use chatprof_core::objectives::{generation_loss, info_nce, NegativeMode};
use chatprof_core::pipeline::{
    analyze, evaluate, finetune, mine_pairs, prepare_vocabulary, pretrain, pretraining_step, run_all, Dataset,
    ObjectiveConfig, PretrainBatch, RunConfig,
};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ------------------------------------------------------------ 1. miners

fn miners_match_brute_force() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut resp_total, mut user_total) = (0, 0);
    for case in 0..100 {
        let spec = SyntheticSpec {
            num_users: rng.gen_range(2..=50),
            responses_per_user: rng.gen_range(1..=200),
            num_topics: rng.gen_range(1..=5),
            density: rng.gen_range(0.0..1.0),
            shared_pool_size: rng.gen_range(1..=8),
            private_pool_size: rng.gen_range(1..=8),
            seed: rng.gen(),
            ..Default::default()
        };
        let corpus = generate_synthetic_corpus(&spec).map_err(|e| e.to_string())?.corpus;
        let t_tilde = rng.gen_range(0..2_000);
        let mut cfg = MinerConfig::new(t_tilde, rng.gen_range(0..=t_tilde)).unwrap();
        cfg.s_hat = rng.gen_range(1..=3);
        cfg.max_user_pairs_per_epoch = usize::MAX;
        for h in corpus.users.values() {
            let got: Vec<(usize, usize)> = mine_response_pairs(h, &cfg).iter().map(|p| p.positions).collect();
            let want = brute_response_pairs(h, t_tilde);
            ensure(
                got == want,
                format!("corpus {case}, user {}: response pairs differ", h.user_id),
            )?;
            resp_total += got.len();
        }
        let got: Vec<(String, String, usize)> = mine_user_pairs(&corpus, &cfg, &mut rng)
            .into_iter()
            .map(|p| (p.user_a, p.user_b, p.shared_interlocutors))
            .collect();
        ensure(
            got == brute_user_pairs(&corpus, cfg.s_hat),
            format!("corpus {case}: user pairs differ"),
        )?;
        user_total += got.len();
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "100 corpora, {resp_total} response pairs, {user_total} user pairs, {secs:.1} s"
    ))
}

// ------------------------------------------------------------ 2. quantiles

fn quantiles_match_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let m = rng.gen_range(1..60);
        let values: Vec<i64> = (0..m).map(|_| rng.gen_range(0..50)).collect();
        let mut sorted = values.clone();
        sorted.sort_unstable();
        for q in [0.05, 0.25, 0.5, 0.75, 1.0, rng.gen_range(0.0..=1.0)] {
            let got = nearest_rank(&sorted, q);
            let want = quantile_oracle(&values, q);
            ensure(got == want, format!("case {case}, q {q}: {got} vs {want}"))?;
        }
    }
    // The corpus-level entry point pools gaps the same way.
    let corpus = generate_synthetic_corpus(&SyntheticSpec::default()).unwrap().corpus;
    let gaps = consecutive_gaps(&corpus);
    let got = compute_interval_quantiles(&corpus, &[0.25, 0.05]).unwrap();
    ensure(
        got == vec![quantile_oracle(&gaps, 0.25), quantile_oracle(&gaps, 0.05)],
        "corpus quantiles differ",
    )?;
    Ok("1000 multisets, exact".into())
}

// ------------------------------------------------------------ 3. gradients

const PROBES: usize = 20;
const STEP: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn project(g: &mut Graph<'_, f64>, x: chatprof_autograd::Var, w: &Tensor<f64>) -> chatprof_autograd::Var {
    let w = g.constant(w.clone());
    let m = g.mul(x, w);
    g.sum_all(m)
}

fn record(results: &mut Vec<(String, f64)>, name: &str, report: GradCheckReport) {
    results.push((name.to_string(), report.max_rel_error()));
}

fn small_transformer(layers: usize) -> TransformerConfig {
    TransformerConfig {
        num_layers: layers,
        hidden_size: 8,
        num_heads: 2,
        ff_multiplier: 2,
        max_positions: 16,
        dropout: 0.0,
    }
}

fn block_gradients(results: &mut Vec<(String, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    let mut store = ParameterStore::<f64>::new(1);
    let lin = Linear::new(&mut store, "lin", 5, 6, true).unwrap();
    let x = random_tensor(&mut rng, 4, 5);
    let w = random_tensor(&mut rng, 4, 6);
    let r = check_gradients(
        &mut store,
        |g| {
            let xi = g.constant(x.clone());
            let y = lin.forward(g, xi);
            let y = g.gelu(y);
            project(g, y, &w)
        },
        PROBES,
        STEP,
        |_| true,
        &mut rng,
    );
    record(results, "linear+gelu", r);

    let mut store = ParameterStore::<f64>::new(2);
    let x_id = store.register("x", 3, 8, Init::FanIn(1)).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 8).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let t = random_tensor(&mut rng, store.value(id).rows(), store.value(id).cols());
        *store.value_mut(id) = t;
    }
    let w = random_tensor(&mut rng, 3, 8);
    let r = check_gradients(
        &mut store,
        |g| {
            let x = g.param(x_id);
            let y = ln.forward(g, x);
            project(g, y, &w)
        },
        PROBES,
        STEP,
        |_| true,
        &mut rng,
    );
    record(results, "layer norm", r);

    let mut store = ParameterStore::<f64>::new(3);
    let x_id = store.register("x", 7, 8, Init::FanIn(1)).unwrap();
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2).unwrap();
    let w = random_tensor(&mut rng, 7, 8);
    let mut layout = AttentionLayout::packed_self(&[3, 4], true);
    layout.key_valid[5] = false;
    let layout = Rc::new(layout);
    let r = check_gradients(
        &mut store,
        |g| {
            let x = g.param(x_id);
            let y = mha.forward(g, x, x, &layout);
            project(g, y, &w)
        },
        PROBES,
        STEP,
        |_| true,
        &mut rng,
    );
    record(results, "attention", r);

    let mut store = ParameterStore::<f64>::new(4);
    let emb = store.register("emb", 10, 6, Init::FanIn(1)).unwrap();
    let ff = FeedForward::new(&mut store, "ff", 6, 2).unwrap();
    let w = random_tensor(&mut rng, 2, 6);
    let r = check_gradients(
        &mut store,
        |g| {
            let e = g.param(emb);
            let x = g.gather_rows(e, vec![1, 4, 4, 9, 0]);
            let y = ff.forward(g, x, 0.0);
            let pooled = g.segment_mean(y, vec![vec![0, 1], vec![2, 3, 4]]);
            project(g, pooled, &w)
        },
        PROBES,
        STEP,
        |_| true,
        &mut rng,
    );
    record(results, "feed-forward+embedding+mean pool", r);

    let mut store = ParameterStore::<f64>::new(5);
    let cfg = small_transformer(3);
    let emb = store.register("emb", 12, 8, Init::FanIn(1)).unwrap();
    let enc = Encoder::new(&mut store, "enc", &cfg).unwrap();
    let dec = Decoder::new(&mut store, "dec", &cfg).unwrap();
    let out = Linear::new(&mut store, "out", 8, 12, true).unwrap();
    let r = check_gradients(
        &mut store,
        |g| {
            let e = g.param(emb);
            let src = g.gather_rows(e, vec![2, 3, 4, 5, 6]);
            let pos = g.constant(packed_positions(&[2, 3], 0, 8));
            let src = g.add(src, pos);
            let mem = enc
                .forward(g, src, &Rc::new(AttentionLayout::packed_self(&[2, 3], false)))
                .unwrap();
            let tgt = g.gather_rows(e, vec![1, 7, 1, 8, 9]);
            let tpos = g.constant(packed_positions(&[2, 3], 0, 8));
            let tgt = g.add(tgt, tpos);
            let cross = Rc::new(AttentionLayout::packed_cross(&[2, 3], &[0..2, 2..5], 5));
            let h = dec
                .forward(
                    g,
                    tgt,
                    &Rc::new(AttentionLayout::packed_self(&[2, 3], true)),
                    mem,
                    &cross,
                )
                .unwrap();
            let logits = out.forward(g, h);
            g.cross_entropy(logits, vec![Some(7), Some(2), Some(8), Some(9), Some(2)], None)
        },
        PROBES,
        STEP,
        |_| true,
        &mut rng,
    );
    record(results, "3-layer encoder-decoder", r);
}

fn loss_gradients(results: &mut Vec<(String, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut cfg = tiny_config(Path::new("unused"));
    let t = small_transformer(2);
    cfg.encoders.utterance = t.clone();
    cfg.encoders.history = t.clone();
    cfg.generator.encoder = t.clone();
    cfg.generator.decoder = t;
    let data = Dataset::load(&cfg).unwrap();
    let vocab = Vocabulary::build(&data.mining_corpus, 1, 1000);
    let miner = MinerConfig::from_params(&cfg.mining, &data.mining_corpus).unwrap();
    let pairs = MinedPairs::mine(&data.mining_corpus, &miner, 2, 5);
    assert!(pairs.response.len() >= 3 && pairs.augmented.len() >= 3 && pairs.user.len() >= 2);

    let mut store = ParameterStore::<f64>::new(9);
    let encoders = ProfileEncoders::new(&mut store, &cfg.encoder_config(), vocab.len()).unwrap();
    let cases: [(&str, PretrainBatch, NegativeMode); 4] = [
        (
            "L_utt",
            PretrainBatch {
                response: pairs.response.iter().take(3).collect(),
                ..Default::default()
            },
            NegativeMode::PositivesOnly,
        ),
        (
            "L_utt (both-sides negatives)",
            PretrainBatch {
                response: pairs.response.iter().skip(3).take(3).collect(),
                ..Default::default()
            },
            NegativeMode::BothSides,
        ),
        (
            "L_seq",
            PretrainBatch {
                augmented: pairs.augmented.iter().take(3).collect(),
                ..Default::default()
            },
            NegativeMode::PositivesOnly,
        ),
        (
            "L_user",
            PretrainBatch {
                user: pairs.user.iter().take(2).collect(),
                ..Default::default()
            },
            NegativeMode::PositivesOnly,
        ),
    ];
    for (name, batch, mode) in cases {
        let objectives = ObjectiveConfig {
            negatives: mode,
            ..Default::default()
        };
        let r = check_gradients(
            &mut store,
            |g| {
                pretraining_step(g, &encoders, &vocab, &data.mining_corpus, &batch, 6, &objectives)
                    .unwrap()
                    .0
                    .unwrap()
            },
            PROBES,
            STEP,
            |_| true,
            &mut rng,
        );
        record(results, name, r);
    }

    // Generation loss through profile encoders and generator.
    let mut store = ParameterStore::<f64>::new(10);
    let encoders = ProfileEncoders::new(&mut store, &cfg.encoder_config(), vocab.len()).unwrap();
    let generator = Generator::new(&mut store, &cfg.generator, vocab.len()).unwrap();
    let texts: Vec<Vec<u32>> = data
        .mining_corpus
        .triples()
        .take(4)
        .map(|t| vocab.tokenize(&t.response_text))
        .collect();
    let queries: Vec<Vec<u32>> = data
        .mining_corpus
        .triples()
        .skip(4)
        .take(2)
        .map(|t| vocab.tokenize(&t.query_text))
        .collect();
    let responses: Vec<Vec<u32>> = data
        .mining_corpus
        .triples()
        .skip(4)
        .take(2)
        .map(|t| vocab.tokenize(&t.response_text))
        .collect();
    let histories = vec![
        HistoryInput::new(vec![Slot::Utterance(0), Slot::Utterance(1)]),
        HistoryInput::new(vec![Slot::Utterance(2), Slot::Masked, Slot::Utterance(3)]),
    ];
    let r = check_gradients(
        &mut store,
        |g| {
            let utt = encoders.utterances(g, &texts).unwrap();
            let profiles = encoders.profiles(g, utt, &histories).unwrap();
            generator
                .teacher_forced_loss(g, profiles, &queries, &responses)
                .unwrap()
        },
        PROBES,
        STEP,
        |_| true,
        &mut rng,
    );
    record(results, "L^f", r);
}

fn gradients_match_finite_differences() -> Outcome {
    let start = Instant::now();
    let mut results = Vec::new();
    block_gradients(&mut results);
    loss_gradients(&mut results);
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let failing: Vec<String> = results
        .iter()
        .filter(|(_, e)| *e > TOL)
        .map(|(n, e)| format!("{n} ({e:.2e})"))
        .collect();
    ensure(failing.is_empty(), format!("above tolerance: {}", failing.join(", ")))?;
    ensure(secs < 300.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} checks, worst relative error {worst:.2e}, {secs:.1} s",
        results.len()
    ))
}

// ------------------------------------------------------------ 4. fixtures

fn loss_fixtures() -> Outcome {
    let e1 = [1.0, 0.0];
    let e2 = [0.0, 1.0];
    let e3 = [0.0, 0.0, 1.0];
    let cases = [
        (info_nce(&e1, &e1, &[]), 0.0),
        (
            info_nce(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[&[0.0, 1.0, 0.0], &e3]),
            (1.0 + 2.0 / 1f64.exp()).ln(),
        ),
        (info_nce(&e1, &e2, &[&e2]), 2f64.ln()),
    ];
    // The same values rounded to six digits, as a check on the exact forms.
    #[allow(clippy::approx_constant)]
    let expected_literal = [0.0, 0.551444, 0.693147];
    for (i, ((got, exact), lit)) in cases.iter().zip(expected_literal).enumerate() {
        ensure(
            (got - exact).abs() < 1e-6 && (got - lit).abs() < 1e-6,
            format!("info_nce fixture {i}: {got}"),
        )?;
    }
    let one_hot = generation_loss(&[vec![0.0, 1.0, 0.0, 0.0]], &[1], 99).unwrap();
    let uniform = generation_loss(&[vec![0.25; 4]], &[2], 99).unwrap();
    let two = generation_loss(&[vec![0.5, 0.5, 0.0, 0.0], vec![0.25, 0.25, 0.25, 0.25]], &[0, 3], 99).unwrap();
    for (name, got, want) in [
        ("one-hot", one_hot, 0.0),
        ("uniform", uniform, 4f64.ln()),
        ("two-step", two, 1.039721),
    ] {
        ensure((got - want).abs() < 1e-6, format!("generation_loss {name}: {got}"))?;
    }
    ensure(
        generation_loss(&[vec![0.25; 4]], &[4], 99).is_err(),
        "target out of range accepted",
    )?;
    Ok("info_nce 0 / 0.551444 / 0.693147, generation_loss 0 / ln 4 / 1.039721".into())
}

// ------------------------------------------------------------ 5. metrics

fn metrics_match_oracles() -> Outcome {
    let mut checked = 0;
    for seed in 0..50 {
        let f = MetricFixture::random(seed);
        let stop: HashSet<String> = f.stopwords.iter().cloned().collect();
        let wv = f.word_vectors();
        let idf = f.idf();
        let pairs = [
            (
                "bleu1",
                bleu_n(&f.candidate, &f.reference, 1),
                oracle_bleu(&f.candidate, &f.reference, 1),
            ),
            (
                "bleu2",
                bleu_n(&f.candidate, &f.reference, 2),
                oracle_bleu(&f.candidate, &f.reference, 2),
            ),
            (
                "rougeL",
                rouge_l(&f.candidate, &f.reference),
                oracle_rouge_l(&f.candidate, &f.reference),
            ),
            (
                "persona_f1",
                persona_f1(&f.candidate, &f.history, &stop),
                oracle_persona_f1(&f.candidate, &f.history, &f.stopwords),
            ),
            (
                "persona_cover",
                persona_coverage(&f.candidate, &f.history, &idf),
                oracle_coverage(&f.candidate, &f.history, &f.docs),
            ),
        ];
        for (name, got, want) in pairs {
            ensure(
                (got - want).abs() <= 1e-9,
                format!("fixture {seed}, {name}: {got} vs {want}"),
            )?;
            checked += 1;
        }
        let got = embedding_similarity(&f.candidate, &f.reference, &wv).map(|e| [e.average, e.extreme, e.greedy]);
        let want = oracle_embedding(&f.candidate, &f.reference, &f.vectors);
        match (got, want) {
            (None, None) => checked += 1,
            (Some(g), Some(w)) => {
                for k in 0..3 {
                    ensure(
                        (g[k] - w[k]).abs() <= 1e-9,
                        format!("fixture {seed}, embedding {k}: {} vs {}", g[k], w[k]),
                    )?;
                    checked += 1;
                }
            }
            _ => return Err(format!("fixture {seed}: embedding availability differs")),
        }
    }
    Ok(format!("50 fixtures, {checked} values within 1e-9"))
}

// ------------------------------------------------------------ 6. beam

fn beam_matches_exhaustive() -> Outcome {
    let tokens = SearchTokens {
        bos: 99,
        eos: 0,
        banned: vec![],
    };
    let cfg = |w, len| GenerationConfig {
        beam_width: w,
        max_decode_len: len,
        alpha: 0.0,
    };
    for seed in 0..100 {
        let mut m = TableModel::new(5, seed);
        let beam = beam_search(&mut m, &cfg(1, 6), &tokens).unwrap();
        let greedy = greedy_search(&mut m, &cfg(1, 6), &tokens).unwrap();
        // Independent argmax walk.
        let mut seq = vec![];
        let mut score = 0.0;
        for _ in 0..6 {
            let mut p = vec![tokens.bos];
            p.extend(&seq);
            let d = m.dist(&p);
            let (t, l) = d
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (t, &l)| if l > b.1 { (t, l) } else { b });
            seq.push(t as u32);
            score += l;
            if t as u32 == tokens.eos {
                break;
            }
        }
        ensure(
            beam == greedy,
            format!("seed {seed}: width 1 differs from greedy_search"),
        )?;
        ensure(
            beam.tokens == seq && (beam.score - score).abs() < 1e-12,
            format!("seed {seed}: width 1 is not argmax"),
        )?;
    }

    // Full width over a 3-token vocabulary: 3^(len-1) live hypotheses fit.
    for seed in 0..100 {
        let mut m = TableModel::new(3, 1000 + seed);
        let beam = beam_search(&mut m, &cfg(9, 3), &tokens).unwrap();
        let best = exhaustive(&mut m, &tokens, 3);
        ensure(
            beam == best,
            format!("seed {seed}: full width {beam:?} vs exhaustive {best:?}"),
        )?;
    }

    // Width 2 on hand-built 3-token fixtures where greedy is misled by a
    // locally likely first token.
    let fixtures = width_two_fixtures();
    for (i, mut m) in fixtures.into_iter().enumerate() {
        let best = exhaustive(&mut m, &tokens, 3);
        let greedy = greedy_search(&mut m, &cfg(1, 3), &tokens).unwrap();
        let beam = beam_search(&mut m, &cfg(2, 3), &tokens).unwrap();
        ensure(
            beam == best,
            format!("fixture {i}: width 2 {beam:?} vs exhaustive {best:?}"),
        )?;
        ensure(
            greedy != best,
            format!("fixture {i} does not separate greedy from exhaustive"),
        )?;
    }
    Ok("width 1 = greedy on 100 fixtures; full width and width 2 equal exhaustive".into())
}

fn width_two_fixtures() -> Vec<FixedModel> {
    let d = |a: f64, b: f64, c: f64| vec![a, b, c];
    let model = |entries: Vec<(Vec<u32>, Vec<f64>)>| FixedModel {
        table: entries.into_iter().collect::<HashMap<_, _>>(),
        fallback: d(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
    };
    vec![
        // Token 1 looks best first but leads to a flat tail; token 2 then EOS wins.
        model(vec![
            (vec![], d(0.1, 0.5, 0.4)),
            (vec![1], d(0.3, 0.35, 0.35)),
            (vec![2], d(0.9, 0.05, 0.05)),
        ]),
        // Greedy finishes, but only after a weak middle step.
        model(vec![
            (vec![], d(0.1, 0.5, 0.4)),
            (vec![1], d(0.2, 0.4, 0.4)),
            (vec![2], d(0.8, 0.1, 0.1)),
        ]),
        // Second step reverses the first-step preference.
        model(vec![
            (vec![], d(0.2, 0.42, 0.38)),
            (vec![1], d(0.1, 0.45, 0.45)),
            (vec![2], d(0.05, 0.05, 0.9)),
            (vec![2, 2], d(0.95, 0.025, 0.025)),
        ]),
    ]
}

// ------------------------------------------------------------ 7, 8. analysis

fn pretrained_analysis(out: &Path) -> Result<chatprof_core::pipeline::AnalysisArtifact, String> {
    let mut cfg = RunConfig::default();
    cfg.paths.output_dir = out.to_path_buf();
    let data = Dataset::load(&cfg).map_err(|e| e.to_string())?;
    let vocab = prepare_vocabulary(&cfg, &data).map_err(|e| e.to_string())?;
    let (pairs, _) = mine_pairs(&cfg, &data).map_err(|e| e.to_string())?;
    let trained = pretrain(&cfg, &data, &vocab, &pairs).map_err(|e| e.to_string())?;
    analyze(&cfg, &data, &vocab, &trained.checkpoint, None).map_err(|e| e.to_string())
}

fn separation_effects(tmp: &Path) -> (Outcome, Outcome) {
    let start = Instant::now();
    let artifact = match pretrained_analysis(tmp) {
        Ok(a) => a,
        Err(e) => return (Err(e.clone()), Err(e)),
    };
    let secs = start.elapsed().as_secs_f64();
    let (before, after) = match (&artifact.before.separation, &artifact.after.separation) {
        (Some(b), Some(a)) => (b.clone(), a.clone()),
        _ => {
            let e = "no planted topics in analysis".to_string();
            return (Err(e.clone()), Err(e));
        }
    };
    let seven = (|| {
        ensure(
            before.utterance_gap < 0.05,
            format!("gap at initialization {:.4}", before.utterance_gap),
        )?;
        ensure(
            after.utterance_gap >= 0.15,
            format!("gap after pre-training {:.4}", after.utterance_gap),
        )?;
        ensure(secs < 900.0, format!("took {secs:.0} s"))?;
        Ok(format!(
            "utterance gap {:.4} at init, {:.4} after pre-training ({} utterances, {secs:.0} s)",
            before.utterance_gap, after.utterance_gap, after.utterances
        ))
    })();
    let eight = (|| {
        ensure(
            after.profile_gap >= 0.10,
            format!("profile gap after pre-training {:.4}", after.profile_gap),
        )?;
        Ok(format!(
            "profile cosine similar {:.4} vs dissimilar {:.4} (gap {:.4}; {:.4} at init)",
            after.profile_similar, after.profile_dissimilar, after.profile_gap, before.profile_gap
        ))
    })();
    (seven, eight)
}

// ------------------------------------------------------------ 9. two-stage

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn two_stage_benefit(tmp: &Path) -> Outcome {
    let start = Instant::now();
    let (mut f1_with, mut f1_without, mut loss_with, mut loss_without) = (vec![], vec![], vec![], vec![]);
    for seed in [1u64, 2, 3] {
        for pretrained in [true, false] {
            let mut cfg = RunConfig::default();
            cfg.seed = seed;
            cfg.ablation.no_pretraining = !pretrained;
            cfg.paths.output_dir = tmp.join(format!("seed{seed}-{pretrained}"));
            let run = || -> chatprof_core::Result<(f64, f64)> {
                let data = Dataset::load(&cfg)?;
                let vocab = prepare_vocabulary(&cfg, &data)?;
                let (pairs, _) = mine_pairs(&cfg, &data)?;
                let ckpt = if pretrained {
                    Some(pretrain(&cfg, &data, &vocab, &pairs)?.checkpoint)
                } else {
                    None
                };
                let tuned = finetune(&cfg, &data, &vocab, ckpt.as_deref())?;
                let valid = tuned
                    .epochs
                    .iter()
                    .filter_map(|e| e.valid_loss)
                    .fold(f64::INFINITY, f64::min);
                let report = evaluate(&cfg, &data, &vocab, &tuned.best)?.report;
                Ok((report.persona_f1, valid))
            };
            let (f1, valid) = run().map_err(|e| e.to_string())?;
            if pretrained {
                f1_with.push(f1);
                loss_with.push(valid);
            } else {
                f1_without.push(f1);
                loss_without.push(valid);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (fw, fo, lw, lo) = (
        median(f1_with),
        median(f1_without),
        median(loss_with),
        median(loss_without),
    );
    let summary = format!(
        "median Persona-F1 {fw:.4} vs {fo:.4}, median valid loss {lw:.4} vs {lo:.4} (with vs without), {secs:.0} s"
    );
    ensure(fw > fo, format!("Persona-F1 not higher: {summary}"))?;
    ensure(lw < lo, format!("validation loss not lower: {summary}"))?;
    ensure(secs < 2700.0, format!("took {secs:.0} s"))?;
    Ok(summary)
}

// ------------------------------------------------------------ 10. ablations

fn ablation_wiring(tmp: &Path) -> Outcome {
    let run = |name: &str, tweak: &dyn Fn(&mut RunConfig)| -> Result<Vec<f64>, String> {
        let mut cfg = tiny_config(&tmp.join(name));
        cfg.pretrain.epochs = 1;
        cfg.pretrain.max_steps_per_epoch = Some(10);
        cfg.pretrain.batch_size = 4;
        tweak(&mut cfg);
        let data = Dataset::load(&cfg).map_err(|e| e.to_string())?;
        let vocab = prepare_vocabulary(&cfg, &data).map_err(|e| e.to_string())?;
        let (pairs, _) = mine_pairs(&cfg, &data).map_err(|e| e.to_string())?;
        let out = pretrain(&cfg, &data, &vocab, &pairs).map_err(|e| e.to_string())?;
        Ok(out.log.iter().take(10).map(|s| s.report.l_total).collect())
    };
    let full = run("full", &|_| {})?;
    ensure(full.len() == 10, format!("only {} steps logged", full.len()))?;
    ensure(full == run("full-again", &|_| {})?, "full run not deterministic")?;
    let toggles: [(&str, fn(&mut RunConfig)); 3] = [
        ("disable_utt_task", |c| c.ablation.disable_utt_task = true),
        ("disable_seq_task", |c| c.ablation.disable_seq_task = true),
        ("disable_user_task", |c| c.ablation.disable_user_task = true),
    ];
    for (name, toggle) in toggles {
        let a = run(name, &toggle)?;
        let b = run(&format!("{name}-again"), &toggle)?;
        ensure(a == b, format!("{name}: not deterministic"))?;
        ensure(a != full, format!("{name}: trajectory identical to the full run"))?;
    }
    Ok("each disabled task changes the first 10 losses; reruns identical".into())
}

// ------------------------------------------------------------ 11. reproducibility

fn run_all_reproducible(tmp: &Path) -> Outcome {
    let dir = tmp.join("run");
    let mut cfg = tiny_config(&dir);
    cfg.evaluate.max_examples = None;
    run_all(&cfg).map_err(|e| e.to_string())?;
    let first = read_tree(&dir);
    std::fs::remove_dir_all(&dir).map_err(|e| e.to_string())?;
    run_all(&cfg).map_err(|e| e.to_string())?;
    let second = read_tree(&dir);
    let names: BTreeSet<&String> = first.keys().chain(second.keys()).collect();
    let differing: Vec<&&String> = names.iter().filter(|n| first.get(**n) != second.get(**n)).collect();
    ensure(differing.is_empty(), format!("differing files: {differing:?}"))?;
    for required in [
        "eval/generations.jsonl",
        "eval/metrics.json",
        "finetune/best/manifest.json",
        "pretrain/final/manifest.json",
    ] {
        ensure(first.contains_key(required), format!("missing {required}"))?;
    }
    Ok(format!("{} files bit-identical across two runs", first.len()))
}

// ------------------------------------------------------------ driver

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    // Honor `--list` and name filters passed through `cargo test`.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut push = |n: u32, name: &'static str, r: Outcome| {
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => ("FAIL", e.clone()),
        };
        println!("{tag} criterion {n:>2}: {name}: {detail}");
        results.push((n, name, r));
    };
    push(1, "pair miners match brute force", guarded(miners_match_brute_force));
    push(
        2,
        "nearest-rank quantiles match oracle",
        guarded(quantiles_match_oracle),
    );
    push(
        3,
        "gradients match finite differences",
        guarded(gradients_match_finite_differences),
    );
    push(4, "loss fixtures", guarded(loss_fixtures));
    push(5, "metrics match brute-force oracles", guarded(metrics_match_oracles));
    push(
        6,
        "beam search matches greedy and exhaustive",
        guarded(beam_matches_exhaustive),
    );
    let (seven, eight) = match catch_unwind(AssertUnwindSafe(|| separation_effects(&tmp.path().join("analysis")))) {
        Ok(r) => r,
        Err(_) => (Err("panicked".into()), Err("panicked".into())),
    };
    push(7, "utterance topic separation after pre-training", seven);
    push(8, "profile separation of similar users", eight);
    push(
        9,
        "pre-training improves fine-tuning",
        guarded(|| two_stage_benefit(&tmp.path().join("two-stage"))),
    );
    push(
        10,
        "ablation switches change the loss trajectory",
        guarded(|| ablation_wiring(&tmp.path().join("ablation"))),
    );
    push(
        11,
        "run-all is bit-reproducible",
        guarded(|| run_all_reproducible(&tmp.path().join("repro"))),
    );
    let failed: Vec<u32> = results
        .iter()
        .filter(|(_, _, r)| r.is_err())
        .map(|(n, _, _)| *n)
        .collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
