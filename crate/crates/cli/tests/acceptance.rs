//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use axum::body::{to_bytes, Body};
use axum::http::Request;
use codeseek_cli::service::{router, SearchResponse};
use codeseek_core::contrastive::{multimodal_loss, prepare_batch, pretrain_step, PretrainState, Queues, StepSettings};
use codeseek_core::corpus::{build_vocab, MASK};
use codeseek_core::evaluation::{align_metric, mrr, rank_of_gold, recall_at_k, report_from_reps, uniform_metric};
use codeseek_core::lexing::classify_tokens;
use codeseek_core::optim::{AdamW, AdamWConfig};
use codeseek_core::soda::{apply_method, augment_code, augment_query, select_count, SodaMethod};
use codeseek_core::tensor::ParamSet;
use codeseek_core::training::{finetune, initialize, pretrain, random_mrr_baseline, zero_shot_eval, Pretrainer};
use codeseek_core::{
    synthetic, AugmentationConfig, BiEncoder, Checkpoint, CodeQueryPair, ContrastiveConfig, EmbeddingIndex,
    EncoderConfig, InputLimits, RunConfig, Searcher, Vocabulary,
};
use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- shared oracle helpers ----

fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn cos(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// `-log softmax` of the positive among K+1 candidates, written out longhand.
fn brute_info_nce(
    anchor: ArrayView1<'_, f64>,
    positive: ArrayView1<'_, f64>,
    negatives: &Array2<f64>,
    tau: f64,
) -> f64 {
    let pos = (cos(anchor, positive) / tau).exp();
    let mut denom = pos;
    for n in negatives.rows() {
        denom += (cos(anchor, n) / tau).exp();
    }
    -(pos / denom).ln()
}

fn tiny_setup(
    seed: u64,
    bs: usize,
    k: usize,
) -> (
    Vec<CodeQueryPair>,
    Vocabulary,
    BiEncoder<f64>,
    Queues<f64>,
    ContrastiveConfig,
    InputLimits,
) {
    let pairs = synthetic::generate(bs, seed);
    let vocab = build_vocab(&pairs, 1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = BiEncoder::<f64>::new(EncoderConfig::tiny(vocab.len()), &mut rng).unwrap();
    let queues = Queues::random(k, 8, &mut rng).unwrap();
    let cfg = ContrastiveConfig {
        queue_size: k,
        batch_size: bs,
        ..ContrastiveConfig::toy()
    };
    let limits = InputLimits {
        code_max_len: 16,
        query_max_len: 16,
    };
    (pairs, vocab, model, queues, cfg, limits)
}

fn adam(params: &ParamSet<f64>) -> AdamW<f64> {
    AdamW::new(
        AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        },
        params,
    )
}

// ---- criteria ----

fn loss_oracle() -> Outcome {
    let start = Instant::now();
    let (bs, k, tau) = (4, 8, 0.07);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let (pairs, vocab, mut model, mut queues, cfg, limits) = tiny_setup(seed, bs, k);
        let before_model = model.clone();
        let before_queues = queues.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut replay = rng.clone();
        let mut opt = adam(model.code.params());
        let report = pretrain_step::<f64, _, std::io::Sink>(
            &pairs,
            PretrainState {
                model: &mut model,
                queues: &mut queues,
                code_optimizer: &mut opt,
                query_optimizer: None,
            },
            StepSettings {
                config: &cfg,
                vocab: &vocab,
                limits,
                lr: 1e-3,
                clip_norm: Some(1.0),
                step: 0,
            },
            &mut rng,
            None,
        )
        .map_err(|e| e.to_string())?;

        let batch = prepare_batch(&pairs, &cfg.augmentation, &vocab, limits, &mut replay).unwrap();
        let m = &before_model;
        let code = m.code.encode(&batch.code).unwrap();
        let query = m.query_encoder().encode(&batch.query).unwrap();
        let code_key = m.code_momentum.encode(&batch.code_aug).unwrap();
        let query_key = m.query_momentum_encoder().encode(&batch.query_aug).unwrap();
        let code_queue = before_queues.code.entries().to_owned();
        let query_queue = before_queues.query.entries().to_owned();
        let mut total = 0.0;
        for i in 0..bs {
            total += brute_info_nce(query.row(i), code_key.row(i), &code_queue, tau);
            total += brute_info_nce(code.row(i), query_key.row(i), &query_queue, tau);
            total += brute_info_nce(query.row(i), query_key.row(i), &query_queue, tau);
            total += brute_info_nce(code.row(i), code_key.row(i), &code_queue, tau);
        }
        worst = worst.max((total - report.loss.total).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-6 && secs < 5.0,
        format!("max |loss - oracle| = {worst:.2e} over 5 seeds (bs={bs}, K={k}, dim=8) in {secs:.2}s"),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let (pairs, vocab, mut model, queues, cfg, limits) = tiny_setup(3, 4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = prepare_batch(&pairs, &cfg.augmentation, &vocab, limits, &mut rng).unwrap();
    let loss = |m: &BiEncoder<f64>| {
        multimodal_loss::<f64, ChaCha8Rng>(m, &batch, &queues, cfg.temperature, None)
            .unwrap()
            .0
            .total
    };
    let (_, grads, _) = multimodal_loss::<f64, ChaCha8Rng>(&model, &batch, &queues, cfg.temperature, None).unwrap();
    let tensors = model.code.params().len();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probed = 0;
    let mut nonzero = 0;
    while probed < 256 {
        let t = rng.random_range(0..tensors);
        let size = model.code.params().values()[t].len();
        let off = rng.random_range(0..size);
        let orig = model.code.params().scalar(t, off);
        model.code.params_mut().set_scalar(t, off, orig + h);
        let up = loss(&model);
        model.code.params_mut().set_scalar(t, off, orig - h);
        let down = loss(&model);
        model.code.params_mut().set_scalar(t, off, orig);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.code.scalar(t, off);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-7 {
            (analytic - numeric).abs()
        } else {
            (analytic - numeric).abs() / scale
        };
        if scale >= 1e-7 {
            nonzero += 1;
        }
        worst = worst.max(rel);
        probed += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-3 && secs < 60.0 && nonzero >= 100,
        format!("max relative error {worst:.2e} over {probed} parameters ({nonzero} with |g| >= 1e-7) in {secs:.1}s"),
    )
}

fn ema_exactness() -> Outcome {
    let mut worst: f64 = 0.0;
    for m in [0.0, 0.5, 0.999] {
        let pairs = synthetic::generate(16, 1);
        let vocab = build_vocab(&pairs, 1000).unwrap();
        let mut config = RunConfig::toy();
        config.contrastive.momentum = m;
        config.contrastive.queue_size = 32;
        let mut ck = initialize(config, vocab).unwrap();
        // give the momentum encoder its own values so old != live
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let live_before = ck.model.code.params().clone();
        let mut momentum = live_before.clone();
        for v in momentum.values_mut() {
            v.mapv_inplace(|x| x + rng.random_range(-0.01f32..0.01));
        }
        ck.model.code_momentum =
            codeseek_core::encoder::MomentumEncoder::from_params(ck.config.encoder.clone(), momentum).unwrap();
        let old = ck.model.code_momentum.params().clone();
        let mut p = Pretrainer::new(ck, &pairs).unwrap();
        p.step().unwrap().ok_or("step skipped")?;
        let ck = p.into_checkpoint();
        let live = ck.model.code.params();
        if live.max_abs_diff(&live_before) == 0.0 {
            return Err("optimizer step left parameters unchanged".into());
        }
        let new_m = ck.model.code_momentum.params();
        for t in 0..live.len() {
            for ((o, l), n) in old.values()[t]
                .iter()
                .zip(live.values()[t].iter())
                .zip(new_m.values()[t].iter())
            {
                let expected = m * *o as f64 + (1.0 - m) * *l as f64;
                worst = worst.max((expected - *n as f64).abs());
            }
        }
    }
    check(
        worst <= 1e-6,
        format!("max |p_m - (m*old + (1-m)*new)| = {worst:.2e} for m in {{0, 0.5, 0.999}}"),
    )
}

fn cold_start() -> Outcome {
    let pairs = synthetic::generate(512, 0);
    let vocab = build_vocab(&pairs, 20000).unwrap();
    let mut config = RunConfig::toy();
    config.contrastive.queue_size = 512;
    let mut ck = initialize(config, vocab).unwrap();
    let mut rng = ck.rng.take().unwrap();
    let cfg = &ck.config.contrastive;
    let batch = prepare_batch(
        &pairs[..cfg.batch_size],
        &cfg.augmentation,
        &ck.vocab,
        ck.config.limits,
        &mut rng,
    )
    .unwrap();
    let queues = ck.queues.as_ref().unwrap();
    let (loss, _, _) = multimodal_loss::<f32, ChaCha8Rng>(&ck.model, &batch, queues, cfg.temperature, None).unwrap();
    let target = 513f64.ln();
    let parts = [
        ("inter_query", loss.inter_query),
        ("inter_code", loss.inter_code),
        ("intra_query", loss.intra_query),
        ("intra_code", loss.intra_code),
    ];
    let ok = parts.iter().all(|(_, v)| ((v - target) / target).abs() <= 0.10);
    let detail = parts
        .iter()
        .map(|(n, v)| format!("{n}={v:.3}"))
        .collect::<Vec<_>>()
        .join(" ");
    check(ok, format!("{detail} vs ln 513 = {target:.3} (+/-10%)"))
}

fn soda_suite() -> Outcome {
    let cfg = AugmentationConfig::default();
    let pairs = synthetic::generate(1000, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    for method in SodaMethod::ALL {
        let (mut len_ok, mut count_ok, mut kind_ok, mut specified) = (0, 0, 0, 0);
        for p in &pairs {
            let typed = classify_tokens(&p.code_tokens, &p.language);
            let aug = apply_method(method, &typed, &cfg, &mut rng);
            if aug.tokens.len() == typed.len() {
                len_ok += 1;
            }
            let diff: Vec<usize> = (0..typed.len().min(aug.tokens.len()))
                .filter(|&i| aug.tokens[i] != typed[i].text)
                .collect();
            let eligible = match (method, aug.chosen_kind) {
                (SodaMethod::ReplaceSpecifiedType | SodaMethod::MaskSpecifiedType, Some(kind)) => {
                    specified += 1;
                    if diff.iter().all(|&i| typed[i].kind == kind) {
                        kind_ok += 1;
                    }
                    typed.iter().filter(|t| t.kind == kind).count()
                }
                _ => typed.len(),
            };
            if diff.len() == select_count(eligible, cfg.ratio) {
                count_ok += 1;
            }
        }
        if len_ok != 1000 || count_ok != 1000 || kind_ok != specified {
            failures.push(format!(
                "{method}: len {len_ok}/1000 count {count_ok}/1000 kind {kind_ok}/{specified}"
            ));
        }
    }
    let mut freq = [0usize; 4];
    for p in &pairs {
        let aug = augment_code(p, &cfg, &mut rng);
        freq[SodaMethod::ALL.iter().position(|m| *m == aug.method).unwrap()] += 1;
    }
    let freq_ok = freq.iter().all(|&f| (200..=300).contains(&f));
    if !freq_ok {
        failures.push(format!("dispatch {freq:?}"));
    }
    let mut query_ok = 0;
    for p in &pairs {
        let aug = augment_query(&p.query_tokens, &cfg, &mut rng);
        let diff: Vec<usize> = (0..p.query_tokens.len())
            .filter(|&i| aug.tokens[i] != p.query_tokens[i])
            .collect();
        if aug.tokens.len() == p.query_tokens.len()
            && diff.iter().all(|&i| aug.tokens[i] == MASK)
            && diff.len() == select_count(p.query_tokens.len(), cfg.ratio)
        {
            query_ok += 1;
        }
    }
    if query_ok != 1000 {
        failures.push(format!("query masking {query_ok}/1000"));
    }
    let dispatch: Vec<String> = SodaMethod::ALL
        .iter()
        .zip(freq)
        .map(|(m, f)| format!("{m}={:.1}%", f as f64 / 10.0))
        .collect();
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "4x1000 operator calls exact; dispatch {}; 1000 queries mask-only",
                dispatch.join(" ")
            )
        } else {
            failures.join("; ")
        },
    )
}

fn metric_oracle() -> Outcome {
    let ranks = [1, 2, 4];
    let m = mrr(&ranks).unwrap();
    let r1 = recall_at_k(&ranks, 1).unwrap();
    let r5 = recall_at_k(&ranks, 5).unwrap();
    if (m - 7.0 / 12.0).abs() > 1e-12 || (r1 - 1.0 / 3.0).abs() > 1e-12 || r5 != 1.0 {
        return Err(format!("fixture gave MRR {m}, R@1 {r1}, R@5 {r5}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (nq, np, d) = (10, 50, 6);
        let queries = Array2::from_shape_fn((nq, d), |_| rng.random_range(-1.0..1.0));
        let pool = Array2::from_shape_fn((np, d), |_| rng.random_range(-1.0..1.0));
        let unit = |m: &Array2<f64>| {
            let mut m = m.clone();
            for mut row in m.rows_mut() {
                let n = row.dot(&row).sqrt();
                row /= n;
            }
            m
        };
        let (queries, pool) = (unit(&queries), unit(&pool));
        let gold: Vec<usize> = (0..nq).map(|_| rng.random_range(0..np)).collect();
        let paired = Array2::from_shape_fn((nq, d), |(i, j)| pool[[gold[i], j]]);
        let ids: Vec<String> = (0..nq).map(|i| i.to_string()).collect();
        let report = report_from_reps(&ids, queries.view(), pool.view(), &gold, paired.view()).unwrap();
        // brute force: rank = 1 + #better + #equal-with-lower-index
        let mut brute_ranks = Vec::new();
        for i in 0..nq {
            let s = |j: usize| cos(queries.row(i), pool.row(j));
            let g = s(gold[i]);
            let rank = 1 + (0..np).filter(|&j| s(j) > g || (s(j) == g && j < gold[i])).count();
            brute_ranks.push(rank);
            let scores = ndarray::Array1::from_iter((0..np).map(s));
            if rank_of_gold(scores.view(), gold[i]).unwrap() != rank {
                return Err("rank_of_gold disagrees with brute force".into());
            }
        }
        let bm = brute_ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / nq as f64;
        let brk = |k: usize| brute_ranks.iter().filter(|&&r| r <= k).count() as f64 / nq as f64;
        for (a, b) in [
            (report.mrr, bm),
            (report.recall_at_1, brk(1)),
            (report.recall_at_5, brk(5)),
            (report.recall_at_10, brk(10)),
        ] {
            worst = worst.max((a - b).abs());
        }
    }
    check(
        worst <= 1e-9,
        format!("[1,2,4] -> MRR 7/12, R@1 1/3, R@5 1; 10x50 random instances max diff {worst:.1e}"),
    )
}

fn align_uniform_degenerate() -> Outcome {
    let same = Array2::from_shape_fn((5, 4), |(_, j)| [0.3, -0.2, 0.9, 0.1][j]);
    let a = align_metric(same.view(), same.view()).unwrap();
    let u = uniform_metric(same.view()).unwrap();
    let x = ndarray::array![[1.0, 0.0]];
    let y = ndarray::array![[0.0, 1.0]];
    let a2 = align_metric(x.view(), y.view()).unwrap();
    let both = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
    let u2 = uniform_metric(both.view()).unwrap();
    check(
        a == 0.0 && u == 0.0 && (a2 - 2.0).abs() < 1e-12 && (u2 + 4.0).abs() < 1e-12,
        format!("identical: align={a} uniform={u}; orthogonal: align={a2} uniform={u2}"),
    )
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let pairs = synthetic::generate(64, 0);
    let vocab = build_vocab(&pairs, 20000).unwrap();
    let config = RunConfig::toy();
    let epochs = config.training.epochs;
    let ck = initialize(config, vocab).unwrap();
    let (ck, _) = pretrain(ck, &pairs).unwrap();
    let outcome = finetune(ck, &pairs, &pairs, &pairs, None).unwrap();
    let m = zero_shot_eval(&outcome.best, &pairs, &pairs).unwrap().mrr;
    let secs = start.elapsed().as_secs_f64();
    check(
        m >= 0.95 && secs < 300.0 && epochs <= 5,
        format!(
            "MRR {m:.4} after {epochs} fine-tune epochs (best epoch {}) in {secs:.0}s",
            outcome.best_epoch
        ),
    )
}

fn pretraining_usefulness() -> Outcome {
    let all = synthetic::generate(576, 0);
    let (train, held) = all.split_at(512);
    let vocab = build_vocab(train, 20000).unwrap();
    let mut scores = Vec::new();
    for seed in 0..3 {
        let mut config = RunConfig::toy();
        config.training.seed = seed;
        config.training.steps = 500;
        let ck = initialize(config, vocab.clone()).unwrap();
        let (ck, _) = pretrain(ck, train).unwrap();
        scores.push(zero_shot_eval(&ck, held, held).unwrap().mrr);
    }
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[1];
    let baseline = random_mrr_baseline(64);
    check(
        median >= 1.5 * baseline,
        format!(
            "median zero-shot MRR {median:.4} (seeds {scores:.4?}) vs 1.5 x {baseline:.4} = {:.4}",
            1.5 * baseline
        ),
    )
}

fn determinism() -> Outcome {
    let pairs = synthetic::generate(64, 4);
    let vocab = build_vocab(&pairs, 20000).unwrap();
    let mut config = RunConfig::toy();
    config.training.steps = 30;
    let run = || {
        pretrain(initialize(config.clone(), vocab.clone()).unwrap(), &pairs)
            .unwrap()
            .1
    };
    let a = run();
    let b = run();
    let bitwise = a.len() == 30 && a.iter().zip(&b).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits());

    let mut p = Pretrainer::new(initialize(config.clone(), vocab.clone()).unwrap(), &pairs).unwrap();
    p.run_until(15).unwrap();
    let bytes = p.checkpoint().to_bytes().unwrap();
    let resumed = Checkpoint::from_bytes(&bytes).unwrap();
    let mut q = Pretrainer::new(resumed, &pairs).unwrap();
    q.run_until(30).unwrap();
    let suffix = q.trace();
    let worst = suffix
        .iter()
        .zip(&a[15..])
        .map(|(x, y)| {
            if x.step == y.step {
                (x.loss - y.loss).abs()
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    check(
        bitwise && suffix.len() == 15 && worst <= 1e-5,
        format!("30-step traces bitwise equal: {bitwise}; resume at 15 max suffix diff {worst:.1e}"),
    )
}

fn index_search() -> Outcome {
    let d = common::demo();
    let index = EmbeddingIndex::load(&d.index).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.idx");
    index.save(&path).unwrap();
    let back = EmbeddingIndex::load(&path).unwrap();
    let via_bytes = EmbeddingIndex::from_bytes(&index.to_bytes().unwrap()).unwrap();
    let mut worst: f32 = 0.0;
    for other in [&back, &via_bytes] {
        if other.ids() != index.ids()
            || other.entries() != index.entries()
            || other.fingerprint() != index.fingerprint()
        {
            return Err("ids or metadata changed across save/load".into());
        }
        for (a, b) in other.vectors().iter().zip(index.vectors().iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst > 1e-7 {
        return Err(format!("vector drift {worst:e}"));
    }
    let rt = tokio::runtime::Runtime::new().unwrap();
    let queries = [
        "hex string to byte array",
        "read csv rows",
        "convert hex string to byte array",
    ];
    for q in queries {
        let app = router(Searcher::open(&d.index, &d.checkpoint).unwrap(), None);
        let uri = format!("/api/search?q={}&k=5", q.replace(' ', "+"));
        let api: SearchResponse = rt.block_on(async {
            let resp = app
                .oneshot(Request::builder().uri(uri).body(Body::empty()).unwrap())
                .await
                .unwrap();
            serde_json::from_slice(&to_bytes(resp.into_body(), usize::MAX).await.unwrap()).unwrap()
        });
        let stdout = common::ok(&[
            "search",
            "--index",
            common::p(&d.index),
            "--checkpoint",
            common::p(&d.checkpoint),
            "--q",
            q,
            "--k",
            "5",
            "--format",
            "json",
        ]);
        let cli: SearchResponse = serde_json::from_str(&stdout).unwrap();
        if api != cli || api.hits.len() != 5 {
            return Err(format!("API and CLI disagree for {q:?}"));
        }
    }
    Ok(format!(
        "{} entries round-trip exactly (max vector diff {worst:e}); API == CLI on {} demo queries",
        index.len(),
        queries.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("loss oracle", loss_oracle),
        ("gradient check", gradient_check),
        ("EMA exactness", ema_exactness),
        ("cold-start loss level", cold_start),
        ("SoDa suite", soda_suite),
        ("metric oracle", metric_oracle),
        ("align/uniform degenerate cases", align_uniform_degenerate),
        ("overfit sanity", overfit),
        ("pre-training usefulness", pretraining_usefulness),
        ("determinism and resume", determinism),
        ("index round-trip and API == CLI", index_search),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
