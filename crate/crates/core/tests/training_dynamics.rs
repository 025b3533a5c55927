use codeseek_core::contrastive::{multimodal_loss, prepare_batch, pretrain_step, PretrainState, StepSettings};
use codeseek_core::corpus::build_vocab;
use codeseek_core::encoder::MomentumEncoder;
use codeseek_core::training::{finetune, initialize, pretrain, random_mrr_baseline, zero_shot_eval, Pretrainer};
use codeseek_core::{synthetic, CodeQueryPair, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_checkpoint(pairs: &[CodeQueryPair], tweak: impl FnOnce(&mut RunConfig)) -> codeseek_core::Checkpoint {
    let vocab = build_vocab(pairs, 20000).unwrap();
    let mut config = RunConfig::toy();
    tweak(&mut config);
    initialize(config, vocab).unwrap()
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        num += dx * (y - my);
        den += dx * dx;
    }
    num / den
}

#[test]
fn loss_trends_down_over_first_200_steps() {
    let pairs = synthetic::generate(64, 0);
    let ck = toy_checkpoint(&pairs, |c| c.training.steps = 200);
    let (_, trace) = pretrain(ck, &pairs).unwrap();
    assert_eq!(trace.len(), 200);
    let losses: Vec<f64> = trace.iter().map(|r| r.loss).collect();
    let s = slope(&losses);
    assert!(s < 0.0, "slope {s}");
    let head = losses[..20].iter().sum::<f64>() / 20.0;
    let tail = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn advancing_rng_changes_augmentations_and_loss() {
    let pairs = synthetic::generate(16, 2);
    let ck = toy_checkpoint(&pairs, |_| {});
    let cfg = &ck.config.contrastive;
    let queues = ck.queues.as_ref().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut differing = 0;
    for _ in 0..10 {
        let a = prepare_batch(&pairs, &cfg.augmentation, &ck.vocab, ck.config.limits, &mut rng).unwrap();
        let b = prepare_batch(&pairs, &cfg.augmentation, &ck.vocab, ck.config.limits, &mut rng).unwrap();
        let la = multimodal_loss::<f32, ChaCha8Rng>(&ck.model, &a, queues, cfg.temperature, None)
            .unwrap()
            .0;
        let lb = multimodal_loss::<f32, ChaCha8Rng>(&ck.model, &b, queues, cfg.temperature, None)
            .unwrap()
            .0;
        if la.total != lb.total {
            differing += 1;
        }
    }
    assert_eq!(differing, 10);
}

#[test]
fn queues_hold_no_initial_vectors_after_k_over_bs_steps() {
    let pairs = synthetic::generate(64, 1);
    let mut ck = toy_checkpoint(&pairs, |c| {
        c.contrastive.queue_size = 64;
        c.training.steps = 10;
    });
    let initial = ck.queues.clone().unwrap();
    let steps = 64u64.div_ceil(16);
    let mut p = Pretrainer::new(ck, &pairs).unwrap();
    p.run_until(steps - 1).unwrap();
    let partial = p.checkpoint().queues.clone().unwrap();
    let untouched = partial
        .code
        .entries()
        .rows()
        .into_iter()
        .zip(initial.code.entries().rows())
        .filter(|(a, b)| a == b)
        .count();
    assert_eq!(untouched, 16, "one batch of initial rows survives until the last step");
    p.run_until(steps).unwrap();
    ck = p.into_checkpoint();
    let q = ck.queues.unwrap();
    for (now, init) in [(&q.code, &initial.code), (&q.query, &initial.query)] {
        for a in now.entries().rows() {
            assert!(init.entries().rows().into_iter().all(|b| a != b));
        }
        assert_eq!(now.write_head(), 0);
    }
}

#[test]
fn keys_and_queues_are_detached() {
    // The momentum encoder starts away from the live one; after a step it must be
    // exactly the average of its old value and the updated live value, so the
    // optimizer never touched it. Queue rows change only by enqueueing.
    let pairs = synthetic::generate(16, 3);
    let mut ck = toy_checkpoint(&pairs, |c| {
        c.contrastive.momentum = 0.5;
        c.contrastive.queue_size = 32;
    });
    let shifted = {
        let mut p = ck.model.code.params().clone();
        for v in p.values_mut() {
            v.mapv_inplace(|x| x + 0.25);
        }
        p
    };
    ck.model.code_momentum = MomentumEncoder::from_params(ck.config.encoder.clone(), shifted.clone()).unwrap();
    let queues_before = ck.queues.clone().unwrap();
    let live_before = ck.model.code.params().clone();
    let mut rng = ck.rng.take().unwrap();
    let opt = ck.optimizer.as_mut().unwrap();
    let report = pretrain_step::<f32, _, std::io::Sink>(
        &pairs,
        PretrainState {
            model: &mut ck.model,
            queues: ck.queues.as_mut().unwrap(),
            code_optimizer: &mut opt.code,
            query_optimizer: opt.query.as_mut(),
        },
        StepSettings {
            config: &ck.config.contrastive,
            vocab: &ck.vocab,
            limits: ck.config.limits,
            lr: 1e-3,
            clip_norm: Some(1.0),
            step: 0,
        },
        &mut rng,
        None,
    )
    .unwrap();
    assert!(report.grad_norm > 0.0);
    let live = ck.model.code.params();
    assert!(live.max_abs_diff(&live_before) > 0.0);
    let momentum = ck.model.code_momentum.params();
    for t in 0..live.len() {
        for ((m, o), l) in momentum.values()[t]
            .iter()
            .zip(shifted.values()[t].iter())
            .zip(live.values()[t].iter())
        {
            assert!((m - 0.5 * (o + l)).abs() < 1e-6);
        }
    }
    let q = ck.queues.unwrap();
    let rows_kept = q
        .code
        .entries()
        .rows()
        .into_iter()
        .zip(queues_before.code.entries().rows())
        .skip(16)
        .all(|(a, b)| a == b);
    assert!(rows_kept);
    assert_eq!(q.code.write_head(), 16);
}

/// Code and query vocabularies that share nothing, so a random encoder has no
/// lexical shortcut.
fn disjoint_corpus(n: usize, seed: u64) -> Vec<CodeQueryPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| CodeQueryPair {
            id: format!("r:{i}"),
            language: "python".into(),
            code_tokens: (0..12).map(|_| format!("c{}", rng.random_range(0..400))).collect(),
            query_tokens: (0..6).map(|_| format!("w{}", rng.random_range(0..400))).collect(),
            raw_code: None,
            source: None,
        })
        .collect()
}

#[test]
fn random_init_mrr_matches_uniform_expectation() {
    let expected = random_mrr_baseline(64);
    assert!((expected - 0.0742).abs() < 1e-3);
    let mut total = 0.0;
    for seed in 0..20 {
        let pairs = disjoint_corpus(64, 1000 + seed);
        let ck = toy_checkpoint(&pairs, |c| c.training.seed = seed);
        total += zero_shot_eval(&ck, &pairs, &pairs).unwrap().mrr;
    }
    let mean = total / 20.0;
    assert!((mean - expected).abs() <= 0.5 * expected, "mean {mean} vs {expected}");
}

#[test]
fn finetune_records_history_maximum() {
    let pairs = synthetic::generate(48, 5);
    let ck = toy_checkpoint(&pairs, |c| c.training.epochs = 3);
    let out = finetune(ck, &pairs[..32], &pairs[32..], &pairs[32..], None).unwrap();
    assert_eq!(out.history.len(), 3);
    let best = out
        .history
        .iter()
        .map(|e| e.valid_mrr)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best.metadata["valid_mrr"].as_f64().unwrap(), best);
    assert_eq!(out.history[out.best_epoch - 1].valid_mrr, best);
}
