//! Pre-training and fine-tuning loops with deterministic seeding and resumable state.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::config::{RunConfig, Stage};
use crate::contrastive::{finetune_loss, pretrain_step, PretrainState, Queues, StepSettings};
use crate::corpus::{CodeQueryPair, Corpus, Split, Vocabulary};
use crate::encoder::TokenBatch;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::model::BiEncoder;
use crate::optim::{clip_global_norm, AdamWConfig, LinearSchedule};
use crate::soda::AugmentationTrace;
use crate::tensor::ParamSet;

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_NON_FINITE_STEPS: u32 = 3;

const FINETUNE_STREAM_SALT: u64 = 0x5eed_f1e7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub inter: f64,
    pub intra: f64,
    pub inter_query: f64,
    pub inter_code: f64,
    pub intra_query: f64,
    pub intra_code: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// CSV and line-delimited JSON metric streams; either may be absent.
#[derive(Default)]
pub struct MetricsSink {
    csv: Option<csv::Writer<File>>,
    jsonl: Option<BufWriter<File>>,
}

impl MetricsSink {
    pub fn to_files(csv_path: Option<&Path>, jsonl_path: Option<&Path>) -> Result<Self> {
        let csv = csv_path
            .map(|p| csv::Writer::from_path(p).map_err(Error::from))
            .transpose()?;
        let jsonl = jsonl_path
            .map(|p| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e)))
            .transpose()?;
        Ok(Self { csv, jsonl })
    }

    pub fn record<S: Serialize>(&mut self, row: &S) -> Result<()> {
        if let Some(w) = &mut self.csv {
            w.serialize(row)?;
            w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
        }
        if let Some(w) = &mut self.jsonl {
            serde_json::to_writer(&mut *w, row)?;
            w.write_all(b"\n").map_err(|e| Error::io("<metrics jsonl>", e))?;
            w.flush().map_err(|e| Error::io("<metrics jsonl>", e))?;
        }
        Ok(())
    }
}

fn adam_config(lr: f64, weight_decay: f64) -> AdamWConfig {
    AdamWConfig {
        lr,
        weight_decay,
        ..AdamWConfig::default()
    }
}

/// A fresh model, queues and optimizer, all drawn from `config.training.seed`.
pub fn initialize(mut config: RunConfig, vocab: Vocabulary) -> Result<Checkpoint> {
    config.encoder.vocab_size = vocab.len();
    config.validate()?;
    config.encoder.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
    let model = BiEncoder::<f32>::new(config.encoder.clone(), &mut rng)?;
    let queues = Queues::random(config.contrastive.queue_size, config.encoder.hidden_dim, &mut rng)?;
    let optimizer = OptimizerState::new(adam_config(config.training.lr, config.training.weight_decay), &model);
    let mut ck = Checkpoint::new(config, vocab, model)?;
    ck.queues = Some(queues);
    ck.optimizer = Some(optimizer);
    ck.rng = Some(rng);
    Ok(ck)
}

/// Shuffled order of `n` items for `epoch`, a function of `(seed, epoch)` only.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub struct Pretrainer<'a> {
    ck: Checkpoint,
    train: &'a [CodeQueryPair],
    schedule: LinearSchedule,
    trace: Vec<StepRecord>,
    metrics: Option<MetricsSink>,
    checkpoint_dir: Option<PathBuf>,
    augmentation_trace: Option<AugmentationTrace<Box<dyn Write + 'a>>>,
    validation: Option<(&'a [CodeQueryPair], &'a [CodeQueryPair])>,
    validation_log: Vec<(u64, f64)>,
    non_finite_run: u32,
}

impl<'a> Pretrainer<'a> {
    /// Continues from whatever step `ck` has reached.
    pub fn new(mut ck: Checkpoint, train: &'a [CodeQueryPair]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidInput("pre-training needs a non-empty train split".into()));
        }
        if ck.queues.is_none() {
            let mut rng = ck
                .rng
                .clone()
                .unwrap_or_else(|| ChaCha8Rng::seed_from_u64(ck.config.training.seed));
            ck.queues = Some(Queues::random(
                ck.config.contrastive.queue_size,
                ck.config.encoder.hidden_dim,
                &mut rng,
            )?);
            ck.rng = Some(rng);
        }
        if ck.optimizer.is_none() {
            let t = &ck.config.training;
            ck.optimizer = Some(OptimizerState::new(adam_config(t.lr, t.weight_decay), &ck.model));
        }
        if ck.rng.is_none() {
            ck.rng = Some(ChaCha8Rng::seed_from_u64(ck.config.training.seed));
        }
        let t = &ck.config.training;
        let schedule = LinearSchedule::new(t.lr, t.warmup_fraction, t.steps);
        Ok(Self {
            ck,
            train,
            schedule,
            trace: Vec::new(),
            metrics: None,
            checkpoint_dir: None,
            augmentation_trace: None,
            validation: None,
            validation_log: Vec::new(),
            non_finite_run: 0,
        })
    }

    pub fn with_metrics(mut self, sink: MetricsSink) -> Self {
        self.metrics = Some(sink);
        self
    }

    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn with_augmentation_trace(mut self, out: Box<dyn Write + 'a>) -> Self {
        self.augmentation_trace = Some(AugmentationTrace::new(out));
        self
    }

    /// Queries and pool scored every `eval_every` steps.
    pub fn with_validation(mut self, queries: &'a [CodeQueryPair], pool: &'a [CodeQueryPair]) -> Self {
        self.validation = Some((queries, pool));
        self
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ck
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ck
    }

    pub fn trace(&self) -> &[StepRecord] {
        &self.trace
    }

    pub fn validation_log(&self) -> &[(u64, f64)] {
        &self.validation_log
    }

    fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.train.len();
        let bs = self.ck.config.contrastive.batch_size.min(n);
        let per_epoch = (n / bs) as u64;
        let perm = epoch_permutation(n, self.ck.config.training.seed, step / per_epoch);
        let start = (step % per_epoch) as usize * bs;
        perm[start..start + bs].to_vec()
    }

    /// Runs one step. A non-finite step is skipped (no parameter update); the
    /// third in a row aborts with an error.
    pub fn step(&mut self) -> Result<Option<StepRecord>> {
        let step = self.ck.step;
        let batch: Vec<CodeQueryPair> = self
            .batch_indices(step)
            .into_iter()
            .map(|i| self.train[i].clone())
            .collect();
        let lr = self.schedule.lr_at(step);
        let ck = &mut self.ck;
        let optimizer = ck.optimizer.as_mut().expect("set in new");
        let state = PretrainState {
            model: &mut ck.model,
            queues: ck.queues.as_mut().expect("set in new"),
            code_optimizer: &mut optimizer.code,
            query_optimizer: optimizer.query.as_mut(),
        };
        let settings = StepSettings {
            config: &ck.config.contrastive,
            vocab: &ck.vocab,
            limits: ck.config.limits,
            lr,
            clip_norm: ck.config.training.clip_norm,
            step,
        };
        let rng = ck.rng.as_mut().expect("set in new");
        let outcome = pretrain_step(&batch, state, settings, rng, self.augmentation_trace.as_mut());
        ck.step += 1;
        ck.stage = Stage::Pretrain;
        let report = match outcome {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => {
                self.non_finite_run += 1;
                log::warn!("step {step}: non-finite {what}; batch skipped");
                if self.non_finite_run >= MAX_NON_FINITE_STEPS {
                    return Err(Error::NonFinite(format!(
                        "{what} on {} consecutive steps ending at step {step}; aborting",
                        self.non_finite_run
                    )));
                }
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        self.non_finite_run = 0;
        let record = StepRecord {
            step,
            loss: report.loss.total,
            inter: report.loss.inter,
            intra: report.loss.intra,
            inter_query: report.loss.inter_query,
            inter_code: report.loss.inter_code,
            intra_query: report.loss.intra_query,
            intra_code: report.loss.intra_code,
            lr,
            grad_norm: report.grad_norm,
        };
        if let Some(m) = &mut self.metrics {
            m.record(&record)?;
        }
        self.trace.push(record);
        let done = self.ck.step;
        let cfg = &self.ck.config.training;
        if cfg.eval_every > 0 && done.is_multiple_of(cfg.eval_every) {
            if let Some((queries, pool)) = self.validation {
                let r = evaluate(&self.ck.model, &self.ck.vocab, self.ck.config.limits, queries, pool)?;
                log::info!("step {done}: validation MRR {:.4}", r.mrr);
                self.validation_log.push((done, r.mrr));
            }
        }
        if cfg.checkpoint_every > 0 && done.is_multiple_of(cfg.checkpoint_every) {
            if let Some(dir) = &self.checkpoint_dir {
                let path = dir.join(format!("step-{done:07}.ckpt"));
                self.ck.save(&path)?;
                log::info!("saved {}", path.display());
            }
        }
        Ok(Some(record))
    }

    /// Steps until the checkpoint has completed `total_steps` steps.
    pub fn run_until(&mut self, total_steps: u64) -> Result<()> {
        while self.ck.step < total_steps {
            let step = self.ck.step;
            if let Some(r) = self.step()? {
                if step.is_multiple_of(50) {
                    log::info!(
                        "step {step}: loss {:.4} (inter {:.4}, intra {:.4}) lr {:.2e}",
                        r.loss,
                        r.inter,
                        r.intra,
                        r.lr
                    );
                }
            }
        }
        Ok(())
    }
}

/// Pre-trains for `ck.config.training.steps` steps in total.
pub fn pretrain(ck: Checkpoint, train: &[CodeQueryPair]) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let total = ck.config.training.steps;
    let mut p = Pretrainer::new(ck, train)?;
    p.run_until(total)?;
    let trace = p.trace.clone();
    Ok((p.into_checkpoint(), trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub valid_mrr: f64,
}

/// Index of the first maximum; NaN entries never win.
pub fn select_best(mrrs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in mrrs.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| v > mrrs[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub best: Checkpoint,
    /// 1-based epoch of `best`.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Optimizes the in-batch loss for up to `epochs` epochs and keeps the epoch
/// with the highest validation MRR (earliest on ties).
pub fn finetune(
    mut ck: Checkpoint,
    train: &[CodeQueryPair],
    valid: &[CodeQueryPair],
    pool: &[CodeQueryPair],
    mut metrics: Option<&mut MetricsSink>,
) -> Result<FinetuneOutcome> {
    if train.is_empty() {
        return Err(Error::InvalidInput("fine-tuning needs a non-empty train split".into()));
    }
    if valid.is_empty() {
        return Err(Error::InvalidInput(
            "fine-tuning needs a non-empty validation split".into(),
        ));
    }
    let t = ck.config.training.clone();
    let tau = ck.config.contrastive.temperature;
    let symmetric = ck.config.contrastive.symmetric_finetune;
    let limits = ck.config.limits;
    let bs = t.finetune_batch_size.min(train.len());
    let per_epoch = train.len().div_ceil(bs);
    let schedule = LinearSchedule::new(t.finetune_lr, t.warmup_fraction, (per_epoch * t.epochs) as u64);
    let mut rng = ck.rng.take().unwrap_or_else(|| ChaCha8Rng::seed_from_u64(t.seed));
    let mut opt = OptimizerState::new(adam_config(t.finetune_lr, t.weight_decay), &ck.model);
    let dropout = ck.config.encoder.dropout > 0.0;

    let mut history = Vec::with_capacity(t.epochs);
    let mut best: Option<(Checkpoint, usize)> = None;
    let mut global_step = 0u64;
    let mut non_finite_run = 0u32;
    for epoch in 1..=t.epochs {
        let order = epoch_permutation(train.len(), t.seed ^ FINETUNE_STREAM_SALT, epoch as u64);
        let mut losses = Vec::with_capacity(per_epoch);
        for chunk in order.chunks(bs) {
            let code: Vec<&Vec<String>> = chunk.iter().map(|&i| &train[i].code_tokens).collect();
            let query: Vec<&Vec<String>> = chunk.iter().map(|&i| &train[i].query_tokens).collect();
            let code_batch = TokenBatch::encode(&code, &ck.vocab, limits.code_max_len);
            let query_batch = TokenBatch::encode(&query, &ck.vocab, limits.query_max_len);
            let lr = schedule.lr_at(global_step);
            global_step += 1;

            let model = &ck.model;
            let r = if dropout { Some(&mut rng) } else { None };
            let (c_raw, c_cache) = model.code.forward(&code_batch, r)?;
            let r = if dropout { Some(&mut rng) } else { None };
            let (q_raw, q_cache) = model.query_encoder().forward(&query_batch, r)?;
            let (loss, d_c, d_q) = match finetune_loss(c_raw.view(), q_raw.view(), tau, symmetric) {
                Ok(v) if v.0.is_finite() => v,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    non_finite_run += 1;
                    log::warn!("fine-tune epoch {epoch}: non-finite loss; batch skipped");
                    if non_finite_run >= MAX_NON_FINITE_STEPS {
                        return Err(Error::NonFinite(format!(
                            "fine-tuning loss on {non_finite_run} consecutive batches in epoch {epoch}; aborting"
                        )));
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            non_finite_run = 0;
            let mut g_code = model.code.params().zeros_like();
            let mut g_query = model.query.as_ref().map(|q| q.params().zeros_like());
            model.code.backward(&c_cache, d_c.view(), &mut g_code)?;
            model
                .query_encoder()
                .backward(&q_cache, d_q.view(), g_query.as_mut().unwrap_or(&mut g_code))?;
            if let Some(max) = t.clip_norm {
                let mut sets: Vec<&mut ParamSet<f32>> = vec![&mut g_code];
                if let Some(g) = g_query.as_mut() {
                    sets.push(g);
                }
                clip_global_norm(&mut sets, max);
            }
            opt.code.step(ck.model.code.params_mut(), &g_code, lr)?;
            if let (Some(q), Some(g), Some(o)) = (ck.model.query.as_mut(), g_query.as_ref(), opt.query.as_mut()) {
                o.step(q.params_mut(), g, lr)?;
            }
            losses.push(loss);
        }
        let report = evaluate(&ck.model, &ck.vocab, limits, valid, pool)?;
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let record = EpochRecord {
            epoch,
            mean_loss,
            valid_mrr: report.mrr,
        };
        log::info!(
            "fine-tune epoch {epoch}: loss {mean_loss:.4}, valid MRR {:.4}",
            report.mrr
        );
        if let Some(m) = metrics.as_deref_mut() {
            m.record(&record)?;
        }
        history.push(record);
        if best.as_ref().is_none_or(|(_, b)| report.mrr > history[b - 1].valid_mrr) {
            let mut snapshot = ck.clone();
            snapshot.stage = Stage::Finetune;
            snapshot.optimizer = None;
            snapshot.rng = Some(rng.clone());
            snapshot.metadata.insert("valid_mrr".into(), report.mrr.into());
            snapshot.metadata.insert("finetune_epoch".into(), epoch.into());
            best = Some((snapshot, epoch));
        }
    }
    let (best, best_epoch) = best.ok_or_else(|| Error::Config("fine-tuning needs at least one epoch".into()))?;
    Ok(FinetuneOutcome {
        best,
        best_epoch,
        history,
    })
}

/// Evaluates a checkpoint as-is; no parameter changes.
pub fn zero_shot_eval(ck: &Checkpoint, queries: &[CodeQueryPair], pool: &[CodeQueryPair]) -> Result<EvalReport> {
    evaluate(&ck.model, &ck.vocab, ck.config.limits, queries, pool)
}

/// Queries of `split` ranked against the corpus candidate pool, or against the
/// split itself when the corpus has no pool.
pub fn evaluate_split(ck: &Checkpoint, corpus: &Corpus, split: Split) -> Result<EvalReport> {
    let queries = corpus.split_pairs(split);
    if queries.is_empty() {
        return Err(Error::InvalidInput(format!("split {split:?} is empty")));
    }
    let pool = if corpus.candidate_pool.is_empty() {
        queries.clone()
    } else {
        corpus.pool_pairs()
    };
    zero_shot_eval(ck, &queries, &pool)
}

/// `H_n / n`, the expected MRR when the gold rank is uniform on `1..=n`.
pub fn random_mrr_baseline(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64
}
