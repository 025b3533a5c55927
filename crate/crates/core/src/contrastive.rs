//! Contrastive objectives and the momentum pre-training step.
//!
//! Every anchor (a query or a code) is scored against one positive key and the
//! `K` entries of a negative queue. Keys come from the momentum encoders and
//! carry no gradient. The inter-modal term pairs a query with its augmented
//! code (and a code with its augmented query) and draws negatives from the other
//! modality's queue; the intra-modal term pairs each anchor with its own
//! augmentation and draws negatives from its own modality's queue.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{CodeQueryPair, Vocabulary};
use crate::encoder::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{BiEncoder, InputLimits};
use crate::optim::{clip_global_norm, AdamW};
use crate::soda::{augment_code, augment_query, AugmentationConfig, AugmentationTrace, Augmented};
use crate::tensor::{l2_normalize_rows, l2_normalize_rows_backward, Float, ParamSet};

const UNIT_TOLERANCE: f64 = 1e-4;

pub fn cosine_sim<T: Float>(x: ArrayView1<'_, T>, y: ArrayView1<'_, T>) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    let nx = x.dot(&x).sqrt();
    let ny = y.dot(&y).sqrt();
    if !(nx > T::zero()) || !(ny > T::zero()) {
        return Err(Error::ZeroVector);
    }
    let s = x.dot(&y) / (nx * ny);
    // rounding can push |s| a hair past 1
    Ok(s.max(-T::one()).min(T::one()))
}

/// `-log softmax(logits)[0]`, computed stably.
fn neg_log_first(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[0]
}

/// InfoNCE for one anchor with cosine similarity.
pub fn info_nce<T: Float>(
    anchor: ArrayView1<'_, T>,
    positive: ArrayView1<'_, T>,
    negatives: ArrayView2<'_, T>,
    temperature: f64,
) -> Result<f64> {
    if negatives.nrows() == 0 {
        return Err(Error::InvalidInput("InfoNCE needs at least one negative".into()));
    }
    check_temperature(temperature)?;
    let mut logits = Vec::with_capacity(negatives.nrows() + 1);
    logits.push(cosine_sim(anchor, positive)?.as_f64() / temperature);
    for n in negatives.rows() {
        logits.push(cosine_sim(anchor, n)?.as_f64() / temperature);
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("similarity".into()));
    }
    Ok(neg_log_first(&logits))
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {t}")))
    }
}

/// Per-anchor InfoNCE over unit vectors, with the gradient w.r.t. the anchors.
/// Positives and negatives are treated as constants.
pub fn batch_info_nce<T: Float>(
    anchors: ArrayView2<'_, T>,
    positives: ArrayView2<'_, T>,
    negatives: ArrayView2<'_, T>,
    temperature: f64,
) -> Result<(Array1<f64>, Array2<T>)> {
    check_temperature(temperature)?;
    if anchors.dim() != positives.dim() || anchors.ncols() != negatives.ncols() {
        return Err(Error::ShapeMismatch(
            "anchor, positive and negative widths differ".into(),
        ));
    }
    if negatives.nrows() == 0 {
        return Err(Error::InvalidInput("InfoNCE needs at least one negative".into()));
    }
    let inv_t = 1.0 / temperature;
    let neg_sims = anchors.dot(&negatives.t());
    let mut losses = Array1::<f64>::zeros(anchors.nrows());
    let mut grads = Array2::<T>::zeros(anchors.raw_dim());
    let mut logits = vec![0.0f64; negatives.nrows() + 1];
    let mut coeffs = Array2::<T>::zeros((anchors.nrows(), negatives.nrows()));
    for i in 0..anchors.nrows() {
        logits[0] = anchors.row(i).dot(&positives.row(i)).as_f64() * inv_t;
        for (l, s) in logits[1..].iter_mut().zip(neg_sims.row(i)) {
            *l = s.as_f64() * inv_t;
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("similarity for anchor {i}")));
        }
        losses[i] = neg_log_first(&logits);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        // d loss / d anchor = (p0 - 1) pos / t + sum_k p_k neg_k / t
        let mut g = grads.row_mut(i);
        g.scaled_add(T::of((weights[0] / total - 1.0) * inv_t), &positives.row(i));
        for (c, w) in coeffs.row_mut(i).iter_mut().zip(&weights[1..]) {
            *c = T::of(w / total * inv_t);
        }
    }
    grads += &coeffs.dot(&negatives);
    Ok((losses, grads))
}

/// Fixed-capacity FIFO of unit-length keys.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue<T> {
    entries: Array2<T>,
    write_head: usize,
}

impl<T: Float> NegativeQueue<T> {
    /// `capacity` random unit vectors.
    pub fn random<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("queue capacity and dimension must be positive".into()));
        }
        let raw = Array2::from_shape_simple_fn((capacity, dim), || {
            let v: f64 = StandardNormal.sample(rng);
            T::of(v)
        });
        let (entries, _) = l2_normalize_rows(&raw.view())?;
        Ok(Self { entries, write_head: 0 })
    }

    pub fn from_state(entries: Array2<T>, write_head: usize) -> Result<Self> {
        if write_head >= entries.nrows().max(1) {
            return Err(Error::Corrupt(format!("queue write head {write_head} out of range")));
        }
        check_unit_rows(entries.view())?;
        Ok(Self { entries, write_head })
    }

    pub fn capacity(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn write_head(&self) -> usize {
        self.write_head
    }

    pub fn entries(&self) -> ArrayView2<'_, T> {
        self.entries.view()
    }

    /// Overwrites the oldest entries with `keys`, wrapping around the end.
    pub fn enqueue(&mut self, keys: ArrayView2<'_, T>) -> Result<()> {
        if keys.ncols() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "key width {} does not match queue width {}",
                keys.ncols(),
                self.dim()
            )));
        }
        check_unit_rows(keys)?;
        let k = self.capacity();
        for key in keys.rows() {
            self.entries.row_mut(self.write_head).assign(&key);
            self.write_head = (self.write_head + 1) % k;
        }
        Ok(())
    }
}

fn check_unit_rows<T: Float>(rows: ArrayView2<'_, T>) -> Result<()> {
    for (index, r) in rows.rows().into_iter().enumerate() {
        let norm = r.dot(&r).sqrt().as_f64();
        if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::NotNormalized { index, norm });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub momentum: f64,
    pub queue_size: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    /// Adds the query-anchored direction to the fine-tuning loss.
    #[serde(default)]
    pub symmetric_finetune: bool,
}

impl ContrastiveConfig {
    /// τ = 0.07, m = 0.999, K = 4096, batch 128.
    pub fn paper() -> Self {
        Self {
            temperature: 0.07,
            momentum: 0.999,
            queue_size: 4096,
            batch_size: 128,
            augmentation: AugmentationConfig::default(),
            symmetric_finetune: false,
        }
    }

    /// `paper` preset values with K = 512 and batch 16.
    pub fn toy() -> Self {
        Self {
            queue_size: 512,
            batch_size: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} is outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 || self.queue_size == 0 {
            return Err(Error::Config("batch and queue sizes must be positive".into()));
        }
        if !self.queue_size.is_multiple_of(self.batch_size) {
            return Err(Error::Config(format!(
                "queue size {} is not a multiple of batch size {}",
                self.queue_size, self.batch_size
            )));
        }
        self.augmentation.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Queues<T> {
    pub code: NegativeQueue<T>,
    pub query: NegativeQueue<T>,
}

impl<T: Float> Queues<T> {
    pub fn random<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            code: NegativeQueue::random(capacity, dim, rng)?,
            query: NegativeQueue::random(capacity, dim, rng)?,
        })
    }
}

/// The four token batches of one step: originals for the live encoders,
/// augmentations for the momentum encoders.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub code: TokenBatch,
    pub query: TokenBatch,
    pub code_aug: TokenBatch,
    pub query_aug: TokenBatch,
    pub code_augmentations: Vec<Augmented>,
    pub query_augmentations: Vec<Augmented>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }
}

/// Draws fresh augmentations for every pair and encodes all four views.
pub fn prepare_batch<R: Rng + ?Sized>(
    pairs: &[CodeQueryPair],
    augmentation: &AugmentationConfig,
    vocab: &Vocabulary,
    limits: InputLimits,
    rng: &mut R,
) -> Result<PreparedBatch> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    augmentation.validate()?;
    let mut code_augs = Vec::with_capacity(pairs.len());
    let mut query_augs = Vec::with_capacity(pairs.len());
    for p in pairs {
        code_augs.push(augment_code(p, augmentation, rng));
        query_augs.push(augment_query(&p.query_tokens, augmentation, rng));
    }
    let code: Vec<&Vec<String>> = pairs.iter().map(|p| &p.code_tokens).collect();
    let query: Vec<&Vec<String>> = pairs.iter().map(|p| &p.query_tokens).collect();
    let code_aug: Vec<&Vec<String>> = code_augs.iter().map(|a| &a.tokens).collect();
    let query_aug: Vec<&Vec<String>> = query_augs.iter().map(|a| &a.tokens).collect();
    Ok(PreparedBatch {
        code: TokenBatch::encode(&code, vocab, limits.code_max_len),
        query: TokenBatch::encode(&query, vocab, limits.query_max_len),
        code_aug: TokenBatch::encode(&code_aug, vocab, limits.code_max_len),
        query_aug: TokenBatch::encode(&query_aug, vocab, limits.query_max_len),
        code_augmentations: code_augs,
        query_augmentations: query_augs,
    })
}

/// Loss values of one pre-training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `inter + intra`, the optimized quantity.
    pub total: f64,
    /// Sum over the batch of the query- and code-anchored inter-modal terms.
    pub inter: f64,
    pub intra: f64,
    /// Batch means of the four per-anchor terms.
    pub inter_query: f64,
    pub inter_code: f64,
    pub intra_query: f64,
    pub intra_code: f64,
}

/// Gradients for the live encoders; `query` is empty when parameters are shared.
#[derive(Debug, Clone, PartialEq)]
pub struct BiGradients<T> {
    pub code: ParamSet<T>,
    pub query: Option<ParamSet<T>>,
}

impl<T: Float> BiGradients<T> {
    pub fn zeros_for(model: &BiEncoder<T>) -> Self {
        Self {
            code: model.code.params().zeros_like(),
            query: model.query.as_ref().map(|q| q.params().zeros_like()),
        }
    }

    pub fn query_mut(&mut self) -> &mut ParamSet<T> {
        self.query.as_mut().unwrap_or(&mut self.code)
    }

    pub fn global_norm(&self) -> f64 {
        let c = self.code.global_norm();
        let q = self.query.as_ref().map_or(0.0, ParamSet::global_norm);
        (c * c + q * q).sqrt()
    }
}

/// Keys from the momentum encoders, normalized.
pub fn momentum_keys<T: Float>(model: &BiEncoder<T>, batch: &PreparedBatch) -> Result<(Array2<T>, Array2<T>)> {
    let code = model.code_momentum.encode(&batch.code_aug)?;
    let query = model.query_momentum_encoder().encode(&batch.query_aug)?;
    Ok((l2_normalize_rows(&code.view())?.0, l2_normalize_rows(&query.view())?.0))
}

/// Full multimodal loss and live-encoder gradients for a prepared batch.
/// Nothing is mutated. `dropout_rng` switches the live encoders to train mode.
pub fn multimodal_loss<T: Float, R: Rng + ?Sized>(
    model: &BiEncoder<T>,
    batch: &PreparedBatch,
    queues: &Queues<T>,
    temperature: f64,
    mut dropout_rng: Option<&mut R>,
) -> Result<(LossBreakdown, BiGradients<T>, (Array2<T>, Array2<T>))> {
    let (code_keys, query_keys) = momentum_keys(model, batch)?;

    let (code_raw, code_cache) = model.code.forward(&batch.code, dropout_rng.as_deref_mut())?;
    let (query_raw, query_cache) = model.query_encoder().forward(&batch.query, dropout_rng)?;
    let (code_u, code_norms) = l2_normalize_rows(&code_raw.view())?;
    let (query_u, query_norms) = l2_normalize_rows(&query_raw.view())?;

    let qv = query_u.view();
    let cv = code_u.view();
    let (inter_q, g_inter_q) = batch_info_nce(qv, code_keys.view(), queues.code.entries(), temperature)?;
    let (intra_q, g_intra_q) = batch_info_nce(qv, query_keys.view(), queues.query.entries(), temperature)?;
    let (inter_c, g_inter_c) = batch_info_nce(cv, query_keys.view(), queues.query.entries(), temperature)?;
    let (intra_c, g_intra_c) = batch_info_nce(cv, code_keys.view(), queues.code.entries(), temperature)?;

    let inter = inter_q.sum() + inter_c.sum();
    let intra = intra_q.sum() + intra_c.sum();
    let breakdown = LossBreakdown {
        total: inter + intra,
        inter,
        intra,
        inter_query: inter_q.mean().unwrap_or(0.0),
        inter_code: inter_c.mean().unwrap_or(0.0),
        intra_query: intra_q.mean().unwrap_or(0.0),
        intra_code: intra_c.mean().unwrap_or(0.0),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {breakdown:?}")));
    }

    let d_query_u = &g_inter_q + &g_intra_q;
    let d_code_u = &g_inter_c + &g_intra_c;
    let d_query_raw = l2_normalize_rows_backward(&query_u.view(), &query_norms, &d_query_u.view());
    let d_code_raw = l2_normalize_rows_backward(&code_u.view(), &code_norms, &d_code_u.view());

    let mut grads = BiGradients::zeros_for(model);
    model.code.backward(&code_cache, d_code_raw.view(), &mut grads.code)?;
    model
        .query_encoder()
        .backward(&query_cache, d_query_raw.view(), grads.query_mut())?;
    Ok((breakdown, grads, (code_keys, query_keys)))
}

/// Outcome of one pre-training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Mutable state a pre-training step advances.
pub struct PretrainState<'a, T> {
    pub model: &'a mut BiEncoder<T>,
    pub queues: &'a mut Queues<T>,
    pub code_optimizer: &'a mut AdamW<T>,
    pub query_optimizer: Option<&'a mut AdamW<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepSettings<'a> {
    pub config: &'a ContrastiveConfig,
    pub vocab: &'a Vocabulary,
    pub limits: InputLimits,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
}

/// One pre-training step: augment, encode, score against the queues,
/// update the live encoders, move the momentum encoders, then enqueue the keys.
/// On a non-finite loss nothing is updated and the error is returned.
pub fn pretrain_step<T: Float, R: Rng + ?Sized, W: std::io::Write>(
    pairs: &[CodeQueryPair],
    state: PretrainState<'_, T>,
    settings: StepSettings<'_>,
    rng: &mut R,
    trace: Option<&mut AugmentationTrace<W>>,
) -> Result<StepReport> {
    let cfg = settings.config;
    let batch = prepare_batch(pairs, &cfg.augmentation, settings.vocab, settings.limits, rng)?;
    if let Some(trace) = trace {
        for (p, (c, q)) in pairs
            .iter()
            .zip(batch.code_augmentations.iter().zip(&batch.query_augmentations))
        {
            trace.record(settings.step, &p.id, "code", c)?;
            trace.record(settings.step, &p.id, "query", q)?;
        }
    }
    let dropout = if state.model.config().dropout > 0.0 {
        Some(&mut *rng)
    } else {
        None
    };
    let (loss, mut grads, (code_keys, query_keys)) =
        multimodal_loss(state.model, &batch, state.queues, cfg.temperature, dropout)?;

    let grad_norm = {
        let mut sets: Vec<&mut ParamSet<T>> = vec![&mut grads.code];
        if let Some(q) = grads.query.as_mut() {
            sets.push(q);
        }
        match settings.clip_norm {
            Some(max) => clip_global_norm(&mut sets, max),
            None => sets.iter().map(|g| g.global_norm().powi(2)).sum::<f64>().sqrt(),
        }
    };
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm at step {}", settings.step)));
    }

    state
        .code_optimizer
        .step(state.model.code.params_mut(), &grads.code, settings.lr)?;
    if let (Some(q), Some(g), Some(opt)) = (state.model.query.as_mut(), grads.query.as_ref(), state.query_optimizer) {
        opt.step(q.params_mut(), g, settings.lr)?;
    }
    state.model.momentum_update(cfg.momentum)?;
    state.queues.code.enqueue(code_keys.view())?;
    state.queues.query.enqueue(query_keys.view())?;
    Ok(StepReport {
        loss,
        grad_norm,
        lr: settings.lr,
    })
}

/// In-batch fine-tuning loss anchored on code:
/// `-Σ_i log softmax_j(sim(c_i, q_j) / τ)[i]`, plus the query-anchored mirror when
/// `symmetric`. Returns the loss and gradients w.r.t. both raw batches.
pub fn finetune_loss<T: Float>(
    code_reps: ArrayView2<'_, T>,
    query_reps: ArrayView2<'_, T>,
    temperature: f64,
    symmetric: bool,
) -> Result<(f64, Array2<T>, Array2<T>)> {
    check_temperature(temperature)?;
    if code_reps.dim() != query_reps.dim() {
        return Err(Error::ShapeMismatch(format!(
            "code batch {:?} and query batch {:?} differ",
            code_reps.dim(),
            query_reps.dim()
        )));
    }
    if code_reps.nrows() == 0 {
        return Err(Error::InvalidInput("empty fine-tuning batch".into()));
    }
    let (cu, cn) = l2_normalize_rows(&code_reps)?;
    let (qu, qn) = l2_normalize_rows(&query_reps)?;
    let sims = cu.dot(&qu.t());
    let (mut loss, d_sims) = softmax_cross_entropy_diag(&sims.mapv(|s| s.as_f64()), temperature)?;
    let mut d_sims = d_sims;
    if symmetric {
        let (l2, d2) = softmax_cross_entropy_diag(&sims.t().mapv(|s| s.as_f64()), temperature)?;
        loss += l2;
        d_sims += &d2.t();
    }
    let d_sims = d_sims.mapv(T::of);
    let d_cu = d_sims.dot(&qu);
    let d_qu = d_sims.t().dot(&cu);
    let d_code = l2_normalize_rows_backward(&cu.view(), &cn, &d_cu.view());
    let d_query = l2_normalize_rows_backward(&qu.view(), &qn, &d_qu.view());
    Ok((loss, d_code, d_query))
}

/// `-Σ_i log softmax(sims[i] / τ)[i]` and its gradient w.r.t. `sims`.
pub fn softmax_cross_entropy_diag(sims: &Array2<f64>, temperature: f64) -> Result<(f64, Array2<f64>)> {
    let inv_t = 1.0 / temperature;
    let mut grad = Array2::<f64>::zeros(sims.raw_dim());
    let mut loss = 0.0;
    for (i, (row, mut g)) in sims.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))).enumerate() {
        let logits = row.mapv(|s| s * inv_t);
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("similarity row {i}")));
        }
        let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps = logits.mapv(|l| (l - max).exp());
        let sum = exps.sum();
        loss += max + sum.ln() - logits[i];
        Zip::from(&mut g).and(&exps).for_each(|g, &e| *g = e / sum * inv_t);
        g[i] -= inv_t;
    }
    Ok((loss, grad))
}
