//! Retrieval metrics and representation diagnostics.

use std::collections::HashMap;
use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::corpus::{CodeQueryPair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{BiEncoder, InputLimits};
use crate::tensor::Float;

/// 1-based rank of `gold` among `scores`; equal scores at lower indices rank first.
pub fn rank_of_gold(scores: ArrayView1<'_, f64>, gold: usize) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("empty candidate pool".into()));
    }
    if gold >= scores.len() {
        return Err(Error::InvalidInput(format!(
            "gold index {gold} outside pool of {}",
            scores.len()
        )));
    }
    let g = scores[gold];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > g || (s == g && i < gold))
        .count();
    Ok(1 + ahead)
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    check_ranks(ranks)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::InvalidInput("no ranks".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::InvalidInput("ranks are 1-based".into()));
    }
    Ok(())
}

fn unit(v: ArrayView1<'_, f64>) -> Result<ndarray::Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if !(n > 0.0) {
        return Err(Error::ZeroVector);
    }
    Ok(v.mapv(|x| x / n))
}

fn sq_dist(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Mean squared distance between normalized pairs.
pub fn align_metric(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.dim(), y.dim())));
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("alignment needs at least one pair".into()));
    }
    let mut total = 0.0;
    for (a, b) in x.rows().into_iter().zip(y.rows()) {
        total += sq_dist(unit(a)?.view(), unit(b)?.view());
    }
    Ok(total / x.nrows() as f64)
}

/// `log mean exp(-2 ‖x - y‖²)` over unordered distinct pairs of normalized rows.
pub fn uniform_metric(reps: ArrayView2<'_, f64>) -> Result<f64> {
    let n = reps.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "uniformity needs at least 2 vectors, got {n}"
        )));
    }
    let units = reps.rows().into_iter().map(unit).collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += (-2.0 * sq_dist(units[i].view(), units[j].view())).exp();
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((sum / pairs).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub query_id: String,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub align: f64,
    pub uniform_code: f64,
    pub uniform_query: f64,
    pub uniform_all: f64,
    pub pool_size: usize,
    pub query_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranks: Vec<QueryRank>,
}

const CSV_FIELDS: [&str; 10] = [
    "mrr",
    "recall_at_1",
    "recall_at_5",
    "recall_at_10",
    "align",
    "uniform_code",
    "uniform_query",
    "uniform_all",
    "pool_size",
    "query_count",
];

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header plus one data row; per-query ranks are omitted.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_FIELDS)?;
        w.write_record([
            self.mrr.to_string(),
            self.recall_at_1.to_string(),
            self.recall_at_5.to_string(),
            self.recall_at_10.to_string(),
            self.align.to_string(),
            self.uniform_code.to_string(),
            self.uniform_query.to_string(),
            self.uniform_all.to_string(),
            self.pool_size.to_string(),
            self.query_count.to_string(),
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Metrics from precomputed unit representations. `gold[i]` indexes the pool
/// row paired with query `i`; `paired_code[i]` is query `i`'s own code
/// representation, used for alignment.
pub fn report_from_reps(
    query_ids: &[String],
    queries: ArrayView2<'_, f64>,
    pool: ArrayView2<'_, f64>,
    gold: &[usize],
    paired_code: ArrayView2<'_, f64>,
) -> Result<EvalReport> {
    if queries.nrows() == 0 {
        return Err(Error::InvalidInput("no queries to evaluate".into()));
    }
    let scores = queries.dot(&pool.t());
    let mut ranks = Vec::with_capacity(queries.nrows());
    for (i, &g) in gold.iter().enumerate() {
        ranks.push(rank_of_gold(scores.row(i), g)?);
    }
    let r: Vec<usize> = ranks.clone();
    let uniform_or_zero = |m: ArrayView2<'_, f64>| if m.nrows() < 2 { Ok(0.0) } else { uniform_metric(m) };
    let all = ndarray::concatenate(ndarray::Axis(0), &[paired_code, queries])
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(EvalReport {
        mrr: mrr(&r)?,
        recall_at_1: recall_at_k(&r, 1)?,
        recall_at_5: recall_at_k(&r, 5)?,
        recall_at_10: recall_at_k(&r, 10)?,
        align: align_metric(paired_code, queries)?,
        uniform_code: uniform_or_zero(paired_code)?,
        uniform_query: uniform_or_zero(queries)?,
        uniform_all: uniform_or_zero(all.view())?,
        pool_size: pool.nrows(),
        query_count: queries.nrows(),
        ranks: query_ids
            .iter()
            .zip(ranks)
            .map(|(id, rank)| QueryRank {
                query_id: id.clone(),
                rank,
            })
            .collect(),
    })
}

/// Ranks every query's gold snippet within `pool`. Gold snippets are matched by id.
pub fn evaluate<T: Float>(
    model: &BiEncoder<T>,
    vocab: &Vocabulary,
    limits: InputLimits,
    queries: &[CodeQueryPair],
    pool: &[CodeQueryPair],
) -> Result<EvalReport> {
    let position: HashMap<&str, usize> = pool.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let gold = queries
        .iter()
        .map(|q| {
            position
                .get(q.id.as_str())
                .copied()
                .ok_or_else(|| Error::GoldMissing { query_id: q.id.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let pool_tokens: Vec<&Vec<String>> = pool.iter().map(|p| &p.code_tokens).collect();
    let query_tokens: Vec<&Vec<String>> = queries.iter().map(|p| &p.query_tokens).collect();
    let pool_reps = to_f64(model.embed_code_tokens(&pool_tokens, vocab, limits)?);
    let query_reps = to_f64(model.embed_query_tokens(&query_tokens, vocab, limits)?);
    let paired = pool_reps.select(ndarray::Axis(0), &gold);
    let ids: Vec<String> = queries.iter().map(|q| q.id.clone()).collect();
    report_from_reps(&ids, query_reps.view(), pool_reps.view(), &gold, paired.view())
}

fn to_f64<T: Float>(m: Array2<T>) -> Array2<f64> {
    m.mapv(|v| v.as_f64())
}

/// Writes `id, modality, v0..v{d-1}, paired_distance` rows: one per code, one per
/// query (distance column empty), and one `distance` row per pair.
pub fn export_embeddings<T: Float, W: Write>(
    model: &BiEncoder<T>,
    vocab: &Vocabulary,
    limits: InputLimits,
    pairs: &[CodeQueryPair],
    out: W,
) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no pairs to export".into()));
    }
    let code: Vec<&Vec<String>> = pairs.iter().map(|p| &p.code_tokens).collect();
    let query: Vec<&Vec<String>> = pairs.iter().map(|p| &p.query_tokens).collect();
    let c = to_f64(model.embed_code_tokens(&code, vocab, limits)?);
    let q = to_f64(model.embed_query_tokens(&query, vocab, limits)?);
    let d = c.ncols();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_owned(), "modality".to_owned()];
    header.extend((0..d).map(|i| format!("v{i}")));
    header.push("paired_distance".to_owned());
    w.write_record(&header)?;
    let blank = vec![String::new(); d];
    for (i, p) in pairs.iter().enumerate() {
        for (modality, m) in [("code", &c), ("query", &q)] {
            let mut row = vec![p.id.clone(), modality.to_owned()];
            row.extend(m.row(i).iter().map(|v| v.to_string()));
            row.push(String::new());
            w.write_record(&row)?;
        }
        let mut row = vec![p.id.clone(), "distance".to_owned()];
        row.extend(blank.iter().cloned());
        row.push(sq_dist(c.row(i), q.row(i)).sqrt().to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<export>", e))?;
    Ok(())
}

/// Hyperparameters a sweep may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "lr")]
    LearningRate,
    #[serde(rename = "m")]
    Momentum,
    #[serde(rename = "r")]
    Ratio,
    #[serde(rename = "tau")]
    Temperature,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LearningRate => "lr",
            SweepParam::Momentum => "m",
            SweepParam::Ratio => "r",
            SweepParam::Temperature => "tau",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(SweepParam::LearningRate),
            "m" => Ok(SweepParam::Momentum),
            "r" => Ok(SweepParam::Ratio),
            "tau" | "τ" | "t" => Ok(SweepParam::Temperature),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other:?}; expected lr, m, r or tau"
            ))),
        }
    }
}

/// Parses `name=v1,v2;name2=v3` into an ordered grid.
pub fn parse_grid(spec: &str) -> Result<Vec<(SweepParam, Vec<f64>)>> {
    let mut grid = Vec::new();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, values) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid entry {part:?} lacks '='")))?;
        let param: SweepParam = name.trim().parse()?;
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad grid value {v:?} for {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::Config(format!("no values for {name}")));
        }
        grid.push((param, values));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub hyperparameter: String,
    pub value: f64,
    pub mrr: Option<f64>,
    pub error: Option<String>,
}

/// Runs `run` once per grid point, one parameter at a time. Failures are
/// recorded in the row instead of ending the sweep.
pub fn sweep<F>(grid: &[(SweepParam, Vec<f64>)], mut run: F) -> Vec<SweepRow>
where
    F: FnMut(SweepParam, f64) -> Result<f64>,
{
    let mut rows = Vec::new();
    for (param, values) in grid {
        for &value in values {
            let outcome = run(*param, value);
            if let Err(e) = &outcome {
                log::warn!("sweep point {}={value} failed: {e}", param.name());
            }
            rows.push(SweepRow {
                hyperparameter: param.name().to_owned(),
                value,
                mrr: outcome.as_ref().ok().copied(),
                error: outcome.err().map(|e| e.to_string()),
            });
        }
    }
    rows
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<sweep>", e))?;
    Ok(())
}

pub fn read_sweep_csv<R: std::io::Read>(input: R) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
