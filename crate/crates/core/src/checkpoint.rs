//! Versioned checkpoint files holding everything needed to resume or serve a model.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Stage};
use crate::container;
use crate::contrastive::{NegativeQueue, Queues};
use crate::corpus::Vocabulary;
use crate::encoder::{Encoder, MomentumEncoder};
use crate::error::{Error, Result};
use crate::model::BiEncoder;
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::ParamSet;

const MAGIC: &[u8; 8] = b"CSEEKCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub code: AdamW<f32>,
    pub query: Option<AdamW<f32>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, model: &BiEncoder<f32>) -> Self {
        Self {
            code: AdamW::new(config.clone(), model.code.params()),
            query: model.query.as_ref().map(|q| AdamW::new(config, q.params())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `config.encoder.vocab_size` always equals `vocab.len()`.
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: BiEncoder<f32>,
    pub queues: Option<Queues<f32>>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<ChaCha8Rng>,
    pub stage: Stage,
    pub step: u64,
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    vocab: Vec<String>,
    vocab_fingerprint: String,
    stage: Stage,
    step: u64,
    rng: Option<ChaCha8Rng>,
    adam: Option<AdamWConfig>,
    optimizer_steps: Option<(u64, Option<u64>)>,
    queue_heads: Option<(usize, usize)>,
    tensors: Vec<TensorEntry>,
    metadata: BTreeMap<String, Value>,
}

struct Writer {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
    offset: usize,
}

impl Writer {
    fn add(&mut self, group: &str, name: &str, value: &ArrayD<f32>) {
        self.entries.push(TensorEntry {
            group: group.to_owned(),
            name: name.to_owned(),
            shape: value.shape().to_vec(),
            offset: self.offset,
        });
        container::f32_bytes(value.iter().copied(), &mut self.payload);
        self.offset += value.len();
    }

    fn add_set(&mut self, group: &str, set: &ParamSet<f32>) {
        for (name, value) in set.iter() {
            self.add(group, name, value);
        }
    }
}

impl Checkpoint {
    pub fn new(config: RunConfig, vocab: Vocabulary, model: BiEncoder<f32>) -> Result<Self> {
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocabulary size {} does not match vocabulary of {}",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }
        Ok(Self {
            config,
            vocab,
            model,
            queues: None,
            optimizer: None,
            rng: None,
            stage: Stage::Init,
            step: 0,
            metadata: BTreeMap::new(),
        })
    }

    /// Restarts every random stream from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.config.training.seed = seed;
        self.rng = Some(<ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed));
    }

    /// Hash of the vocabulary, the encoder configuration and the live encoder weights.
    pub fn model_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.vocab.fingerprint().as_bytes());
        h.update(serde_json::to_vec(&self.config.encoder).expect("config serializes"));
        h.update(serde_json::to_vec(&self.config.limits).expect("limits serialize"));
        for set in self.model.live_params() {
            for (name, v) in set.iter() {
                h.update(name.as_bytes());
                for x in v.iter() {
                    h.update(x.to_le_bytes());
                }
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer {
            entries: Vec::new(),
            payload: Vec::new(),
            offset: 0,
        };
        w.add_set("code", self.model.code.params());
        w.add_set("code_momentum", self.model.code_momentum.params());
        if let Some(q) = &self.model.query {
            w.add_set("query", q.params());
        }
        if let Some(q) = &self.model.query_momentum {
            w.add_set("query_momentum", q.params());
        }
        if let Some(q) = &self.queues {
            w.add("queue.code", "entries", &q.code.entries().to_owned().into_dyn());
            w.add("queue.query", "entries", &q.query.entries().to_owned().into_dyn());
        }
        if let Some(o) = &self.optimizer {
            let (m, v) = o.code.moments();
            w.add_set("adam.code.first", m);
            w.add_set("adam.code.second", v);
            if let Some(q) = &o.query {
                let (m, v) = q.moments();
                w.add_set("adam.query.first", m);
                w.add_set("adam.query.second", v);
            }
        }
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            vocab_fingerprint: self.vocab.fingerprint(),
            stage: self.stage,
            step: self.step,
            rng: self.rng.clone(),
            adam: self.optimizer.as_ref().map(|o| o.code.config.clone()),
            optimizer_steps: self
                .optimizer
                .as_ref()
                .map(|o| (o.code.steps(), o.query.as_ref().map(AdamW::steps))),
            queue_heads: self
                .queues
                .as_ref()
                .map(|q| (q.code.write_head(), q.query.write_head())),
            tensors: w.entries,
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        Ok(container::encode(MAGIC, CHECKPOINT_VERSION, &header, &w.payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let env = container::decode(bytes, MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
        let header: Header = serde_json::from_slice(&env.header)?;
        let vocab = Vocabulary::from_tokens(header.vocab)?;
        if vocab.fingerprint() != header.vocab_fingerprint {
            return Err(Error::Corrupt("checkpoint vocabulary hash mismatch".into()));
        }
        let cfg = header.config;
        let mut groups: BTreeMap<String, ParamSet<f32>> = BTreeMap::new();
        for t in &header.tensors {
            let count = t.shape.iter().product();
            let data = container::read_f32s(&env.payload, t.offset, count)?;
            let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), data).map_err(|e| Error::Corrupt(e.to_string()))?;
            groups.entry(t.group.clone()).or_default().push(t.name.clone(), arr);
        }
        let mut take = |g: &str| groups.remove(g);
        let need = |set: Option<ParamSet<f32>>, g: &str| {
            set.ok_or_else(|| Error::Corrupt(format!("missing tensor group {g}")))
        };

        let enc = &cfg.encoder;
        let code = Encoder::from_params(enc.clone(), need(take("code"), "code")?)?;
        let code_momentum = MomentumEncoder::from_params(enc.clone(), need(take("code_momentum"), "code_momentum")?)?;
        let query = take("query")
            .map(|p| Encoder::from_params(enc.clone(), p))
            .transpose()?;
        let query_momentum = take("query_momentum")
            .map(|p| MomentumEncoder::from_params(enc.clone(), p))
            .transpose()?;
        if query.is_some() != query_momentum.is_some() || query.is_some() == enc.share_code_query {
            return Err(Error::Corrupt(
                "query encoder presence disagrees with the sharing flag".into(),
            ));
        }
        let model = BiEncoder {
            code,
            query,
            code_momentum,
            query_momentum,
        };

        let queues = match header.queue_heads {
            Some((hc, hq)) => {
                let mut queue = |g: &str, head: usize| -> Result<NegativeQueue<f32>> {
                    let set = need(take(g), g)?;
                    let m: Array2<f32> = set.values()[0]
                        .clone()
                        .into_dimensionality()
                        .map_err(|e| Error::Corrupt(e.to_string()))?;
                    NegativeQueue::from_state(m, head)
                };
                Some(Queues {
                    code: queue("queue.code", hc)?,
                    query: queue("queue.query", hq)?,
                })
            }
            None => None,
        };

        let optimizer = match (header.optimizer_steps, header.adam) {
            (Some((code_steps, query_steps)), Some(adam)) => {
                let code = AdamW::from_state(
                    adam.clone(),
                    need(take("adam.code.first"), "adam.code.first")?,
                    need(take("adam.code.second"), "adam.code.second")?,
                    code_steps,
                )?;
                let query = match query_steps {
                    Some(s) => Some(AdamW::from_state(
                        adam,
                        need(take("adam.query.first"), "adam.query.first")?,
                        need(take("adam.query.second"), "adam.query.second")?,
                        s,
                    )?),
                    None => None,
                };
                Some(OptimizerState { code, query })
            }
            _ => None,
        };
        if let Some(extra) = groups.keys().next() {
            return Err(Error::Corrupt(format!("unexpected tensor group {extra}")));
        }

        let ckpt = Checkpoint {
            config: cfg,
            vocab,
            model,
            queues,
            optimizer,
            rng: header.rng,
            stage: header.stage,
            step: header.step,
            metadata: header.metadata,
        };
        if ckpt.config.encoder.vocab_size != ckpt.vocab.len() {
            return Err(Error::Corrupt(
                "encoder vocabulary size disagrees with stored vocabulary".into(),
            ));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;
    use rand::SeedableRng;

    fn sample(shared: bool) -> Checkpoint {
        let pairs = synthetic::generate(20, 1);
        let vocab = crate::corpus::build_vocab(&pairs, 1000).unwrap();
        let mut cfg = RunConfig::toy();
        cfg.encoder = crate::encoder::EncoderConfig::tiny(vocab.len());
        cfg.encoder.share_code_query = shared;
        cfg.limits = crate::model::InputLimits {
            code_max_len: 16,
            query_max_len: 16,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = BiEncoder::new(cfg.encoder.clone(), &mut rng).unwrap();
        let mut ck = Checkpoint::new(cfg, vocab, model).unwrap();
        ck.queues = Some(Queues::random(8, 8, &mut rng).unwrap());
        ck.optimizer = Some(OptimizerState::new(AdamWConfig::default(), &ck.model));
        ck.rng = Some(rng);
        ck.step = 42;
        ck.stage = Stage::Pretrain;
        ck.metadata.insert("note".into(), Value::from("x"));
        ck
    }

    #[test]
    fn round_trip_exact() {
        for shared in [true, false] {
            let ck = sample(shared);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.model_fingerprint(), ck.model_fingerprint());
        }
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let ck = sample(true);
        let mut other = ck.clone();
        let v = other.model.code.params().scalar(0, 0);
        other.model.code.params_mut().set_scalar(0, 0, v + 1e-3);
        assert_ne!(ck.model_fingerprint(), other.model_fingerprint());
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample(true).to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Checksum(_)));
    }
}
