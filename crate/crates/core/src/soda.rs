//! Soft data augmentation: token masking and type replacement, redrawn every
//! time a sample is visited.
//!
//! Four operators act on code: `DM` masks a random subset of tokens, `DR`
//! replaces them with their kind's type token, and `DRST`/`DMST` do the same
//! restricted to the tokens of one randomly chosen kind. Queries only get `DM`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CodeQueryPair, MASK};
use crate::error::{Error, Result};
use crate::lexing::{classify_tokens, TokenKind, TypedToken};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SodaMethod {
    #[serde(rename = "DM")]
    Mask,
    #[serde(rename = "DR")]
    Replace,
    #[serde(rename = "DRST")]
    ReplaceSpecifiedType,
    #[serde(rename = "DMST")]
    MaskSpecifiedType,
}

impl SodaMethod {
    pub const ALL: [SodaMethod; 4] = [
        SodaMethod::Mask,
        SodaMethod::Replace,
        SodaMethod::ReplaceSpecifiedType,
        SodaMethod::MaskSpecifiedType,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            SodaMethod::Mask => "DM",
            SodaMethod::Replace => "DR",
            SodaMethod::ReplaceSpecifiedType => "DRST",
            SodaMethod::MaskSpecifiedType => "DMST",
        }
    }
}

impl fmt::Display for SodaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for SodaMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SodaMethod::ALL
            .into_iter()
            .find(|m| m.short_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown augmentation method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub ratio: f64,
    pub methods: Vec<SodaMethod>,
    pub type_candidates: Vec<TokenKind>,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            ratio: 0.15,
            methods: SodaMethod::ALL.to_vec(),
            type_candidates: vec![TokenKind::Identifier, TokenKind::Operator],
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one augmentation method is required".into()));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!(
                "augmentation ratio {} is outside [0, 1]",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// Number of positions to replace among `n` eligible ones.
///
/// Any positive ratio replaces at least one token so the augmented view always
/// differs from the original.
pub fn select_count(n: usize, ratio: f64) -> usize {
    if n == 0 || ratio <= 0.0 {
        return 0;
    }
    // the epsilon keeps products like 0.15 * 10 from rounding down
    let k = (ratio * n as f64 + 0.5 + 1e-9).floor() as usize;
    k.clamp(1, n)
}

/// Result of one augmentation call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Augmented {
    pub tokens: Vec<String>,
    pub method: SodaMethod,
    /// Kind drawn by the specified-type methods.
    pub chosen_kind: Option<TokenKind>,
    /// Set when a specified-type method found no candidate kind and masked instead.
    pub fallback: bool,
    /// Replaced positions, ascending.
    pub changed: Vec<usize>,
}

fn sample_positions<R: Rng + ?Sized>(rng: &mut R, eligible: &[usize], ratio: f64) -> Vec<usize> {
    let k = select_count(eligible.len(), ratio);
    let mut picked: Vec<usize> = index::sample(rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    picked
}

fn mask_positions<R: Rng + ?Sized, S: AsRef<str>>(tokens: &[S], ratio: f64, rng: &mut R) -> (Vec<String>, Vec<usize>) {
    let all: Vec<usize> = (0..tokens.len()).collect();
    let changed = sample_positions(rng, &all, ratio);
    let mut out: Vec<String> = tokens.iter().map(|t| t.as_ref().to_owned()).collect();
    for &i in &changed {
        out[i] = MASK.to_owned();
    }
    (out, changed)
}

/// Dynamic masking.
pub fn dm<R: Rng + ?Sized, S: AsRef<str>>(tokens: &[S], ratio: f64, rng: &mut R) -> Vec<String> {
    mask_positions(tokens, ratio, rng).0
}

/// Dynamic replacement with type tokens.
pub fn dr<R: Rng + ?Sized>(tokens: &[TypedToken], ratio: f64, rng: &mut R) -> Vec<String> {
    replace_any(tokens, ratio, rng).tokens
}

/// Dynamic replacement of one specified kind.
pub fn drst<R: Rng + ?Sized>(tokens: &[TypedToken], ratio: f64, candidates: &[TokenKind], rng: &mut R) -> Vec<String> {
    specified_type(tokens, ratio, candidates, false, rng).tokens
}

/// Dynamic masking of one specified kind.
pub fn dmst<R: Rng + ?Sized>(tokens: &[TypedToken], ratio: f64, candidates: &[TokenKind], rng: &mut R) -> Vec<String> {
    specified_type(tokens, ratio, candidates, true, rng).tokens
}

fn replace_any<R: Rng + ?Sized>(tokens: &[TypedToken], ratio: f64, rng: &mut R) -> Augmented {
    let all: Vec<usize> = (0..tokens.len()).collect();
    let changed = sample_positions(rng, &all, ratio);
    let mut out: Vec<String> = tokens.iter().map(|t| t.text.clone()).collect();
    for &i in &changed {
        out[i] = tokens[i].kind.type_token().to_owned();
    }
    Augmented {
        tokens: out,
        method: SodaMethod::Replace,
        chosen_kind: None,
        fallback: false,
        changed,
    }
}

fn specified_type<R: Rng + ?Sized>(
    tokens: &[TypedToken],
    ratio: f64,
    candidates: &[TokenKind],
    mask: bool,
    rng: &mut R,
) -> Augmented {
    let method = if mask {
        SodaMethod::MaskSpecifiedType
    } else {
        SodaMethod::ReplaceSpecifiedType
    };
    // candidate order is kept stable so a seed always picks the same kind
    let mut present: Vec<TokenKind> = Vec::new();
    for &k in candidates {
        if !present.contains(&k) && tokens.iter().any(|t| t.kind == k) {
            present.push(k);
        }
    }
    if present.is_empty() {
        let (out, changed) = mask_positions(
            tokens.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().as_slice(),
            ratio,
            rng,
        );
        return Augmented {
            tokens: out,
            method,
            chosen_kind: None,
            fallback: true,
            changed,
        };
    }
    let kind = present[rng.random_range(0..present.len())];
    let eligible: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.kind == kind)
        .map(|(i, _)| i)
        .collect();
    let changed = sample_positions(rng, &eligible, ratio);
    let replacement = if mask { MASK } else { kind.type_token() };
    let mut out: Vec<String> = tokens.iter().map(|t| t.text.clone()).collect();
    for &i in &changed {
        out[i] = replacement.to_owned();
    }
    Augmented {
        tokens: out,
        method,
        chosen_kind: Some(kind),
        fallback: false,
        changed,
    }
}

/// Applies one operator to typed tokens.
pub fn apply_method<R: Rng + ?Sized>(
    method: SodaMethod,
    tokens: &[TypedToken],
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Augmented {
    match method {
        SodaMethod::Mask => {
            let texts: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
            let (out, changed) = mask_positions(&texts, cfg.ratio, rng);
            Augmented {
                tokens: out,
                method,
                chosen_kind: None,
                fallback: false,
                changed,
            }
        }
        SodaMethod::Replace => replace_any(tokens, cfg.ratio, rng),
        SodaMethod::ReplaceSpecifiedType => specified_type(tokens, cfg.ratio, &cfg.type_candidates, false, rng),
        SodaMethod::MaskSpecifiedType => specified_type(tokens, cfg.ratio, &cfg.type_candidates, true, rng),
    }
}

/// Draws one operator uniformly from `cfg.methods` and applies it to the code.
pub fn augment_code<R: Rng + ?Sized>(pair: &CodeQueryPair, cfg: &AugmentationConfig, rng: &mut R) -> Augmented {
    assert!(!cfg.methods.is_empty(), "augmentation needs at least one method");
    let method = match cfg.methods.as_slice() {
        [only] => *only,
        methods => methods[rng.random_range(0..methods.len())],
    };
    let typed = classify_tokens(&pair.code_tokens, &pair.language);
    apply_method(method, &typed, cfg, rng)
}

/// Queries carry no type information, so they are only masked.
pub fn augment_query<R: Rng + ?Sized, S: AsRef<str>>(tokens: &[S], cfg: &AugmentationConfig, rng: &mut R) -> Augmented {
    let (out, changed) = mask_positions(tokens, cfg.ratio, rng);
    Augmented {
        tokens: out,
        method: SodaMethod::Mask,
        chosen_kind: None,
        fallback: false,
        changed,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord<'a> {
    pub step: u64,
    pub pair_id: &'a str,
    pub modality: &'static str,
    pub method: SodaMethod,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen_kind: Option<TokenKind>,
    pub fallback: bool,
    pub changed: &'a [usize],
}

/// JSON-lines audit log of augmentation decisions.
pub struct AugmentationTrace<W: Write> {
    out: W,
}

impl<W: Write> AugmentationTrace<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, step: u64, pair_id: &str, modality: &'static str, aug: &Augmented) -> Result<()> {
        let rec = TraceRecord {
            step,
            pair_id,
            modality,
            method: aug.method,
            chosen_kind: aug.chosen_kind,
            fallback: aug.fallback,
            changed: &aug.changed,
        };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io("<augmentation trace>", e))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
