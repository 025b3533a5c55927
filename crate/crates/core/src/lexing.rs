//! Lexical kinds for pre-tokenized source code.
//!
//! Classification is token-local: each surface string is matched against a
//! fixed priority list of rules, with the keyword rule driven by a per-language
//! profile. Profiles are plain text files with one keyword per line.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::{LazyLock, RwLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Keyword,
    Identifier,
    Operator,
    NumberLiteral,
    StringLiteral,
    Punctuation,
    Other,
}

impl TokenKind {
    pub const ALL: [TokenKind; 7] = [
        TokenKind::Keyword,
        TokenKind::Identifier,
        TokenKind::Operator,
        TokenKind::NumberLiteral,
        TokenKind::StringLiteral,
        TokenKind::Punctuation,
        TokenKind::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TokenKind::Keyword => "keyword",
            TokenKind::Identifier => "identifier",
            TokenKind::Operator => "operator",
            TokenKind::NumberLiteral => "number_literal",
            TokenKind::StringLiteral => "string_literal",
            TokenKind::Punctuation => "punctuation",
            TokenKind::Other => "other",
        }
    }

    /// Surface form of the placeholder token that stands in for this kind,
    /// e.g. `[identifier]`.
    pub fn type_token(self) -> &'static str {
        match self {
            TokenKind::Keyword => "[keyword]",
            TokenKind::Identifier => "[identifier]",
            TokenKind::Operator => "[operator]",
            TokenKind::NumberLiteral => "[number_literal]",
            TokenKind::StringLiteral => "[string_literal]",
            TokenKind::Punctuation => "[punctuation]",
            TokenKind::Other => "[other]",
        }
    }

    pub fn from_name(name: &str) -> Option<TokenKind> {
        TokenKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypedToken {
    pub text: String,
    pub kind: TokenKind,
}

const OPERATOR_CHARS: &str = "+-*/%=<>!&|^~?:";
const PUNCTUATION_CHARS: &str = "()[]{},;.";

static STRING_LITERAL: LazyLock<Regex> = LazyLock::new(|| {
    // optional python-style prefix (r, b, f, u and pairs), then a quoted body
    Regex::new(r#"^(?i:[rbuf]{0,2})(?s:".*"|'.*'|`.*`)$"#).unwrap()
});

static NUMBER_LITERAL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^[+-]?(?:0[xX][0-9a-fA-F_]+|0[bB][01_]+|0[oO][0-7_]+|(?:\d[\d_]*(?:\.[\d_]*)?|\.\d[\d_]*)(?:[eE][+-]?\d+)?)[lLfFdDjJuU]*$",
    )
    .unwrap()
});

fn is_string_literal(tok: &str) -> bool {
    // the body must at least hold both quotes
    tok.len() >= 2 && STRING_LITERAL.is_match(tok)
}

fn is_identifier(tok: &str) -> bool {
    let mut chars = tok.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_alphanumeric() || c == '_')
}

/// A keyword set for one language.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeywordProfile {
    keywords: HashSet<String>,
}

impl KeywordProfile {
    pub fn generic() -> Self {
        Self::default()
    }

    /// Parses one keyword per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        let keywords = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_owned)
            .collect();
        Self { keywords }
    }

    pub fn contains(&self, tok: &str) -> bool {
        self.keywords.contains(tok)
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn classify(&self, tok: &str) -> TokenKind {
        if self.contains(tok) {
            TokenKind::Keyword
        } else {
            classify_untyped(tok)
        }
    }
}

/// Every rule after the keyword rule, in priority order.
fn classify_untyped(tok: &str) -> TokenKind {
    if tok.is_empty() {
        return TokenKind::Other;
    }
    if is_string_literal(tok) {
        TokenKind::StringLiteral
    } else if NUMBER_LITERAL.is_match(tok) {
        TokenKind::NumberLiteral
    } else if tok.chars().all(|c| OPERATOR_CHARS.contains(c)) {
        TokenKind::Operator
    } else if tok.chars().all(|c| PUNCTUATION_CHARS.contains(c)) {
        TokenKind::Punctuation
    } else if is_identifier(tok) {
        TokenKind::Identifier
    } else {
        TokenKind::Other
    }
}

/// Named keyword profiles. Ships with `python` and `java`; more can be added
/// from a directory of `<language>.txt` files.
#[derive(Debug, Clone)]
pub struct KeywordRegistry {
    profiles: BTreeMap<String, KeywordProfile>,
    generic: KeywordProfile,
}

impl Default for KeywordRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl KeywordRegistry {
    pub fn builtin() -> Self {
        let mut profiles = BTreeMap::new();
        profiles.insert(
            "python".to_owned(),
            KeywordProfile::parse(include_str!("../keywords/python.txt")),
        );
        profiles.insert(
            "java".to_owned(),
            KeywordProfile::parse(include_str!("../keywords/java.txt")),
        );
        Self {
            profiles,
            generic: KeywordProfile::generic(),
        }
    }

    pub fn insert(&mut self, language: impl Into<String>, profile: KeywordProfile) {
        self.profiles.insert(language.into(), profile);
    }

    /// Loads every `*.txt` file in `dir` as a profile named after the file stem,
    /// replacing any existing profile of the same name.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut loaded = 0;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            self.insert(stem, KeywordProfile::parse(&text));
            loaded += 1;
        }
        Ok(loaded)
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.profiles.keys().map(String::as_str)
    }

    /// Returns the profile for `language`, or `None` for unregistered ones.
    pub fn get(&self, language: &str) -> Option<&KeywordProfile> {
        self.profiles.get(language)
    }

    pub fn profile_or_generic(&self, language: &str) -> &KeywordProfile {
        match self.profiles.get(language) {
            Some(p) => p,
            None => {
                if language != "generic" {
                    warn_unknown_language(language);
                }
                &self.generic
            }
        }
    }

    pub fn classify_tokens<S: AsRef<str>>(&self, tokens: &[S], language: &str) -> Vec<TypedToken> {
        let profile = self.profile_or_generic(language);
        tokens
            .iter()
            .map(|t| {
                let text = t.as_ref();
                TypedToken {
                    text: text.to_owned(),
                    kind: profile.classify(text),
                }
            })
            .collect()
    }
}

fn warn_unknown_language(language: &str) {
    static WARNED: LazyLock<RwLock<HashSet<String>>> = LazyLock::new(Default::default);
    if WARNED.read().map(|w| w.contains(language)).unwrap_or(true) {
        return;
    }
    if let Ok(mut w) = WARNED.write() {
        if w.insert(language.to_owned()) {
            log::warn!("no keyword profile for language {language:?}; using the generic profile");
        }
    }
}

static BUILTIN: LazyLock<KeywordRegistry> = LazyLock::new(KeywordRegistry::builtin);

/// Classifies tokens with the built-in keyword profiles.
pub fn classify_tokens<S: AsRef<str>>(tokens: &[S], language: &str) -> Vec<TypedToken> {
    BUILTIN.classify_tokens(tokens, language)
}

pub fn builtin_registry() -> &'static KeywordRegistry {
    &BUILTIN
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kinds(tokens: &[&str], lang: &str) -> Vec<TokenKind> {
        classify_tokens(tokens, lang).into_iter().map(|t| t.kind).collect()
    }

    #[test]
    fn python_function_header() {
        use TokenKind::*;
        assert_eq!(
            kinds(&["def", "foo", "(", "x", ")"], "python"),
            vec![Keyword, Identifier, Punctuation, Identifier, Punctuation]
        );
    }

    #[test]
    fn operators_and_literals() {
        use TokenKind::*;
        assert_eq!(kinds(&["=="], "python"), vec![Operator]);
        assert_eq!(kinds(&["\"hi\"", "42"], "python"), vec![StringLiteral, NumberLiteral]);
        assert_eq!(
            kinds(&["'a'", "b\"x\"", "0x1F", "3.5e-2", "10L", "-1", ".5"], "java"),
            vec![
                StringLiteral,
                StringLiteral,
                NumberLiteral,
                NumberLiteral,
                NumberLiteral,
                NumberLiteral,
                NumberLiteral
            ]
        );
        assert_eq!(kinds(&["+=", ">>>", ":", "->"], "java"), vec![Operator; 4]);
        assert_eq!(kinds(&[".", ",", ";", "{", "..."], "java"), vec![Punctuation; 5]);
    }

    #[test]
    fn mixed_tokens_fall_through_to_other() {
        assert_eq!(
            kinds(&["x+", "@Override", "\"", "#"], "java"),
            vec![TokenKind::Other; 4]
        );
    }

    #[test]
    fn keywords_depend_on_language() {
        assert_eq!(kinds(&["def"], "java"), vec![TokenKind::Identifier]);
        assert_eq!(kinds(&["public"], "java"), vec![TokenKind::Keyword]);
        assert_eq!(kinds(&["public"], "cobol"), vec![TokenKind::Identifier]);
    }

    #[test]
    fn registry_loads_profiles_from_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("go.txt"), "func\n# comment\n\npackage\n").unwrap();
        let mut reg = KeywordRegistry::builtin();
        assert_eq!(reg.load_dir(dir.path()).unwrap(), 1);
        assert_eq!(reg.get("go").unwrap().len(), 2);
        let typed = reg.classify_tokens(&["func", "main"], "go");
        assert_eq!(typed[0].kind, TokenKind::Keyword);
        assert_eq!(typed[1].kind, TokenKind::Identifier);
    }

    #[test]
    fn type_tokens_round_trip_names() {
        for k in TokenKind::ALL {
            assert_eq!(TokenKind::from_name(k.name()), Some(k));
            assert_eq!(k.type_token(), format!("[{}]", k.name()));
        }
    }

    proptest! {
        #[test]
        fn classification_is_total_and_deterministic(tokens in prop::collection::vec("\\PC{1,6}", 1..20)) {
            for lang in ["python", "java", "generic"] {
                let a = classify_tokens(&tokens, lang);
                let b = classify_tokens(&tokens, lang);
                prop_assert_eq!(a.len(), tokens.len());
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn keyword_sets_only_affect_the_keyword_rule(tokens in prop::collection::vec("[a-z]{1,8}|def|class|return|public|void|None", 1..20)) {
            for lang in ["python", "java"] {
                let typed = classify_tokens(&tokens, lang);
                let generic = classify_tokens(&tokens, "generic");
                for (t, g) in typed.iter().zip(&generic) {
                    if t.kind == TokenKind::Keyword {
                        prop_assert!(matches!(g.kind, TokenKind::Identifier | TokenKind::Other));
                    } else {
                        prop_assert_eq!(t.kind, g.kind);
                    }
                }
            }
        }
    }
}
