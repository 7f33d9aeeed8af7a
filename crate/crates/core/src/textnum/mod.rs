//! Interleaved text/number sequences and the tokenization schemes that
//! produce them.
//!
//! Two families of scheme exist:
//!
//! * digit-level BPE and word-level, where numerals are ordinary text,
//! * number-aware schemes (xVal and the MMD variants), where every numeral
//!   becomes a `<num>` token with its value stored alongside.
//!
//! Values cross into model space through a [`NumberCodec`]: identity for
//! MMD, the signed log for MMD-log, and normalize-then-clip for xVal.

pub mod bpe;
pub mod lexer;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bpe::BpeMerges;
pub use lexer::{detokenize, lex, Piece};

use crate::datagen::Example;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM: usize = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<num>"];

/// Number encoding/decoding configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NumberScheme {
    /// Numbers tokenized digit by digit through BPE.
    #[serde(rename = "bpe")]
    DigitBpe,
    /// Every numeral string is one word token.
    #[serde(rename = "word")]
    WordLevel,
    /// `<num>` embedding scaled by the (normalized) value.
    #[serde(rename = "xval")]
    XVal,
    /// MLP number encoder with routing and a one-layer number head.
    Mmd,
    /// MMD on signed-log transformed values.
    MmdLog,
    /// MMD with a three-layer number head.
    MultiMlp,
}

impl NumberScheme {
    pub const ALL: [NumberScheme; 6] = [
        NumberScheme::DigitBpe,
        NumberScheme::WordLevel,
        NumberScheme::XVal,
        NumberScheme::Mmd,
        NumberScheme::MmdLog,
        NumberScheme::MultiMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NumberScheme::DigitBpe => "bpe",
            NumberScheme::WordLevel => "word",
            NumberScheme::XVal => "xval",
            NumberScheme::Mmd => "mmd",
            NumberScheme::MmdLog => "mmd-log",
            NumberScheme::MultiMlp => "multi-mlp",
        }
    }

    /// Whether numerals become `<num>` + value instead of text.
    pub fn number_aware(self) -> bool {
        !matches!(self, NumberScheme::DigitBpe | NumberScheme::WordLevel)
    }

    /// The MMD family: MLP number encoder and a learned routing head.
    pub fn uses_mlp_encoder(self) -> bool {
        matches!(
            self,
            NumberScheme::Mmd | NumberScheme::MmdLog | NumberScheme::MultiMlp
        )
    }

    /// Default number-head depth: 1 for MMD, 3 for Multi-MLP, 2 otherwise.
    pub fn default_head_depth(self) -> usize {
        match self {
            NumberScheme::Mmd => 1,
            NumberScheme::MultiMlp => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for NumberScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NumberScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NumberScheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = NumberScheme::ALL.iter().map(|k| k.name()).collect();
                Error::Usage(format!(
                    "unknown scheme {s:?}; valid schemes: {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Number,
}

/// Token ids with a parallel value array and per-position modality.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MixedSequence {
    token_ids: Vec<usize>,
    values: Vec<f64>,
    modality: Vec<Modality>,
}

impl MixedSequence {
    pub fn new() -> Self {
        MixedSequence::default()
    }

    /// Validating constructor.
    pub fn from_parts(token_ids: Vec<usize>, values: Vec<f64>, modality: Vec<Modality>) -> Result<Self> {
        let seq = MixedSequence {
            token_ids,
            values,
            modality,
        };
        seq.check()?;
        Ok(seq)
    }

    pub fn push_text(&mut self, id: usize) {
        debug_assert_ne!(id, NUM);
        self.token_ids.push(id);
        self.values.push(0.0);
        self.modality.push(Modality::Text);
    }

    pub fn push_number(&mut self, value: f64) {
        self.token_ids.push(NUM);
        self.values.push(value);
        self.modality.push(Modality::Number);
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn number_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.modality
            .iter()
            .zip(&self.values)
            .filter(|(m, _)| **m == Modality::Number)
            .map(|(_, v)| *v)
    }

    /// Checks the three structural invariants.
    pub fn check(&self) -> Result<()> {
        if self.values.len() != self.token_ids.len() || self.modality.len() != self.token_ids.len() {
            return Err(Error::Contract("mixed sequence arrays differ in length".into()));
        }
        for i in 0..self.len() {
            let is_num = self.modality[i] == Modality::Number;
            if is_num != (self.token_ids[i] == NUM) {
                return Err(Error::Contract(format!(
                    "position {i}: Number modality must coincide with <num>"
                )));
            }
            if !is_num && self.values[i] != 0.0 {
                return Err(Error::Contract(format!("position {i}: text value must be 0")));
            }
        }
        Ok(())
    }
}

/// `sign(x)·ln(1+|x|)`.
pub fn slog(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("slog of non-finite {x}")));
    }
    Ok(x.signum() * x.abs().ln_1p())
}

/// Inverse of [`slog`]: `sign(y)·(exp(|y|)−1)`.
pub fn sinv(y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::Domain(format!("sinv of non-finite {y}")));
    }
    Ok(y.signum() * y.abs().exp_m1())
}

/// Replaces every numeral by `<num>` and returns the values in reading order.
pub fn extract_numbers(text: &str) -> (Vec<String>, Vec<f64>) {
    let mut template = Vec::new();
    let mut values = Vec::new();
    for piece in lex(text) {
        match piece {
            Piece::Word(w) => template.push(w),
            Piece::Number { value, .. } => {
                template.push(RESERVED[NUM].to_string());
                values.push(value);
            }
        }
    }
    (template, values)
}

/// Canonical decimal rendering: shortest round-trip digits, no exponent.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v}")
    }
}

/// Inverse of [`extract_numbers`] for canonically formatted strings.
pub fn substitute_numbers(template: &[String], values: &[f64]) -> String {
    let mut vals = values.iter();
    let toks: Vec<String> = template
        .iter()
        .map(|t| {
            if t == RESERVED[NUM] {
                vals.next().map_or_else(|| t.clone(), |v| format_number(*v))
            } else {
                t.clone()
            }
        })
        .collect();
    detokenize(&toks)
}

/// Mapping between natural values and the values the model sees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NumberCodec {
    Identity,
    SignedLog,
    /// Divide by `scale`, then clip to `[-clip, clip]`.
    Scaled { scale: f64, clip: f64 },
}

impl NumberCodec {
    pub fn for_scheme(scheme: NumberScheme, xval_scale: f64, xval_clip: f64) -> Self {
        match scheme {
            NumberScheme::MmdLog => NumberCodec::SignedLog,
            NumberScheme::XVal => NumberCodec::Scaled {
                scale: xval_scale,
                clip: xval_clip,
            },
            _ => NumberCodec::Identity,
        }
    }

    pub fn to_model(&self, v: f64) -> Result<f64> {
        if !v.is_finite() {
            return Err(Error::Input(format!("non-finite number {v}")));
        }
        Ok(match *self {
            NumberCodec::Identity => v,
            NumberCodec::SignedLog => slog(v)?,
            NumberCodec::Scaled { scale, clip } => (v / scale).clamp(-clip, clip),
        })
    }

    /// Maps a model-space prediction back; non-finite input stays non-finite.
    pub fn from_model(&self, y: f64) -> f64 {
        match *self {
            NumberCodec::Identity => y,
            NumberCodec::SignedLog => {
                if y.is_finite() {
                    y.signum() * y.abs().exp_m1()
                } else {
                    y
                }
            }
            NumberCodec::Scaled { scale, .. } => y * scale,
        }
    }
}

/// Token ↔ id map with the five reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens followed by `tokens` (duplicates and reserved names skipped).
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(tokens.into_iter().map(Into::into)) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// The `cap` most frequent tokens; ties by lexicographic order.
    pub fn from_counts(counts: &HashMap<String, usize>, cap: usize) -> Self {
        let mut ranked: Vec<(&String, &usize)> = counts.iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        Vocab::from_tokens(ranked.into_iter().take(cap).map(|(t, _)| t.clone()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for t in &self.tokens {
            body.push_str(t);
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<&str> = body.split_terminator('\n').collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i) != Some(r) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected reserved token {r}"),
                });
            }
        }
        Ok(Vocab::from_tokens(tokens.into_iter().skip(RESERVED.len())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerOptions {
    pub bpe_merges: usize,
    pub word_cap: usize,
    pub xval_scale: f64,
    pub xval_clip: f64,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        TokenizerOptions {
            bpe_merges: 512,
            word_cap: 32768,
            xval_scale: 1000.0,
            xval_clip: 5.0,
        }
    }
}

/// A scheme together with the vocabulary (and merges) fitted for it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    scheme: NumberScheme,
    vocab: Vocab,
    bpe: Option<BpeMerges>,
    codec: NumberCodec,
}

/// Serializable form of a [`Tokenizer`], stored in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerState {
    pub scheme: NumberScheme,
    pub tokens: Vec<String>,
    pub merges: Option<Vec<(String, String)>>,
    pub alphabet: Option<String>,
    pub codec: NumberCodec,
}

impl Tokenizer {
    /// Fits the vocabulary (and BPE merges) for `scheme` on `texts`.
    pub fn fit<S: AsRef<str>>(texts: &[S], scheme: NumberScheme, opts: &TokenizerOptions) -> Result<Self> {
        let codec = NumberCodec::for_scheme(scheme, opts.xval_scale, opts.xval_clip);
        let (vocab, bpe) = match scheme {
            NumberScheme::DigitBpe => {
                let bpe = BpeMerges::train(texts, opts.bpe_merges)?;
                (Vocab::from_tokens(bpe.symbols()), Some(bpe))
            }
            NumberScheme::WordLevel => {
                let mut counts = HashMap::new();
                for t in texts {
                    for p in lex(t.as_ref()) {
                        *counts.entry(p.text().to_string()).or_insert(0) += 1;
                    }
                }
                (Vocab::from_counts(&counts, opts.word_cap), None)
            }
            _ => {
                let mut counts = HashMap::new();
                for t in texts {
                    for p in lex(t.as_ref()) {
                        if let Piece::Word(w) = p {
                            *counts.entry(w).or_insert(0) += 1;
                        }
                    }
                }
                (Vocab::from_counts(&counts, opts.word_cap), None)
            }
        };
        Ok(Tokenizer {
            scheme,
            vocab,
            bpe,
            codec,
        })
    }

    /// Fits on the questions and answers of `examples`.
    pub fn fit_examples(examples: &[Example], scheme: NumberScheme, opts: &TokenizerOptions) -> Result<Self> {
        let texts: Vec<&str> = examples
            .iter()
            .flat_map(|e| [e.question.as_str(), e.answer.as_str()])
            .collect();
        Tokenizer::fit(&texts, scheme, opts)
    }

    pub fn scheme(&self) -> NumberScheme {
        self.scheme
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn bpe(&self) -> Option<&BpeMerges> {
        self.bpe.as_ref()
    }

    pub fn codec(&self) -> NumberCodec {
        self.codec
    }

    pub fn state(&self) -> TokenizerState {
        TokenizerState {
            scheme: self.scheme,
            tokens: self.vocab.tokens.clone(),
            merges: self.bpe.as_ref().map(|b| b.merges().to_vec()),
            alphabet: self.bpe.as_ref().map(|b| b.alphabet().iter().collect()),
            codec: self.codec,
        }
    }

    pub fn from_state(state: TokenizerState) -> Result<Self> {
        if state.tokens.iter().take(RESERVED.len()).ne(RESERVED.iter()) {
            return Err(Error::Input("vocabulary does not start with the reserved tokens".into()));
        }
        let vocab = Vocab::from_tokens(state.tokens.into_iter().skip(RESERVED.len()));
        let bpe = match (state.merges, state.alphabet) {
            (Some(m), Some(a)) => Some(BpeMerges::from_parts(m, a.chars().collect::<BTreeSet<_>>())),
            (None, None) => None,
            _ => return Err(Error::Input("BPE merges and alphabet must come together".into())),
        };
        if (state.scheme == NumberScheme::DigitBpe) != bpe.is_some() {
            return Err(Error::Input("BPE merges present iff the scheme is bpe".into()));
        }
        Ok(Tokenizer {
            scheme: state.scheme,
            vocab,
            bpe,
            codec: state.codec,
        })
    }

    /// Tokenizes one string without `<bos>`/`<eos>`; values are in model space.
    pub fn encode_text(&self, text: &str) -> Result<MixedSequence> {
        let mut seq = MixedSequence::new();
        match (&self.bpe, self.scheme.number_aware()) {
            (Some(bpe), _) => {
                for sym in bpe.encode(text) {
                    seq.push_text(self.vocab.id(&sym));
                }
            }
            (None, false) => {
                for p in lex(text) {
                    seq.push_text(self.vocab.id(p.text()));
                }
            }
            (None, true) => {
                for p in lex(text) {
                    match p {
                        Piece::Word(w) => seq.push_text(self.vocab.id(&w)),
                        Piece::Number { value, .. } => seq.push_number(self.codec.to_model(value)?),
                    }
                }
            }
        }
        Ok(seq)
    }

    fn wrap(&self, text: &str) -> Result<MixedSequence> {
        let inner = self.encode_text(text)?;
        let mut seq = MixedSequence::new();
        seq.push_text(BOS);
        seq.token_ids.extend_from_slice(&inner.token_ids);
        seq.values.extend_from_slice(&inner.values);
        seq.modality.extend_from_slice(&inner.modality);
        seq.push_text(EOS);
        Ok(seq)
    }

    /// `(src, tgt)` for one example, both wrapped in `<bos>`…`<eos>`.
    pub fn encode_example(&self, ex: &Example) -> Result<(MixedSequence, MixedSequence)> {
        Ok((self.wrap(&ex.question)?, self.wrap(&ex.answer)?))
    }

    /// Renders a sequence whose Number values are already in natural space.
    /// Reserved control tokens are dropped.
    pub fn decode(&self, seq: &MixedSequence) -> String {
        let mut toks: Vec<String> = Vec::with_capacity(seq.len());
        for i in 0..seq.len() {
            let id = seq.token_ids[i];
            if seq.modality[i] == Modality::Number {
                toks.push(format_number(seq.values[i]));
            } else if !matches!(id, PAD | BOS | EOS) {
                toks.push(self.vocab.token(id).to_string());
            }
        }
        if self.bpe.is_some() {
            BpeMerges::decode(&toks)
        } else {
            detokenize(&toks)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{AnswerKind, Example};

    fn ex(q: &str, a: &str) -> Example {
        Example::from_strings(q, a)
    }

    #[test]
    fn extract_numbers_examples() {
        let (t, v) = extract_numbers("Calculate -971810940.335 + 612120.");
        assert_eq!(t.iter().filter(|s| *s == "<num>").count(), 2);
        assert_eq!(v, [-971810940.335, 612120.0]);
        assert_eq!(extract_numbers("Does 15 divide 8287819?").1, [15.0, 8287819.0]);
        assert!(extract_numbers("hello world").1.is_empty());
    }

    #[test]
    fn extract_then_substitute_reconstructs() {
        for s in [
            "Calculate -971810940.335 + 612120.",
            "Solve -12*t - 4482 = 64*t - 383*t + 141*t for t.",
            "Does 15 divide 8287819?",
        ] {
            let (t, v) = extract_numbers(s);
            assert_eq!(substitute_numbers(&t, &v), s);
        }
    }

    #[test]
    fn slog_examples() {
        assert_eq!(slog(0.0).unwrap(), 0.0);
        assert_eq!(slog(-7.25).unwrap(), -slog(7.25).unwrap());
        for x in [1e-3, 1.0, 1e8] {
            let back = sinv(slog(x).unwrap()).unwrap();
            assert!(((back - x) / x).abs() < 1e-9);
        }
        assert!(matches!(slog(f64::NAN), Err(Error::Domain(_))));
        assert!(matches!(sinv(f64::INFINITY), Err(Error::Domain(_))));
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in NumberScheme::ALL {
            assert_eq!(s.name().parse::<NumberScheme>().unwrap(), s);
        }
        let err = "nope".parse::<NumberScheme>().unwrap_err().to_string();
        assert!(err.contains("mmd-log") && err.contains("multi-mlp"), "{err}");
    }

    #[test]
    fn encode_answer_under_mmd() {
        let data = [ex("Solve -12*t - 4482 = 64*t - 383*t + 141*t for t.", "27"), ex("Does 15 divide 8287819?", "False")];
        let tok = Tokenizer::fit_examples(&data, NumberScheme::Mmd, &TokenizerOptions::default()).unwrap();
        let (_, tgt) = tok.encode_example(&data[0]).unwrap();
        assert_eq!(tgt.token_ids(), &[BOS, NUM, EOS]);
        assert_eq!(tgt.values(), &[0.0, 27.0, 0.0]);
        let (src, tgt) = tok.encode_example(&data[1]).unwrap();
        assert!(tgt.modality().iter().all(|m| *m == Modality::Text));
        assert_eq!(src.number_values().collect::<Vec<_>>(), [15.0, 8287819.0]);
        assert_eq!(data[1].answer_kind, AnswerKind::Text);
    }

    #[test]
    fn encode_answer_under_mmd_log() {
        let data = [ex("Solve 2*t = 54 for t.", "27")];
        let tok = Tokenizer::fit_examples(&data, NumberScheme::MmdLog, &TokenizerOptions::default()).unwrap();
        let (_, tgt) = tok.encode_example(&data[0]).unwrap();
        assert_eq!(tgt.values()[1], 27f64.ln_1p());
    }

    #[test]
    fn xval_values_are_scaled_and_clipped() {
        let data = [ex("Calculate 2500 + 1.", "2501")];
        let opts = TokenizerOptions {
            xval_scale: 100.0,
            ..TokenizerOptions::default()
        };
        let tok = Tokenizer::fit_examples(&data, NumberScheme::XVal, &opts).unwrap();
        let seq = tok.encode_text("Calculate 250 + 2500.").unwrap();
        assert_eq!(seq.number_values().collect::<Vec<_>>(), [2.5, 5.0]);
    }

    #[test]
    fn baselines_keep_numbers_as_text() {
        let data = [ex("Calculate 12 + 15.", "27")];
        for scheme in [NumberScheme::WordLevel, NumberScheme::DigitBpe] {
            let tok = Tokenizer::fit_examples(&data, scheme, &TokenizerOptions::default()).unwrap();
            let (src, tgt) = tok.encode_example(&data[0]).unwrap();
            assert!(src.modality().iter().chain(tgt.modality()).all(|m| *m == Modality::Text));
            assert_eq!(tok.decode(&src), "Calculate 12 + 15.");
            assert_eq!(tok.decode(&tgt), "27");
        }
        let tok = Tokenizer::fit_examples(&data, NumberScheme::WordLevel, &TokenizerOptions::default()).unwrap();
        assert_eq!(tok.encode_text("99").unwrap().token_ids(), &[UNK]);
    }

    #[test]
    fn word_cap_keeps_most_frequent() {
        let mut counts = HashMap::new();
        counts.insert("b".to_string(), 3);
        counts.insert("a".to_string(), 3);
        counts.insert("c".to_string(), 1);
        let v = Vocab::from_counts(&counts, 2);
        assert_eq!(&v.tokens()[5..], ["a", "b"]);
        assert_eq!(v.id("c"), UNK);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::from_tokens(["Calculate", " ", "+"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn mixed_sequence_invariants_are_checked() {
        assert!(MixedSequence::from_parts(vec![NUM], vec![1.0], vec![Modality::Text]).is_err());
        assert!(MixedSequence::from_parts(vec![5], vec![1.0], vec![Modality::Text]).is_err());
        assert!(MixedSequence::from_parts(vec![NUM, 5], vec![1.0, 0.0], vec![Modality::Number, Modality::Text]).is_ok());
    }
}
