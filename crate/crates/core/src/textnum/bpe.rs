//! Byte-pair merges over characters with digits kept as single symbols.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

/// Ordered merge list plus the character alphabet it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct BpeMerges {
    merges: Vec<(String, String)>,
    alphabet: BTreeSet<char>,
    ranks: HashMap<(String, String), usize>,
}

/// Splits a string into chunks that merges may not cross: every whitespace
/// character and every digit is a chunk of its own; other characters form
/// maximal runs.
fn chunks(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in s.char_indices() {
        if c.is_whitespace() || c.is_ascii_digit() {
            if let Some(st) = start.take() {
                out.push(&s[st..i]);
            }
            out.push(&s[i..i + c.len_utf8()]);
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(st) = start {
        out.push(&s[st..]);
    }
    out
}

fn mergeable(chunk: &str) -> bool {
    chunk.chars().count() > 1
}

impl BpeMerges {
    pub fn from_parts(merges: Vec<(String, String)>, alphabet: BTreeSet<char>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        BpeMerges {
            merges,
            alphabet,
            ranks,
        }
    }

    /// Greedy most-frequent-pair training. Ties go to the lexicographically
    /// smallest pair.
    pub fn train<S: AsRef<str>>(corpus: &[S], n_merges: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot train BPE on an empty corpus".into()));
        }
        let mut alphabet = BTreeSet::new();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for text in corpus {
            let text = text.as_ref();
            alphabet.extend(text.chars());
            for ch in chunks(text) {
                if mergeable(ch) {
                    *counts.entry(ch).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = counts
            .into_iter()
            .map(|(w, n)| (w.chars().map(String::from).collect(), n))
            .collect();

        let mut merges = Vec::new();
        while merges.len() < n_merges {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, n) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((&w[0], &w[1])).or_default() += n;
                }
            }
            // BTreeMap iterates in ascending pair order, so the first maximum wins ties.
            let Some((best, _)) = pairs
                .into_iter()
                .fold(None, |acc: Option<((&str, &str), usize)>, (p, n)| match acc {
                    Some((_, m)) if m >= n => acc,
                    _ => Some((p, n)),
                })
            else {
                break;
            };
            let pair = (best.0.to_string(), best.1.to_string());
            for (syms, _) in &mut words {
                *syms = merge_pair(syms, &pair);
            }
            merges.push(pair);
        }
        Ok(BpeMerges::from_parts(merges, alphabet))
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &BTreeSet<char> {
        &self.alphabet
    }

    /// Symbols in id order after the reserved tokens: alphabet, then merge outputs.
    pub fn symbols(&self) -> Vec<String> {
        let mut out: Vec<String> = self.alphabet.iter().map(|c| c.to_string()).collect();
        out.extend(self.merges.iter().map(|(a, b)| format!("{a}{b}")));
        out
    }

    /// Applies merges by rank inside each chunk.
    pub fn encode(&self, s: &str) -> Vec<String> {
        let mut out = Vec::new();
        for ch in chunks(s) {
            let mut syms: Vec<String> = ch.chars().map(String::from).collect();
            if mergeable(ch) {
                loop {
                    let best = syms
                        .windows(2)
                        .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                        .min();
                    let Some(&rank) = best else { break };
                    syms = merge_pair(&syms, &self.merges[rank]);
                }
            }
            out.extend(syms);
        }
        out
    }

    pub fn decode<S: AsRef<str>>(symbols: &[S]) -> String {
        symbols.iter().map(AsRef::as_ref).collect()
    }

    /// One merge per line, the two symbols separated by a space.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body: String = self
            .merges
            .iter()
            .map(|(a, b)| format!("{a} {b}\n"))
            .collect();
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, alphabet: BTreeSet<char>) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut merges = Vec::new();
        for (i, line) in body.lines().enumerate() {
            let (a, b) = line.split_once(' ').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected two space-separated symbols, got {line:?}"),
            })?;
            merges.push((a.to_string(), b.to_string()));
        }
        Ok(BpeMerges::from_parts(merges, alphabet))
    }
}

fn merge_pair(syms: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_merges_is_character_split() {
        let bpe = BpeMerges::train(&["hello world"], 0).unwrap();
        assert_eq!(bpe.encode("hello"), ["h", "e", "l", "l", "o"]);
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let bpe = BpeMerges::train(&["aaaa"], 1).unwrap();
        assert_eq!(bpe.merges(), &[("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // ("a","b") and ("c","d") each occur once.
        let bpe = BpeMerges::train(&["ab cd"], 1).unwrap();
        assert_eq!(bpe.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn digits_never_merge() {
        let corpus = ["Calculate 111 + 111.", "Calculate 11 + 1."];
        let bpe = BpeMerges::train(&corpus, 200).unwrap();
        assert!(bpe
            .merges()
            .iter()
            .all(|(a, b)| !a.chars().chain(b.chars()).any(|c| c.is_ascii_digit())));
        let enc = bpe.encode("Calculate 111 + 111.");
        assert!(enc.contains(&"Calculate".to_string()));
        assert_eq!(enc.iter().filter(|s| *s == "1").count(), 6);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(BpeMerges::train::<&str>(&[], 3).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let bpe = BpeMerges::train(&["Does 15 divide 8287819?", "Solve x for x."], 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("merges.txt");
        bpe.save(&path).unwrap();
        let back = BpeMerges::load(&path, bpe.alphabet().clone()).unwrap();
        assert_eq!(back, bpe);
    }
}
