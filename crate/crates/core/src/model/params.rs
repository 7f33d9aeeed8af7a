use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::datagen::stream_rng;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

type Entry = (String, Vec<usize>, Init);

fn push_linear(out: &mut Vec<Entry>, name: &str, i: usize, o: usize) {
    out.push((format!("{name}.w"), vec![i, o], Init::Normal));
    out.push((format!("{name}.b"), vec![o], Init::Zeros));
}

fn push_norm(out: &mut Vec<Entry>, name: &str, d: usize) {
    out.push((format!("{name}.g"), vec![d], Init::Ones));
    out.push((format!("{name}.b"), vec![d], Init::Zeros));
}

fn push_attn(out: &mut Vec<Entry>, name: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        push_linear(out, &format!("{name}.{p}"), d, d);
    }
}

/// Names, shapes and initializers of every parameter, in storage order.
fn layout(cfg: &ModelConfig) -> Vec<Entry> {
    let d = cfg.d_model;
    let f = cfg.d_ffn();
    let mut out = vec![("embed.tokens".to_string(), vec![cfg.vocab_size, d], Init::Normal)];
    if cfg.scheme.uses_mlp_encoder() {
        push_linear(&mut out, "numenc.0", 1, d);
        for i in 1..=cfg.num_encoder_depth {
            push_linear(&mut out, &format!("numenc.{i}"), d, d);
        }
    }
    for l in 0..cfg.n_enc_layers {
        push_norm(&mut out, &format!("enc.{l}.ln1"), d);
        push_attn(&mut out, &format!("enc.{l}.attn"), d);
        push_norm(&mut out, &format!("enc.{l}.ln2"), d);
        push_linear(&mut out, &format!("enc.{l}.ffn.1"), d, f);
        push_linear(&mut out, &format!("enc.{l}.ffn.2"), f, d);
    }
    push_norm(&mut out, "enc.norm", d);
    for l in 0..cfg.n_dec_layers {
        push_norm(&mut out, &format!("dec.{l}.ln1"), d);
        push_attn(&mut out, &format!("dec.{l}.self"), d);
        push_norm(&mut out, &format!("dec.{l}.ln2"), d);
        push_attn(&mut out, &format!("dec.{l}.cross"), d);
        push_norm(&mut out, &format!("dec.{l}.ln3"), d);
        push_linear(&mut out, &format!("dec.{l}.ffn.1"), d, f);
        push_linear(&mut out, &format!("dec.{l}.ffn.2"), f, d);
    }
    push_norm(&mut out, "dec.norm", d);
    push_linear(&mut out, "head.text", d, cfg.vocab_size);
    push_linear(&mut out, "head.route", d, 2);
    for i in 0..cfg.num_head_depth {
        let o = if i + 1 == cfg.num_head_depth { 1 } else { d };
        push_linear(&mut out, &format!("head.num.{i}"), d, o);
    }
    out
}

impl Params {
    /// Fresh parameters: normal(0, 0.02) weights and embeddings, zero biases,
    /// unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, INIT_STREAM);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(cfg) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Params::from_named(names, tensors))
    }

    fn from_named(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Params {
            names,
            tensors,
            index,
        }
    }

    /// Rebuilds parameters from stored tensors, checking names and shapes
    /// against the layout of `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = layout(cfg);
        if expected.len() != named.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, shape, _), (got, t)) in expected.iter().zip(&named) {
            if name != got || shape.as_slice() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {got} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Params::from_named(names, tensors))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}
