//! Encoder-decoder transformer with number-aware embeddings, a routing head
//! and separate text and number heads.
//!
//! Sequences in a batch are packed row-wise: activations are `[rows × d]` and
//! attention is restricted to per-sequence [`Segment`]s, so no padding is
//! needed.

mod config;
mod params;

pub use config::{param_count, ModelConfig};
pub use params::Params;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Segment, Tensor, Var};
use crate::textnum::{Modality, MixedSequence, NumberCodec, NumberScheme, BOS, EOS, NUM, PAD};

const LN_EPS: f64 = 1e-5;

/// Per-position head outputs for one decoder input of length `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// `[n × vocab]`
    pub text_logits: Tensor,
    /// `[n × 2]`, column 1 is Number.
    pub route_logits: Tensor,
    /// `[n]`, in model space.
    pub num_preds: Tensor,
}

impl ModelOutput {
    pub fn len(&self) -> usize {
        self.num_preds.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of greedy decoding. Values are in natural space and `<bos>`/`<eos>`
/// are not included.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub seq: MixedSequence,
    /// True when `max_len` was reached before `<eos>`.
    pub truncated: bool,
}

/// Head outputs of a packed batch as graph nodes. Rows follow the batch's
/// target sequences back to back.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub text: Var,
    pub route: Var,
    /// `[rows × 1]`
    pub num: Var,
}

/// Parameters placed on a graph, in [`Params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps existing graph nodes holding the parameters in [`Params`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Sinusoidal positional encoding row for `pos`.
pub fn positional_encoding(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn offsets<'a>(seqs: impl Iterator<Item = &'a MixedSequence>) -> Vec<(usize, usize)> {
    let mut start = 0;
    seqs.map(|s| {
        let r = (start, s.len());
        start += s.len();
        r
    })
    .collect()
}

fn self_segments(spans: &[(usize, usize)]) -> Vec<Segment> {
    spans
        .iter()
        .map(|&(s, n)| Segment {
            q_start: s,
            q_len: n,
            k_start: s,
            k_len: n,
        })
        .collect()
}

/// A model: configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: Params,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = Params::init(&cfg, seed)?;
        Ok(Model { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let named = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Params::from_tensors(&cfg, named)?;
        Ok(Model { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Places every parameter on `g`, tracking gradients if `grad`.
    pub fn bind(&self, g: &mut Graph, grad: bool) -> Bound {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                let t = t.clone();
                g.leaf(if grad { t.requiring_grad() } else { t })
            })
            .collect();
        Bound { vars }
    }

    fn p(&self, b: &Bound, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        b.vars[i]
    }

    fn linear(&self, g: &mut Graph, b: &Bound, x: Var, name: &str) -> Result<Var> {
        let y = g.matmul(x, self.p(b, &format!("{name}.w")))?;
        g.add_row(y, self.p(b, &format!("{name}.b")))
    }

    fn norm(&self, g: &mut Graph, b: &Bound, x: Var, name: &str) -> Result<Var> {
        let gain = self.p(b, &format!("{name}.g"));
        let bias = self.p(b, &format!("{name}.b"));
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn attention(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        kv: Var,
        segments: Vec<Segment>,
        causal: bool,
        name: &str,
    ) -> Result<Var> {
        let q = self.linear(g, b, x, &format!("{name}.q"))?;
        let k = self.linear(g, b, kv, &format!("{name}.k"))?;
        let v = self.linear(g, b, kv, &format!("{name}.v"))?;
        let a = g.attention_segments(q, k, v, segments, causal, self.cfg.n_heads)?;
        self.linear(g, b, a, &format!("{name}.o"))
    }

    fn ffn(&self, g: &mut Graph, b: &Bound, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(g, b, x, &format!("{name}.1"))?;
        let h = g.gelu(h);
        self.linear(g, b, h, &format!("{name}.2"))
    }

    fn check_seq(&self, seq: &MixedSequence) -> Result<()> {
        if seq.len() > self.cfg.max_seq_len {
            return Err(Error::Length {
                len: seq.len(),
                max: self.cfg.max_seq_len,
            });
        }
        if seq.is_empty() {
            return Err(Error::Input("empty sequence".into()));
        }
        if let Some(v) = seq.values().iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite number {v}")));
        }
        Ok(())
    }

    /// MLP number encoder applied to a column of model-space values.
    fn encode_numbers(&self, g: &mut Graph, b: &Bound, values: Vec<f64>) -> Result<Var> {
        let m = values.len();
        let x = g.leaf(Tensor::new(vec![m, 1], values)?);
        let mut h = self.linear(g, b, x, "numenc.0")?;
        for i in 1..=self.cfg.num_encoder_depth {
            h = g.gelu(h);
            h = self.linear(g, b, h, &format!("numenc.{i}"))?;
        }
        Ok(h)
    }

    /// Input embeddings of packed sequences before positional encoding.
    fn embed_tokens(&self, g: &mut Graph, b: &Bound, seqs: &[&MixedSequence]) -> Result<Var> {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.token_ids().iter().copied()).collect();
        let values: Vec<f64> = seqs.iter().flat_map(|s| s.values().iter().copied()).collect();
        let modality: Vec<Modality> = seqs.iter().flat_map(|s| s.modality().iter().copied()).collect();
        let tokens = g.gather_rows(self.p(b, "embed.tokens"), &ids)?;
        match self.cfg.scheme {
            NumberScheme::XVal => {
                let scales: Vec<f64> = modality
                    .iter()
                    .zip(&values)
                    .map(|(m, v)| if *m == Modality::Number { *v } else { 1.0 })
                    .collect();
                g.scale_rows(tokens, &scales)
            }
            s if s.uses_mlp_encoder() => {
                let rows: Vec<usize> = (0..ids.len()).filter(|&i| modality[i] == Modality::Number).collect();
                if rows.is_empty() {
                    return Ok(tokens);
                }
                let nums = self.encode_numbers(g, b, rows.iter().map(|&i| values[i]).collect())?;
                g.scatter_rows(tokens, nums, &rows)
            }
            _ => Ok(tokens),
        }
    }

    fn embed_packed(&self, g: &mut Graph, b: &Bound, seqs: &[&MixedSequence]) -> Result<Var> {
        let x = self.embed_tokens(g, b, seqs)?;
        let d = self.cfg.d_model;
        let pe: Vec<f64> = seqs
            .iter()
            .flat_map(|s| (0..s.len()).flat_map(move |p| positional_encoding(p, d)))
            .collect();
        let rows = pe.len() / d;
        let pe = g.leaf(Tensor::new(vec![rows, d], pe)?);
        g.add(x, pe)
    }

    /// Embedding of one sequence, positional encoding included.
    pub fn embed_mixed(&self, seq: &MixedSequence) -> Result<Tensor> {
        self.check_seq(seq)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = self.embed_packed(&mut g, &b, &[seq])?;
        Ok(g.value(x).clone())
    }

    /// Embedding of one sequence without positional encoding.
    pub fn embed_content(&self, seq: &MixedSequence) -> Result<Tensor> {
        self.check_seq(seq)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = self.embed_tokens(&mut g, &b, &[seq])?;
        Ok(g.value(x).clone())
    }

    /// Encoder stack over packed sources; returns the final-normed states.
    pub fn encode(&self, g: &mut Graph, b: &Bound, srcs: &[&MixedSequence]) -> Result<(Var, Vec<(usize, usize)>)> {
        for s in srcs {
            self.check_seq(s)?;
        }
        let spans = offsets(srcs.iter().copied());
        let mut x = self.embed_packed(g, b, srcs)?;
        for l in 0..self.cfg.n_enc_layers {
            let h = self.norm(g, b, x, &format!("enc.{l}.ln1"))?;
            let a = self.attention(g, b, h, h, self_segments(&spans), false, &format!("enc.{l}.attn"))?;
            x = g.add(x, a)?;
            let h = self.norm(g, b, x, &format!("enc.{l}.ln2"))?;
            let f = self.ffn(g, b, h, &format!("enc.{l}.ffn"))?;
            x = g.add(x, f)?;
        }
        Ok((self.norm(g, b, x, "enc.norm")?, spans))
    }

    /// Decoder stack and heads. `tgts[i]` attends to source span `src_spans[i]`.
    pub fn decode(
        &self,
        g: &mut Graph,
        b: &Bound,
        memory: Var,
        src_spans: &[(usize, usize)],
        tgts: &[&MixedSequence],
    ) -> Result<HeadVars> {
        if src_spans.len() != tgts.len() {
            return Err(Error::Contract(format!(
                "{} sources for {} targets",
                src_spans.len(),
                tgts.len()
            )));
        }
        for t in tgts {
            self.check_seq(t)?;
        }
        let spans = offsets(tgts.iter().copied());
        let cross: Vec<Segment> = spans
            .iter()
            .zip(src_spans)
            .map(|(&(qs, qn), &(ks, kn))| Segment {
                q_start: qs,
                q_len: qn,
                k_start: ks,
                k_len: kn,
            })
            .collect();
        let mut x = self.embed_packed(g, b, tgts)?;
        for l in 0..self.cfg.n_dec_layers {
            let h = self.norm(g, b, x, &format!("dec.{l}.ln1"))?;
            let a = self.attention(g, b, h, h, self_segments(&spans), true, &format!("dec.{l}.self"))?;
            x = g.add(x, a)?;
            let h = self.norm(g, b, x, &format!("dec.{l}.ln2"))?;
            let a = self.attention(g, b, h, memory, cross.clone(), false, &format!("dec.{l}.cross"))?;
            x = g.add(x, a)?;
            let h = self.norm(g, b, x, &format!("dec.{l}.ln3"))?;
            let f = self.ffn(g, b, h, &format!("dec.{l}.ffn"))?;
            x = g.add(x, f)?;
        }
        let h = self.norm(g, b, x, "dec.norm")?;
        let text = self.linear(g, b, h, "head.text")?;
        let route = self.linear(g, b, h, "head.route")?;
        let mut num = h;
        for i in 0..self.cfg.num_head_depth {
            if i > 0 {
                num = g.gelu(num);
            }
            num = self.linear(g, b, num, &format!("head.num.{i}"))?;
        }
        Ok(HeadVars { text, route, num })
    }

    /// Packed forward pass over `(src, tgt)` pairs; row `r` of the outputs
    /// predicts the successor of the corresponding target position.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        batch: &[(&MixedSequence, &MixedSequence)],
    ) -> Result<HeadVars> {
        let srcs: Vec<&MixedSequence> = batch.iter().map(|p| p.0).collect();
        let tgts: Vec<&MixedSequence> = batch.iter().map(|p| p.1).collect();
        let (memory, spans) = self.encode(g, b, &srcs)?;
        self.decode(g, b, memory, &spans, &tgts)
    }

    /// Teacher-forced forward pass: one output row per position of `tgt`.
    pub fn forward(&self, src: &MixedSequence, tgt: &MixedSequence) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let h = self.forward_graph(&mut g, &b, &[(src, tgt)])?;
        Ok(ModelOutput {
            text_logits: g.value(h.text).clone(),
            route_logits: g.value(h.route).clone(),
            num_preds: g.value(h.num).reshape(vec![tgt.len()])?,
        })
    }

    /// Modality the model would choose at each output row.
    pub fn predicted_modality(&self, out: &ModelOutput) -> Vec<Modality> {
        let v = self.cfg.vocab_size;
        (0..out.len())
            .map(|i| {
                let text = &out.text_logits.data()[i * v..(i + 1) * v];
                let route = &out.route_logits.data()[i * 2..i * 2 + 2];
                self.decide(text, route).0
            })
            .collect()
    }

    /// Modality and text token chosen from one row of text and route logits.
    pub fn decide(&self, text: &[f64], route: &[f64]) -> (Modality, usize) {
        let argmax = |skip: &[usize]| {
            let mut best = (f64::NEG_INFINITY, EOS);
            for (i, &x) in text.iter().enumerate() {
                if !skip.contains(&i) && x > best.0 {
                    best = (x, i);
                }
            }
            best.1
        };
        match self.cfg.scheme {
            // xVal routes on `<num>` winning the text argmax.
            NumberScheme::XVal => {
                let t = argmax(&[PAD, BOS]);
                let m = if t == NUM { Modality::Number } else { Modality::Text };
                (m, t)
            }
            _ if self.cfg.routing_enabled && route[1] > route[0] => (Modality::Number, NUM),
            _ => (Modality::Text, argmax(&[PAD, BOS, NUM])),
        }
    }

    /// Greedy decoding from `<bos>` until `<eos>` or `max_len` emitted
    /// positions. Number values are mapped back through `codec`.
    pub fn generate(&self, src: &MixedSequence, codec: NumberCodec, max_len: usize) -> Result<Generated> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let (memory, spans) = self.encode(&mut g, &b, &[src])?;
        let mut prefix = MixedSequence::new();
        prefix.push_text(BOS);
        let mut out = MixedSequence::new();
        let limit = max_len.min(self.cfg.max_seq_len.saturating_sub(1));
        let v = self.cfg.vocab_size;
        for _ in 0..limit {
            let h = self.decode(&mut g, &b, memory, &spans, &[&prefix])?;
            let last = prefix.len() - 1;
            let text = &g.data(h.text)[last * v..(last + 1) * v];
            let route = &g.data(h.route)[last * 2..last * 2 + 2];
            match self.decide(text, route) {
                (Modality::Number, _) => {
                    let y = g.data(h.num)[last];
                    prefix.push_number(y);
                    out.push_number(codec.from_model(y));
                }
                (Modality::Text, EOS) => {
                    return Ok(Generated {
                        seq: out,
                        truncated: false,
                    })
                }
                (Modality::Text, t) => {
                    prefix.push_text(t);
                    out.push_text(t);
                }
            }
        }
        Ok(Generated {
            seq: out,
            truncated: true,
        })
    }
}
