//! Regression metrics, modality F1 and the evaluation driver.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{AnswerKind, Example};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Graph;
use crate::textnum::{extract_numbers, Modality, MixedSequence, Tokenizer};
use crate::train::Labels;

/// Regression metrics plus counts. A metric is `None` when it is undefined
/// for the data: MRE/MedRE without a nonzero truth, R² without variance in
/// the truths, everything when no pair was scored.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: Option<f64>,
    pub mse: Option<f64>,
    pub rmse: Option<f64>,
    pub mre: Option<f64>,
    pub medre: Option<f64>,
    pub r2: Option<f64>,
    /// Absent when routing is disabled.
    pub f1: Option<f64>,
    pub n_number_samples: usize,
    pub n_excluded_zero_truth: usize,
    /// Numeric-truth examples whose output had no number to compare.
    pub n_unparsed: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<(f64, f64)>,
}

impl MetricsReport {
    pub fn to_json(&self, with_pairs: bool) -> Result<String> {
        if with_pairs {
            Ok(serde_json::to_string_pretty(self)?)
        } else {
            let mut r = self.clone();
            r.pairs.clear();
            Ok(serde_json::to_string_pretty(&r)?)
        }
    }
}

/// MAE, MSE, RMSE, MRE, MedRE and R² of `preds` against `truths`.
pub fn regression_metrics(truths: &[f64], preds: &[f64]) -> Result<MetricsReport> {
    if truths.len() != preds.len() {
        return Err(Error::Contract(format!(
            "{} truths but {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::Input("no pairs to score".into()));
    }
    let n = truths.len() as f64;
    let errs: Vec<f64> = preds.iter().zip(truths).map(|(p, t)| p - t).collect();
    let mae = errs.iter().map(|e| e.abs()).sum::<f64>() / n;
    let sse: f64 = errs.iter().map(|e| e * e).sum();
    let mse = sse / n;

    let mut ratios: Vec<f64> = errs
        .iter()
        .zip(truths)
        .filter(|(_, t)| **t != 0.0)
        .map(|(e, t)| e.abs() / t.abs())
        .collect();
    let excluded = truths.len() - ratios.len();
    let (mre, medre) = if ratios.is_empty() {
        (None, None)
    } else {
        let mre = ratios.iter().sum::<f64>() / ratios.len() as f64;
        ratios.sort_by(f64::total_cmp);
        (Some(mre), Some(ratios[(ratios.len() - 1) / 2]))
    };

    let mean = truths.iter().sum::<f64>() / n;
    let sst: f64 = truths.iter().map(|t| (t - mean) * (t - mean)).sum();
    let r2 = (sst > 0.0).then(|| 1.0 - sse / sst);

    Ok(MetricsReport {
        mae: Some(mae),
        mse: Some(mse),
        rmse: Some(mse.sqrt()),
        mre,
        medre,
        r2,
        f1: None,
        n_number_samples: truths.len(),
        n_excluded_zero_truth: excluded,
        n_unparsed: 0,
        pairs: truths.iter().copied().zip(preds.iter().copied()).collect(),
    })
}

/// Binary F1 with Number as the positive class, micro-averaged over every
/// position of every example. `None` when the truth has no Number label.
pub fn modality_f1(truth: &[Vec<Modality>], pred: &[Vec<Modality>]) -> Result<Option<f64>> {
    if truth.len() != pred.len() {
        return Err(Error::Contract("modality lists differ in example count".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (t, p) in truth.iter().zip(pred) {
        if t.len() != p.len() {
            return Err(Error::Contract("modality sequences differ in length".into()));
        }
        for (a, b) in t.iter().zip(p) {
            match (*a == Modality::Number, *b == Modality::Number) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fn_ == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    TeacherForced,
    FreeRunning,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub mode: EvalMode,
    /// Generation budget in emitted positions.
    pub max_len: usize,
    /// Examples per teacher-forced forward pass.
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: EvalMode::FreeRunning,
            max_len: 40,
            batch_size: 32,
        }
    }
}

/// Teacher-forced per-position outputs for each example: the predicted and
/// true modality of every labelled position, and the natural-space number
/// prediction at each Number target.
struct Forced {
    true_mod: Vec<Modality>,
    pred_mod: Vec<Modality>,
    num_preds: Vec<f64>,
}

fn teacher_forced(model: &Model, tok: &Tokenizer, encoded: &[(MixedSequence, MixedSequence)], batch: usize) -> Result<Vec<Forced>> {
    let scheme = model.config().scheme;
    let codec = tok.codec();
    let v = model.config().vocab_size;
    let mut out = Vec::with_capacity(encoded.len());
    for chunk in encoded.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let pairs: Vec<_> = chunk.iter().map(|(s, t)| (s, t)).collect();
        let heads = model.forward_graph(&mut g, &b, &pairs)?;
        let mut row = 0;
        for (_, tgt) in chunk {
            let labels = Labels::new(&[tgt], scheme);
            let mut f = Forced {
                true_mod: Vec::new(),
                pred_mod: Vec::new(),
                num_preds: Vec::new(),
            };
            for i in 0..tgt.len() - 1 {
                let r = row + i;
                let text = &g.data(heads.text)[r * v..(r + 1) * v];
                let route = &g.data(heads.route)[r * 2..r * 2 + 2];
                f.pred_mod.push(model.decide(text, route).0);
                let is_num = labels.route[i] == 1;
                f.true_mod.push(if is_num { Modality::Number } else { Modality::Text });
                if is_num {
                    f.num_preds.push(codec.from_model(g.data(heads.num)[r]));
                }
            }
            row += tgt.len();
            out.push(f);
        }
    }
    Ok(out)
}

/// First number in a generated answer: a Number position if any, otherwise
/// the first numeral in the decoded text.
pub fn first_number(tok: &Tokenizer, seq: &MixedSequence) -> Option<f64> {
    if let Some(v) = seq.number_values().next() {
        return Some(v);
    }
    extract_numbers(&tok.decode(seq)).1.first().copied()
}

/// Scores `model` on `examples`. Modality F1 is always teacher-forced;
/// regression pairs come from the requested mode and only from examples
/// whose answer is a single number.
pub fn evaluate(model: &Model, tok: &Tokenizer, examples: &[Example], opts: EvalOptions) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    if tok.scheme() != model.config().scheme || tok.vocab().len() != model.config().vocab_size {
        return Err(Error::Incompatible(format!(
            "tokenizer ({}, vocab {}) does not match model ({}, vocab {})",
            tok.scheme(),
            tok.vocab().len(),
            model.config().scheme,
            model.config().vocab_size
        )));
    }
    let encoded = examples
        .iter()
        .map(|e| tok.encode_example(e))
        .collect::<Result<Vec<_>>>()?;
    let forced = teacher_forced(model, tok, &encoded, opts.batch_size)?;

    let f1 = if model.config().routing_enabled {
        let t: Vec<_> = forced.iter().map(|f| f.true_mod.clone()).collect();
        let p: Vec<_> = forced.iter().map(|f| f.pred_mod.clone()).collect();
        modality_f1(&t, &p)?
    } else {
        None
    };

    let mut truths = Vec::new();
    let mut preds = Vec::new();
    let mut unparsed = 0;
    for ((ex, (src, _)), f) in examples.iter().zip(&encoded).zip(&forced) {
        if ex.answer_kind != AnswerKind::Number {
            continue;
        }
        let truth = ex.answer_values[0];
        let pred = match opts.mode {
            EvalMode::TeacherForced => f.num_preds.first().copied(),
            EvalMode::FreeRunning => {
                let gen = model.generate(src, tok.codec(), opts.max_len)?;
                first_number(tok, &gen.seq)
            }
        };
        match pred.filter(|p| p.is_finite()) {
            Some(p) => {
                truths.push(truth);
                preds.push(p);
            }
            None => unparsed += 1,
        }
    }
    let mut report = if truths.is_empty() {
        MetricsReport::default()
    } else {
        regression_metrics(&truths, &preds)?
    };
    report.f1 = f1;
    report.n_unparsed = unparsed;
    Ok(report)
}

/// CSV of `truth,prediction,abs_rel_error` with 17 significant digits.
pub fn scatter_export(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut out = String::from("truth,prediction,abs_rel_error\n");
    for &(t, p) in &report.pairs {
        let rel = (p - t).abs() / t.abs();
        out.push_str(&format!("{t:.16e},{p:.16e},{rel:.16e}\n"));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
