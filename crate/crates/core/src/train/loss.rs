use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadVars, ModelOutput};
use crate::tensor::{Graph, Tensor, Var};
use crate::textnum::{Modality, MixedSequence, NumberScheme};

/// The three loss components and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub text: f64,
    pub route: f64,
    pub num: f64,
}

impl LossParts {
    /// First non-finite component, by name.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("text", self.text),
            ("route", self.route),
            ("num", self.num),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Loss weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub route: f64,
    pub num: f64,
}

/// Shifted labels and masks for a packed batch of targets. Row `r` of the
/// packed outputs is labelled by the following target position; the last
/// row of each target has no label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Labels {
    pub tokens: Vec<usize>,
    pub route: Vec<usize>,
    pub values: Vec<f64>,
    pub text_mask: Vec<bool>,
    pub route_mask: Vec<bool>,
    pub num_mask: Vec<bool>,
}

impl Labels {
    pub fn new(tgts: &[&MixedSequence], scheme: NumberScheme) -> Self {
        let routed = scheme.number_aware() && scheme != NumberScheme::XVal;
        let mut l = Labels::default();
        for t in tgts {
            for i in 0..t.len() {
                if i + 1 == t.len() {
                    l.tokens.push(0);
                    l.route.push(0);
                    l.values.push(0.0);
                    l.text_mask.push(false);
                    l.route_mask.push(false);
                    l.num_mask.push(false);
                    continue;
                }
                let next = i + 1;
                let is_num = t.modality()[next] == Modality::Number;
                l.tokens.push(t.token_ids()[next]);
                l.route.push(is_num as usize);
                l.values.push(t.values()[next]);
                // xVal learns `<num>` through the text head.
                l.text_mask.push(!is_num || scheme == NumberScheme::XVal);
                l.route_mask.push(routed);
                l.num_mask.push(is_num && scheme.number_aware());
            }
        }
        l
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn cross_entropy_or_zero(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    if mask.iter().any(|&m| m) {
        g.softmax_cross_entropy(logits, targets, mask)
    } else {
        Ok(g.leaf(Tensor::scalar(0.0)))
    }
}

/// Composite loss on graph nodes. Returns `(total, text, route, num)`.
pub fn composite_loss_graph(
    g: &mut Graph,
    heads: HeadVars,
    labels: &Labels,
    w: LossWeights,
) -> Result<[Var; 4]> {
    let rows = g.shape(heads.text)[0];
    if rows != labels.len() {
        return Err(Error::Contract(format!(
            "{rows} output rows for {} target positions",
            labels.len()
        )));
    }
    let text = cross_entropy_or_zero(g, heads.text, &labels.tokens, &labels.text_mask)?;
    let route = cross_entropy_or_zero(g, heads.route, &labels.route, &labels.route_mask)?;
    let num = g.masked_mse(heads.num, &labels.values, &labels.num_mask)?;
    let r = g.scale(route, w.route);
    let n = g.scale(num, w.num);
    let total = g.add(text, r)?;
    let total = g.add(total, n)?;
    Ok([total, text, route, num])
}

/// Composite loss of one teacher-forced output against its target.
pub fn composite_loss(
    out: &ModelOutput,
    tgt: &MixedSequence,
    scheme: NumberScheme,
    w: LossWeights,
) -> Result<LossParts> {
    if out.len() != tgt.len() || out.text_logits.shape()[0] != tgt.len() {
        return Err(Error::Contract(format!(
            "output length {} does not match target length {}",
            out.len(),
            tgt.len()
        )));
    }
    let labels = Labels::new(&[tgt], scheme);
    let mut g = Graph::new();
    let heads = HeadVars {
        text: g.leaf(out.text_logits.clone()),
        route: g.leaf(out.route_logits.clone()),
        num: g.leaf(out.num_preds.clone()),
    };
    let [total, text, route, num] = composite_loss_graph(&mut g, heads, &labels, w)?;
    Ok(LossParts {
        total: g.value(total).item(),
        text: g.value(text).item(),
        route: g.value(route).item(),
        num: g.value(num).item(),
    })
}
