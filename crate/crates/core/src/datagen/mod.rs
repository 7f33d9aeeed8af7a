//! Seeded generators for arithmetic, linear-equation and divisibility
//! question/answer pairs.
//!
//! Ground truth is computed with exact decimal arithmetic, so an answer
//! string is always the exact result of its question. All randomness comes
//! from ChaCha8 streams keyed by `(seed, stream)`, which makes a corpus
//! byte-identical across runs and platforms.

mod decimal;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decimal::Decimal;

use crate::error::{Error, Result};
use crate::textnum::{extract_numbers, RESERVED, NUM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerKind {
    Number,
    Text,
    Mixed,
}

/// One question/answer record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub question: String,
    pub answer: String,
    pub answer_kind: AnswerKind,
    pub answer_values: Vec<f64>,
}

impl Example {
    /// Builds an example, deriving kind and values from the answer text.
    pub fn from_strings(question: impl Into<String>, answer: impl Into<String>) -> Self {
        let question = question.into();
        let answer = answer.into();
        let (template, values) = extract_numbers(&answer);
        let answer_kind = if values.is_empty() {
            AnswerKind::Text
        } else if template.len() == 1 && template[0] == RESERVED[NUM] {
            AnswerKind::Number
        } else {
            AnswerKind::Mixed
        };
        Example {
            question,
            answer,
            answer_kind,
            answer_values: values,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArithOp {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
    #[serde(rename = "/")]
    Div,
}

impl ArithOp {
    pub fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "*",
            ArithOp::Div => "/",
        }
    }
}

/// Generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    pub n_examples: usize,
    pub weight_arith: f64,
    pub weight_solve: f64,
    pub weight_divisibility: f64,
    pub lo: f64,
    pub hi: f64,
    pub max_decimals: u32,
    pub ops: Vec<ArithOp>,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 0,
            n_examples: 1000,
            weight_arith: 1.0,
            weight_solve: 0.0,
            weight_divisibility: 0.0,
            lo: 1e-3,
            hi: 1e8,
            max_decimals: 3,
            ops: vec![ArithOp::Add, ArithOp::Sub, ArithOp::Mul, ArithOp::Div],
        }
    }
}

/// The two dataset regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    NumbersOnly,
    TextAndNumbers,
}

impl GenSpec {
    pub fn for_regime(regime: Regime) -> Self {
        match regime {
            Regime::NumbersOnly => GenSpec::default(),
            Regime::TextAndNumbers => GenSpec {
                weight_arith: 0.5,
                weight_solve: 0.25,
                weight_divisibility: 0.25,
                ..GenSpec::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.weight_arith, self.weight_solve, self.weight_divisibility];
        if !(self.lo > 0.0) || !(self.hi >= self.lo) || !self.hi.is_finite() {
            return Err(Error::Config(format!(
                "magnitude range must satisfy 0 < lo <= hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("task weights must be >= 0 and not all zero".into()));
        }
        if self.weight_arith > 0.0 && self.ops.is_empty() {
            return Err(Error::Config("arithmetic needs at least one operator".into()));
        }
        if self.hi < 10f64.powi(-(self.max_decimals as i32)) {
            return Err(Error::Config("hi is below the smallest representable operand".into()));
        }
        if self.max_decimals > 6 {
            return Err(Error::Config("max_decimals above 6 is not supported".into()));
        }
        Ok(())
    }

    /// Exact per-task counts by largest remainder.
    pub fn task_counts(&self) -> [usize; 3] {
        let w = [self.weight_arith, self.weight_solve, self.weight_divisibility];
        let total: f64 = w.iter().sum();
        let exact: Vec<f64> = w.iter().map(|x| x / total * self.n_examples as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut rest = self.n_examples - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for i in order {
            if rest == 0 {
                break;
            }
            if w[i] > 0.0 {
                counts[i] += 1;
                rest -= 1;
            }
        }
        [counts[0], counts[1], counts[2]]
    }
}

/// Independent ChaCha8 stream for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_ARITH: u64 = 1;
const STREAM_SOLVE: u64 = 2;
const STREAM_DIVIS: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Positive operand with at most `max_decimals` places, magnitude in `[lo, hi]`.
fn draw_magnitude(rng: &mut ChaCha8Rng, spec: &GenSpec, max_decimals: u32) -> Decimal {
    loop {
        let m = log_uniform(rng, spec.lo, spec.hi);
        let needed = (-m.log10()).ceil().max(0.0) as u32;
        if needed > max_decimals {
            continue;
        }
        let places = rng.gen_range(needed..=max_decimals);
        let d = Decimal::round_f64(m, places);
        let v = d.to_f64();
        if !d.is_zero() && v >= spec.lo && v <= spec.hi {
            return d;
        }
    }
}

fn draw_operand(rng: &mut ChaCha8Rng, spec: &GenSpec, max_decimals: u32) -> Decimal {
    let d = draw_magnitude(rng, spec, max_decimals);
    if rng.gen_bool(0.5) {
        -d
    } else {
        d
    }
}

fn in_range(d: Decimal, spec: &GenSpec) -> bool {
    let v = d.abs().to_f64();
    v >= spec.lo && v <= spec.hi
}

/// Answers keep at most 15 significant digits so they survive an f64 round trip.
const MAX_DIGITS: u32 = 15;

fn arithmetic_example(a: Decimal, op: ArithOp, b: Decimal, answer: Decimal) -> Example {
    Example::from_strings(
        format!("Calculate {a} {} {b}.", op.symbol()),
        answer.to_string(),
    )
}

fn gen_arithmetic_one(rng: &mut ChaCha8Rng, spec: &GenSpec) -> Example {
    let op = spec.ops[rng.gen_range(0..spec.ops.len())];
    match op {
        ArithOp::Add | ArithOp::Sub => {
            let a = draw_operand(rng, spec, spec.max_decimals);
            let b = draw_operand(rng, spec, spec.max_decimals);
            let ans = if op == ArithOp::Add { a + b } else { a - b };
            arithmetic_example(a, op, b, ans)
        }
        ArithOp::Mul => {
            let a = draw_operand(rng, spec, spec.max_decimals);
            for _ in 0..64 {
                let b = draw_operand(rng, spec, spec.max_decimals);
                if (a * b).digits() <= MAX_DIGITS {
                    return arithmetic_example(a, op, b, a * b);
                }
            }
            // Large `a`: fall back to a short integer factor.
            let cap = 10f64.powi((MAX_DIGITS - a.digits().min(MAX_DIGITS - 1)) as i32);
            let lo = spec.lo.max(1.0).ceil() as i128;
            let hi = (spec.hi.min(cap - 1.0).floor() as i128).max(lo);
            let b = Decimal::integer(rng.gen_range(lo..=hi));
            let b = if rng.gen_bool(0.5) { -b } else { b };
            arithmetic_example(a, op, b, a * b)
        }
        ArithOp::Div => {
            // Answer first: a = q·b, so a / b = q exactly.
            loop {
                let b_places = rng.gen_range(0..=spec.max_decimals);
                let b = draw_operand(rng, spec, b_places);
                let q = draw_operand(rng, spec, spec.max_decimals - b.scale());
                let a = q * b;
                if in_range(a, spec) && a.digits() <= MAX_DIGITS && a.scale() <= spec.max_decimals {
                    return arithmetic_example(a, op, b, q);
                }
            }
        }
    }
}

/// "Calculate a op b." questions with exact answers.
pub fn gen_arithmetic(spec: &GenSpec) -> Vec<Example> {
    let mut rng = stream_rng(spec.seed, STREAM_ARITH);
    (0..spec.n_examples)
        .map(|_| gen_arithmetic_one(&mut rng, spec))
        .collect()
}

/// Renders `Σ cᵢ·var (+ constant)` with canonical signs and spacing.
fn render_side(coeffs: &[i128], constant: i128, var: char) -> String {
    let mut out = String::new();
    for (i, c) in coeffs.iter().enumerate() {
        if i == 0 {
            out.push_str(&format!("{c}*{var}"));
        } else {
            let sign = if *c < 0 { '-' } else { '+' };
            out.push_str(&format!(" {sign} {}*{var}", c.abs()));
        }
    }
    if constant != 0 {
        let sign = if constant < 0 { '-' } else { '+' };
        out.push_str(&format!(" {sign} {}", constant.abs()));
    }
    out
}

/// Builds "Solve c1*v + c0 = d1*v + … + e for v." around a chosen integer root.
/// Returns `None` when the draw is degenerate.
pub fn linear_example(var: char, root: i128, lhs: i128, rhs: &[i128], rhs_constant: i128) -> Option<Example> {
    let total: i128 = rhs.iter().sum();
    if total == lhs || rhs.is_empty() {
        return None;
    }
    let lhs_constant = (total - lhs) * root + rhs_constant;
    let q = format!(
        "Solve {} = {} for {var}.",
        render_side(&[lhs], lhs_constant, var),
        render_side(rhs, rhs_constant, var)
    );
    Some(Example::from_strings(q, root.to_string()))
}

const VARIABLES: [char; 12] = ['a', 'b', 'c', 'd', 'f', 'g', 'h', 'k', 'n', 't', 'x', 'y'];

fn draw_integer(rng: &mut ChaCha8Rng, lo: i128, hi: i128) -> i128 {
    let v = rng.gen_range(lo..=hi);
    if rng.gen_bool(0.5) {
        -v
    } else {
        v
    }
}

fn magnitude_ok(v: i128, spec: &GenSpec) -> bool {
    v == 0 || {
        let f = v.unsigned_abs() as f64;
        f >= spec.lo && f <= spec.hi
    }
}

/// Linear equations with an exact integer solution.
pub fn gen_linear_solve(spec: &GenSpec) -> Vec<Example> {
    let mut rng = stream_rng(spec.seed, STREAM_SOLVE);
    let coef_lo = spec.lo.max(1.0).ceil() as i128;
    let coef_hi = (spec.hi.min(500.0).floor() as i128).max(coef_lo);
    let root_hi = (spec.hi.min(100.0).floor() as i128).max(1);
    let mut out = Vec::with_capacity(spec.n_examples);
    while out.len() < spec.n_examples {
        let var = VARIABLES[rng.gen_range(0..VARIABLES.len())];
        let root = rng.gen_range(-root_hi..=root_hi);
        let lhs = draw_integer(&mut rng, coef_lo, coef_hi);
        let n_rhs = rng.gen_range(1..=3);
        let rhs: Vec<i128> = (0..n_rhs).map(|_| draw_integer(&mut rng, coef_lo, coef_hi)).collect();
        let rhs_constant = if rng.gen_bool(0.5) {
            draw_integer(&mut rng, coef_lo, coef_hi)
        } else {
            0
        };
        let total: i128 = rhs.iter().sum();
        let lhs_constant = (total - lhs) * root + rhs_constant;
        if !magnitude_ok(lhs_constant, spec) {
            continue;
        }
        if let Some(ex) = linear_example(var, root, lhs, &rhs, rhs_constant) {
            out.push(ex);
        }
    }
    out
}

/// "Does d divide n?" for explicit `n = d·k + offset`.
pub fn divisibility_example(divisor: u64, n: u64) -> Example {
    let answer = if n.is_multiple_of(divisor) { "True" } else { "False" };
    Example::from_strings(format!("Does {divisor} divide {n}?"), answer)
}

/// Divisibility questions, alternating true and false answers.
pub fn gen_divisibility(spec: &GenSpec) -> Vec<Example> {
    let mut rng = stream_rng(spec.seed, STREAM_DIVIS);
    let d_lo = spec.lo.max(2.0).ceil() as u64;
    let d_hi = (spec.hi.min(99.0).floor() as u64).max(d_lo);
    let mut out = Vec::with_capacity(spec.n_examples);
    while out.len() < spec.n_examples {
        let want_true = out.len() % 2 == 0;
        let d = rng.gen_range(d_lo..=d_hi);
        let m = log_uniform(&mut rng, spec.lo.max(d as f64), spec.hi.max(d as f64));
        let k = (m / d as f64).round().max(1.0) as u64;
        let n = if want_true {
            d * k
        } else {
            d * k + rng.gen_range(1..d)
        };
        if (n as f64) > spec.hi || (n as f64) < spec.lo {
            continue;
        }
        out.push(divisibility_example(d, n));
    }
    out
}

/// Mixed corpus with exact task quotas, shuffled deterministically.
pub fn gen_corpus(spec: &GenSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let [n_arith, n_solve, n_div] = spec.task_counts();
    let with_n = |n| GenSpec {
        n_examples: n,
        ..spec.clone()
    };
    let mut all = gen_arithmetic(&with_n(n_arith));
    all.extend(gen_linear_solve(&with_n(n_solve)));
    all.extend(gen_divisibility(&with_n(n_div)));
    all.shuffle(&mut stream_rng(spec.seed, STREAM_SHUFFLE));
    Ok(all)
}

/// Train/val/test split by rounded fractions; test takes the remainder.
pub fn split(examples: Vec<Example>, train: f64, val: f64) -> (Vec<Example>, Vec<Example>, Vec<Example>) {
    let n = examples.len();
    let n_train = ((n as f64) * train).round() as usize;
    let n_val = (((n as f64) * val).round() as usize).min(n - n_train.min(n));
    let mut it = examples.into_iter();
    let a: Vec<_> = it.by_ref().take(n_train).collect();
    let b: Vec<_> = it.by_ref().take(n_val).collect();
    (a, b, it.collect())
}

#[derive(Serialize, Deserialize)]
struct Record {
    question: String,
    answer: String,
}

pub fn write_jsonl(examples: &[Example], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let rec = Record {
            question: ex.question.clone(),
            answer: ex.answer.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one `{"question", "answer"}` object per line; blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(Example::from_strings(rec.question, rec.answer));
    }
    Ok(out)
}
