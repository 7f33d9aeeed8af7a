//! Oracles shared by the integration tests and the acceptance suite. Nothing
//! here calls the code it checks except through its public entry points.

#![allow(dead_code)]

use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmd_core::datagen::Example;
use mmd_core::model::{Bound, Model, ModelConfig};
use mmd_core::tensor::gradcheck::{check_all, check_coords, GradCheck};
use mmd_core::tensor::{Graph, Segment, Tensor, Var};
use mmd_core::textnum::{MixedSequence, NumberScheme, BOS, EOS, NUM};
use mmd_core::train::{composite_loss_graph, Labels, LossWeights};
use mmd_core::Result;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// `Σ out ⊙ w` for a fixed random `w`, turning any op output into a scalar
/// whose gradient is not symmetric across entries.
fn project(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.leaf(w.clone().reshape(shape)?);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One differentiable op: its name, input shapes and a closure applying it.
struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    out_len: usize,
    f: OpFn,
}

fn op_cases() -> Vec<OpCase> {
    let case = |name, shapes: Vec<Vec<usize>>, out_len, f: OpFn| OpCase {
        name,
        shapes,
        out_len,
        f,
    };
    let packed = vec![
        Segment { q_start: 0, q_len: 2, k_start: 0, k_len: 3 },
        Segment { q_start: 2, q_len: 3, k_start: 3, k_len: 3 },
    ];
    let packed2 = packed.clone();
    vec![
        case("matmul", vec![vec![3, 4], vec![4, 2]], 6, Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("add", vec![vec![2, 3], vec![2, 3]], 6, Box::new(|g, v| g.add(v[0], v[1]))),
        case("mul", vec![vec![2, 3], vec![2, 3]], 6, Box::new(|g, v| g.mul(v[0], v[1]))),
        case("add_row", vec![vec![3, 4], vec![4]], 12, Box::new(|g, v| g.add_row(v[0], v[1]))),
        case("scale", vec![vec![2, 2]], 4, Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        case("sum", vec![vec![3, 2]], 1, Box::new(|g, v| Ok(g.sum(v[0])))),
        case("gelu", vec![vec![2, 4]], 8, Box::new(|g, v| Ok(g.gelu(v[0])))),
        case(
            "layer_norm",
            vec![vec![3, 5], vec![5], vec![5]],
            15,
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        case(
            "attention",
            vec![vec![3, 4], vec![4, 4], vec![4, 4]],
            12,
            Box::new(|g, v| g.attention(v[0], v[1], v[2], false, 2)),
        ),
        case(
            "attention_causal",
            vec![vec![4, 4], vec![4, 4], vec![4, 4]],
            16,
            Box::new(|g, v| g.attention(v[0], v[1], v[2], true, 2)),
        ),
        case(
            "attention_segments",
            vec![vec![5, 4], vec![6, 4], vec![6, 4]],
            20,
            Box::new(move |g, v| g.attention_segments(v[0], v[1], v[2], packed.clone(), false, 2)),
        ),
        case(
            "attention_segments_causal",
            vec![vec![5, 4], vec![6, 4], vec![6, 4]],
            20,
            Box::new(move |g, v| g.attention_segments(v[0], v[1], v[2], packed2.clone(), true, 1)),
        ),
        case("softmax_rows", vec![vec![3, 4]], 12, Box::new(|g, v| g.softmax_rows(v[0]))),
        case(
            "softmax_cross_entropy",
            vec![vec![4, 5]],
            1,
            Box::new(|g, v| g.softmax_cross_entropy(v[0], &[1, 4, 0, 2], &[true, false, true, true])),
        ),
        case("gather_rows", vec![vec![4, 3]], 12, Box::new(|g, v| g.gather_rows(v[0], &[2, 0, 2, 3]))),
        case(
            "scale_rows",
            vec![vec![3, 2]],
            6,
            Box::new(|g, v| g.scale_rows(v[0], &[0.5, -2.0, 3.0])),
        ),
        case(
            "scatter_rows",
            vec![vec![4, 3], vec![2, 3]],
            12,
            Box::new(|g, v| g.scatter_rows(v[0], v[1], &[3, 1])),
        ),
        case(
            "masked_mse",
            vec![vec![5]],
            1,
            Box::new(|g, v| g.masked_mse(v[0], &[0.3, -1.0, 2.0, 0.0, 1.5], &[true, true, false, true, true])),
        ),
        case("reshape", vec![vec![2, 3]], 6, Box::new(|g, v| g.reshape(v[0], vec![3, 2]))),
    ]
}

/// Worst relative gradient error per op over `points` random input draws.
pub fn op_gradchecks(points: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng(seed);
    op_cases()
        .into_iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for _ in 0..points {
                let inputs: Vec<Tensor> = case.shapes.iter().map(|s| random_tensor(&mut rng, s, 1.5)).collect();
                let w = random_tensor(&mut rng, &[case.out_len], 1.0);
                let f = &case.f;
                let report = check_all(
                    &inputs,
                    |g, v| {
                        let out = f(g, v)?;
                        project(g, out, &w)
                    },
                    GRAD_H,
                )
                .unwrap();
                worst = worst.max(report.max_rel_error);
            }
            (case.name, worst)
        })
        .collect()
}

pub fn seq(items: &[(usize, f64)]) -> MixedSequence {
    let mut s = MixedSequence::new();
    for &(id, v) in items {
        if id == NUM {
            s.push_number(v);
        } else {
            s.push_text(id);
        }
    }
    s
}

pub fn micro_config(scheme: NumberScheme, d_model: usize, vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::desk(scheme, vocab);
    cfg.d_model = d_model;
    cfg.n_heads = if d_model.is_multiple_of(2) { 2 } else { 1 };
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.ffn_mult = 2;
    cfg
}

/// A small mixed batch over a 10-token vocabulary.
pub fn micro_batch() -> Vec<(MixedSequence, MixedSequence)> {
    vec![
        (
            seq(&[(BOS, 0.0), (5, 0.0), (NUM, 1.5), (6, 0.0), (NUM, -0.25), (EOS, 0.0)]),
            seq(&[(BOS, 0.0), (NUM, 1.25), (EOS, 0.0)]),
        ),
        (
            seq(&[(BOS, 0.0), (7, 0.0), (NUM, 3.0), (EOS, 0.0)]),
            seq(&[(BOS, 0.0), (8, 0.0), (9, 0.0), (NUM, 0.5), (EOS, 0.0)]),
        ),
    ]
}

/// End-to-end composite-loss gradient check on a d_model=8, 1+1 layer model
/// for `n` randomly chosen parameter coordinates.
pub fn micro_model_gradcheck(n: usize, seed: u64) -> GradCheck {
    let cfg = micro_config(NumberScheme::Mmd, 8, 10);
    let mut model = Model::new(cfg, seed).unwrap();
    // Break the near-zero init so every path carries signal.
    let mut r = rng(seed ^ 0xabc);
    for t in model.params_mut().tensors_mut() {
        let shape = t.shape().to_vec();
        *t = random_tensor(&mut r, &shape, 0.5);
    }
    let batch = micro_batch();
    let inputs: Vec<Tensor> = model.params().tensors().to_vec();
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let coords: Vec<(usize, usize)> = (0..n)
        .map(|_| {
            let i = r.gen_range(0..sizes.len());
            (i, r.gen_range(0..sizes[i]))
        })
        .collect();
    let weights = LossWeights { route: 0.7, num: 0.3 };
    check_coords(
        &inputs,
        |g, vars| {
            let b = Bound::from_vars(vars.to_vec());
            let pairs: Vec<_> = batch.iter().map(|(s, t)| (s, t)).collect();
            let heads = model.forward_graph(g, &b, &pairs)?;
            let tgts: Vec<&MixedSequence> = batch.iter().map(|p| &p.1).collect();
            let labels = Labels::new(&tgts, NumberScheme::Mmd);
            Ok(composite_loss_graph(g, heads, &labels, weights)?[0])
        },
        GRAD_H,
        &coords,
    )
    .unwrap()
}

pub fn big_decimal(s: &str) -> BigRational {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    let digits = format!("{int}{frac}");
    let num = BigInt::from_str(&digits).expect("decimal digits");
    let den = BigInt::from(10).pow(frac.len() as u32);
    let r = BigRational::new(num, den);
    if neg {
        -r
    } else {
        r
    }
}

/// Parses `"c*v"`, `"- c*v"`, `"+ k"` style terms of one equation side into
/// `(coefficient, constant)`.
fn linear_side(side: &str, var: &str) -> (BigRational, BigRational) {
    let mut coef = BigRational::zero();
    let mut constant = BigRational::zero();
    let mut sign = BigRational::from_integer(1.into());
    for tok in side.split_whitespace() {
        match tok {
            "+" => sign = BigRational::from_integer(1.into()),
            "-" => sign = BigRational::from_integer((-1).into()),
            t => {
                if let Some(c) = t.strip_suffix(&format!("*{var}")) {
                    coef += &sign * big_decimal(c);
                } else {
                    constant += &sign * big_decimal(t);
                }
                sign = BigRational::from_integer(1.into());
            }
        }
    }
    (coef, constant)
}

/// Verifies one generated example with exact rational arithmetic.
pub fn verify_example(ex: &Example) -> std::result::Result<(), String> {
    let q = &ex.question;
    if let Some(rest) = q.strip_prefix("Calculate ").and_then(|r| r.strip_suffix('.')) {
        let parts: Vec<&str> = rest.split(' ').collect();
        let [a, op, b] = parts[..] else {
            return Err(format!("unparseable arithmetic {q:?}"));
        };
        let (a, b) = (big_decimal(a), big_decimal(b));
        let want = match op {
            "+" => a + b,
            "-" => a - b,
            "*" => a * b,
            "/" => {
                if b.is_zero() {
                    return Err(format!("division by zero in {q:?}"));
                }
                a / b
            }
            _ => return Err(format!("unknown operator in {q:?}")),
        };
        let got = big_decimal(&ex.answer);
        return if got == want {
            Ok(())
        } else {
            Err(format!("{q:?}: answer {} but exact value is {want}", ex.answer))
        };
    }
    if let Some(rest) = q.strip_prefix("Solve ").and_then(|r| r.strip_suffix('.')) {
        let (eq, var) = rest.rsplit_once(" for ").ok_or("missing variable")?;
        let (lhs, rhs) = eq.split_once(" = ").ok_or("missing =")?;
        let (a, c) = linear_side(lhs, var);
        let (b, d) = linear_side(rhs, var);
        let root = big_decimal(&ex.answer);
        return if &a * &root + c == &b * &root + d && a != b {
            Ok(())
        } else {
            Err(format!("{q:?}: {} is not the unique root", ex.answer))
        };
    }
    if let Some(rest) = q.strip_prefix("Does ").and_then(|r| r.strip_suffix('?')) {
        let (d, n) = rest.split_once(" divide ").ok_or("bad divisibility")?;
        let (d, n) = (big_decimal(d), big_decimal(n));
        let divides = (n / d).is_integer();
        let want = if divides { "True" } else { "False" };
        return if ex.answer == want {
            Ok(())
        } else {
            Err(format!("{q:?}: answer {} expected {want}", ex.answer))
        };
    }
    Err(format!("unknown question form {q:?}"))
}

/// Textbook two-pass metrics, independent of the library implementation.
pub struct NaiveMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub mre: Option<f64>,
    pub medre: Option<f64>,
    pub r2: Option<f64>,
}

pub fn naive_metrics(t: &[f64], p: &[f64]) -> NaiveMetrics {
    let n = t.len() as f64;
    let mut mae = 0.0;
    let mut mse = 0.0;
    for i in 0..t.len() {
        mae += (p[i] - t[i]).abs();
        mse += (p[i] - t[i]).powi(2);
    }
    mae /= n;
    mse /= n;
    let mut rel: Vec<f64> = Vec::new();
    for i in 0..t.len() {
        if t[i] != 0.0 {
            rel.push((p[i] - t[i]).abs() / t[i].abs());
        }
    }
    let (mre, medre) = if rel.is_empty() {
        (None, None)
    } else {
        let mre = rel.iter().sum::<f64>() / rel.len() as f64;
        rel.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = if rel.len() % 2 == 1 { rel.len() / 2 } else { rel.len() / 2 - 1 };
        (Some(mre), Some(rel[k]))
    };
    let mean = t.iter().sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in 0..t.len() {
        ss_res += (t[i] - p[i]).powi(2);
        ss_tot += (t[i] - mean).powi(2);
    }
    NaiveMetrics {
        mae,
        mse,
        rmse: mse.sqrt(),
        mre,
        medre,
        r2: if ss_tot > 0.0 { Some(1.0 - ss_res / ss_tot) } else { None },
    }
}

/// Relative closeness with an absolute floor for values near zero.
pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300) || a == b
}

/// Random truth/prediction vectors with magnitudes log-uniform in 1e-3..1e8.
pub fn random_vectors(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mag = |rng: &mut ChaCha8Rng| {
        let s = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        s * 10f64.powf(rng.gen_range(-3.0..8.0))
    };
    let t: Vec<f64> = (0..n).map(|_| mag(rng)).collect();
    let p: Vec<f64> = t.iter().map(|x| x * rng.gen_range(0.5..1.5) + mag(rng) * 0.01).collect();
    (t, p)
}

/// Composite loss recomputed from raw logits with plain loops.
pub fn loss_oracle(
    text: &[f64],
    route: &[f64],
    num: &[f64],
    vocab: usize,
    tgts: &[&MixedSequence],
    scheme: NumberScheme,
    w: LossWeights,
) -> (f64, f64, f64, f64) {
    let lse = |row: &[f64]| {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let (mut ts, mut tn, mut rs, mut rn, mut ns, mut nn) = (0.0, 0, 0.0, 0, 0.0, 0);
    let mut row = 0;
    for t in tgts {
        for i in 0..t.len() {
            let r = row + i;
            if i + 1 < t.len() {
                let is_num = t.modality()[i + 1] == mmd_core::textnum::Modality::Number;
                let trow = &text[r * vocab..(r + 1) * vocab];
                if !is_num || scheme == NumberScheme::XVal {
                    ts += lse(trow) - trow[t.token_ids()[i + 1]];
                    tn += 1;
                }
                if scheme.number_aware() && scheme != NumberScheme::XVal {
                    let rrow = &route[r * 2..r * 2 + 2];
                    rs += lse(rrow) - rrow[is_num as usize];
                    rn += 1;
                }
                if is_num && scheme.number_aware() {
                    ns += (num[r] - t.values()[i + 1]).powi(2);
                    nn += 1;
                }
            }
        }
        row += t.len();
    }
    let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let (text, route, num) = (avg(ts, tn), avg(rs, rn), avg(ns, nn));
    (text + w.route * route + w.num * num, text, route, num)
}

pub fn abs_rel(a: &BigRational) -> BigRational {
    a.abs()
}

/// Addition/subtraction examples with operands in `[lo, hi]`.
pub fn add_sub_spec(n: usize, seed: u64, lo: f64, hi: f64, max_decimals: u32) -> mmd_core::datagen::GenSpec {
    use mmd_core::datagen::{ArithOp, GenSpec};
    GenSpec {
        seed,
        n_examples: n,
        lo,
        hi,
        max_decimals,
        ops: vec![ArithOp::Add, ArithOp::Sub],
        ..GenSpec::default()
    }
}

pub fn encode_all(tok: &mmd_core::textnum::Tokenizer, examples: &[Example]) -> Vec<mmd_core::train::Pair> {
    examples.iter().map(|e| tok.encode_example(e).unwrap()).collect()
}

/// Worst relative `sinv(slog(x))` error over `n` samples whose magnitudes
/// are log-uniform in `[1e-12, 1e12]`, with random signs, plus exact zero.
pub fn slog_round_trip_worst(n: usize, seed: u64) -> f64 {
    use mmd_core::textnum::{sinv, slog};
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let x = if k == 0 {
            0.0
        } else {
            let sign = if r.gen_bool(0.5) { -1.0 } else { 1.0 };
            sign * 10f64.powf(r.gen_range(-12.0..=12.0))
        };
        let back = sinv(slog(x).unwrap()).unwrap();
        let err = if x == 0.0 { back.abs() } else { ((back - x) / x).abs() };
        worst = worst.max(err);
    }
    worst
}

/// Worst deviation from `‖e(a)−e(b)‖ = |a−b|·‖e_num‖` over `n` random value
/// pairs inside the clip range, using pre-positional xVal embeddings.
pub fn xval_linearity_worst(n: usize, seed: u64) -> f64 {
    use mmd_core::textnum::{NumberCodec, TokenizerOptions};
    let opts = TokenizerOptions::default();
    let NumberCodec::Scaled { clip, .. } = NumberCodec::for_scheme(NumberScheme::XVal, opts.xval_scale, opts.xval_clip)
    else {
        unreachable!()
    };
    let model = Model::new(micro_config(NumberScheme::XVal, 64, 12), seed).unwrap();
    let e_num = model.params().get("embed.tokens").unwrap().row(NUM).to_vec();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let embed = |v: f64| model.embed_content(&seq(&[(NUM, v)])).unwrap().into_data();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let a = r.gen_range(-clip..=clip);
        let b = r.gen_range(-clip..=clip);
        let diff: Vec<f64> = embed(a).iter().zip(embed(b)).map(|(x, y)| x - y).collect();
        let want = (a - b).abs() * norm(&e_num);
        worst = worst.max((norm(&diff) - want).abs() / want.max(f64::MIN_POSITIVE));
    }
    worst
}
