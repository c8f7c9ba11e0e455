//! Central finite-difference gradient checking in 64-bit precision.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::{self, Rng};

/// Differences below this are treated as agreement.
pub const ABS_FLOOR: f64 = 1e-8;
/// Relative tolerance for the op suite.
pub const REL_TOL: f64 = 1e-5;
const STEP: f64 = 1e-6;

/// Builds a scalar loss from input vars.
pub type LossFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Outcome of checking one op.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: String,
    pub points: usize,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

/// Elementwise error between analytic and numeric derivatives.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

fn eval(inputs: &[Tensor<f64>], loss: &LossFn) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let l = loss(&mut g, &vars)?;
    Ok(g.value(l).data()[0])
}

/// Max relative error of analytic vs central-difference gradients over all
/// elements of `differentiable` inputs.
pub fn check(inputs: &[Tensor<f64>], differentiable: &[bool], loss: &LossFn) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| g.leaf(t.clone(), d))
        .collect();
    let l = loss(&mut g, &vars)?;
    let grads = g.backward(l)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, &d) in differentiable.iter().enumerate() {
        if !d {
            continue;
        }
        let analytic = grads
            .get(vars[i])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let up = eval(&probe, loss)?;
            probe[i].data_mut()[j] = orig - STEP;
            let down = eval(&probe, loss)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    Ok(worst)
}

/// Reduces any output to a scalar with fixed random weights, so every output
/// element contributes a distinct sensitivity.
pub fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone().reshaped(g.shape(out))?);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng::normal(rng, shape, 1.0)
}

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    out_len: usize,
    build: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    out_len: usize,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        out_len,
        build: Box::new(build),
    }
}

fn cases() -> Vec<Case> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], 6, |g, v| g.matmul(v[0], v[1])),
        case("matmul_nt", &[&[3, 4], &[2, 4]], 6, |g, v| g.matmul_nt(v[0], v[1])),
        case("bmm", &[&[2, 3, 4], &[2, 4, 2]], 12, |g, v| g.matmul(v[0], v[1])),
        case("bmm_nt", &[&[2, 3, 4], &[2, 3, 4]], 18, |g, v| g.matmul_nt(v[0], v[1])),
        case("add", &[&[3, 4], &[3, 4]], 12, |g, v| g.add(v[0], v[1])),
        case("sub", &[&[3, 4], &[3, 4]], 12, |g, v| g.sub(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], 12, |g, v| g.mul(v[0], v[1])),
        case("add_row", &[&[3, 4], &[4]], 12, |g, v| g.add_row(v[0], v[1])),
        case("scale", &[&[3, 4]], 12, |g, v| Ok(g.scale(v[0], -1.7))),
        case("gelu", &[&[3, 4]], 12, |g, v| Ok(g.gelu(v[0]))),
        case("softmax", &[&[3, 5]], 15, |g, v| g.softmax(v[0])),
        case("layer_norm", &[&[3, 5], &[5], &[5]], 15, |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-6)
        }),
        case("sum", &[&[3, 4]], 1, |g, v| Ok(g.sum(v[0]))),
        case("mean", &[&[3, 4]], 1, |g, v| Ok(g.mean(v[0]))),
        case("mean_last", &[&[3, 4]], 3, |g, v| g.mean_last(v[0])),
        case("mean_tokens", &[&[2, 3, 4]], 8, |g, v| g.mean_tokens(v[0])),
        case("mse", &[&[3, 4], &[3, 4]], 1, |g, v| g.mse(v[0], v[1])),
        case("cosine_scores", &[&[2, 3, 4]], 18, |g, v| g.cosine_scores(v[0], 1e-8)),
        case("euclidean_scores", &[&[2, 3, 4]], 18, |g, v| g.euclidean_scores(v[0])),
        case("gather_rows", &[&[4, 3]], 15, |g, v| g.gather_rows(v[0], &[2, 0, 2, 3, 1])),
        case("concat_rows", &[&[2, 3], &[3, 3]], 15, |g, v| g.concat_rows(v[0], v[1])),
        case("reshape", &[&[2, 6]], 12, |g, v| g.reshape(v[0], &[3, 4])),
        case("transpose", &[&[2, 5]], 10, |g, v| g.transpose(v[0])),
        case("split_heads", &[&[6, 4]], 24, |g, v| g.split_heads(v[0], 3, 2)),
        case("merge_heads", &[&[4, 3, 2]], 24, |g, v| g.merge_heads(v[0], 2)),
        case("weighted_sum", &[&[3, 4], &[3, 4], &[3, 4], &[3]], 12, |g, v| {
            g.weighted_sum(&v[..3], v[3])
        }),
        case("cross_entropy", &[&[4, 3]], 1, |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2])),
        case(
            "composite",
            &[&[3, 4], &[4, 5], &[5], &[5], &[3, 5]],
            1,
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.gelu(h);
                let h = g.layer_norm(h, v[2], v[3], 1e-6)?;
                g.mse(h, v[4])
            },
        ),
    ]
}

/// Checks every differentiable op at `points` random inputs.
pub fn op_suite(seed: u64, points: usize) -> Result<Vec<OpCheck>> {
    let mut rng = rng::seeded(seed, rng::stream::GRADCHECK);
    let mut out = Vec::new();
    for c in cases() {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let inputs: Vec<Tensor<f64>> = c.shapes.iter().map(|s| randn(&mut rng, s)).collect();
            let weights = randn(&mut rng, &[c.out_len]);
            let flags = vec![true; inputs.len()];
            let build = &c.build;
            let loss = move |g: &mut Graph<f64>, v: &[Var]| {
                let y = build(g, v)?;
                project(g, y, &weights)
            };
            worst = worst.max(check(&inputs, &flags, &loss)?);
        }
        out.push(OpCheck {
            op: c.name.to_string(),
            points,
            max_rel_err: worst,
        });
    }
    Ok(out)
}
