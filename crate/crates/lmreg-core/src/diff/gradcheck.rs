//! Central finite-difference verification of every graph primitive.
//!
//! Checks run in 64-bit so truncation error is separated from the 32-bit
//! runtime roundoff. Each case builds a scalar loss `sum(output * probe)`
//! with a fixed random probe, compares the analytic input gradients against
//! `(f(x + eps) - f(x - eps)) / 2 eps`, and reports the worst
//! scale-relative error `|a - n| / max(1, |a|, |n|)` per op.
//!
//! Kinked points are excluded by construction: leaky-relu inputs keep away
//! from zero and warp fields keep sample points off the integer lattice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DiffValue, Graph};
use crate::objective;

pub struct GradReport {
    pub op: String,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[DiffValue]) -> DiffValue>;

struct Case {
    name: &'static str,
    inputs: Vec<(Vec<usize>, Vec<f64>)>,
    build: Builder,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero (for kinked activations).
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Displacements keeping warp sample points off the lattice and clear of the
/// clamped boundary transitions.
fn off_lattice(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.15..0.35);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Case> = Vec::new();

    fn rv(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
        let n = shape.iter().product();
        (shape.to_vec(), uniform(rng, n, -1.0, 1.0))
    }

    let mut push = |name: &'static str, inputs: Vec<(Vec<usize>, Vec<f64>)>, build: Builder| {
        out.push(Case {
            name,
            inputs,
            build,
        });
    };

    push(
        "add",
        vec![rv(&mut rng, &[2, 3, 2]), rv(&mut rng, &[2, 3, 2])],
        Box::new(|g, x| g.add(x[0], x[1]).unwrap()),
    );
    push(
        "sub",
        vec![rv(&mut rng, &[2, 3, 2]), rv(&mut rng, &[2, 3, 2])],
        Box::new(|g, x| g.sub(x[0], x[1]).unwrap()),
    );
    push(
        "mul",
        vec![rv(&mut rng, &[2, 3, 2]), rv(&mut rng, &[2, 3, 2])],
        Box::new(|g, x| g.mul(x[0], x[1]).unwrap()),
    );
    push(
        "scale",
        vec![rv(&mut rng, &[3, 4])],
        Box::new(|g, x| g.scale(x[0], -1.7).unwrap()),
    );
    push(
        "square",
        vec![rv(&mut rng, &[3, 4])],
        Box::new(|g, x| g.square(x[0]).unwrap()),
    );
    push(
        "sum",
        vec![rv(&mut rng, &[7])],
        Box::new(|g, x| g.sum(x[0]).unwrap()),
    );
    push(
        "mean",
        vec![rv(&mut rng, &[7])],
        Box::new(|g, x| g.mean(x[0]).unwrap()),
    );
    push(
        "concat_channels",
        vec![rv(&mut rng, &[2, 2, 2, 2]), rv(&mut rng, &[3, 2, 2, 2])],
        Box::new(|g, x| g.concat(&[x[0], x[1]], 0).unwrap()),
    );
    push(
        "concat_cols",
        vec![rv(&mut rng, &[3, 2]), rv(&mut rng, &[3, 4])],
        Box::new(|g, x| g.concat(&[x[0], x[1]], 1).unwrap()),
    );
    push(
        "reshape",
        vec![rv(&mut rng, &[2, 6])],
        Box::new(|g, x| g.reshape(x[0], &[3, 4]).unwrap()),
    );
    push(
        "slice_cols",
        vec![rv(&mut rng, &[3, 5])],
        Box::new(|g, x| g.slice_cols(x[0], 1, 3).unwrap()),
    );
    push(
        "matmul",
        vec![rv(&mut rng, &[3, 4]), rv(&mut rng, &[4, 2])],
        Box::new(|g, x| g.matmul(x[0], x[1]).unwrap()),
    );
    push(
        "linear",
        vec![
            rv(&mut rng, &[3, 4]),
            rv(&mut rng, &[2, 4]),
            rv(&mut rng, &[2]),
        ],
        Box::new(|g, x| g.linear(x[0], x[1], Some(x[2])).unwrap()),
    );
    push(
        "leaky_relu",
        vec![(vec![3, 4], off_zero(&mut rng, 12))],
        Box::new(|g, x| g.leaky_relu(x[0], 0.2).unwrap()),
    );
    push(
        "silu",
        vec![rv(&mut rng, &[3, 4])],
        Box::new(|g, x| g.silu(x[0]).unwrap()),
    );
    push(
        "softmax",
        vec![rv(&mut rng, &[3, 4])],
        Box::new(|g, x| g.softmax(x[0], 1).unwrap()),
    );
    push(
        "rms_norm",
        vec![rv(&mut rng, &[3, 6])],
        Box::new(|g, x| g.rms_norm(x[0], 1e-5).unwrap()),
    );
    push(
        "scale_cols",
        vec![rv(&mut rng, &[3, 4]), rv(&mut rng, &[4])],
        Box::new(|g, x| g.scale_cols(x[0], x[1]).unwrap()),
    );
    push(
        "rotary_embed",
        vec![rv(&mut rng, &[4, 6])],
        Box::new(|g, x| g.rotary_embed(x[0]).unwrap()),
    );
    push(
        "conv3d_stride1",
        vec![
            rv(&mut rng, &[2, 4, 4, 4]),
            rv(&mut rng, &[2, 2, 3, 3, 3]),
            rv(&mut rng, &[2]),
        ],
        Box::new(|g, x| g.conv3d(x[0], x[1], x[2], 1).unwrap()),
    );
    push(
        "conv3d_stride2",
        vec![
            rv(&mut rng, &[2, 4, 4, 4]),
            rv(&mut rng, &[2, 2, 3, 3, 3]),
            rv(&mut rng, &[2]),
        ],
        Box::new(|g, x| g.conv3d(x[0], x[1], x[2], 2).unwrap()),
    );
    push(
        "transposed_conv3d",
        vec![
            rv(&mut rng, &[2, 3, 3, 3]),
            rv(&mut rng, &[2, 2, 2, 2, 2]),
            rv(&mut rng, &[2]),
        ],
        Box::new(|g, x| g.conv_transposed3d(x[0], x[1], x[2]).unwrap()),
    );
    push(
        "upsample2x",
        vec![rv(&mut rng, &[2, 3, 3, 3])],
        Box::new(|g, x| g.upsample2x(x[0]).unwrap()),
    );
    push(
        "downsample2x",
        vec![rv(&mut rng, &[2, 4, 4, 4])],
        Box::new(|g, x| g.downsample2x(x[0]).unwrap()),
    );
    push(
        "transpose2d",
        vec![rv(&mut rng, &[3, 5])],
        Box::new(|g, x| g.transpose2d(x[0]).unwrap()),
    );
    push(
        "voxel_shuffle",
        vec![rv(&mut rng, &[8, 2, 2, 2])],
        Box::new(|g, x| g.voxel_shuffle(x[0], 2).unwrap()),
    );
    push(
        "vol_to_tokens",
        vec![rv(&mut rng, &[3, 2, 2, 2])],
        Box::new(|g, x| g.vol_to_tokens(x[0]).unwrap()),
    );
    push(
        "tokens_to_vol",
        vec![rv(&mut rng, &[8, 3])],
        Box::new(|g, x| g.tokens_to_vol(x[0], [2, 2, 2]).unwrap()),
    );
    push(
        "gather_trilinear",
        vec![
            rv(&mut rng, &[2, 4, 4, 4]),
            (vec![3, 4, 4, 4], off_lattice(&mut rng, 3 * 64)),
        ],
        Box::new(|g, x| g.gather_trilinear(x[0], x[1]).unwrap()),
    );
    push(
        "forward_diff_z",
        vec![rv(&mut rng, &[2, 4, 3, 3])],
        Box::new(|g, x| g.forward_diff(x[0], 1).unwrap()),
    );
    push(
        "forward_diff_y",
        vec![rv(&mut rng, &[2, 3, 4, 3])],
        Box::new(|g, x| g.forward_diff(x[0], 2).unwrap()),
    );
    push(
        "forward_diff_x",
        vec![rv(&mut rng, &[2, 3, 3, 4])],
        Box::new(|g, x| g.forward_diff(x[0], 3).unwrap()),
    );

    // composed registration loss, checked w.r.t. the field
    let d = 4;
    let moving = uniform(&mut rng, d * d * d, 0.0, 1.0);
    let fixed = uniform(&mut rng, d * d * d, 0.0, 1.0);
    push(
        "total_loss",
        vec![(vec![3, d, d, d], off_lattice(&mut rng, 3 * d * d * d))],
        Box::new(move |g, x| {
            let m = g.constant(&[1, d, d, d], moving.clone()).unwrap();
            let f = g.constant(&[1, d, d, d], fixed.clone()).unwrap();
            objective::total_loss(g, m, f, x[0], 0.04).unwrap()
        }),
    );

    out
}

/// Max scale-relative error between analytic and central-difference
/// gradients for one case.
fn check_case(case: &Case, eps: f64, probe_seed: u64) -> f64 {
    // analytic pass
    let mut g: Graph<f64> = Graph::new();
    let leaves: Vec<DiffValue> = case
        .inputs
        .iter()
        .map(|(s, d)| g.leaf(s, d.clone(), true).unwrap())
        .collect();
    let y = (case.build)(&mut g, &leaves);
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = uniform(&mut rng, g.data(y).len(), -1.0, 1.0);
    let shape = g.shape(y).to_vec();
    let pv = g.constant(&shape, probe.clone()).unwrap();
    let prod = g.mul(y, pv).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| g.grad(*l).map(|v| v.to_vec()).unwrap_or_default())
        .collect();

    let eval = |inputs: &[(Vec<usize>, Vec<f64>)]| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let leaves: Vec<DiffValue> = inputs
            .iter()
            .map(|(s, d)| g.leaf(s, d.clone(), false).unwrap())
            .collect();
        let y = (case.build)(&mut g, &leaves);
        g.data(y).iter().zip(&probe).map(|(a, b)| a * b).sum()
    };

    let mut max_rel = 0.0f64;
    for (i, (_, data)) in case.inputs.iter().enumerate() {
        for j in 0..data.len() {
            let mut plus = case.inputs.iter().map(|(s, d)| (s.clone(), d.clone())).collect::<Vec<_>>();
            plus[i].1[j] += eps;
            let mut minus = plus.clone();
            minus[i].1[j] -= 2.0 * eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

/// Run the full per-primitive suite (plus the composed registration loss)
/// for one seed.
pub fn run_suite(seed: u64, eps: f64) -> Vec<GradReport> {
    cases(seed)
        .iter()
        .map(|c| GradReport {
            op: c.name.to_string(),
            max_rel_err: check_case(c, eps, seed ^ 0x9e37_79b9),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_tolerance() {
        for report in run_suite(1, 1e-5) {
            assert!(
                report.passed(1e-4),
                "{} failed: {:.3e}",
                report.op,
                report.max_rel_err
            );
        }
    }

    #[test]
    fn impossible_tolerance_fails() {
        let reports = run_suite(2, 1e-5);
        assert!(reports.iter().any(|r| !r.passed(1e-15)));
    }
}
