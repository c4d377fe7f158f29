//! Shared test harness: central finite differences against autodiff, and
//! naive-loop reference implementations of both routing algorithms.

#![allow(dead_code)]

use mspcaps::capsule::NORM_EPS;
use mspcaps::tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_H: f64 = 1e-5;

/// Max relative disagreement between autodiff and central finite differences
/// over every element of every input.
pub fn fd_max_rel_err(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let root = build(&mut g, &vars);
        g.value(root).data()[0]
    };

    // autodiff gradients
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &vars);
    assert_eq!(g.value(root).numel(), 1, "root must be scalar");
    g.backward(root).unwrap();
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            let ad = grads[i].data()[j];
            let denom = ad.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((ad - fd).abs() / denom);
        }
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [lo, hi].
pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Scalarizes an output tensor with fixed random weights so every element's
/// gradient path is exercised.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = g.shape(out).to_vec();
    let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod, None, false).unwrap()
}

// ── naive-loop oracles ───────────────────────────────────────────────────

fn squash_row(row: &mut [f64]) {
    let ss: f64 = row.iter().map(|v| v * v).sum();
    let factor = ss / (1.0 + ss) / ss.max(NORM_EPS).sqrt();
    for v in row.iter_mut() {
        *v *= factor;
    }
}

/// Direct transcription of cross-agreement routing for one batch item,
/// nested loops only.
///
/// * `u1`: (n1, d1) flattened fine capsules, `u2`: (n2, d2) coarse.
/// * `w1`: (J, n1, d1, E) or None when weights are shared.
/// * `w2`: (J, n2, d2, E).
/// * `fine_of[k*s + m]`: flat fine index of group (k, m).
/// * `softmax_over_outputs`: softmax over j (true) or over k (false).
#[allow(clippy::too_many_arguments)]
pub fn naive_car(
    u1: &[f64],
    n1: usize,
    d1: usize,
    u2: &[f64],
    n2: usize,
    d2: usize,
    w1: Option<&[f64]>,
    w2: &[f64],
    j_out: usize,
    e_out: usize,
    fine_of: &[usize],
    softmax_over_outputs: bool,
) -> Vec<f64> {
    let s = n1 / n2;
    // coarse votes: u_hat2[j][k][e]
    let mut u_hat2 = vec![0.0; j_out * n2 * e_out];
    for j in 0..j_out {
        for k in 0..n2 {
            for e in 0..e_out {
                let mut acc = 0.0;
                for d in 0..d2 {
                    acc += u2[k * d2 + d] * w2[((j * n2 + k) * d2 + d) * e_out + e];
                }
                u_hat2[(j * n2 + k) * e_out + e] = acc;
            }
        }
    }
    // fine votes grouped as u_hat1[j][k][m][e]
    let mut u_hat1 = vec![0.0; j_out * n2 * s * e_out];
    for j in 0..j_out {
        for k in 0..n2 {
            for m in 0..s {
                let i = fine_of[k * s + m];
                for e in 0..e_out {
                    let mut acc = 0.0;
                    match w1 {
                        // shared: W2[j,k] applied to the fine capsule of group (k, m)
                        None => {
                            for d in 0..d1 {
                                acc += u1[i * d1 + d] * w2[((j * n2 + k) * d2 + d) * e_out + e];
                            }
                        }
                        // unshared: W1[j,i] with the absolute fine index i
                        Some(w1) => {
                            for d in 0..d1 {
                                acc += u1[i * d1 + d] * w1[((j * n1 + i) * d1 + d) * e_out + e];
                            }
                        }
                    }
                    u_hat1[((j * n2 + k) * s + m) * e_out + e] = acc;
                }
            }
        }
    }
    // agreement: best scaled dot within each group
    let scale = 1.0 / (e_out as f64).sqrt();
    let mut agreement = vec![0.0; j_out * n2];
    for j in 0..j_out {
        for k in 0..n2 {
            let mut best = f64::NEG_INFINITY;
            for m in 0..s {
                let mut dot = 0.0;
                for e in 0..e_out {
                    dot += u_hat1[((j * n2 + k) * s + m) * e_out + e] * u_hat2[(j * n2 + k) * e_out + e];
                }
                let v = dot * scale;
                if v > best {
                    best = v;
                }
            }
            agreement[j * n2 + k] = best;
        }
    }
    // softmax into coupling coefficients
    let mut coupling = vec![0.0; j_out * n2];
    if softmax_over_outputs {
        for k in 0..n2 {
            let mx = (0..j_out).map(|j| agreement[j * n2 + k]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..j_out).map(|j| (agreement[j * n2 + k] - mx).exp()).sum();
            for j in 0..j_out {
                coupling[j * n2 + k] = (agreement[j * n2 + k] - mx).exp() / denom;
            }
        }
    } else {
        for j in 0..j_out {
            let row = &agreement[j * n2..(j + 1) * n2];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for k in 0..n2 {
                coupling[j * n2 + k] = (row[k] - mx).exp() / denom;
            }
        }
    }
    // weighted sum of coarse votes, then squash
    let mut out = vec![0.0; j_out * e_out];
    for j in 0..j_out {
        for e in 0..e_out {
            let mut acc = 0.0;
            for k in 0..n2 {
                acc += coupling[j * n2 + k] * u_hat2[(j * n2 + k) * e_out + e];
            }
            out[j * e_out + e] = acc;
        }
    }
    for j in 0..j_out {
        squash_row(&mut out[j * e_out..(j + 1) * e_out]);
    }
    out
}

/// Direct transcription of iterative routing-by-agreement for one batch item.
pub fn naive_dynamic_routing(
    u: &[f64],
    n_in: usize,
    d_in: usize,
    w: &[f64],
    j_out: usize,
    e_out: usize,
    iters: usize,
) -> Vec<f64> {
    // votes[j][i][e]
    let mut votes = vec![0.0; j_out * n_in * e_out];
    for j in 0..j_out {
        for i in 0..n_in {
            for e in 0..e_out {
                let mut acc = 0.0;
                for d in 0..d_in {
                    acc += u[i * d_in + d] * w[((j * n_in + i) * d_in + d) * e_out + e];
                }
                votes[(j * n_in + i) * e_out + e] = acc;
            }
        }
    }
    let mut logits = vec![0.0; j_out * n_in];
    let mut v = vec![0.0; j_out * e_out];
    for it in 0..iters {
        // softmax over outputs per input capsule
        let mut coupling = vec![0.0; j_out * n_in];
        for i in 0..n_in {
            let mx = (0..j_out).map(|j| logits[j * n_in + i]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..j_out).map(|j| (logits[j * n_in + i] - mx).exp()).sum();
            for j in 0..j_out {
                coupling[j * n_in + i] = (logits[j * n_in + i] - mx).exp() / denom;
            }
        }
        for j in 0..j_out {
            for e in 0..e_out {
                let mut acc = 0.0;
                for i in 0..n_in {
                    acc += coupling[j * n_in + i] * votes[(j * n_in + i) * e_out + e];
                }
                v[j * e_out + e] = acc;
            }
        }
        for j in 0..j_out {
            squash_row(&mut v[j * e_out..(j + 1) * e_out]);
        }
        if it + 1 < iters {
            for j in 0..j_out {
                for i in 0..n_in {
                    let mut dot = 0.0;
                    for e in 0..e_out {
                        dot += votes[(j * n_in + i) * e_out + e] * v[j * e_out + e];
                    }
                    logits[j * n_in + i] += dot;
                }
            }
        }
    }
    v
}
