//! Equivalence of the routing implementations against naive-loop references,
//! plus structural property tests.

mod common;

use common::{naive_car, naive_dynamic_routing, rand_tensor, rng};
use mspcaps::capsule::{group_map, CapsuleSet, CarBlock, CouplingAxis, DynRouting};
use mspcaps::nn::{Fwd, Mode, ParamStore};
use mspcaps::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Grid pairs whose fine/coarse extents divide, with n_in <= 8.
const GRID_CASES: [((usize, usize), (usize, usize)); 4] = [
    ((2, 2), (1, 1)),
    ((2, 4), (1, 2)),
    ((4, 2), (2, 1)),
    ((2, 3), (2, 3)),
];

fn car_instance(seed: u64, share: bool, axis: CouplingAxis) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let (fine_grid, coarse_grid) = GRID_CASES[(seed as usize) % GRID_CASES.len()];
    let n1 = fine_grid.0 * fine_grid.1;
    let n2 = coarse_grid.0 * coarse_grid.1;
    let d1 = 2 + (seed as usize % 4); // 2..=5
    let d2 = if share { d1 } else { 2 + ((seed as usize / 4) % 4) };
    let j = 2 + (seed as usize % 3); // 2..=4
    let e = 2 + ((seed as usize / 2) % 4); // 2..=5

    let mut store = ParamStore::<f64>::new();
    let mut init_rng = rng(seed ^ 0xabcd);
    let mut car = CarBlock::new(
        &mut store,
        &mut init_rng,
        "car",
        (n1, d1),
        (n2, d2),
        (j, e),
        share,
        0.0,
        None,
    )
    .unwrap();
    car.coupling_axis = axis;

    let u1 = rand_tensor(&[1, n1, d1], -1.5, 1.5, &mut r);
    let u2 = rand_tensor(&[1, n2, d2], -1.5, 1.5, &mut r);

    let mut graph = Graph::new();
    let mut fwd = Fwd::new(&mut graph, &mut store, Mode::Eval, None, false);
    let set1 = CapsuleSet {
        caps: fwd.graph.leaf(u1.clone(), false),
        n: n1,
        d: d1,
        grid: Some(fine_grid),
        scale_id: 0,
    };
    let set2 = CapsuleSet {
        caps: fwd.graph.leaf(u2.clone(), false),
        n: n2,
        d: d2,
        grid: Some(coarse_grid),
        scale_id: 1,
    };
    let out = car.forward(&mut fwd, &set1, &set2).unwrap();
    let got = graph.value(out.caps).data().to_vec();

    let gm = group_map(fine_grid, coarse_grid).unwrap();
    let w1 = car.w1.map(|id| store.get(id).data().to_vec());
    let w2 = store.get(car.w2).data().to_vec();
    let want = naive_car(
        u1.data(),
        n1,
        d1,
        u2.data(),
        n2,
        d2,
        w1.as_deref(),
        &w2,
        j,
        e,
        &gm.fine_of,
        axis == CouplingAxis::Outputs,
    );
    (got, want)
}

#[test]
fn car_matches_naive_loops_exactly_200_instances() {
    for seed in 0..200u64 {
        let share = seed % 2 == 0;
        let (got, want) = car_instance(seed, share, CouplingAxis::Outputs);
        assert_eq!(got, want, "instance {seed} (share={share}) diverged from the loop oracle");
    }
}

#[test]
fn car_alternative_softmax_axis_matches_oracle() {
    for seed in 0..20u64 {
        let (got, want) = car_instance(seed, seed % 2 == 0, CouplingAxis::Inputs);
        assert_eq!(got, want, "instance {seed} with input-axis softmax diverged");
    }
}

#[test]
fn dynamic_routing_matches_naive_loops_exactly_200_instances() {
    for seed in 0..200u64 {
        let mut r = rng(seed.wrapping_add(1000));
        let n_in = 2 + (seed as usize % 7); // 2..=8
        let d_in = 2 + (seed as usize % 4);
        let j = 2 + ((seed as usize / 3) % 3); // 2..=4
        let e = 2 + ((seed as usize / 5) % 4);
        let iters = 1 + (seed as usize % 3); // 1..=3

        let mut store = ParamStore::<f64>::new();
        let mut init_rng = rng(seed ^ 0x5555);
        let dr = DynRouting::new(&mut store, &mut init_rng, "dr", n_in, d_in, j, e, iters).unwrap();
        let u = rand_tensor(&[1, n_in, d_in], -1.5, 1.5, &mut r);

        let mut graph = Graph::new();
        let mut fwd = Fwd::new(&mut graph, &mut store, Mode::Eval, None, false);
        let set = CapsuleSet {
            caps: fwd.graph.leaf(u.clone(), false),
            n: n_in,
            d: d_in,
            grid: None,
            scale_id: 0,
        };
        let out = dr.forward(&mut fwd, &set).unwrap();
        let got = graph.value(out.caps).data().to_vec();

        let w = store.get(dr.w).data().to_vec();
        let want = naive_dynamic_routing(u.data(), n_in, d_in, &w, j, e, iters);
        assert_eq!(got, want, "instance {seed} diverged from the loop oracle");
    }
}

#[test]
fn dr_coupling_sums_to_one_per_input_every_iteration() {
    // replicate the oracle's logit trajectory and check the softmax rows
    let mut r = rng(77);
    let (n_in, d_in, j, e) = (6, 3, 3, 4);
    let u = rand_tensor(&[n_in, d_in], -1.0, 1.0, &mut r);
    let w = rand_tensor(&[j, n_in, d_in, e], -1.0, 1.0, &mut r);
    let mut votes = vec![0.0; j * n_in * e];
    for jj in 0..j {
        for i in 0..n_in {
            for ee in 0..e {
                let mut acc = 0.0;
                for d in 0..d_in {
                    acc += u.data()[i * d_in + d] * w.data()[((jj * n_in + i) * d_in + d) * e + ee];
                }
                votes[(jj * n_in + i) * e + ee] = acc;
            }
        }
    }
    let mut logits = vec![0.0; j * n_in];
    for _iter in 0..3 {
        let mut per_input_sum = vec![0.0; n_in];
        let mut coupling = vec![0.0; j * n_in];
        for i in 0..n_in {
            let mx = (0..j).map(|jj| logits[jj * n_in + i]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..j).map(|jj| (logits[jj * n_in + i] - mx).exp()).sum();
            for jj in 0..j {
                coupling[jj * n_in + i] = (logits[jj * n_in + i] - mx).exp() / denom;
                per_input_sum[i] += coupling[jj * n_in + i];
            }
        }
        for (i, &s) in per_input_sum.iter().enumerate() {
            assert!((s - 1.0).abs() < 1e-12, "input {i} coupling sum {s}");
        }
        // advance the logits with the agreement update
        let mut v = vec![0.0; j * e];
        for jj in 0..j {
            for ee in 0..e {
                let mut acc = 0.0;
                for i in 0..n_in {
                    acc += coupling[jj * n_in + i] * votes[(jj * n_in + i) * e + ee];
                }
                v[jj * e + ee] = acc;
            }
        }
        for jj in 0..j {
            let row = &mut v[jj * e..(jj + 1) * e];
            let ss: f64 = row.iter().map(|x| x * x).sum();
            let f = ss / (1.0 + ss) / ss.max(1e-30).sqrt();
            for x in row.iter_mut() {
                *x *= f;
            }
        }
        for jj in 0..j {
            for i in 0..n_in {
                let mut dot = 0.0;
                for ee in 0..e {
                    dot += votes[(jj * n_in + i) * e + ee] * v[jj * e + ee];
                }
                logits[jj * n_in + i] += dot;
            }
        }
    }
}

#[test]
fn car_all_equal_votes_give_uniform_coupling() {
    // identical fine rows and coarse votes identical across j: the coupling
    // softmax sees a constant agreement column, so C = 1/n_out everywhere,
    // and the output equals squash(mean-like vote sum) with weight 1.
    let (n1, n2, d, j, e) = (4usize, 2usize, 3usize, 3usize, 3usize);
    let mut store = ParamStore::<f64>::new();
    let mut init_rng = rng(4242);
    let car = CarBlock::new(&mut store, &mut init_rng, "car", (n1, d), (n2, d), (j, e), true, 0.0, None).unwrap();
    // make W2 identical across (j, k): votes become identical everywhere
    {
        let w2 = store.get_mut(car.w2);
        let shape = w2.shape().to_vec(); // (j, n2, d, e)
        let base: Vec<f64> = (0..d * e).map(|i| (i as f64 * 0.37).sin()).collect();
        let data = w2.data_mut();
        for jj in 0..shape[0] {
            for k in 0..shape[1] {
                for x in 0..d * e {
                    data[(jj * shape[1] + k) * d * e + x] = base[x];
                }
            }
        }
    }
    let u_row: Vec<f64> = vec![0.3, -0.2, 0.5];
    let u1 = Tensor::new(vec![1, n1, d], u_row.iter().cloned().cycle().take(n1 * d).collect()).unwrap();
    let u2 = Tensor::new(vec![1, n2, d], u_row.iter().cloned().cycle().take(n2 * d).collect()).unwrap();

    let mut graph = Graph::new();
    let mut fwd = Fwd::new(&mut graph, &mut store, Mode::Eval, None, false);
    let set1 = CapsuleSet {
        caps: fwd.graph.leaf(u1, false),
        n: n1,
        d,
        grid: Some((2, 2)),
        scale_id: 0,
    };
    let set2 = CapsuleSet {
        caps: fwd.graph.leaf(u2, false),
        n: n2,
        d,
        grid: Some((1, 2)),
        scale_id: 1,
    };
    let out = car.forward(&mut fwd, &set1, &set2).unwrap();
    // all outputs identical across j (uniform coupling of identical votes)
    let v = graph.value(out.caps).data();
    for jj in 1..j {
        for ee in 0..e {
            assert!(
                (v[jj * e + ee] - v[ee]).abs() < 1e-12,
                "output capsule {jj} differs under all-equal votes"
            );
        }
    }
}

#[test]
fn car_permutation_equivariance_over_outputs() {
    // permuting the output index j of both W1 and W2 permutes outputs identically
    let (n1, n2, d1, d2, j, e) = (4usize, 2usize, 3usize, 4usize, 3usize, 3usize);
    let mut store = ParamStore::<f64>::new();
    let mut init_rng = rng(99);
    let car = CarBlock::new(&mut store, &mut init_rng, "car", (n1, d1), (n2, d2), (j, e), false, 0.0, None).unwrap();
    let mut r = rng(100);
    let u1 = rand_tensor(&[1, n1, d1], -1.0, 1.0, &mut r);
    let u2 = rand_tensor(&[1, n2, d2], -1.0, 1.0, &mut r);

    let run = |store: &mut ParamStore<f64>, car: &CarBlock| -> Vec<f64> {
        let mut graph = Graph::new();
        let mut fwd = Fwd::new(&mut graph, store, Mode::Eval, None, false);
        let set1 = CapsuleSet {
            caps: fwd.graph.leaf(u1.clone(), false),
            n: n1,
            d: d1,
            grid: Some((2, 2)),
            scale_id: 0,
        };
        let set2 = CapsuleSet {
            caps: fwd.graph.leaf(u2.clone(), false),
            n: n2,
            d: d2,
            grid: Some((1, 2)),
            scale_id: 1,
        };
        let out = car.forward(&mut fwd, &set1, &set2).unwrap();
        graph.value(out.caps).data().to_vec()
    };

    let base = run(&mut store, &car);
    // rotate output index j -> (j+1) mod J in both weight tensors
    let perm: Vec<usize> = (0..j).map(|x| (x + 1) % j).collect();
    for id in [car.w1.unwrap(), car.w2] {
        let t = store.get(id).clone();
        let shape = t.shape().to_vec();
        let stride: usize = shape[1..].iter().product();
        let mut permuted = t.data().to_vec();
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * stride..(dst + 1) * stride]
                .copy_from_slice(&t.data()[src * stride..(src + 1) * stride]);
        }
        *store.get_mut(id) = Tensor::new(shape, permuted).unwrap();
    }
    let permuted_out = run(&mut store, &car);
    for (dst, &src) in perm.iter().enumerate() {
        for ee in 0..e {
            assert!(
                (permuted_out[dst * e + ee] - base[src * e + ee]).abs() < 1e-12,
                "output {dst} is not the permuted output {src}"
            );
        }
    }
}

#[test]
fn agreement_invariant_under_vote_rotation() {
    // rotating d_out rotates both vote sets; dot products, and therefore the
    // agreement matrix and coupling, stay fixed within 1e-6
    let (n1, n2, j, e) = (4usize, 2usize, 2usize, 3usize);
    let mut r = rng(55);
    // votes constructed directly: u_hat1 (j, n2, s, e), u_hat2 (j, n2, e)
    let s = n1 / n2;
    let u_hat1 = rand_tensor(&[j, n2, s, e], -1.0, 1.0, &mut r);
    let u_hat2 = rand_tensor(&[j, n2, e], -1.0, 1.0, &mut r);
    // rotation in the e=3 plane around axis z by 0.7 rad
    let (c, sn) = (0.7f64.cos(), 0.7f64.sin());
    let rot = move |v: &[f64]| -> Vec<f64> { vec![c * v[0] - sn * v[1], sn * v[0] + c * v[1], v[2]] };

    let agreement = |u1: &Tensor<f64>, u2: &Tensor<f64>| -> Vec<f64> {
        let mut out = vec![0.0; j * n2];
        for jj in 0..j {
            for k in 0..n2 {
                let mut best = f64::NEG_INFINITY;
                for m in 0..s {
                    let mut dot = 0.0;
                    for ee in 0..e {
                        dot += u1.data()[((jj * n2 + k) * s + m) * e + ee] * u2.data()[(jj * n2 + k) * e + ee];
                    }
                    best = best.max(dot / (e as f64).sqrt());
                }
                out[jj * n2 + k] = best;
            }
        }
        out
    };

    let base = agreement(&u_hat1, &u_hat2);
    let rot1 = Tensor::new(
        vec![j, n2, s, e],
        u_hat1.data().chunks(e).flat_map(|v| rot(v)).collect(),
    )
    .unwrap();
    let rot2 = Tensor::new(
        vec![j, n2, e],
        u_hat2.data().chunks(e).flat_map(|v| rot(v)).collect(),
    )
    .unwrap();
    let rotated = agreement(&rot1, &rot2);
    for (a, b) in base.iter().zip(&rotated) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn group_map_is_bijective_for_all_dividing_grids() {
    for h1 in 1..=8usize {
        for w1 in 1..=8usize {
            for h2 in 1..=h1 {
                for w2 in 1..=w1 {
                    if h1 % h2 != 0 || w1 % w2 != 0 {
                        continue;
                    }
                    let gm = group_map((h1, w1), (h2, w2)).unwrap();
                    let mut seen = vec![false; h1 * w1];
                    for &f in &gm.fine_of {
                        assert!(!seen[f]);
                        seen[f] = true;
                    }
                    assert!(seen.iter().all(|&b| b), "not onto for {h1}x{w1} -> {h2}x{w2}");
                    // spatial consistency: fine (r, c) lands in the block row/col
                    for k in 0..gm.groups {
                        for m in 0..gm.s {
                            let f = gm.fine_of[k * gm.s + m];
                            let (r, c) = (f / w1, f % w1);
                            let expect_k = (r / (h1 / h2)) * w2 + c / (w1 / w2);
                            assert_eq!(k, expect_k);
                        }
                    }
                }
            }
        }
    }
}

// broadcasting against an explicit-tiling oracle on small shapes
proptest! {
    #[test]
    fn broadcast_equals_explicit_tiling(
        lead in proptest::collection::vec(1usize..=4, 0..=2),
        core in proptest::collection::vec(1usize..=4, 1..=2),
        drop_lead in proptest::bool::ANY,
        seed in 0u64..1000,
    ) {
        // a has shape lead ++ core; b has shape core (with some dims set to 1)
        let mut r = rng(seed);
        let a_shape: Vec<usize> = lead.iter().chain(core.iter()).cloned().collect();
        let mut b_shape: Vec<usize> = core.clone();
        for d in b_shape.iter_mut() {
            if r.random::<bool>() {
                *d = 1;
            }
        }
        if drop_lead && b_shape.len() > 1 {
            b_shape.remove(0);
        }
        let a = rand_tensor(&a_shape, -2.0, 2.0, &mut r);
        let b = rand_tensor(&b_shape, -2.0, 2.0, &mut r);

        let mut g = Graph::new();
        let va = g.leaf(a.clone(), false);
        let vb = g.leaf(b.clone(), false);
        let out = g.add(va, vb).unwrap();

        // explicit tiling: materialize b at the broadcast shape by index mapping
        let out_shape = g.shape(out).to_vec();
        let numel: usize = out_shape.iter().product();
        let mut want = Vec::with_capacity(numel);
        for flat in 0..numel {
            let mut idx = vec![0usize; out_shape.len()];
            let mut rem = flat;
            for d in (0..out_shape.len()).rev() {
                idx[d] = rem % out_shape[d];
                rem /= out_shape[d];
            }
            let pick = |t: &Tensor<f64>| {
                let shape = t.shape();
                let off = out_shape.len() - shape.len();
                let mut o = 0;
                for (d, &e) in shape.iter().enumerate() {
                    let i = if e == 1 { 0 } else { idx[off + d] };
                    o = o * e + i;
                }
                t.data()[o]
            };
            want.push(pick(&a) + pick(&b));
        }
        prop_assert_eq!(g.value(out).data(), &want[..]);
    }
}

#[test]
fn avgpool_then_nearest_upsample_preserves_patch_means() {
    let mut r = rng(321);
    let x = rand_tensor(&[2, 3, 8, 8], -2.0, 2.0, &mut r);
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), false);
    let pooled = g.avg_pool2d(v, 4, 4).unwrap();
    let p = g.value(pooled).clone();
    // nearest upsample by 4, then re-pool: per-patch means must survive exactly
    let up = {
        let (b, c, oh, ow) = (2, 3, 2, 2);
        let mut data = vec![0.0f64; b * c * 64];
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..8 {
                    for xx in 0..8 {
                        data[((bi * c + ci) * 8 + y) * 8 + xx] = p.at(&[bi, ci, y / 4, xx / 4]);
                    }
                }
            }
        }
        let _ = (oh, ow);
        Tensor::new(vec![b, c, 8, 8], data).unwrap()
    };
    let vu = g.leaf(up, false);
    let repooled = g.avg_pool2d(vu, 4, 4).unwrap();
    assert_eq!(g.value(repooled).data(), p.data());
}

#[test]
fn car_coupling_columns_sum_to_one() {
    // replicate the oracle's coupling stage on a random agreement matrix and
    // confirm the decided normalization: for every coarse capsule k the
    // coefficients across outputs sum to 1
    let mut r = rng(808);
    let (j, k) = (5usize, 7usize);
    let a = rand_tensor(&[j, k], -3.0, 3.0, &mut r);
    let mut g = Graph::new();
    let v = g.leaf(a, false);
    let c = g.softmax(v, 0).unwrap(); // axis 0 of (j, k) = over outputs
    let cv = g.value(c);
    for kk in 0..k {
        let total: f64 = (0..j).map(|jj| cv.at(&[jj, kk])).sum();
        assert!((total - 1.0).abs() < 1e-6, "column {kk} sums to {total}");
    }
}

#[test]
fn dr_model_composition_matches_oracle_chain() {
    // three capsule sets -> per-set dynamic routing -> concat -> head,
    // library blocks against the same chain built from the loop oracle
    let mut r = rng(606);
    let sets = [(6usize, 3usize), (4, 3), (2, 4)];
    let (n_mid, d_mid, k_out, e_out, iters) = (3usize, 4usize, 2usize, 5usize, 3usize);

    let mut store = ParamStore::<f64>::new();
    let mut init_rng = rng(607);
    let branches: Vec<DynRouting> = sets
        .iter()
        .enumerate()
        .map(|(i, &(n, d))| {
            DynRouting::new(&mut store, &mut init_rng, &format!("b{i}"), n, d, n_mid, d_mid, iters).unwrap()
        })
        .collect();
    let head = DynRouting::new(
        &mut store,
        &mut init_rng,
        "head",
        n_mid * sets.len(),
        d_mid,
        k_out,
        e_out,
        iters,
    )
    .unwrap();

    let inputs: Vec<Tensor<f64>> = sets
        .iter()
        .map(|&(n, d)| rand_tensor(&[1, n, d], -1.0, 1.0, &mut r))
        .collect();

    // library path
    let mut graph = Graph::new();
    let mut fwd = Fwd::new(&mut graph, &mut store, Mode::Eval, None, false);
    let mut routed = Vec::new();
    for (branch, (input, &(n, d))) in branches.iter().zip(inputs.iter().zip(&sets)) {
        let set = CapsuleSet {
            caps: fwd.graph.leaf(input.clone(), false),
            n,
            d,
            grid: None,
            scale_id: 0,
        };
        routed.push(branch.forward(&mut fwd, &set).unwrap().caps);
    }
    let fused = fwd.graph.concat(&routed, 1).unwrap();
    let fused_set = CapsuleSet {
        caps: fused,
        n: n_mid * sets.len(),
        d: d_mid,
        grid: None,
        scale_id: 0,
    };
    let out = head.forward(&mut fwd, &fused_set).unwrap();
    let got = graph.value(out.caps).data().to_vec();

    // oracle path
    let mut fused_vals = Vec::new();
    for (branch, (input, &(n, d))) in branches.iter().zip(inputs.iter().zip(&sets)) {
        let w = store.get(branch.w).data().to_vec();
        fused_vals.extend(naive_dynamic_routing(input.data(), n, d, &w, n_mid, d_mid, iters));
    }
    let w_head = store.get(head.w).data().to_vec();
    let want = naive_dynamic_routing(&fused_vals, n_mid * sets.len(), d_mid, &w_head, k_out, e_out, iters);
    assert_eq!(got, want, "composed DR model diverged from the oracle chain");
}
