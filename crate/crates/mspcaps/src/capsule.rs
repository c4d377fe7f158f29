//! Capsule primitives: squash, patch-based primary capsules, the
//! cross-agreement routing block, the classical dynamic-routing baseline,
//! margin loss, and prediction readout.

use crate::error::{Error, Result};
use crate::nn::{dropout, Conv2d, Fwd, Init, LayerNorm, ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// Floor under squared norms before sqrt; keeps gradients finite at zero
/// vectors without perturbing norms above ~1e-15.
pub const NORM_EPS: f64 = 1e-30;

/// A batch of capsule vectors (B, n, d) plus the patch-grid metadata they
/// were formed on. Routed outputs carry no grid.
pub struct CapsuleSet {
    pub caps: Var,
    pub n: usize,
    pub d: usize,
    pub grid: Option<(usize, usize)>,
    pub scale_id: usize,
}

/// v * ||v||^2 / ((1 + ||v||^2) * ||v||) over the trailing dimension.
pub fn squash<T: Scalar>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let rank = g.shape(v).len();
    let last = rank - 1;
    let sq = g.mul(v, v)?;
    let sumsq = g.sum(sq, Some(last), true)?;
    let safe = g.max_scalar(sumsq, T::from_f64(NORM_EPS));
    let norm = g.sqrt(safe)?;
    let denom = g.add_scalar(sumsq, T::one());
    let frac = g.div(sumsq, denom)?;
    let factor = g.div(frac, norm)?;
    g.mul(v, factor)
}

/// sqrt(sum(v^2)) over the trailing dimension, floored at NORM_EPS.
pub fn capsule_norms<T: Scalar>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let rank = g.shape(v).len();
    let sq = g.mul(v, v)?;
    let sumsq = g.sum(sq, Some(rank - 1), false)?;
    let safe = g.max_scalar(sumsq, T::from_f64(NORM_EPS));
    g.sqrt(safe)
}

// ── spatial grouping ─────────────────────────────────────────────────────

/// Spatial correspondence between a fine patch grid and a coarse one:
/// each coarse cell covers an (h1/h2)x(w1/w2) block of fine cells.
pub struct GroupMap {
    /// Fine capsules per coarse group.
    pub s: usize,
    pub groups: usize,
    /// Row-major (k, m) -> flat fine index; a bijection.
    pub fine_of: Vec<usize>,
}

pub fn group_map(fine: (usize, usize), coarse: (usize, usize)) -> Result<GroupMap> {
    let (h1, w1) = fine;
    let (h2, w2) = coarse;
    if h2 == 0 || w2 == 0 || h1 % h2 != 0 || w1 % w2 != 0 {
        return Err(Error::Contract(format!(
            "group_map: fine grid {h1}x{w1} not divisible by coarse grid {h2}x{w2}"
        )));
    }
    let rh = h1 / h2;
    let rw = w1 / w2;
    let s = rh * rw;
    let groups = h2 * w2;
    let mut fine_of = Vec::with_capacity(groups * s);
    for k in 0..groups {
        let br = k / w2;
        let bc = k % w2;
        for m in 0..s {
            let r = br * rh + m / rw;
            let c = bc * rw + m % rw;
            fine_of.push(r * w1 + c);
        }
    }
    Ok(GroupMap { s, groups, fine_of })
}

impl GroupMap {
    /// Inverse direction: flat fine index -> (coarse group k, within-group m).
    pub fn group_of(&self, fine_index: usize) -> (usize, usize) {
        let pos = self
            .fine_of
            .iter()
            .position(|&f| f == fine_index)
            .expect("fine index in range");
        (pos / self.s, pos % self.s)
    }
}

// ── cross-agreement routing ──────────────────────────────────────────────

/// Which way the softmax over agreement scores runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingAxis {
    /// Over output capsules j: each coarse capsule's coefficients across
    /// outputs sum to 1 (dynamic-routing convention).
    #[default]
    Outputs,
    /// Attention-style alternative over coarse inputs k.
    Inputs,
}

/// One cross-agreement routing block: scores each coarse vote by its best
/// dot-product agreement within the spatially corresponding group of fine
/// votes, then couples coarse votes into output capsules.
pub struct CarBlock {
    pub w1: Option<ParamId>,
    pub w2: ParamId,
    pub share_weight: bool,
    pub dropout_rate: f64,
    pub coupling_axis: CouplingAxis,
    pub n_in1: usize,
    pub d_in1: usize,
    pub n_in2: usize,
    pub d_in2: usize,
    pub n_out: usize,
    pub d_out: usize,
    /// Grid assigned to the routed output (None for class capsules).
    pub out_grid: Option<(usize, usize)>,
}

impl CarBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        (n_in1, d_in1): (usize, usize),
        (n_in2, d_in2): (usize, usize),
        (n_out, d_out): (usize, usize),
        share_weight: bool,
        dropout_rate: f64,
        out_grid: Option<(usize, usize)>,
    ) -> Result<Self> {
        if n_in1 % n_in2 != 0 {
            return Err(Error::Contract(format!(
                "car: group size n_in1/n_in2 = {n_in1}/{n_in2} is not an integer"
            )));
        }
        if share_weight && d_in1 != d_in2 {
            return Err(Error::Contract(format!(
                "car: share_weight needs d_in1 == d_in2, got {d_in1} vs {d_in2}"
            )));
        }
        let w2 = store.add(
            format!("{name}.w2"),
            crate::nn::init_kaiming(&[n_out, n_in2, d_in2, d_out], d_in2, rng)?,
            true,
            true,
        )?;
        let w1 = if share_weight {
            None
        } else {
            Some(store.add(
                format!("{name}.w1"),
                crate::nn::init_kaiming(&[n_out, n_in1, d_in1, d_out], d_in1, rng)?,
                true,
                true,
            )?)
        };
        Ok(CarBlock {
            w1,
            w2,
            share_weight,
            dropout_rate,
            coupling_axis: CouplingAxis::default(),
            n_in1,
            d_in1,
            n_in2,
            d_in2,
            n_out,
            d_out,
            out_grid,
        })
    }

    /// Projects capsules (B, n, d_in) through a (J, n, d_in, E) tensor into
    /// per-output votes (B, J, n, E), one matrix per (output j, capsule i).
    fn votes<T: Scalar>(g: &mut Graph<T>, caps: Var, w: Var) -> Result<Var> {
        let (b, n, d_in) = {
            let s = g.shape(caps);
            (s[0], s[1], s[2])
        };
        let (j, e) = {
            let s = g.shape(w);
            (s[0], s[3])
        };
        let wp = g.permute(w, &[1, 2, 0, 3])?; // (n, d_in, J, E)
        let wm = g.reshape(wp, &[n, d_in, j * e])?;
        let up = g.permute(caps, &[1, 0, 2])?; // (n, B, d_in)
        let v = g.matmul(up, wm)?; // (n, B, J*E)
        let v = g.reshape(v, &[n, b, j, e])?;
        g.permute(v, &[1, 2, 0, 3]) // (B, J, n, E)
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Fwd<'_, T>, u1: &CapsuleSet, u2: &CapsuleSet) -> Result<CapsuleSet> {
        if u1.n != self.n_in1 || u1.d != self.d_in1 || u2.n != self.n_in2 || u2.d != self.d_in2 {
            return Err(Error::Contract(format!(
                "car: inputs ({}, {})/({}, {}) do not match block dims ({}, {})/({}, {})",
                u1.n, u1.d, u2.n, u2.d, self.n_in1, self.d_in1, self.n_in2, self.d_in2
            )));
        }
        let fine_grid = u1
            .grid
            .ok_or_else(|| Error::Contract("car: fine input needs a patch grid".into()))?;
        let coarse_grid = u2
            .grid
            .ok_or_else(|| Error::Contract("car: coarse input needs a patch grid".into()))?;
        let gm = group_map(fine_grid, coarse_grid)?;
        let (batch, j, k_groups, s, e) = (
            fwd.graph.shape(u1.caps)[0],
            self.n_out,
            self.n_in2,
            gm.s,
            self.d_out,
        );

        let w2 = fwd.param(self.w2);
        let u_hat2 = Self::votes(fwd.graph, u2.caps, w2)?; // (B, J, K, E)

        let u_hat1 = if self.share_weight {
            // group the fine capsules spatially, then vote with the shared W2
            let g = &mut *fwd.graph;
            let grouped = g.index_select(u1.caps, 1, &gm.fine_of)?; // (B, K*s, d)
            let grouped = g.reshape(grouped, &[batch, k_groups, s, self.d_in1])?;
            let gp = g.permute(grouped, &[1, 0, 2, 3])?; // (K, B, s, d)
            let gp = g.reshape(gp, &[k_groups, batch * s, self.d_in1])?;
            let wp = g.permute(w2, &[1, 2, 0, 3])?; // (K, d, J, E)
            let wm = g.reshape(wp, &[k_groups, self.d_in2, j * e])?;
            let v = g.matmul(gp, wm)?; // (K, B*s, J*E)
            let v = g.reshape(v, &[k_groups, batch, s, j, e])?;
            g.permute(v, &[1, 3, 0, 2, 4])? // (B, J, K, s, E)
        } else {
            // per-fine-capsule matrices first (indexed by absolute fine
            // index), then regroup the votes spatially
            let w1 = fwd.param(self.w1.expect("unshared block has w1"));
            let v = Self::votes(fwd.graph, u1.caps, w1)?; // (B, J, n1, E)
            let g = &mut *fwd.graph;
            let vg = g.index_select(v, 2, &gm.fine_of)?; // (B, J, K*s, E)
            g.reshape(vg, &[batch, j, k_groups, s, e])?
        };

        // agreement: scaled dot of each fine vote with its coarse vote,
        // keeping the best within each spatial group
        let g = &mut *fwd.graph;
        let u2e = g.reshape(u_hat2, &[batch, j, k_groups, 1, e])?;
        let prod = g.mul(u_hat1, u2e)?; // (B, J, K, s, E)
        let dots = g.sum(prod, Some(4), false)?; // (B, J, K, s)
        let scaled = g.scale(dots, T::one() / T::from_f64((e as f64).sqrt()));
        let agreement = g.max_reduce(scaled, Some(3), false)?; // (B, J, K)

        let axis = match self.coupling_axis {
            CouplingAxis::Outputs => 1,
            CouplingAxis::Inputs => 2,
        };
        let coupling = fwd.graph.softmax(agreement, axis)?;
        let coupling = dropout(fwd, coupling, self.dropout_rate)?;

        let g = &mut *fwd.graph;
        let ce = g.reshape(coupling, &[batch, j, k_groups, 1])?;
        let weighted = g.mul(u_hat2, ce)?; // (B, J, K, E)
        let summed = g.sum(weighted, Some(2), false)?; // (B, J, E)
        let out = squash(g, summed)?;
        Ok(CapsuleSet {
            caps: out,
            n: j,
            d: e,
            grid: self.out_grid,
            scale_id: u2.scale_id,
        })
    }
}

// ── dynamic routing baseline ─────────────────────────────────────────────

/// Classical iterative routing-by-agreement.
pub struct DynRouting {
    pub w: ParamId,
    pub iters: usize,
    pub n_in: usize,
    pub d_in: usize,
    pub n_out: usize,
    pub d_out: usize,
}

impl DynRouting {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        n_in: usize,
        d_in: usize,
        n_out: usize,
        d_out: usize,
        iters: usize,
    ) -> Result<Self> {
        if iters == 0 {
            return Err(Error::Contract("dynamic routing needs iters >= 1".into()));
        }
        let w = store.add(
            format!("{name}.w"),
            crate::nn::init_kaiming(&[n_out, n_in, d_in, d_out], d_in, rng)?,
            true,
            true,
        )?;
        Ok(DynRouting {
            w,
            iters,
            n_in,
            d_in,
            n_out,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Fwd<'_, T>, u: &CapsuleSet) -> Result<CapsuleSet> {
        if u.n != self.n_in || u.d != self.d_in {
            return Err(Error::Contract(format!(
                "dynamic routing: input ({}, {}) does not match ({}, {})",
                u.n, u.d, self.n_in, self.d_in
            )));
        }
        let w = fwd.param(self.w);
        let votes = CarBlock::votes(fwd.graph, u.caps, w)?; // (B, J, n_in, E)
        let g = &mut *fwd.graph;
        let batch = g.shape(votes)[0];
        let (j, n, e) = (self.n_out, self.n_in, self.d_out);

        let mut logits = g.constant(Tensor::zeros(&[batch, j, n]));
        let mut out = None;
        for it in 0..self.iters {
            let coupling = g.softmax(logits, 1)?; // per input capsule, over outputs
            let ce = g.reshape(coupling, &[batch, j, n, 1])?;
            let weighted = g.mul(votes, ce)?;
            let pre = g.sum(weighted, Some(2), false)?; // (B, J, E)
            let v = squash(g, pre)?;
            if it + 1 < self.iters {
                let ve = g.reshape(v, &[batch, j, 1, e])?;
                let agree = g.mul(votes, ve)?;
                let delta = g.sum(agree, Some(3), false)?; // (B, J, n)
                logits = g.add(logits, delta)?;
            }
            out = Some(v);
        }
        Ok(CapsuleSet {
            caps: out.expect("iters >= 1"),
            n: j,
            d: e,
            grid: None,
            scale_id: u.scale_id,
        })
    }
}

// ── patchify ─────────────────────────────────────────────────────────────

/// One-patch-one-capsule layer: p x p average pooling, 1x1 projection to the
/// capsule dimension, row-major grid flatten, learned positional embedding,
/// layer norm.
pub struct PatchifyCaps {
    pub conv: Conv2d,
    pub e_pos: ParamId,
    pub ln: LayerNorm,
    pub p: usize,
    pub n: usize,
    pub d: usize,
    pub grid: (usize, usize),
    pub scale_id: usize,
}

impl PatchifyCaps {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        d: usize,
        map_h: usize,
        map_w: usize,
        p: usize,
        scale_id: usize,
    ) -> Result<Self> {
        if p == 0 || map_h % p != 0 || map_w % p != 0 {
            return Err(Error::Shape {
                op: "patchify_caps",
                lhs: vec![map_h, map_w],
                rhs: vec![p],
                detail: format!("H={map_h}, W={map_w} not divisible by patch size p={p}"),
            });
        }
        let grid = (map_h / p, map_w / p);
        let n = grid.0 * grid.1;
        let conv = Conv2d::new(store, rng, &format!("{name}.proj"), in_ch, d, 1, 1, 0, true, Init::XavierNormal)?;
        let e_pos = store.add(format!("{name}.e_pos"), Tensor::zeros(&[n, d]), true, false)?;
        let ln = LayerNorm::new(store, &format!("{name}.ln"), d)?;
        Ok(PatchifyCaps {
            conv,
            e_pos,
            ln,
            p,
            n,
            d,
            grid,
            scale_id,
        })
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Fwd<'_, T>, f: Var) -> Result<CapsuleSet> {
        let pooled = fwd.graph.avg_pool2d(f, self.p, self.p)?;
        let projected = self.conv.forward(fwd, pooled)?; // (B, d, h, w)
        let g = &mut *fwd.graph;
        let batch = g.shape(projected)[0];
        let moved = g.permute(projected, &[0, 2, 3, 1])?; // (B, h, w, d)
        let flat = g.reshape(moved, &[batch, self.n, self.d])?;
        let e = fwd.param(self.e_pos);
        let g = &mut *fwd.graph;
        let e = g.reshape(e, &[1, self.n, self.d])?;
        let with_pos = g.add(flat, e)?;
        let caps = self.ln.forward(fwd, with_pos)?;
        Ok(CapsuleSet {
            caps,
            n: self.n,
            d: self.d,
            grid: Some(self.grid),
            scale_id: self.scale_id,
        })
    }
}

// ── loss and readout ─────────────────────────────────────────────────────

pub const MARGIN_POS: f64 = 0.9;
pub const MARGIN_NEG: f64 = 0.1;
pub const MARGIN_LAMBDA: f64 = 0.5;

/// Margin loss on class-capsule norms, summed over classes and averaged over
/// the batch.
pub fn margin_loss<T: Scalar>(g: &mut Graph<T>, class_caps: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(class_caps).to_vec();
    if shape.len() != 3 {
        return Err(Error::Contract(format!(
            "margin_loss expects (B, K, d), got {shape:?}"
        )));
    }
    let (batch, k) = (shape[0], shape[1]);
    if labels.len() != batch {
        return Err(Error::Contract(format!(
            "margin_loss: {} labels for batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
    }

    let norms = capsule_norms(g, class_caps)?; // (B, K)
    let m_pos = T::from_f64(MARGIN_POS);
    let m_neg = T::from_f64(MARGIN_NEG);

    let neg_norm = g.neg(norms)?;
    let pos_gap = g.add_scalar(neg_norm, m_pos); // m+ - ||v||
    let pos_hinge = g.relu(pos_gap)?;
    let pos_sq = g.mul(pos_hinge, pos_hinge)?;

    let neg_gap = g.add_scalar(norms, -m_neg); // ||v|| - m-
    let neg_hinge = g.relu(neg_gap)?;
    let neg_sq = g.mul(neg_hinge, neg_hinge)?;

    let mut onehot = vec![T::zero(); batch * k];
    for (b, &l) in labels.iter().enumerate() {
        onehot[b * k + l] = T::one();
    }
    let t = g.constant(Tensor::new(vec![batch, k], onehot.clone())?);
    let not_t = g.constant(Tensor::new(
        vec![batch, k],
        onehot.iter().map(|&v| T::one() - v).collect(),
    )?);

    let pos_term = g.mul(t, pos_sq)?;
    let neg_term = g.mul(not_t, neg_sq)?;
    let neg_term = g.scale(neg_term, T::from_f64(MARGIN_LAMBDA));
    let per_class = g.add(pos_term, neg_term)?;
    let total = g.sum(per_class, None, false)?;
    Ok(g.scale(total, T::one() / T::from_f64(batch as f64)))
}

/// Predicted label per batch item: argmax of class-capsule L2 norm, ties to
/// the lowest index.
pub fn predict<T: Scalar>(class_caps: &Tensor<T>) -> Result<Vec<usize>> {
    let shape = class_caps.shape();
    if shape.len() != 3 {
        return Err(Error::Contract(format!("predict expects (B, K, d), got {shape:?}")));
    }
    let (batch, k, d) = (shape[0], shape[1], shape[2]);
    let data = class_caps.data();
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut best = T::neg_infinity();
        let mut arg = 0;
        for j in 0..k {
            let row = &data[(b * k + j) * d..(b * k + j + 1) * d];
            let mut sumsq = T::zero();
            for &v in row {
                sumsq += v * v;
            }
            if sumsq > best {
                best = sumsq;
                arg = j;
            }
        }
        out.push(arg);
    }
    Ok(out)
}
