//! Signed-gradient adversarial attacks (single-step and iterative) and the
//! robustness sweep over perturbation budgets.
//!
//! Perturbations live in raw [0,1] pixel space; normalization happens inside
//! the differentiated graph so gradients flow back to pixels.

use crate::capsule::{margin_loss, predict};
use crate::data::{batch_to, epoch_batches_raw, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Mode;
use crate::tensor::{Graph, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Bim,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackKind::Fgsm => write!(f, "fgsm"),
            AttackKind::Bim => write!(f, "bim"),
        }
    }
}

/// L-infinity budget and iteration settings, in pre-normalization pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// Per-step size; defaults to epsilon / steps.
    pub alpha: f64,
    pub pixel_lo: f64,
    pub pixel_hi: f64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            steps: 1,
            alpha: epsilon,
            pixel_lo: 0.0,
            pixel_hi: 1.0,
        }
    }

    pub fn bim(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            steps,
            alpha: if steps > 0 { epsilon / steps as f64 } else { epsilon },
            pixel_lo: 0.0,
            pixel_hi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::Contract(format!("epsilon {} < 0", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Contract("attack needs steps >= 1".into()));
        }
        if self.steps > 1 && self.alpha <= 0.0 && self.epsilon > 0.0 {
            return Err(Error::Contract("iterative attack needs alpha > 0".into()));
        }
        Ok(())
    }
}

/// Gradient of the margin loss w.r.t. raw pixels, with the per-channel
/// normalization inside the graph. Eval mode throughout: running batch-norm
/// statistics, no dropout, no parameter gradients.
fn pixel_gradient<T: Scalar>(
    model: &mut Model<T>,
    x_raw: &Tensor<T>,
    labels: &[usize],
    policy: &AugmentPolicy,
) -> Result<Tensor<T>> {
    let c = x_raw.shape()[1];
    let mut graph = Graph::new();
    let x = graph.leaf(x_raw.clone(), true);
    let mean = graph.constant(Tensor::new(
        vec![1, c, 1, 1],
        policy.normalize_mean.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )?);
    let std = graph.constant(Tensor::new(
        vec![1, c, 1, 1],
        policy.normalize_std.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )?);
    let centered = graph.sub(x, mean)?;
    let normalized = graph.div(centered, std)?;
    let caps = model.forward(&mut graph, normalized, Mode::Eval, None, false)?;
    let loss = margin_loss(&mut graph, caps, labels)?;
    graph.backward(loss)?;
    graph
        .grad(x)
        .ok_or_else(|| Error::Numeric("no pixel gradient reached the input".into()))
}

fn signum<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Single signed-gradient step: x + epsilon * sign(grad), clamped to pixels.
pub fn fgsm<T: Scalar>(
    model: &mut Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    policy: &AugmentPolicy,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let grad = pixel_gradient(model, x, labels, policy)?;
    let eps = T::from_f64(cfg.epsilon);
    let lo = T::from_f64(cfg.pixel_lo);
    let hi = T::from_f64(cfg.pixel_hi);
    let mut out = x.clone();
    for (v, &g) in out.data_mut().iter_mut().zip(grad.data()) {
        let stepped = *v + eps * signum(g);
        *v = clamp(stepped, lo, hi);
    }
    Ok(out)
}

/// Iterative signed-gradient attack with per-step projection onto the
/// epsilon ball around the original pixels.
pub fn bim<T: Scalar>(
    model: &mut Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    policy: &AugmentPolicy,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let eps = T::from_f64(cfg.epsilon);
    let alpha = T::from_f64(cfg.alpha);
    let lo = T::from_f64(cfg.pixel_lo);
    let hi = T::from_f64(cfg.pixel_hi);
    let mut cur = x.clone();
    for _ in 0..cfg.steps {
        let grad = pixel_gradient(model, &cur, labels, policy)?;
        for ((v, &g), &orig) in cur.data_mut().iter_mut().zip(grad.data()).zip(x.data()) {
            let stepped = *v + alpha * signum(g);
            let ball = clamp(stepped, orig - eps, orig + eps);
            *v = clamp(ball, lo, hi);
        }
    }
    Ok(cur)
}

fn clamp<T: Scalar>(v: T, lo: T, hi: T) -> T {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

/// Accuracy of the model on adversarial versions of up to `limit` samples.
pub fn adversarial_accuracy<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    policy: &AugmentPolicy,
    kind: AttackKind,
    cfg: &AttackConfig,
    batch_size: usize,
    limit: Option<usize>,
) -> Result<f64> {
    cfg.validate()?;
    let cap = limit.unwrap_or(usize::MAX);
    let mut correct = 0usize;
    let mut seen = 0usize;
    for batch in epoch_batches_raw(data, policy, batch_size) {
        if seen >= cap {
            break;
        }
        let take = batch.labels.len().min(cap - seen);
        let (images, labels) = take_prefix(&batch.images, &batch.labels, take)?;
        let labels_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let x = batch_to::<T>(&images);
        let x_adv = match kind {
            AttackKind::Fgsm => fgsm(model, &x, &labels_usize, cfg, policy)?,
            AttackKind::Bim => bim(model, &x, &labels_usize, cfg, policy)?,
        };
        let preds = classify(model, &x_adv, policy)?;
        correct += preds.iter().zip(&labels_usize).filter(|(p, l)| p == l).count();
        seen += labels_usize.len();
    }
    Ok(correct as f64 / seen.max(1) as f64)
}

/// Predictions for raw [0,1] pixels, normalizing in-graph.
pub fn classify<T: Scalar>(model: &mut Model<T>, x_raw: &Tensor<T>, policy: &AugmentPolicy) -> Result<Vec<usize>> {
    let c = x_raw.shape()[1];
    let mut graph = Graph::new();
    let x = graph.leaf(x_raw.clone(), false);
    let mean = graph.constant(Tensor::new(
        vec![1, c, 1, 1],
        policy.normalize_mean.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )?);
    let std = graph.constant(Tensor::new(
        vec![1, c, 1, 1],
        policy.normalize_std.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )?);
    let centered = graph.sub(x, mean)?;
    let normalized = graph.div(centered, std)?;
    let caps = model.forward(&mut graph, normalized, Mode::Eval, None, false)?;
    predict(graph.value(caps))
}

fn take_prefix(images: &Tensor<f32>, labels: &[u8], take: usize) -> Result<(Tensor<f32>, Vec<u8>)> {
    if take == labels.len() {
        return Ok((images.clone(), labels.to_vec()));
    }
    let s = images.shape();
    let sz = s[1] * s[2] * s[3];
    Ok((
        Tensor::new(vec![take, s[1], s[2], s[3]], images.data()[..take * sz].to_vec())?,
        labels[..take].to_vec(),
    ))
}

/// Accuracy-vs-epsilon curve for one model under one attack.
#[derive(Debug, Clone)]
pub struct RobustnessCurve {
    pub attack: AttackKind,
    pub model_name: String,
    pub points: Vec<(f64, f64)>,
}

/// Sweeps the epsilon grid. Epsilons must be strictly increasing; the
/// epsilon = 0 entry goes through the same attack path and therefore equals
/// the clean accuracy exactly.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    policy: &AugmentPolicy,
    epsilons: &[f64],
    kind: AttackKind,
    steps: usize,
    batch_size: usize,
    limit: Option<usize>,
    model_name: &str,
) -> Result<RobustnessCurve> {
    if epsilons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract("epsilon grid must be strictly increasing".into()));
    }
    let mut points = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let cfg = match kind {
            AttackKind::Fgsm => AttackConfig::fgsm(eps),
            AttackKind::Bim => AttackConfig::bim(eps, steps),
        };
        let acc = adversarial_accuracy(model, data, policy, kind, &cfg, batch_size, limit)?;
        points.push((eps, acc));
    }
    Ok(RobustnessCurve {
        attack: kind,
        model_name: model_name.to_string(),
        points,
    })
}

pub const ROBUSTNESS_HEADER: &str = "epsilon,accuracy,attack,model";

/// Default sweep grid.
pub const DEFAULT_EPSILONS: [f64; 7] = [0.0, 0.01, 0.02, 0.05, 0.1, 0.15, 0.2];

pub fn write_robustness_csv(path: &Path, curves: &[RobustnessCurve]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{ROBUSTNESS_HEADER}")?;
    for curve in curves {
        for &(eps, acc) in &curve.points {
            writeln!(f, "{eps},{acc},{},{}", curve.attack, curve.model_name)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::ModelConfig;

    fn toy_model() -> Model<f32> {
        let mut cfg = ModelConfig::tiny();
        cfg.channels = [4, 6, 8];
        cfg.capsule_dims = [4, 4, 6];
        cfg.d_mid = 6;
        cfg.d_out = 8;
        cfg.in_channels = 1;
        Model::build(cfg, 3).unwrap()
    }

    fn toy_data(n: usize) -> Dataset {
        Dataset {
            name: "toy".into(),
            split: Split::Test,
            images: Tensor::from_fn(&[n, 1, 32, 32], |i| ((i * 2654435761) % 256) as f32 / 255.0),
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
            num_classes: 10,
        }
    }

    fn raw_policy() -> AugmentPolicy {
        let mut p = AugmentPolicy::none(1);
        p.normalize_mean = vec![0.5];
        p.normalize_std = vec![0.5];
        p
    }

    #[test]
    fn epsilon_zero_is_identity() {
        let mut model = toy_model();
        let x = Tensor::<f32>::from_fn(&[2, 1, 32, 32], |i| (i % 100) as f32 / 99.0);
        let cfg = AttackConfig::fgsm(0.0);
        let adv = fgsm(&mut model, &x, &[1, 2], &cfg, &raw_policy()).unwrap();
        assert_eq!(adv.data(), x.data());
    }

    #[test]
    fn perturbation_respects_budget_and_pixel_range() {
        let mut model = toy_model();
        let x = Tensor::<f32>::from_fn(&[2, 1, 32, 32], |i| ((i * 37) % 256) as f32 / 255.0);
        for eps in [0.02f64, 0.05, 0.1] {
            let cfg = AttackConfig::fgsm(eps);
            let adv = fgsm(&mut model, &x, &[0, 5], &cfg, &raw_policy()).unwrap();
            let linf = adv
                .data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(linf as f64 <= eps + 1e-7, "linf {linf} eps {eps}");
            assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

            let cfg = AttackConfig::bim(eps, 10);
            let adv = bim(&mut model, &x, &[0, 5], &cfg, &raw_policy()).unwrap();
            let linf = adv
                .data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(linf as f64 <= eps + 1e-7, "bim linf {linf} eps {eps}");
        }
    }

    #[test]
    fn bim_single_step_equals_fgsm_bitwise() {
        let mut model = toy_model();
        let x = Tensor::<f32>::from_fn(&[2, 1, 32, 32], |i| ((i * 193) % 256) as f32 / 255.0);
        let labels = [3usize, 7];
        let policy = raw_policy();
        let f = fgsm(&mut model, &x, &labels, &AttackConfig::fgsm(0.05), &policy).unwrap();
        let mut cfg = AttackConfig::bim(0.05, 1);
        cfg.alpha = 0.05;
        let b = bim(&mut model, &x, &labels, &cfg, &policy).unwrap();
        assert_eq!(f.data(), b.data());
    }

    #[test]
    fn attack_leaves_parameters_untouched() {
        let mut model = toy_model();
        let checksum = |m: &Model<f32>| -> f64 {
            m.store
                .iter()
                .flat_map(|(_, e)| e.value.data().iter().map(|&v| v as f64))
                .sum()
        };
        let before = checksum(&model);
        let data = toy_data(8);
        let policy = raw_policy();
        adversarial_accuracy(
            &mut model,
            &data,
            &policy,
            AttackKind::Bim,
            &AttackConfig::bim(0.1, 3),
            4,
            None,
        )
        .unwrap();
        assert_eq!(checksum(&model), before);
    }

    #[test]
    fn sweep_grid_must_increase() {
        let mut model = toy_model();
        let data = toy_data(4);
        let policy = raw_policy();
        assert!(robustness_sweep(
            &mut model,
            &data,
            &policy,
            &[0.0, 0.0],
            AttackKind::Fgsm,
            1,
            4,
            None,
            "toy"
        )
        .is_err());
    }
}
