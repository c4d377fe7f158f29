//! Backbone and full-model assembly: the multi-scale residual trunk, the
//! patchify/routing stack, the dynamic-routing ablation, scale-mask variants,
//! and parameter accounting.

use crate::capsule::{CapsuleSet, CarBlock, CouplingAxis, DynRouting, PatchifyCaps};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Fwd, Init, Mode, ParamStore};
use crate::tensor::{Graph, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingKind {
    Car,
    Dr,
}

/// Every architectural hyperparameter, with the two published presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Backbone channels per scale.
    pub channels: [usize; 3],
    /// Convolutions per residual block (entry conv + N-1 skip modules).
    pub convs_per_block: usize,
    /// Primary capsule dimensions per scale.
    pub capsule_dims: [usize; 3],
    pub d_mid: usize,
    pub d_out: usize,
    pub patch_size: usize,
    pub weight_shared: bool,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub routing: RoutingKind,
    pub dr_iters: usize,
    /// Softmax direction for the routing coupling coefficients.
    pub coupling_axis: CouplingAxis,
    /// Which scales feed capsules (32x32, 16x16, 8x8).
    pub scale_mask: [bool; 3],
    pub in_channels: usize,
    pub input_hw: usize,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            channels: [32, 64, 128],
            convs_per_block: 2,
            capsule_dims: [8, 8, 16],
            d_mid: 16,
            d_out: 32,
            patch_size: 4,
            weight_shared: true,
            num_classes: 10,
            dropout_rate: 0.1,
            routing: RoutingKind::Car,
            dr_iters: 3,
            coupling_axis: CouplingAxis::default(),
            scale_mask: [true, true, true],
            in_channels: 3,
            input_hw: 32,
        }
    }

    pub fn large() -> Self {
        ModelConfig {
            channels: [128, 256, 512],
            convs_per_block: 3,
            capsule_dims: [16, 32, 64],
            d_mid: 64,
            d_out: 128,
            weight_shared: false,
            ..Self::tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs_per_block == 0 {
            return Err(Error::Config("convs_per_block must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !self.scale_mask.iter().any(|&m| m) {
            return Err(Error::Config("scale_mask selects no scales".into()));
        }
        if self.input_hw % 4 != 0 {
            return Err(Error::Config(format!(
                "input resolution {} must be divisible by 4 for the two halvings",
                self.input_hw
            )));
        }
        if self.dr_iters == 0 {
            return Err(Error::Config("dr_iters must be >= 1".into()));
        }
        let full_chain = self.scale_mask == [true, true, true] && self.routing == RoutingKind::Car;
        if full_chain && self.weight_shared {
            let [d1, d2, d3] = self.capsule_dims;
            if d1 != d2 || self.d_mid != d3 {
                return Err(Error::Config(format!(
                    "weight sharing needs d1 == d2 and d_mid == d3, got d=({d1},{d2},{d3}), d_mid={}",
                    self.d_mid
                )));
            }
        }
        Ok(())
    }

    /// Feature-map side length at a scale (0-based; each scale halves).
    pub fn map_hw(&self, scale: usize) -> usize {
        self.input_hw >> scale
    }

    /// Indices of the selected scales, finest first.
    pub fn selected_scales(&self) -> Vec<usize> {
        (0..3).filter(|&i| self.scale_mask[i]).collect()
    }
}

// ── backbone ─────────────────────────────────────────────────────────────

struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            // block convs carry no bias; batch norm absorbs it
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), in_ch, out_ch, 3, stride, 1, false, Init::Kaiming)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch)?,
        })
    }

    fn forward<T: Scalar>(&self, fwd: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let x = self.conv.forward(fwd, x)?;
        let x = self.bn.forward(fwd, x)?;
        fwd.graph.relu(x)
    }
}

/// Entry conv + (N-1) identical stride-1 modules, each with an additive skip.
pub struct ResidualBlock {
    entry: ConvBnRelu,
    modules: Vec<ConvBnRelu>,
}

impl ResidualBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        n_convs: usize,
        entry_stride: usize,
    ) -> Result<Self> {
        let entry = ConvBnRelu::new(store, rng, &format!("{name}.entry"), in_ch, out_ch, entry_stride)?;
        let modules = (1..n_convs)
            .map(|i| ConvBnRelu::new(store, rng, &format!("{name}.mod{i}"), out_ch, out_ch, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(ResidualBlock { entry, modules })
    }

    fn forward<T: Scalar>(&self, fwd: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let mut x = self.entry.forward(fwd, x)?;
        for m in &self.modules {
            let y = m.forward(fwd, x)?;
            x = fwd.graph.add(x, y)?;
        }
        Ok(x)
    }
}

/// Shared-trunk multi-scale backbone: block 1 keeps the input resolution,
/// each later block halves it. Only the prefix of blocks needed by the
/// selected scales is built.
pub struct Msrb {
    blocks: Vec<ResidualBlock>,
}

impl Msrb {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, config: &ModelConfig, deepest: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        for i in 0..=deepest {
            let in_ch = if i == 0 { config.in_channels } else { config.channels[i - 1] };
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push(ResidualBlock::new(
                store,
                rng,
                &format!("msrb.block{}", i + 1),
                in_ch,
                config.channels[i],
                config.convs_per_block,
                stride,
            )?);
        }
        Ok(Msrb { blocks })
    }

    /// Features at every built scale, finest first.
    fn forward<T: Scalar>(&self, fwd: &mut Fwd<'_, T>, x: Var) -> Result<Vec<Var>> {
        let mut features = Vec::with_capacity(self.blocks.len());
        let mut cur = x;
        for block in &self.blocks {
            cur = block.forward(fwd, cur)?;
            features.push(cur);
        }
        Ok(features)
    }
}

// ── full model ───────────────────────────────────────────────────────────

enum RoutingStack {
    /// Fine-to-coarse chain of cross-agreement blocks.
    Car(Vec<CarBlock>),
    /// Per-scale dynamic routing branches, concatenated, then a head.
    Dr { branches: Vec<DynRouting>, head: DynRouting },
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    msrb: Msrb,
    patchify: Vec<PatchifyCaps>,
    routing: RoutingStack,
}

/// Intermediate capsule count per dynamic-routing branch and for the first
/// CAR block's output (mirrors the coarser input of the final fusion).
const N_MID: usize = 16;

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model; identical seeds give bit-identical
    /// parameters.
    pub fn build(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut store = ParamStore::new();

        let scales = config.selected_scales();
        let deepest = *scales.last().expect("validated non-empty");
        let msrb = Msrb::new(&mut store, &mut rng, &config, deepest)?;

        let mut patchify = Vec::with_capacity(scales.len());
        for &s in &scales {
            let hw = config.map_hw(s);
            patchify.push(PatchifyCaps::new(
                &mut store,
                &mut rng,
                &format!("patchify{}", s + 1),
                config.channels[s],
                config.capsule_dims[s],
                hw,
                hw,
                config.patch_size,
                s,
            )?);
        }

        let routing = match config.routing {
            RoutingKind::Car => {
                let mut cars: Vec<CarBlock> = Vec::new();
                match patchify.len() {
                    1 => {
                        let p = &patchify[0];
                        cars.push(CarBlock::new(
                            &mut store,
                            &mut rng,
                            "car1",
                            (p.n, p.d),
                            (p.n, p.d),
                            (config.num_classes, config.d_out),
                            config.weight_shared,
                            config.dropout_rate,
                            None,
                        )?);
                    }
                    2 => {
                        let (fine, coarse) = (&patchify[0], &patchify[1]);
                        cars.push(CarBlock::new(
                            &mut store,
                            &mut rng,
                            "car1",
                            (fine.n, fine.d),
                            (coarse.n, coarse.d),
                            (config.num_classes, config.d_out),
                            config.weight_shared,
                            config.dropout_rate,
                            None,
                        )?);
                    }
                    3 => {
                        let (p1, p2, p3) = (&patchify[0], &patchify[1], &patchify[2]);
                        cars.push(CarBlock::new(
                            &mut store,
                            &mut rng,
                            "car1",
                            (p1.n, p1.d),
                            (p2.n, p2.d),
                            (p2.n, config.d_mid),
                            config.weight_shared,
                            config.dropout_rate,
                            Some(p2.grid),
                        )?);
                        cars.push(CarBlock::new(
                            &mut store,
                            &mut rng,
                            "car2",
                            (p2.n, config.d_mid),
                            (p3.n, p3.d),
                            (config.num_classes, config.d_out),
                            config.weight_shared,
                            config.dropout_rate,
                            None,
                        )?);
                    }
                    _ => unreachable!("scale mask has 1..=3 scales"),
                }
                for car in &mut cars {
                    car.coupling_axis = config.coupling_axis;
                }
                RoutingStack::Car(cars)
            }
            RoutingKind::Dr => {
                let mut branches = Vec::new();
                for p in &patchify {
                    branches.push(DynRouting::new(
                        &mut store,
                        &mut rng,
                        &format!("dr_branch{}", p.scale_id + 1),
                        p.n,
                        p.d,
                        N_MID,
                        config.d_mid,
                        config.dr_iters,
                    )?);
                }
                let head = DynRouting::new(
                    &mut store,
                    &mut rng,
                    "dr_head",
                    N_MID * patchify.len(),
                    config.d_mid,
                    config.num_classes,
                    config.d_out,
                    config.dr_iters,
                )?;
                RoutingStack::Dr { branches, head }
            }
        };

        Ok(Model {
            config,
            store,
            msrb,
            patchify,
            routing,
        })
    }

    /// Full forward pass to class capsules (B, K, d_out). `param_grads`
    /// controls whether parameters are bound with gradients (off for eval
    /// and attacks).
    pub fn forward(
        &mut self,
        graph: &mut Graph<T>,
        x: Var,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
        param_grads: bool,
    ) -> Result<Var> {
        Ok(self.forward_pass(graph, x, mode, rng, param_grads)?.class_caps)
    }

    /// Forward pass that also hands back the bound parameter leaves, so a
    /// training loop can read their gradients after backward.
    pub fn forward_pass(
        &mut self,
        graph: &mut Graph<T>,
        x: Var,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
        param_grads: bool,
    ) -> Result<ForwardPass> {
        let shape = graph.shape(x).to_vec();
        let hw = self.config.input_hw;
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] != hw || shape[3] != hw {
            return Err(Error::shape_msg(
                "model_forward",
                &shape,
                &[0, self.config.in_channels, hw, hw],
                "input must be (B, C, H, W) at the configured resolution",
            ));
        }
        let mut fwd = Fwd::new(graph, &mut self.store, mode, rng, param_grads);
        let features = self.msrb.forward(&mut fwd, x)?;

        let mut caps: Vec<CapsuleSet> = Vec::with_capacity(self.patchify.len());
        for p in &self.patchify {
            caps.push(p.forward(&mut fwd, features[p.scale_id])?);
        }

        let class_caps = match &self.routing {
            RoutingStack::Car(cars) => match caps.len() {
                1 => cars[0].forward(&mut fwd, &caps[0], &caps[0])?,
                2 => cars[0].forward(&mut fwd, &caps[0], &caps[1])?,
                3 => {
                    let mid = cars[0].forward(&mut fwd, &caps[0], &caps[1])?;
                    cars[1].forward(&mut fwd, &mid, &caps[2])?
                }
                _ => unreachable!(),
            },
            RoutingStack::Dr { branches, head } => {
                let mut routed = Vec::with_capacity(branches.len());
                for (branch, cap) in branches.iter().zip(&caps) {
                    routed.push(branch.forward(&mut fwd, cap)?.caps);
                }
                let fused = fwd.graph.concat(&routed, 1)?;
                let fused = CapsuleSet {
                    caps: fused,
                    n: N_MID * branches.len(),
                    d: self.config.d_mid,
                    grid: None,
                    scale_id: 0,
                };
                head.forward(&mut fwd, &fused)?
            }
        };
        Ok(ForwardPass {
            class_caps: class_caps.caps,
            bindings: fwd.into_bindings(),
        })
    }

    /// Backbone features only (finest first), for backbone-level checks.
    pub fn backbone_features(
        &mut self,
        graph: &mut Graph<T>,
        x: Var,
        mode: Mode,
        param_grads: bool,
    ) -> Result<Vec<Var>> {
        let mut fwd = Fwd::new(graph, &mut self.store, mode, None, param_grads);
        self.msrb.forward(&mut fwd, x)
    }

    /// Primary capsule count per selected scale.
    pub fn capsule_counts(&self) -> Vec<(usize, usize)> {
        self.patchify.iter().map(|p| (p.scale_id, p.n)).collect()
    }

    /// Group size s = n_fine / n_coarse for each CAR block in the chain.
    pub fn car_group_sizes(&self) -> Vec<usize> {
        match &self.routing {
            RoutingStack::Car(cars) => cars.iter().map(|c| c.n_in1 / c.n_in2).collect(),
            RoutingStack::Dr { .. } => Vec::new(),
        }
    }

    pub fn count_params(&self) -> ParamReport {
        let mut by_module: Vec<(String, usize)> = Vec::new();
        let mut total = 0usize;
        for (_, entry) in self.store.iter() {
            if !entry.trainable {
                continue;
            }
            let n = entry.value.numel();
            total += n;
            let key = module_key(&entry.name);
            match by_module.iter_mut().find(|(k, _)| *k == key) {
                Some((_, acc)) => *acc += n,
                None => by_module.push((key, n)),
            }
        }
        ParamReport { total, by_module }
    }
}

fn module_key(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or(name);
    if first == "msrb" {
        match parts.next() {
            Some(second) => format!("{first}.{second}"),
            None => first.to_string(),
        }
    } else {
        first.to_string()
    }
}

/// Class capsules plus the bound parameter leaves of one forward pass.
pub struct ForwardPass {
    pub class_caps: Var,
    pub bindings: Vec<(crate::nn::ParamId, Var)>,
}

/// Trainable-parameter totals with a per-module breakdown.
pub struct ParamReport {
    pub total: usize,
    pub by_module: Vec<(String, usize)>,
}

impl std::fmt::Display for ParamReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, n) in &self.by_module {
            writeln!(f, "{name:<18} {n:>12}")?;
        }
        writeln!(f, "{:<18} {:>12}", "total", self.total)
    }
}
