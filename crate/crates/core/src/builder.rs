//! Removal planning and network assembly.
//!
//! A [`Network`] is an ordered list of [`Unit`]s over one flat
//! [`ParamStore`]. Unit owners are stable names (`stem`, `s0.t`, `s0.b3`,
//! `s0.c4`, `embed`, `head`); block indices are 1-based within a stage.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Mode, StatUpdate, Tape, Var};
use crate::blocks::{unit_rng, Block, BlockSpec, ConvUnit, Head, PatchEmbed};
use crate::error::{ReplError, Result};
use crate::params::{ParamKind, ParamStore};
use crate::replacement::{ComputingLayer, Variant};
use crate::tensor::{ParamId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ResnetBasic,
    ResnetBottleneck,
    Vit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    E2e,
    RemoveOnly,
    #[default]
    Repl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::E2e => "e2e",
            Method::RemoveOnly => "remove_only",
            Method::Repl => "repl",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    /// Channels (CNN) or model width `d` (ViT).
    pub width: usize,
    /// Bottleneck inner width; defaults to `width / 4`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mid: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitSpec {
    pub patch: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_kernel() -> usize {
    3
}

fn default_k() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub family: Family,
    /// `[channels, height, width]` of one input sample.
    pub input: [usize; 3],
    pub classes: usize,
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vit: Option<VitSpec>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub variant: Variant,
}

fn cfg_err(key: &str, detail: impl Into<String>) -> ReplError {
    ReplError::Config {
        key: key.into(),
        detail: detail.into(),
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(cfg_err("k", format!("replacement interval must be at least 2, got {}", self.k)));
        }
        if self.stages.is_empty() {
            return Err(cfg_err("stages", "at least one stage is required"));
        }
        for (s, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 {
                return Err(cfg_err(&format!("stages[{s}].blocks"), "every stage needs at least one block"));
            }
            if st.width == 0 {
                return Err(cfg_err(&format!("stages[{s}].width"), "must be positive"));
            }
        }
        if self.classes == 0 {
            return Err(cfg_err("classes", "must be positive"));
        }
        if self.input.contains(&0) {
            return Err(cfg_err("input", "every dimension must be positive"));
        }
        self.variant.validate()?;
        match self.family {
            Family::Vit => {
                let v = self.vit.ok_or_else(|| cfg_err("vit", "vit family needs a [vit] table"))?;
                if self.stages.len() != 1 {
                    return Err(cfg_err("stages", "vit family takes exactly one stage"));
                }
                if v.patch == 0 || self.input[1] % v.patch != 0 || self.input[2] % v.patch != 0 {
                    return Err(cfg_err("vit.patch", "patch size must divide the input height and width"));
                }
            }
            _ => {
                if self.vit.is_some() {
                    return Err(cfg_err("vit", "only valid for the vit family"));
                }
            }
        }
        for s in 0..self.stages.len() {
            self.block_spec(s).validate().map_err(|e| cfg_err(&format!("stages[{s}]"), e.to_string()))?;
        }
        Ok(())
    }

    pub fn block_spec(&self, stage: usize) -> BlockSpec {
        let st = &self.stages[stage];
        match self.family {
            Family::ResnetBasic => BlockSpec::Basic {
                c: st.width,
                q: self.kernel,
            },
            Family::ResnetBottleneck => BlockSpec::Bottleneck {
                c: st.width,
                b: st.mid.unwrap_or((st.width / 4).max(1)),
                q: self.kernel,
            },
            Family::Vit => {
                let v = self.vit.expect("validated");
                BlockSpec::Vit {
                    d: st.width,
                    heads: v.heads,
                    dff: v.mlp_ratio * st.width,
                }
            }
        }
    }

    /// Token count of the ViT patch grid.
    pub fn tokens(&self) -> usize {
        self.vit.map_or(0, |v| (self.input[1] / v.patch) * (self.input[2] / v.patch))
    }

    /// Total block count `N` across stages.
    pub fn depth(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    pub fn with_method(&self, method: Method) -> NetworkSpec {
        NetworkSpec {
            method,
            ..self.clone()
        }
    }

    /// Spatial extent `(h, w)` entering stage `s` (stages after the first
    /// start with a stride-2 transition).
    pub fn stage_hw(&self, s: usize) -> (usize, usize) {
        let (mut h, mut w) = (self.input[1], self.input[2]);
        let pad = self.kernel / 2;
        for _ in 0..s {
            h = (h + 2 * pad - self.kernel) / 2 + 1;
            w = (w + 2 * pad - self.kernel) / 2 + 1;
        }
        (h, w)
    }
}

/// `{ mK : m ≥ 1, mK < L }`.
pub fn removal_set(l: usize, k: usize) -> Result<BTreeSet<usize>> {
    if k < 2 {
        return Err(cfg_err("k", format!("replacement interval must be at least 2, got {k}")));
    }
    if l == 0 {
        return Err(ReplError::invalid("removal_set", "stage length must be at least 1"));
    }
    Ok((1..).map(|m| m * k).take_while(|&r| r < l).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalPlan {
    pub stage_lengths: Vec<usize>,
    /// 1-based removed indices per stage.
    pub removed: Vec<BTreeSet<usize>>,
}

impl RemovalPlan {
    /// `R`.
    pub fn count(&self) -> usize {
        self.removed.iter().map(BTreeSet::len).sum()
    }

    /// `N`.
    pub fn depth(&self) -> usize {
        self.stage_lengths.iter().sum()
    }

    /// `ρ = R / N`.
    pub fn ratio(&self) -> f64 {
        self.count() as f64 / self.depth() as f64
    }

    pub fn is_removed(&self, stage: usize, index: usize) -> bool {
        self.removed[stage].contains(&index)
    }
}

/// Applies [`removal_set`] to every stage independently.
pub fn stage_removal_plan(spec: &NetworkSpec) -> Result<RemovalPlan> {
    let stage_lengths: Vec<usize> = spec.stages.iter().map(|s| s.blocks).collect();
    let removed = stage_lengths
        .iter()
        .map(|&l| removal_set(l, spec.k))
        .collect::<Result<Vec<_>>>()?;
    Ok(RemovalPlan {
        stage_lengths,
        removed,
    })
}

/// One executable step of a network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Unit {
    Stem(ConvUnit),
    Transition { stage: usize, conv: ConvUnit },
    Embed(PatchEmbed),
    Block { stage: usize, index: usize, block: Block },
    Computing { stage: usize, index: usize, layer: ComputingLayer },
    Head(Head),
}

pub fn block_owner(stage: usize, index: usize) -> String {
    format!("s{stage}.b{index}")
}

pub fn computing_owner(stage: usize, index: usize) -> String {
    format!("s{stage}.c{index}")
}

impl Unit {
    pub fn owner(&self) -> String {
        match self {
            Unit::Stem(_) => "stem".into(),
            Unit::Transition { stage, .. } => format!("s{stage}.t"),
            Unit::Embed(_) => "embed".into(),
            Unit::Block { stage, index, .. } => block_owner(*stage, *index),
            Unit::Computing { stage, index, .. } => computing_owner(*stage, *index),
            Unit::Head(_) => "head".into(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Unit::Stem(c) | Unit::Transition { conv: c, .. } => c.forward(tape, store, x, mode),
            Unit::Embed(e) => e.forward(tape, store, x),
            Unit::Block { block, .. } => block.forward(tape, store, x, mode),
            Unit::Computing { layer, .. } => layer.forward(tape, store, x, mode),
            Unit::Head(h) => h.forward(tape, store, x),
        }
    }

    /// Registry entries owned by the unit (anchors excluded).
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Unit::Stem(c) | Unit::Transition { conv: c, .. } => c.param_ids(),
            Unit::Embed(e) => e.param_ids(),
            Unit::Block { block, .. } => block.param_ids(),
            Unit::Computing { layer, .. } => layer.param_ids(),
            Unit::Head(h) => h.param_ids(),
        }
    }

    fn init(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = unit_rng(seed, &self.owner());
        match self {
            Unit::Stem(c) | Unit::Transition { conv: c, .. } => c.init(store, &mut rng),
            Unit::Embed(e) => e.init(store, &mut rng),
            Unit::Block { block, .. } => block.init(store, &mut rng),
            Unit::Computing { layer, .. } => layer.init(store),
            Unit::Head(h) => h.init(store, &mut rng),
        }
    }
}

/// Which part of the model an entry belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    /// Stem, transitions, patch embedding and retained blocks.
    Retained,
    Head,
    Computing,
}

/// A removal position present in the network, as a block or a computing layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Site {
    pub stage: usize,
    pub index: usize,
    /// Position in [`Network::units`].
    pub unit: usize,
}

/// Result of one differentiated forward pass.
#[derive(Clone, Debug)]
pub struct Pass {
    pub loss: f64,
    pub logits: Tensor,
    pub grads: GradMap,
    pub stats: Vec<StatUpdate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub plan: RemovalPlan,
    pub units: Vec<Unit>,
    pub store: ParamStore,
}

/// Builds the network of `spec.method`, initialized from `seed`.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let plan = stage_removal_plan(spec)?;
    let units = assemble(spec, &plan, spec.method)?;
    let mut store = ParamStore::new();
    for u in &units {
        u.init(&mut store, seed);
    }
    Ok(Network {
        spec: spec.clone(),
        seed,
        plan,
        units,
        store,
    })
}

fn assemble(spec: &NetworkSpec, plan: &RemovalPlan, method: Method) -> Result<Vec<Unit>> {
    let mut units = Vec::new();
    let q = spec.kernel;
    match spec.family {
        Family::Vit => {
            let v = spec.vit.expect("validated");
            units.push(Unit::Embed(PatchEmbed::new(
                "embed",
                spec.input[0],
                v.patch,
                spec.tokens(),
                spec.stages[0].width,
            )));
        }
        _ => units.push(Unit::Stem(ConvUnit::new("stem", spec.input[0], spec.stages[0].width, q, 1))),
    }
    for (s, st) in spec.stages.iter().enumerate() {
        if s > 0 {
            let conv = ConvUnit::new(&format!("s{s}.t"), spec.stages[s - 1].width, st.width, q, 2);
            units.push(Unit::Transition { stage: s, conv });
        }
        let bspec = spec.block_spec(s);
        for r in 1..=st.blocks {
            if !plan.is_removed(s, r) {
                units.push(Unit::Block {
                    stage: s,
                    index: r,
                    block: Block::new(bspec, &block_owner(s, r)),
                });
                continue;
            }
            match method {
                Method::E2e => units.push(Unit::Block {
                    stage: s,
                    index: r,
                    block: Block::new(bspec, &block_owner(s, r)),
                }),
                Method::RemoveOnly => {}
                Method::Repl => {
                    if r + 1 > st.blocks || plan.is_removed(s, r - 1) || plan.is_removed(s, r + 1) {
                        return Err(ReplError::Consistency(format!(
                            "removal site s{s}.b{r} lacks retained neighbors"
                        )));
                    }
                    let prev = Block::new(bspec, &block_owner(s, r - 1));
                    let next = Block::new(bspec, &block_owner(s, r + 1));
                    let layer = ComputingLayer::between(&computing_owner(s, r), &prev, &next, &spec.variant)?;
                    units.push(Unit::Computing { stage: s, index: r, layer });
                }
            }
        }
    }
    let last = spec.stages.last().expect("validated").width;
    units.push(Unit::Head(Head::new("head", last, spec.classes)));
    Ok(units)
}

impl Network {
    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.spec.input {
            return Err(ReplError::shape(
                "network_forward",
                "input",
                format!("expected [B, {:?}], got {shape:?}", self.spec.input),
            ));
        }
        Ok(())
    }

    /// Sequential forward through every unit; returns logits `[B, classes]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        self.forward_units(tape, x, 0..self.units.len(), mode)
    }

    /// Forward through `units[range]` only, against the network's store.
    pub fn forward_units(&self, tape: &mut Tape, x: Var, range: Range<usize>, mode: Mode) -> Result<Var> {
        self.units[range]
            .iter()
            .try_fold(x, |h, u| u.forward(tape, &self.store, h, mode))
    }

    /// Values of `units[range]` applied to `x` in eval mode.
    pub fn run_units(&self, x: &Tensor, range: Range<usize>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward_units(&mut tape, xv, range, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }

    /// Logits without gradient bookkeeping. Train mode here uses batch
    /// statistics but leaves the running statistics untouched.
    pub fn logits(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv, mode)?;
        Ok(tape.value(y).clone())
    }

    /// Forward, mean cross-entropy and reverse sweep.
    pub fn pass(&self, x: &Tensor, labels: &[usize], mode: Mode) -> Result<Pass> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv, mode)?;
        let loss = tape.cross_entropy(y, labels)?;
        let grads = tape.backward(loss)?.into_params();
        Ok(Pass {
            loss: tape.value(loss).item(),
            logits: tape.value(y).clone(),
            grads,
            stats: tape.take_stat_updates(),
        })
    }

    pub fn apply_stats(&mut self, updates: Vec<StatUpdate>) -> Result<()> {
        for u in updates {
            self.store.set(&u.mean_id, u.mean)?;
            self.store.set(&u.var_id, u.var)?;
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn computing_layers(&self) -> impl Iterator<Item = &ComputingLayer> {
        self.units.iter().filter_map(|u| match u {
            Unit::Computing { layer, .. } => Some(layer),
            _ => None,
        })
    }

    /// Removal positions that are present as units, in execution order.
    pub fn sites(&self) -> Vec<Site> {
        self.units
            .iter()
            .enumerate()
            .filter_map(|(i, u)| match *u {
                Unit::Block { stage, index, .. } | Unit::Computing { stage, index, .. }
                    if self.plan.is_removed(stage, index) =>
                {
                    Some(Site { stage, index, unit: i })
                }
                _ => None,
            })
            .collect()
    }

    /// Class of every registry entry owned by a unit.
    pub fn classify(&self) -> BTreeMap<ParamId, ParamClass> {
        let mut out = BTreeMap::new();
        for u in &self.units {
            let class = match u {
                Unit::Head(_) => ParamClass::Head,
                Unit::Computing { .. } => ParamClass::Computing,
                _ => ParamClass::Retained,
            };
            for id in u.param_ids() {
                out.insert(id, class);
            }
        }
        out
    }

    /// Copy whose computing layers read frozen duplicates of their anchors
    /// (`frozen.<id>`) instead of the live retained weights.
    pub fn frozen_twin(&self) -> Result<Network> {
        let mut twin = self.clone();
        let frozen = |id: &ParamId| ParamId::parse(&format!("frozen.{id}"));
        for u in &mut twin.units {
            if let Unit::Computing { layer, .. } = u {
                for a in layer.anchors() {
                    let e = self.store.entry(&a).ok_or_else(|| ReplError::UnknownParam(a.to_string()))?;
                    twin.store.insert_frozen(frozen(&a), e.value.clone(), e.kind);
                }
                layer.map_anchors(frozen);
            }
        }
        Ok(twin)
    }

    /// Full-depth network with this network's values for every shared entry
    /// and seed-initialized weights for blocks absent here.
    pub fn e2e_reference(&self) -> Result<Network> {
        let mut e2e = build_network(&self.spec.with_method(Method::E2e), self.seed)?;
        let ids: Vec<ParamId> = e2e.store.iter().map(|(id, _)| id.clone()).collect();
        for id in ids {
            if let Some(e) = self.store.entry(&id) {
                e2e.store.set(&id, e.value.clone())?;
            }
        }
        Ok(e2e)
    }

    /// Chain with the first `j` sites taken from `repl` and the rest from
    /// `reference`; both must share the plan and unit layout.
    pub fn hybrid(reference: &Network, repl: &Network, j: usize) -> Result<Network> {
        if reference.plan != repl.plan || reference.units.len() != repl.units.len() {
            return Err(ReplError::invalid("hybrid", "networks have mismatched plans"));
        }
        let mut net = reference.clone();
        for site in repl.sites().into_iter().take(j) {
            net.units[site.unit] = repl.units[site.unit].clone();
            for id in repl.units[site.unit].param_ids() {
                let e = repl.store.entry(&id).expect("unit ids are registered");
                if e.trainable {
                    net.store.insert(id, e.value.clone(), e.kind);
                } else {
                    net.store.insert_frozen(id, e.value.clone(), e.kind);
                }
            }
        }
        Ok(net)
    }

    /// Overwrites values from `tensors`; the id set must match exactly.
    pub fn load_values(&mut self, tensors: BTreeMap<ParamId, Tensor>) -> Result<()> {
        let have: BTreeSet<&ParamId> = self.store.iter().map(|(id, _)| id).collect();
        let got: BTreeSet<&ParamId> = tensors.keys().collect();
        if have != got {
            let missing: Vec<String> = have.difference(&got).map(|i| i.to_string()).collect();
            let extra: Vec<String> = got.difference(&have).map(|i| i.to_string()).collect();
            return Err(ReplError::Checkpoint(format!(
                "parameter set mismatch: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (id, t) in tensors {
            self.store.set(&id, t)?;
        }
        Ok(())
    }

    /// Registry-walk count of trainable scalars by [`ParamKind`].
    pub fn count_by_kind(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (_, e) in self.store.trainable() {
            let k = match e.kind {
                ParamKind::Weight => "weight",
                ParamKind::Bias => "bias",
                ParamKind::NormAffine => "norm_affine",
                ParamKind::Coeff => "coeff",
                ParamKind::Buffer => "buffer",
            };
            *out.entry(k.to_string()).or_insert(0) += e.value.len();
        }
        out
    }
}
