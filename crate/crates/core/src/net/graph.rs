//! Layer DAG with forward, tape-based backward, precision tags, and
//! BN-folding freeze.
//!
//! Nodes are stored in topological order (inputs always point to
//! earlier indices, enforced at construction), parameters live in a
//! name-keyed store, and the last node is the graph output. Inference
//! honors per-node precision tags by projecting node outputs onto the
//! binary16 grid (F16) or through the affine int8 grid (I8); training
//! ignores the tags and optionally applies the AMP cast and QAT fake
//! quantization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bench::alloc::AllocTracker;
use crate::error::{EmberError, Result};
use crate::half::round_to_f16;
use crate::quant::{
    asymmetric_minmax_per_tensor, dequantize, quantize, symmetric_minmax_per_channel,
    QuantParams, SaturationCounter,
};
use crate::tensor::{DType, Shape, Tensor};

use super::layers::{
    activation_backward, activation_forward, add_forward, batchnorm_backward,
    batchnorm_eval_forward, batchnorm_train_forward, bilinear_upsample_backward,
    bilinear_upsample_forward, concat_backward, concat_forward, conv2d_backward, conv2d_forward,
    global_avg_pool_backward, global_avg_pool_forward, ActKind, BnCache, ConvSpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Placeholder consuming the caller-provided input tensor `slot`.
    Input { slot: usize },
    Conv2d(ConvSpec),
    BatchNorm { ch: usize, eps: f32, momentum: f32 },
    Activation { kind: ActKind },
    BilinearUpsample { out_h: usize, out_w: usize },
    GlobalAvgPool,
    Concat,
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    /// Storage/activation precision of this node's output; F32 until a
    /// conversion pass assigns something lower.
    pub precision: DType,
    /// Affine grid for I8 activation casts, set by the conversion pass.
    pub act_qparams: Option<QuantParams>,
}

/// Name-keyed parameter store. BTreeMap keeps iteration (and therefore
/// serialization and hashing) deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore(pub BTreeMap<String, Tensor>);

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| EmberError::UnknownLayer(format!("parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.0
            .get_mut(name)
            .ok_or_else(|| EmberError::UnknownLayer(format!("parameter `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    /// Serialized payload bytes of every parameter.
    pub fn payload_bytes(&self) -> usize {
        self.0.values().map(|t| t.payload_bytes()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    pub nodes: Vec<Node>,
    index: BTreeMap<String, usize>,
    pub params: ParamStore,
    /// Named intermediate feature maps exposed by the backbone.
    pub taps: Vec<String>,
    pub frozen: bool,
}

/// Incrementally builds a graph; node inputs must already exist, which
/// makes the node list topologically ordered by construction.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    index: BTreeMap<String, usize>,
    taps: Vec<String>,
}

impl GraphBuilder {
    pub fn new() -> GraphBuilder {
        GraphBuilder::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(EmberError::InvalidConfig(format!(
                "duplicate layer name `{name}`"
            )));
        }
        let mut idx = Vec::with_capacity(inputs.len());
        for i in inputs {
            idx.push(
                *self
                    .index
                    .get(*i)
                    .ok_or_else(|| EmberError::UnknownLayer((*i).to_string()))?,
            );
        }
        match &kind {
            LayerKind::Input { .. } if !idx.is_empty() => {
                return Err(EmberError::InvalidConfig("input node takes no inputs".into()))
            }
            LayerKind::Add if idx.len() != 2 => {
                return Err(EmberError::InvalidConfig("add takes exactly two inputs".into()))
            }
            LayerKind::Concat if idx.len() < 2 => {
                return Err(EmberError::InvalidConfig("concat takes two or more inputs".into()))
            }
            LayerKind::Conv2d(spec) => spec.validate()?,
            _ => {}
        }
        if !matches!(kind, LayerKind::Input { .. }) && idx.is_empty() {
            return Err(EmberError::InvalidConfig(format!(
                "layer `{name}` has no inputs"
            )));
        }
        self.index.insert(name.clone(), self.nodes.len());
        self.nodes.push(Node {
            name,
            kind,
            inputs: idx,
            precision: DType::F32,
            act_qparams: None,
        });
        Ok(())
    }

    pub fn tap(&mut self, name: &str) -> Result<()> {
        if !self.index.contains_key(name) {
            return Err(EmberError::TapMissing(name.to_string()));
        }
        self.taps.push(name.to_string());
        Ok(())
    }

    pub fn finish(self, params: ParamStore) -> NetworkGraph {
        NetworkGraph {
            nodes: self.nodes,
            index: self.index,
            params,
            taps: self.taps,
            frozen: false,
        }
    }
}

/// Per-node cache recorded by the traced forward pass.
enum NodeCache {
    None,
    Conv {
        /// Input and weight actually consumed (after any AMP cast or
        /// weight fake-quant), so the backward differentiates the
        /// network that really ran.
        input: Vec<f32>,
        ishape: Shape,
        weight: Vec<f32>,
    },
    Bn(BnCache),
    Act {
        input: Vec<f32>,
    },
}

/// Training-pass record: post-cast node outputs plus whatever each
/// node's backward needs.
pub struct Tape {
    pub outputs: Vec<Vec<f32>>,
    pub shapes: Vec<Shape>,
    caches: Vec<NodeCache>,
    /// Straight-through mask of the output fake-quant, where applied.
    fq_masks: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn output(&self) -> (&[f32], Shape) {
        (
            self.outputs.last().expect("tape of empty graph"),
            *self.shapes.last().expect("tape of empty graph"),
        )
    }
}

/// Gradients keyed by parameter name, plus the gradient reaching each
/// graph input slot.
pub struct Gradients {
    pub by_param: BTreeMap<String, Vec<f32>>,
    pub inputs: Vec<Option<Vec<f32>>>,
}

/// Running activation ranges for QAT, EMA-updated each traced pass.
#[derive(Clone, Debug, Default)]
pub struct QatObservers {
    pub ranges: BTreeMap<String, (f32, f32)>,
    pub decay: f32,
    /// When false the observers only record; fake-quant is not applied.
    pub active: bool,
}

impl QatObservers {
    pub fn new(decay: f32) -> QatObservers {
        QatObservers {
            ranges: BTreeMap::new(),
            decay,
            active: false,
        }
    }

    fn observe(&mut self, name: &str, data: &[f32]) {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            return;
        }
        match self.ranges.get_mut(name) {
            Some((min, max)) => {
                *min = self.decay * *min + (1.0 - self.decay) * lo;
                *max = self.decay * *max + (1.0 - self.decay) * hi;
            }
            None => {
                self.ranges.insert(name.to_string(), (lo, hi));
            }
        }
    }

    fn params_for(&self, name: &str) -> Option<QuantParams> {
        let &(min, max) = self.ranges.get(name)?;
        Some(asymmetric_minmax_per_tensor(min.min(0.0), max.max(0.0)))
    }
}

pub struct TraceOptions<'a> {
    /// Round-trip conv inputs and weights through binary16 before the
    /// compute, the AMP cast policy.
    pub amp: bool,
    pub qat: Option<&'a mut QatObservers>,
}

impl NetworkGraph {
    pub fn node_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| EmberError::UnknownLayer(name.to_string()))
    }

    pub fn node(&self, name: &str) -> Result<&Node> {
        Ok(&self.nodes[self.node_index(name)?])
    }

    pub fn output_name(&self) -> &str {
        &self.nodes.last().expect("empty graph").name
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.name.as_str())
    }

    /// Number of distinct input slots the graph consumes.
    pub fn input_slots(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n.kind {
                LayerKind::Input { slot } => Some(slot + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// Shape-infers every node for the given input-slot shapes. This is
    /// the validation gate: a graph that passes produces no shape
    /// errors during forward.
    pub fn infer_shapes(&self, inputs: &[Shape]) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let shape = match &node.kind {
                LayerKind::Input { slot } => *inputs.get(*slot).ok_or_else(|| {
                    EmberError::ShapeMismatch(format!("missing input slot {slot}"))
                })?,
                LayerKind::Conv2d(spec) => {
                    let si = shapes[node.inputs[0]];
                    if si.c != spec.in_ch {
                        return Err(EmberError::ShapeMismatch(format!(
                            "`{}` expects {} channels, got {si}",
                            node.name, spec.in_ch
                        )));
                    }
                    spec.out_shape(si)
                }
                LayerKind::BatchNorm { ch, .. } => {
                    let si = shapes[node.inputs[0]];
                    if si.c != *ch {
                        return Err(EmberError::ShapeMismatch(format!(
                            "`{}` normalizes {ch} channels, got {si}",
                            node.name
                        )));
                    }
                    si
                }
                LayerKind::Activation { .. } => shapes[node.inputs[0]],
                LayerKind::BilinearUpsample { out_h, out_w } => {
                    let si = shapes[node.inputs[0]];
                    Shape::new(si.n, si.c, *out_h, *out_w)
                }
                LayerKind::GlobalAvgPool => {
                    let si = shapes[node.inputs[0]];
                    Shape::new(si.n, si.c, 1, 1)
                }
                LayerKind::Concat => {
                    let first = shapes[node.inputs[0]];
                    let mut c = 0;
                    for &i in &node.inputs {
                        let s = shapes[i];
                        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                            return Err(EmberError::ShapeMismatch(format!(
                                "`{}` concat of {s} with {first}",
                                node.name
                            )));
                        }
                        c += s.c;
                    }
                    Shape::new(first.n, c, first.h, first.w)
                }
                LayerKind::Add => {
                    let a = shapes[node.inputs[0]];
                    let b = shapes[node.inputs[1]];
                    if a != b {
                        return Err(EmberError::ShapeMismatch(format!(
                            "`{}` adds {a} and {b}",
                            node.name
                        )));
                    }
                    a
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Full validation: wiring, taps, shape inference, and parameter
    /// presence/shape for every parametered node.
    pub fn validate(&self, inputs: &[Shape]) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.inputs.iter().any(|&j| j >= i) {
                return Err(EmberError::InvalidConfig(format!(
                    "`{}` consumes a later node; wiring must be acyclic",
                    node.name
                )));
            }
        }
        for tap in &self.taps {
            if !self.index.contains_key(tap) {
                return Err(EmberError::TapMissing(tap.clone()));
            }
        }
        let shapes = self.infer_shapes(inputs)?;
        for (node, shape) in self.nodes.iter().zip(&shapes) {
            match &node.kind {
                LayerKind::Conv2d(spec) => {
                    let w = self.params.get(&format!("{}.weight", node.name))?;
                    if w.len() != spec.weight_len() {
                        return Err(EmberError::ShapeMismatch(format!(
                            "`{}` weight holds {} values, expected {}",
                            node.name,
                            w.len(),
                            spec.weight_len()
                        )));
                    }
                    if spec.has_bias {
                        let b = self.params.get(&format!("{}.bias", node.name))?;
                        if b.len() != spec.out_ch {
                            return Err(EmberError::ShapeMismatch(format!(
                                "`{}` bias holds {} values, expected {}",
                                node.name,
                                b.len(),
                                spec.out_ch
                            )));
                        }
                    }
                }
                LayerKind::BatchNorm { ch, .. } => {
                    for suffix in ["gamma", "beta", "running_mean", "running_var"] {
                        let p = self.params.get(&format!("{}.{suffix}", node.name))?;
                        if p.len() != *ch {
                            return Err(EmberError::ShapeMismatch(format!(
                                "`{}.{suffix}` holds {} values, expected {ch}",
                                node.name,
                                p.len()
                            )));
                        }
                    }
                }
                LayerKind::Activation { kind: ActKind::PRelu } => {
                    let s = self.params.get(&format!("{}.slope", node.name))?;
                    if s.len() != shape.c {
                        return Err(EmberError::ShapeMismatch(format!(
                            "`{}` slope holds {} values, expected {}",
                            node.name,
                            s.len(),
                            shape.c
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn conv_weight(&self, name: &str) -> Result<(Vec<f32>, Option<Vec<f32>>)> {
        let w = self.params.get(&format!("{name}.weight"))?.data_f32().into_owned();
        let b = if self.params.contains(&format!("{name}.bias")) {
            Some(self.params.get(&format!("{name}.bias"))?.data_f32().into_owned())
        } else {
            None
        };
        Ok((w, b))
    }

    fn prelu_slopes(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.params.get(&format!("{name}.slope"))?.data_f32().into_owned())
    }

    /// Inference forward honoring precision tags; BN uses running
    /// statistics. Returns the last node's output.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_multi(&[input])
    }

    pub fn forward_multi(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (outs, shapes) = self.eval_nodes(inputs, None)?;
        let shape = *shapes.last().expect("empty graph");
        Tensor::from_vec(shape, outs.into_iter().last().unwrap())
    }

    /// Inference forward returning every node's output, in node order.
    /// Calibration and inspection both hang off this.
    pub fn forward_all(&self, inputs: &[&Tensor]) -> Result<(Vec<Vec<f32>>, Vec<Shape>)> {
        self.eval_nodes(inputs, None)
    }

    /// Inference forward with allocation instrumentation: every node
    /// output is reported to the tracker when materialized and released
    /// when its last consumer has run (`retain_all` keeps everything
    /// until the end of the pass, the tape-retention pattern of a
    /// training step).
    pub fn forward_profiled(
        &self,
        input: &Tensor,
        tracker: &mut AllocTracker,
        retain_all: bool,
    ) -> Result<Tensor> {
        let mut refcount = vec![0usize; self.nodes.len()];
        for node in &self.nodes {
            for &i in &node.inputs {
                refcount[i] += 1;
            }
        }
        let (outs, shapes) = self.eval_nodes(&[input], Some((tracker, &mut refcount, retain_all)))?;
        let shape = *shapes.last().expect("empty graph");
        Tensor::from_vec(shape, outs.into_iter().last().unwrap())
    }

    #[allow(clippy::type_complexity)]
    fn eval_nodes(
        &self,
        inputs: &[&Tensor],
        mut profile: Option<(&mut AllocTracker, &mut Vec<usize>, bool)>,
    ) -> Result<(Vec<Vec<f32>>, Vec<Shape>)> {
        let input_shapes: Vec<Shape> = inputs.iter().map(|t| t.shape()).collect();
        let shapes = self.infer_shapes(&input_shapes)?;
        let mut outs: Vec<Vec<f32>> = Vec::with_capacity(self.nodes.len());
        let mut handles: Vec<Option<u64>> = vec![None; self.nodes.len()];

        for (i, node) in self.nodes.iter().enumerate() {
            let mut out = match &node.kind {
                LayerKind::Input { slot } => inputs[*slot].data_f32().into_owned(),
                LayerKind::Conv2d(spec) => {
                    let (w, b) = self.conv_weight(&node.name)?;
                    let si = shapes[node.inputs[0]];
                    conv2d_forward(&outs[node.inputs[0]], si, &w, b.as_deref(), spec)?.0
                }
                LayerKind::BatchNorm { ch: _, eps, momentum: _ } => {
                    let g = self.params.get(&format!("{}.gamma", node.name))?.data_f32();
                    let b = self.params.get(&format!("{}.beta", node.name))?.data_f32();
                    let rm = self
                        .params
                        .get(&format!("{}.running_mean", node.name))?
                        .data_f32();
                    let rv = self
                        .params
                        .get(&format!("{}.running_var", node.name))?
                        .data_f32();
                    let si = shapes[node.inputs[0]];
                    batchnorm_eval_forward(&outs[node.inputs[0]], si, &g, &b, &rm, &rv, *eps)
                }
                LayerKind::Activation { kind } => {
                    let si = shapes[node.inputs[0]];
                    let slopes = if matches!(kind, ActKind::PRelu) {
                        Some(self.prelu_slopes(&node.name)?)
                    } else {
                        None
                    };
                    activation_forward(&outs[node.inputs[0]], si, *kind, slopes.as_deref())?
                }
                LayerKind::BilinearUpsample { out_h, out_w } => {
                    let si = shapes[node.inputs[0]];
                    bilinear_upsample_forward(&outs[node.inputs[0]], si, *out_h, *out_w).0
                }
                LayerKind::GlobalAvgPool => {
                    let si = shapes[node.inputs[0]];
                    global_avg_pool_forward(&outs[node.inputs[0]], si).0
                }
                LayerKind::Concat => {
                    let parts: Vec<(&[f32], Shape)> = node
                        .inputs
                        .iter()
                        .map(|&j| (outs[j].as_slice(), shapes[j]))
                        .collect();
                    concat_forward(&parts)?.0
                }
                LayerKind::Add => add_forward(
                    &outs[node.inputs[0]],
                    &outs[node.inputs[1]],
                    shapes[node.inputs[0]],
                    shapes[node.inputs[1]],
                )?,
            };

            // precision boundary at the node output
            match node.precision {
                DType::F32 => {}
                DType::F16 => {
                    for v in &mut out {
                        *v = round_to_f16(*v);
                    }
                }
                DType::I8 => {
                    let p = node.act_qparams.as_ref().ok_or_else(|| {
                        EmberError::InvalidQuantParams(format!(
                            "`{}` tagged I8 without activation params",
                            node.name
                        ))
                    })?;
                    let mut scratch = SaturationCounter::default();
                    for v in &mut out {
                        *v = dequantize(quantize(*v, p, 0, &mut scratch), p, 0);
                    }
                }
            }

            if let Some((tracker, refcount, retain_all)) = profile.as_mut() {
                if !matches!(node.kind, LayerKind::Input { .. }) {
                    handles[i] = Some(tracker.on_alloc((out.len() * 4) as u64, &node.name));
                }
                if !**retain_all {
                    for &j in &node.inputs {
                        refcount[j] -= 1;
                        if refcount[j] == 0 {
                            if let Some(h) = handles[j].take() {
                                tracker.on_free(h)?;
                            }
                        }
                    }
                }
            }
            outs.push(out);
        }

        if let Some((tracker, _, _)) = profile.as_mut() {
            // end of pass: the arena releases whatever is still live
            for h in handles.iter_mut().filter_map(|h| h.take()) {
                tracker.on_free(h)?;
            }
        }
        Ok((outs, shapes))
    }

    /// Whether the node's output is a quantization point for QAT: the
    /// boundaries that exist after BN folding at inference.
    fn qat_point(&self, idx: usize) -> bool {
        match &self.nodes[idx].kind {
            LayerKind::Activation { .. } | LayerKind::BatchNorm { .. } | LayerKind::Add => true,
            LayerKind::Conv2d(_) => !self
                .nodes
                .iter()
                .any(|n| n.inputs.contains(&idx) && matches!(n.kind, LayerKind::BatchNorm { .. })),
            _ => false,
        }
    }

    /// Training forward. BN consumes batch statistics and updates its
    /// running estimates; the tape caches the values each backward
    /// needs. With `amp`, conv inputs and weights are round-tripped
    /// through binary16 first; with QAT observers, weights are
    /// fake-quantized per channel and activation boundaries through the
    /// observers' affine grids (straight-through masks recorded).
    pub fn forward_traced(
        &mut self,
        inputs: &[&Tensor],
        opts: &mut TraceOptions<'_>,
    ) -> Result<Tape> {
        let input_shapes: Vec<Shape> = inputs.iter().map(|t| t.shape()).collect();
        let shapes = self.infer_shapes(&input_shapes)?;
        let mut outs: Vec<Vec<f32>> = Vec::with_capacity(self.nodes.len());
        let mut caches: Vec<NodeCache> = Vec::with_capacity(self.nodes.len());
        let mut fq_masks: Vec<Option<Vec<f32>>> = Vec::with_capacity(self.nodes.len());

        for (i, node) in self.nodes.iter().enumerate() {
            let (mut out, cache) = match &node.kind {
                LayerKind::Input { slot } => {
                    (inputs[*slot].data_f32().into_owned(), NodeCache::None)
                }
                LayerKind::Conv2d(spec) => {
                    let (mut w, b) = self.conv_weight(&node.name)?;
                    if let Some(q) = opts.qat.as_deref() {
                        if q.active {
                            let p = symmetric_minmax_per_channel(&w, spec.out_ch);
                            let per_ch = w.len() / spec.out_ch;
                            let mut scratch = SaturationCounter::default();
                            for (k, v) in w.iter_mut().enumerate() {
                                let ch = k / per_ch;
                                *v = dequantize(quantize(*v, &p, ch, &mut scratch), &p, ch);
                            }
                        }
                    }
                    let si = shapes[node.inputs[0]];
                    let mut x = outs[node.inputs[0]].clone();
                    if opts.amp {
                        for v in &mut x {
                            *v = round_to_f16(*v);
                        }
                        for v in &mut w {
                            *v = round_to_f16(*v);
                        }
                    }
                    let out = conv2d_forward(&x, si, &w, b.as_deref(), spec)?.0;
                    (
                        out,
                        NodeCache::Conv {
                            input: x,
                            ishape: si,
                            weight: w,
                        },
                    )
                }
                LayerKind::BatchNorm { ch: _, eps, momentum } => {
                    let si = shapes[node.inputs[0]];
                    let g = self
                        .params
                        .get(&format!("{}.gamma", node.name))?
                        .data_f32()
                        .into_owned();
                    let b = self
                        .params
                        .get(&format!("{}.beta", node.name))?
                        .data_f32()
                        .into_owned();
                    let mut rm = self
                        .params
                        .get(&format!("{}.running_mean", node.name))?
                        .data_f32()
                        .into_owned();
                    let mut rv = self
                        .params
                        .get(&format!("{}.running_var", node.name))?
                        .data_f32()
                        .into_owned();
                    let (out, cache) = batchnorm_train_forward(
                        &outs[node.inputs[0]],
                        si,
                        &g,
                        &b,
                        &mut rm,
                        &mut rv,
                        *eps,
                        *momentum,
                    );
                    let rm_t = Tensor::from_vec(Shape::new(rm.len(), 1, 1, 1), rm)?;
                    let rv_t = Tensor::from_vec(Shape::new(rv.len(), 1, 1, 1), rv)?;
                    self.params.insert(format!("{}.running_mean", node.name), rm_t);
                    self.params.insert(format!("{}.running_var", node.name), rv_t);
                    (out, NodeCache::Bn(cache))
                }
                LayerKind::Activation { kind } => {
                    let si = shapes[node.inputs[0]];
                    let slopes = if matches!(kind, ActKind::PRelu) {
                        Some(self.prelu_slopes(&node.name)?)
                    } else {
                        None
                    };
                    let x = outs[node.inputs[0]].clone();
                    let out = activation_forward(&x, si, *kind, slopes.as_deref())?;
                    (out, NodeCache::Act { input: x })
                }
                LayerKind::BilinearUpsample { out_h, out_w } => {
                    let si = shapes[node.inputs[0]];
                    (
                        bilinear_upsample_forward(&outs[node.inputs[0]], si, *out_h, *out_w).0,
                        NodeCache::None,
                    )
                }
                LayerKind::GlobalAvgPool => {
                    let si = shapes[node.inputs[0]];
                    (
                        global_avg_pool_forward(&outs[node.inputs[0]], si).0,
                        NodeCache::None,
                    )
                }
                LayerKind::Concat => {
                    let parts: Vec<(&[f32], Shape)> = node
                        .inputs
                        .iter()
                        .map(|&j| (outs[j].as_slice(), shapes[j]))
                        .collect();
                    (concat_forward(&parts)?.0, NodeCache::None)
                }
                LayerKind::Add => (
                    add_forward(
                        &outs[node.inputs[0]],
                        &outs[node.inputs[1]],
                        shapes[node.inputs[0]],
                        shapes[node.inputs[1]],
                    )?,
                    NodeCache::None,
                ),
            };

            let mut mask = None;
            if let Some(q) = opts.qat.as_deref_mut() {
                if self.qat_point(i) {
                    q.observe(&node.name, &out);
                    if q.active {
                        if let Some(p) = q.params_for(&node.name) {
                            let (lo, hi) = p.clip_range(0);
                            let mut m = vec![0.0f32; out.len()];
                            let mut scratch = SaturationCounter::default();
                            for (v, mk) in out.iter_mut().zip(&mut m) {
                                *mk = if *v >= lo && *v <= hi { 1.0 } else { 0.0 };
                                *v = dequantize(quantize(*v, &p, 0, &mut scratch), &p, 0);
                            }
                            mask = Some(m);
                        }
                    }
                }
            }

            outs.push(out);
            caches.push(cache);
            fq_masks.push(mask);
        }
        Ok(Tape {
            outputs: outs,
            shapes,
            caches,
            fq_masks,
        })
    }

    /// Reverse pass over a tape. `grad_output` is the gradient at the
    /// last node's output.
    pub fn backward(&self, tape: &Tape, grad_output: &[f32]) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        let last = n - 1;
        if grad_output.len() != tape.outputs[last].len() {
            return Err(EmberError::ShapeMismatch(format!(
                "output gradient holds {} values, expected {}",
                grad_output.len(),
                tape.outputs[last].len()
            )));
        }
        grads[last] = Some(grad_output.to_vec());

        let mut by_param: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut input_grads: Vec<Option<Vec<f32>>> = vec![None; self.input_slots()];

        let mut accumulate = |store: &mut Vec<Option<Vec<f32>>>, idx: usize, g: Vec<f32>| {
            match &mut store[idx] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        };

        for i in (0..n).rev() {
            let mut g = match grads[i].take() {
                Some(g) => g,
                None => continue, // dead branch: nothing consumed this node
            };
            // straight-through estimator of the output fake-quant
            if let Some(mask) = &tape.fq_masks[i] {
                for (v, m) in g.iter_mut().zip(mask) {
                    *v *= m;
                }
            }
            let node = &self.nodes[i];
            match &node.kind {
                LayerKind::Input { slot } => {
                    accumulate(&mut input_grads, *slot, g);
                }
                LayerKind::Conv2d(spec) => {
                    let NodeCache::Conv { input, ishape, weight } = &tape.caches[i] else {
                        unreachable!("conv node without conv cache");
                    };
                    let cg = conv2d_backward(&g, input, *ishape, weight, spec)?;
                    let wkey = format!("{}.weight", node.name);
                    match by_param.get_mut(&wkey) {
                        Some(acc) => acc.iter_mut().zip(&cg.weights).for_each(|(a, b)| *a += b),
                        None => {
                            by_param.insert(wkey, cg.weights);
                        }
                    }
                    if let Some(gb) = cg.bias {
                        let bkey = format!("{}.bias", node.name);
                        match by_param.get_mut(&bkey) {
                            Some(acc) => acc.iter_mut().zip(&gb).for_each(|(a, b)| *a += b),
                            None => {
                                by_param.insert(bkey, gb);
                            }
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], cg.input);
                }
                LayerKind::BatchNorm { .. } => {
                    let NodeCache::Bn(cache) = &tape.caches[i] else {
                        unreachable!("bn node without bn cache");
                    };
                    let gamma = self
                        .params
                        .get(&format!("{}.gamma", node.name))?
                        .data_f32()
                        .into_owned();
                    let si = tape.shapes[node.inputs[0]];
                    let bg = batchnorm_backward(&g, si, &gamma, cache);
                    by_param
                        .entry(format!("{}.gamma", node.name))
                        .and_modify(|acc| acc.iter_mut().zip(&bg.gamma).for_each(|(a, b)| *a += b))
                        .or_insert(bg.gamma);
                    by_param
                        .entry(format!("{}.beta", node.name))
                        .and_modify(|acc| acc.iter_mut().zip(&bg.beta).for_each(|(a, b)| *a += b))
                        .or_insert(bg.beta);
                    accumulate(&mut grads, node.inputs[0], bg.input);
                }
                LayerKind::Activation { kind } => {
                    let NodeCache::Act { input } = &tape.caches[i] else {
                        unreachable!("activation node without cache");
                    };
                    let si = tape.shapes[node.inputs[0]];
                    let slopes = if matches!(kind, ActKind::PRelu) {
                        Some(self.prelu_slopes(&node.name)?)
                    } else {
                        None
                    };
                    let ag = activation_backward(&g, input, si, *kind, slopes.as_deref())?;
                    if let Some(gs) = ag.slopes {
                        by_param
                            .entry(format!("{}.slope", node.name))
                            .and_modify(|acc| acc.iter_mut().zip(&gs).for_each(|(a, b)| *a += b))
                            .or_insert(gs);
                    }
                    accumulate(&mut grads, node.inputs[0], ag.input);
                }
                LayerKind::BilinearUpsample { .. } => {
                    let si = tape.shapes[node.inputs[0]];
                    let gi = bilinear_upsample_backward(&g, tape.shapes[i], si);
                    accumulate(&mut grads, node.inputs[0], gi);
                }
                LayerKind::GlobalAvgPool => {
                    let si = tape.shapes[node.inputs[0]];
                    let gi = global_avg_pool_backward(&g, si);
                    accumulate(&mut grads, node.inputs[0], gi);
                }
                LayerKind::Concat => {
                    let in_shapes: Vec<Shape> =
                        node.inputs.iter().map(|&j| tape.shapes[j]).collect();
                    let parts = concat_backward(&g, tape.shapes[i], &in_shapes);
                    for (&j, part) in node.inputs.iter().zip(parts) {
                        accumulate(&mut grads, j, part);
                    }
                }
                LayerKind::Add => {
                    accumulate(&mut grads, node.inputs[0], g.clone());
                    accumulate(&mut grads, node.inputs[1], g);
                }
            }
        }
        Ok(Gradients {
            by_param,
            inputs: input_grads,
        })
    }

    /// Folds every BatchNorm whose producer is a conv consumed only by
    /// that BatchNorm into the conv's weights and bias, and marks the
    /// graph frozen. Taps and wiring that referenced a folded BN follow
    /// it onto the fused conv.
    pub fn freeze(&self) -> Result<NetworkGraph> {
        let mut consumers = vec![0usize; self.nodes.len()];
        for node in &self.nodes {
            for &i in &node.inputs {
                consumers[i] += 1;
            }
        }

        let mut params = self.params.clone();
        let mut drop = vec![false; self.nodes.len()];
        // old index -> index whose output replaces it
        let mut replace: Vec<usize> = (0..self.nodes.len()).collect();
        let mut fused_bias: BTreeMap<usize, ()> = BTreeMap::new();

        for (i, node) in self.nodes.iter().enumerate() {
            let LayerKind::BatchNorm { ch: _, eps, momentum: _ } = node.kind else {
                continue;
            };
            let src = node.inputs[0];
            let LayerKind::Conv2d(spec) = &self.nodes[src].kind else {
                continue;
            };
            if consumers[src] != 1 {
                continue;
            }
            let conv_name = &self.nodes[src].name;
            let gamma = params.get(&format!("{}.gamma", node.name))?.data_f32().into_owned();
            let beta = params.get(&format!("{}.beta", node.name))?.data_f32().into_owned();
            let mean = params
                .get(&format!("{}.running_mean", node.name))?
                .data_f32()
                .into_owned();
            let var = params
                .get(&format!("{}.running_var", node.name))?
                .data_f32()
                .into_owned();

            let wkey = format!("{conv_name}.weight");
            let w = params.get(&wkey)?;
            let wshape = w.shape();
            let mut wdata = w.data_f32().into_owned();
            let per_ch = wdata.len() / spec.out_ch;
            let bkey = format!("{conv_name}.bias");
            let mut bias = if params.contains(&bkey) {
                params.get(&bkey)?.data_f32().into_owned()
            } else {
                vec![0.0f32; spec.out_ch]
            };
            for oc in 0..spec.out_ch {
                let scale = gamma[oc] / (var[oc] + eps).sqrt();
                for v in &mut wdata[oc * per_ch..(oc + 1) * per_ch] {
                    *v *= scale;
                }
                bias[oc] = (bias[oc] - mean[oc]) * scale + beta[oc];
            }
            params.insert(wkey, Tensor::from_vec(wshape, wdata)?);
            params.insert(
                bkey,
                Tensor::from_vec(Shape::new(spec.out_ch, 1, 1, 1), bias)?,
            );
            fused_bias.insert(src, ());
            for suffix in ["gamma", "beta", "running_mean", "running_var"] {
                params.0.remove(&format!("{}.{suffix}", node.name));
            }
            drop[i] = true;
            replace[i] = src;
        }

        let mut new_index_of = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::new();
        let mut index = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if drop[i] {
                continue;
            }
            let mut node = node.clone();
            if let LayerKind::Conv2d(spec) = &mut node.kind {
                if fused_bias.contains_key(&i) {
                    spec.has_bias = true;
                }
            }
            node.inputs = node
                .inputs
                .iter()
                .map(|&j| new_index_of[replace[j]])
                .collect();
            new_index_of[i] = nodes.len();
            index.insert(node.name.clone(), nodes.len());
            nodes.push(node);
        }

        let taps = self
            .taps
            .iter()
            .map(|t| {
                let old = self.index[t];
                self.nodes[replace[old]].name.clone()
            })
            .collect();

        Ok(NetworkGraph {
            nodes,
            index,
            params,
            taps,
            frozen: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_graph() -> NetworkGraph {
        let mut b = GraphBuilder::new();
        b.add("input", LayerKind::Input { slot: 0 }, &[]).unwrap();
        let spec = ConvSpec {
            in_ch: 1,
            out_ch: 2,
            kernel: 3,
            stride: 1,
            dilation: 1,
            groups: 1,
            has_bias: true,
        };
        b.add("conv", LayerKind::Conv2d(spec), &["input"]).unwrap();
        b.add(
            "bn",
            LayerKind::BatchNorm {
                ch: 2,
                eps: 1e-5,
                momentum: 0.1,
            },
            &["conv"],
        )
        .unwrap();
        b.add(
            "act",
            LayerKind::Activation { kind: ActKind::ReLU },
            &["bn"],
        )
        .unwrap();

        let mut params = ParamStore::default();
        params.insert(
            "conv.weight",
            Tensor::from_vec(
                Shape::new(2, 1, 3, 3),
                (0..18).map(|i| (i as f32 * 0.713).sin() * 0.5).collect(),
            )
            .unwrap(),
        );
        params.insert(
            "conv.bias",
            Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![0.1, -0.2]).unwrap(),
        );
        params.insert(
            "bn.gamma",
            Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![1.3, 0.7]).unwrap(),
        );
        params.insert(
            "bn.beta",
            Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![0.05, -0.1]).unwrap(),
        );
        params.insert(
            "bn.running_mean",
            Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![0.2, -0.3]).unwrap(),
        );
        params.insert(
            "bn.running_var",
            Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![0.9, 1.4]).unwrap(),
        );
        b.finish(params)
    }

    fn sample_input() -> Tensor {
        Tensor::from_vec(
            Shape::new(1, 1, 4, 4),
            (0..16).map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn validates_and_infers_shapes() {
        let g = simple_graph();
        g.validate(&[Shape::new(1, 1, 4, 4)]).unwrap();
        let shapes = g.infer_shapes(&[Shape::new(1, 1, 4, 4)]).unwrap();
        assert_eq!(shapes.last().copied().unwrap(), Shape::new(1, 2, 4, 4));
    }

    #[test]
    fn frozen_graph_matches_eval_forward() {
        let g = simple_graph();
        let x = sample_input();
        let y_eval = g.forward(&x).unwrap();
        let frozen = g.freeze().unwrap();
        assert_eq!(frozen.nodes.len(), g.nodes.len() - 1);
        let y_frozen = frozen.forward(&x).unwrap();
        for (a, b) in y_eval.data_f32().iter().zip(y_frozen.data_f32().iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn traced_backward_matches_finite_differences() {
        let mut g = simple_graph();
        let x = sample_input();
        // scalar objective: weighted sum of outputs
        let proj: Vec<f32> = (0..32).map(|i| ((i * 29 % 13) as f32 - 6.0) / 6.0).collect();

        let mut opts = TraceOptions { amp: false, qat: None };
        let tape = g.forward_traced(&[&x], &mut opts).unwrap();
        let grads = g.backward(&tape, &proj).unwrap();

        let loss = |g: &mut NetworkGraph, x: &Tensor| -> f64 {
            let mut o = TraceOptions { amp: false, qat: None };
            let t = g.forward_traced(&[x], &mut o).unwrap();
            t.output()
                .0
                .iter()
                .zip(&proj)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };

        // spot-check conv weight gradient entries by central differences
        let eps = 1e-3;
        for &k in &[0usize, 5, 11, 17] {
            let orig = g.params.get("conv.weight").unwrap().data_f32()[k];
            let shape = g.params.get("conv.weight").unwrap().shape();
            let mut bump = |v: f32, g: &mut NetworkGraph| {
                let mut d = g.params.get("conv.weight").unwrap().data_f32().into_owned();
                d[k] = v;
                g.params
                    .insert("conv.weight", Tensor::from_vec(shape, d).unwrap());
            };
            bump(orig + eps, &mut g);
            let up = loss(&mut g, &x);
            bump(orig - eps, &mut g);
            let down = loss(&mut g, &x);
            bump(orig, &mut g);
            let fd = (up - down) / (2.0 * eps as f64);
            let an = grads.by_param["conv.weight"][k] as f64;
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-3),
                "weight[{k}]: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn input_gradient_flows() {
        let mut g = simple_graph();
        let x = sample_input();
        let mut opts = TraceOptions { amp: false, qat: None };
        let tape = g.forward_traced(&[&x], &mut opts).unwrap();
        let (out, _) = tape.output();
        let grads = g.backward(&tape, &vec![1.0; out.len()]).unwrap();
        assert!(grads.inputs[0].is_some());
    }

    #[test]
    fn unknown_input_name_is_rejected() {
        let mut b = GraphBuilder::new();
        b.add("input", LayerKind::Input { slot: 0 }, &[]).unwrap();
        assert!(b
            .add("act", LayerKind::Activation { kind: ActKind::ReLU }, &["nope"])
            .is_err());
    }
}
