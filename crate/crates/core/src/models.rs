//! The three reference classifiers and their softmax-averaging ensemble.
//!
//! * Model A: stem conv → inception block → three downsampling residual
//!   blocks → two dense layers → softmax.
//! * Model B: five residual blocks (32/64/128/256/512 filters, blocks 2–5
//!   downsample) → two dense layers → softmax.
//! * Model C: stem conv → 6 dense blocks → transition → 12 dense blocks →
//!   BN → ReLU → global average pool → softmax. No dropout.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{build_dense_block, build_inception, build_residual, build_transition, InceptionFilters};
use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, GraphBuilder, NodeId};
use crate::layers::{ForwardCtx, LayerKind, Mode};
use crate::linalg::Real;
use crate::ops::{self, Padding};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    A,
    B,
    C,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::A, ModelKind::B, ModelKind::C];

    /// Initial learning rate used when none is configured.
    pub fn default_lr0(self) -> f64 {
        match self {
            ModelKind::A | ModelKind::B => 0.0005,
            ModelKind::C => 0.001,
        }
    }

    pub fn file_stem(self) -> &'static str {
        match self {
            ModelKind::A => "model_a",
            ModelKind::B => "model_b",
            ModelKind::C => "model_c",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::A => "A",
            ModelKind::B => "B",
            ModelKind::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(ModelKind::A),
            "B" => Ok(ModelKind::B),
            "C" => Ok(ModelKind::C),
            other => Err(invalid(format!("unknown model {other:?}, expected A, B or C"))),
        }
    }
}

/// Grayscale input geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputSpec {
    pub fn grayscale(height: usize, width: usize) -> Self {
        Self {
            channels: 1,
            height,
            width,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

impl Default for InputSpec {
    fn default() -> Self {
        Self::grayscale(32, 32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelAConfig {
    pub stem_filters: usize,
    pub inception: InceptionFilters,
    pub residual_filters: Vec<usize>,
    pub block_dropout: f64,
    pub dense_units: Vec<usize>,
    pub dense_dropout: f64,
}

impl Default for ModelAConfig {
    fn default() -> Self {
        Self {
            stem_filters: 32,
            inception: InceptionFilters::default(),
            residual_filters: vec![64, 128, 256],
            block_dropout: 0.2,
            dense_units: vec![1024, 512],
            dense_dropout: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBConfig {
    /// One residual block per entry; every block after the first downsamples.
    pub residual_filters: Vec<usize>,
    pub block_dropout: f64,
    pub dense_units: Vec<usize>,
    pub dense_dropout: f64,
}

impl Default for ModelBConfig {
    fn default() -> Self {
        Self {
            residual_filters: vec![32, 64, 128, 256, 512],
            block_dropout: 0.1,
            dense_units: vec![1024, 512],
            dense_dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCConfig {
    pub stem_filters: usize,
    pub growth_rate: usize,
    pub first_stage_blocks: usize,
    pub compression: f64,
    pub second_stage_blocks: usize,
}

impl Default for ModelCConfig {
    fn default() -> Self {
        Self {
            stem_filters: 64,
            growth_rate: 32,
            first_stage_blocks: 6,
            compression: 0.5,
            second_stage_blocks: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model")]
pub enum Architecture {
    A(ModelAConfig),
    B(ModelBConfig),
    C(ModelCConfig),
}

impl Architecture {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::A => Architecture::A(ModelAConfig::default()),
            ModelKind::B => Architecture::B(ModelBConfig::default()),
            ModelKind::C => Architecture::C(ModelCConfig::default()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Architecture::A(_) => ModelKind::A,
            Architecture::B(_) => ModelKind::B,
            Architecture::C(_) => ModelKind::C,
        }
    }

    /// Number of 2× spatial reductions the architecture applies.
    pub fn downsamplings(&self) -> usize {
        match self {
            Architecture::A(c) => c.residual_filters.len(),
            Architecture::B(c) => c.residual_filters.len().saturating_sub(1),
            Architecture::C(_) => 1,
        }
    }
}

/// Everything needed to rebuild a model's graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub classes: usize,
    pub input: InputSpec,
    pub arch: Architecture,
}

impl ArchSpec {
    pub fn new(kind: ModelKind, classes: usize, input: InputSpec) -> Self {
        Self {
            classes,
            input,
            arch: Architecture::default_for(kind),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind()
    }

    /// Checks class count and that the input survives every downsampling.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input.channels == 0 {
            return Err(invalid("input needs at least one channel"));
        }
        let factor = 1usize << self.arch.downsamplings();
        if self.input.height < factor || self.input.width < factor {
            return Err(shape_err(format!(
                "model {} downsamples {}x; input {}x{} is too small",
                self.kind(),
                factor,
                self.input.height,
                self.input.width
            )));
        }
        Ok(())
    }
}

/// A classifier graph whose output node produces logits; the softmax is
/// applied by [`ModelGraph::predict_proba`] and by the training loss.
#[derive(Clone, Debug)]
pub struct ModelGraph<T> {
    spec: ArchSpec,
    graph: Graph<T>,
}

impl<T: Real> ModelGraph<T> {
    /// Builds and initializes a model; the same `seed` gives identical parameters.
    pub fn build(spec: ArchSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with_rng(spec, &mut rng)
    }

    pub fn build_with_rng<R: RngCore + ?Sized>(spec: ArchSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let classes = spec.classes;
        let graph = match &spec.arch {
            Architecture::A(c) => Graph::build(&spec.input.shape(), rng, |b, x| model_a_body(b, x, c, classes))?,
            Architecture::B(c) => Graph::build(&spec.input.shape(), rng, |b, x| model_b_body(b, x, c, classes))?,
            Architecture::C(c) => Graph::build(&spec.input.shape(), rng, |b, x| model_c_body(b, x, c, classes))?,
        };
        Ok(Self { spec, graph })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    pub fn dropout_count(&self) -> usize {
        self.graph
            .layers()
            .filter(|l| matches!(l.kind, LayerKind::Dropout { .. }))
            .count()
    }

    /// Training-mode forward: returns the logits and folds batch statistics
    /// into the running averages.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, x: Var, rng: &mut dyn RngCore) -> Result<Var> {
        let mut ctx = ForwardCtx { mode: Mode::Train, rng };
        let (logits, stats) = self.graph.forward(tape, x, &mut ctx)?;
        self.graph.apply_batch_stats(&stats);
        Ok(logits)
    }

    /// Inference-mode forward returning logits.
    pub fn forward_infer(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        // inference never draws from the rng; any seed will do
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx {
            mode: Mode::Infer,
            rng: &mut rng,
        };
        Ok(self.graph.forward(tape, x, &mut ctx)?.0)
    }

    /// Class probabilities `[B, K]` for a batch `[B, C, H, W]`, inference mode.
    pub fn predict_proba(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let logits = self.forward_infer(&mut tape, x)?;
        ops::softmax(tape.value(logits)?)
    }
}

pub fn build_model_a<T: Real>(classes: usize, input: InputSpec, seed: u64) -> Result<ModelGraph<T>> {
    ModelGraph::build(ArchSpec::new(ModelKind::A, classes, input), seed)
}

pub fn build_model_b<T: Real>(classes: usize, input: InputSpec, seed: u64) -> Result<ModelGraph<T>> {
    ModelGraph::build(ArchSpec::new(ModelKind::B, classes, input), seed)
}

pub fn build_model_c<T: Real>(classes: usize, input: InputSpec, seed: u64) -> Result<ModelGraph<T>> {
    ModelGraph::build(ArchSpec::new(ModelKind::C, classes, input), seed)
}

fn classifier_head<T: Real, R: RngCore + ?Sized>(
    b: &mut GraphBuilder<'_, T, R>,
    features: NodeId,
    units: &[usize],
    dropout: f64,
    classes: usize,
) -> Result<NodeId> {
    let mut h = b.layer("flatten", LayerKind::Flatten, features)?;
    for (i, &u) in units.iter().enumerate() {
        let name = format!("fc{}", i + 1);
        h = b.dense(name.clone(), h, u)?;
        h = b.relu(format!("{name}.relu"), h)?;
        if dropout > 0.0 {
            h = b.dropout(format!("{name}.dropout"), h, dropout)?;
        }
    }
    b.dense("logits", h, classes)
}

fn model_a_body<T: Real, R: RngCore + ?Sized>(
    b: &mut GraphBuilder<'_, T, R>,
    x: NodeId,
    c: &ModelAConfig,
    classes: usize,
) -> Result<NodeId> {
    let mut h = b.conv_bn_relu("stem", x, c.stem_filters, 3)?;
    h = build_inception(b, h, "inception", &c.inception)?;
    for (i, &f) in c.residual_filters.iter().enumerate() {
        h = build_residual(b, h, &format!("res{}", i + 1), f, c.block_dropout, true)?;
    }
    classifier_head(b, h, &c.dense_units, c.dense_dropout, classes)
}

fn model_b_body<T: Real, R: RngCore + ?Sized>(
    b: &mut GraphBuilder<'_, T, R>,
    x: NodeId,
    c: &ModelBConfig,
    classes: usize,
) -> Result<NodeId> {
    if c.residual_filters.is_empty() {
        return Err(invalid("model B needs at least one residual block"));
    }
    let mut h = x;
    for (i, &f) in c.residual_filters.iter().enumerate() {
        h = build_residual(b, h, &format!("res{}", i + 1), f, c.block_dropout, i > 0)?;
    }
    classifier_head(b, h, &c.dense_units, c.dense_dropout, classes)
}

fn model_c_body<T: Real, R: RngCore + ?Sized>(
    b: &mut GraphBuilder<'_, T, R>,
    x: NodeId,
    c: &ModelCConfig,
    classes: usize,
) -> Result<NodeId> {
    let mut h = b.conv("stem.conv", x, c.stem_filters, 3, 1, Padding::Same, false)?;
    for i in 1..=c.first_stage_blocks {
        h = build_dense_block(b, h, &format!("dense1_{i}"), c.growth_rate)?;
    }
    h = build_transition(b, h, "transition", c.compression)?;
    for i in 1..=c.second_stage_blocks {
        h = build_dense_block(b, h, &format!("dense2_{i}"), c.growth_rate)?;
    }
    let n = b.batch_norm("final.bn", h)?;
    let r = b.relu("final.relu", n)?;
    let g = b.layer("gap", LayerKind::GlobalAvgPool, r)?;
    b.dense("logits", g, classes)
}

/// Anything that maps an image batch to class probabilities.
pub trait Classifier<T: Real> {
    fn classes(&self) -> usize;
    fn input_spec(&self) -> InputSpec;
    fn predict_proba(&self, batch: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Real> Classifier<T> for ModelGraph<T> {
    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn input_spec(&self) -> InputSpec {
        self.spec.input
    }

    fn predict_proba(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        ModelGraph::predict_proba(self, batch)
    }
}

/// Ordered collection of trained members sharing class count and input.
#[derive(Clone, Debug)]
pub struct Ensemble<T> {
    members: Vec<ModelGraph<T>>,
}

impl<T: Real> Ensemble<T> {
    pub fn new(members: Vec<ModelGraph<T>>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| invalid("an ensemble needs at least one member"))?;
        let (k, input) = (first.classes(), first.spec().input);
        for (i, m) in members.iter().enumerate() {
            if m.classes() != k {
                return Err(invalid(format!(
                    "ensemble member {i} has {} classes, member 0 has {k}",
                    m.classes()
                )));
            }
            if m.spec().input != input {
                return Err(invalid(format!("ensemble member {i} expects a different input shape")));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[ModelGraph<T>] {
        &self.members
    }

    pub fn predict_proba(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let outputs = self
            .members
            .iter()
            .map(|m| m.predict_proba(batch))
            .collect::<Result<Vec<_>>>()?;
        average_probabilities(&outputs)
    }
}

impl<T: Real> Classifier<T> for Ensemble<T> {
    fn classes(&self) -> usize {
        self.members[0].classes()
    }

    fn input_spec(&self) -> InputSpec {
        self.members[0].spec().input
    }

    fn predict_proba(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ensemble::predict_proba(self, batch)
    }
}

/// Elementwise arithmetic mean of member probability tensors.
///
/// Each element's member values are sorted before a running-mean
/// reduction, so the result does not depend on member order, and `n`
/// identical members reproduce their common output exactly.
pub fn average_probabilities<T: Real>(outputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = outputs
        .first()
        .ok_or_else(|| invalid("cannot average zero prediction sets"))?;
    for (i, o) in outputs.iter().enumerate() {
        if o.shape() != first.shape() {
            return Err(shape_err(format!(
                "member {i} produced {:?}, member 0 produced {:?}",
                o.shape(),
                first.shape()
            )));
        }
    }
    let mut column = vec![0.0f64; outputs.len()];
    let data = (0..first.len())
        .map(|i| {
            for (c, o) in column.iter_mut().zip(outputs) {
                *c = o.data()[i].to_f64_lossy();
            }
            column.sort_by(f64::total_cmp);
            let mut mean = 0.0f64;
            for (k, &v) in column.iter().enumerate() {
                mean += (v - mean) / (k + 1) as f64;
            }
            T::of(mean)
        })
        .collect();
    Tensor::new(first.shape(), data)
}

/// Ensemble prediction over a set of members, failing on class-count mismatch.
pub fn ensemble_predict<T: Real>(members: &[&dyn Classifier<T>], batch: &Tensor<T>) -> Result<Tensor<T>> {
    let first = members
        .first()
        .ok_or_else(|| invalid("an ensemble needs at least one member"))?;
    if let Some(bad) = members.iter().position(|m| m.classes() != first.classes()) {
        return Err(invalid(format!(
            "ensemble member {bad} has {} classes, member 0 has {}",
            members[bad].classes(),
            first.classes()
        )));
    }
    let outputs = members
        .iter()
        .map(|m| m.predict_proba(batch))
        .collect::<Result<Vec<_>>>()?;
    average_probabilities(&outputs)
}
