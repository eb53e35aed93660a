//! A small transformer-encoder stack whose six per-block projections carry
//! adapter stacks.
//!
//! Layout: frozen input embedding → `blocks` × [single-head self-attention
//! with residual, feed-forward with residual] → mean pool over the sequence →
//! frozen regression head. Attention is computed per example, so examples in
//! a batch never interact.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterStack, LinearLayer, StackRecord, CHECKPOINT_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Matrix, ParamSet, Parameter, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// The six projections of a block that may carry adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Wq,
    Wk,
    Wv,
    Wo,
    Wfc1,
    Wfc2,
}

impl WeightKind {
    pub const ALL: [WeightKind; 6] = [
        WeightKind::Wq,
        WeightKind::Wk,
        WeightKind::Wv,
        WeightKind::Wo,
        WeightKind::Wfc1,
        WeightKind::Wfc2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightKind::Wq => "wq",
            WeightKind::Wk => "wk",
            WeightKind::Wv => "wv",
            WeightKind::Wo => "wo",
            WeightKind::Wfc1 => "wfc1",
            WeightKind::Wfc2 => "wfc2",
        }
    }
}

impl fmt::Display for WeightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub output_dim: usize,
    pub activation: Activation,
    /// Standardize the residual stream after each sub-layer.
    pub layer_norm: bool,
    /// Projections that receive adapters.
    pub adapted: Vec<WeightKind>,
    /// Multiplier on the `1/√fan_in` standard deviation of base weights.
    pub init_gain: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            model_dim: 32,
            ff_dim: 64,
            heads: 1,
            blocks: 2,
            output_dim: 4,
            activation: Activation::Relu,
            layer_norm: false,
            adapted: WeightKind::ALL.to_vec(),
            init_gain: 1.0,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.ff_dim == 0 || self.blocks == 0 || self.output_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.heads != 1 {
            return Err(Error::Config(format!(
                "only single-head attention is supported, got {}",
                self.heads
            )));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config("model_dim must be divisible by heads".into()));
        }
        let mut seen = self.adapted.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.adapted.len() {
            return Err(Error::Config(
                "adapted weight list contains duplicates".into(),
            ));
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return Err(Error::Config("init_gain must be positive".into()));
        }
        Ok(())
    }

    /// Number of adapted weight matrices in the whole model.
    pub fn n_adapted(&self) -> usize {
        self.blocks * self.adapted.len()
    }
}

/// A batch of `n` sequences, each `seq_len` tokens of width `model_dim`,
/// stacked row-wise into an `(n·seq_len)×model_dim` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Matrix,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(tokens: Matrix, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || !tokens.rows().is_multiple_of(seq_len) {
            return Err(Error::dim("batch", tokens.shape(), (seq_len, 0)));
        }
        Ok(Self { tokens, seq_len })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Examples `start..start + n` as their own batch.
    pub fn slice(&self, start: usize, n: usize) -> Result<Batch> {
        Batch::new(
            self.tokens
                .slice_rows(start * self.seq_len, n * self.seq_len)?,
            self.seq_len,
        )
    }

    /// Concatenates batches with the same sequence length.
    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let seq_len = parts.first().map_or(1, |b| b.seq_len);
        if parts.iter().any(|b| b.seq_len != seq_len) {
            return Err(Error::Config(
                "cannot concatenate batches with different seq_len".into(),
            ));
        }
        let mats: Vec<&Matrix> = parts.iter().map(|b| &b.tokens).collect();
        Batch::new(Matrix::concat_rows(&mats)?, seq_len)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub wq: LinearLayer,
    pub wk: LinearLayer,
    pub wv: LinearLayer,
    pub wo: LinearLayer,
    pub wfc1: LinearLayer,
    pub wfc2: LinearLayer,
}

impl Block {
    fn layers_mut(&mut self) -> [&mut LinearLayer; 6] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.wfc1,
            &mut self.wfc2,
        ]
    }

    pub fn layer(&self, kind: WeightKind) -> &LinearLayer {
        match kind {
            WeightKind::Wq => &self.wq,
            WeightKind::Wk => &self.wk,
            WeightKind::Wv => &self.wv,
            WeightKind::Wo => &self.wo,
            WeightKind::Wfc1 => &self.wfc1,
            WeightKind::Wfc2 => &self.wfc2,
        }
    }

    pub fn layer_mut(&mut self, kind: WeightKind) -> &mut LinearLayer {
        match kind {
            WeightKind::Wq => &mut self.wq,
            WeightKind::Wk => &mut self.wk,
            WeightKind::Wv => &mut self.wv,
            WeightKind::Wo => &mut self.wo,
            WeightKind::Wfc1 => &mut self.wfc1,
            WeightKind::Wfc2 => &mut self.wfc2,
        }
    }
}

/// Identifies one adapted weight: `(block index, projection)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WeightId {
    pub block: usize,
    pub kind: WeightKind,
}

impl fmt::Display for WeightId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}.{}", self.block, self.kind)
    }
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    config: BlockConfig,
    pub embed: LinearLayer,
    pub blocks: Vec<Block>,
    pub head: LinearLayer,
}

fn random_layer(d_in: usize, d_out: usize, gain: f64, rng: &mut rng::Rng) -> Result<LinearLayer> {
    let std = gain / (d_in as f64).sqrt();
    let w = Matrix::randn(d_in, d_out, std, rng);
    let b = Matrix::randn(1, d_out, 0.1 * gain, rng);
    LinearLayer::new(w, b)
}

/// Counts of trainable versus all scalars.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
}

impl ToyModel {
    /// A random frozen base model, fully determined by `seed`.
    pub fn new(config: BlockConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::label("base-model")]);
        let (d, ff, g) = (config.model_dim, config.ff_dim, config.init_gain);
        let embed = random_layer(d, d, g, &mut rng)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            blocks.push(Block {
                wq: random_layer(d, d, g, &mut rng)?,
                wk: random_layer(d, d, g, &mut rng)?,
                wv: random_layer(d, d, g, &mut rng)?,
                wo: random_layer(d, d, g, &mut rng)?,
                wfc1: random_layer(d, ff, g, &mut rng)?,
                wfc2: random_layer(ff, d, g, &mut rng)?,
            });
        }
        let head = random_layer(d, config.output_dim, g, &mut rng)?;
        Ok(Self {
            config,
            embed,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.config
    }

    /// Adapted weights in a fixed order: block-major, then the configured
    /// projection order.
    pub fn weight_ids(&self) -> Vec<WeightId> {
        (0..self.blocks.len())
            .flat_map(|block| {
                self.config
                    .adapted
                    .iter()
                    .map(move |kind| WeightId { block, kind: *kind })
            })
            .collect()
    }

    pub fn layer(&self, id: WeightId) -> &LinearLayer {
        self.blocks[id.block].layer(id.kind)
    }

    pub fn layer_mut(&mut self, id: WeightId) -> &mut LinearLayer {
        self.blocks[id.block].layer_mut(id.kind)
    }

    /// Mutable adapted layers, in [`Self::weight_ids`] order.
    pub fn adapted_layers_mut(&mut self) -> Vec<(WeightId, &mut LinearLayer)> {
        let kinds = self.config.adapted.clone();
        let mut out = Vec::with_capacity(self.blocks.len() * kinds.len());
        for (block, b) in self.blocks.iter_mut().enumerate() {
            let mut slots = b.layers_mut().map(Some);
            for kind in &kinds {
                let i = WeightKind::ALL
                    .iter()
                    .position(|k| k == kind)
                    .expect("kind is in ALL");
                if let Some(layer) = slots[i].take() {
                    out.push((WeightId { block, kind: *kind }, layer));
                }
            }
        }
        out
    }

    /// Adapter stacks of the adapted weights, in [`Self::weight_ids`] order.
    pub fn stacks(&self) -> Vec<&AdapterStack> {
        self.weight_ids()
            .into_iter()
            .map(|id| &self.layer(id).stack)
            .collect()
    }

    fn all_layers_mut(&mut self) -> Vec<&mut LinearLayer> {
        let mut v: Vec<&mut LinearLayer> = vec![&mut self.embed];
        for b in &mut self.blocks {
            v.extend([
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.wfc1,
                &mut b.wfc2,
            ]);
        }
        v.push(&mut self.head);
        v
    }

    fn all_layers(&self) -> Vec<&LinearLayer> {
        let mut v: Vec<&LinearLayer> = vec![&self.embed];
        for b in &self.blocks {
            v.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.wfc1, &b.wfc2]);
        }
        v.push(&self.head);
        v
    }

    /// Makes every block weight and bias trainable or frozen. The input
    /// embedding and output head stay fixed in every mode.
    pub fn set_base_trainable(&mut self, trainable: bool) {
        for b in &mut self.blocks {
            for l in b.layers_mut() {
                l.set_base_trainable(trainable);
            }
        }
    }

    pub fn has_adapters(&self) -> bool {
        self.all_layers().iter().any(|l| !l.stack.is_empty())
    }

    /// Copy with every stack folded into its base weight and all parameters
    /// frozen.
    pub fn merged(&self) -> ToyModel {
        let mut out = self.clone();
        for l in out.all_layers_mut() {
            *l = l.merged();
        }
        out
    }

    /// Folds every stack into the base weights in place.
    pub fn commit_merge(&mut self) {
        for l in self.all_layers_mut() {
            l.commit_merge();
        }
    }

    /// Trainable versus total scalars of the backbone (block weights, biases
    /// and adapters). The fixed embedding and head are not counted.
    pub fn param_count(&self) -> ParamCount {
        let (mut trainable, mut total) = (0, 0);
        for b in &self.blocks {
            for kind in WeightKind::ALL {
                let l = b.layer(kind);
                trainable += l.trainable_count();
                total += l.total_count();
            }
        }
        ParamCount {
            trainable,
            total,
            fraction: trainable as f64 / total as f64,
        }
    }

    /// Order-sensitive digest of every frozen adapter in every stack.
    pub fn frozen_adapter_checksums(&self) -> Vec<u64> {
        self.stacks()
            .iter()
            .flat_map(|s| s.frozen().iter().map(|a| a.checksum()))
            .collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.tokens.cols() != self.config.model_dim {
            return Err(Error::dim(
                "model input",
                batch.tokens.shape(),
                (batch.tokens.rows(), self.config.model_dim),
            ));
        }
        Ok(())
    }

    fn residual(&self, tape: &mut Tape, h: Var, update: Var) -> Result<Var> {
        let sum = tape.add(h, update)?;
        Ok(if self.config.layer_norm {
            tape.layer_norm(sum)
        } else {
            sum
        })
    }

    /// Pooled final representation, one row per example.
    pub fn forward_hidden(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        self.check_batch(batch)?;
        let x = tape.constant(batch.tokens.clone());
        let mut h = self.embed.adapted_forward(tape, x)?;
        let scale = 1.0 / (self.config.model_dim as f64).sqrt();
        for block in &self.blocks {
            let q = block.wq.adapted_forward(tape, h)?;
            let k = block.wk.adapted_forward(tape, h)?;
            let v = block.wv.adapted_forward(tape, h)?;
            let (att, _) = attention(tape, q, k, v, batch.seq_len, scale)?;
            let o = block.wo.adapted_forward(tape, att)?;
            h = self.residual(tape, h, o)?;
            let f = block.wfc1.adapted_forward(tape, h)?;
            let f = match self.config.activation {
                Activation::Relu => tape.relu(f),
                Activation::Tanh => tape.tanh(f),
            };
            let f = block.wfc2.adapted_forward(tape, f)?;
            h = self.residual(tape, h, f)?;
        }
        let pool = tape.constant(pooling_matrix(batch.len(), batch.seq_len));
        tape.matmul(pool, h)
    }

    /// Predictions, one row per example. Takes inputs only: there is no task
    /// identifier anywhere in the model interface.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let hidden = self.forward_hidden(tape, batch)?;
        self.head.adapted_forward(tape, hidden)
    }

    /// Forward pass on a throwaway tape.
    pub fn predict(&self, batch: &Batch) -> Result<Matrix> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, batch)?;
        Ok(tape.value(y).clone())
    }

    pub fn hidden(&self, batch: &Batch) -> Result<Matrix> {
        let mut tape = Tape::new();
        let y = self.forward_hidden(&mut tape, batch)?;
        Ok(tape.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        let mut base = Vec::new();
        let mut push = |name: String, l: &LinearLayer| {
            base.push(BaseRecord {
                name,
                w: l.w.value().clone(),
                b: l.b.value().clone(),
            })
        };
        push("embed".into(), &self.embed);
        for (i, b) in self.blocks.iter().enumerate() {
            for kind in WeightKind::ALL {
                push(format!("block{i}.{kind}"), b.layer(kind));
            }
        }
        push("head".into(), &self.head);
        let stacks = self
            .weight_ids()
            .into_iter()
            .map(|id| StackRecord::from_stack(id.to_string(), &self.layer(id).stack))
            .collect();
        ModelCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            base,
            stacks,
        }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format version {}",
                ckpt.format_version
            )));
        }
        let mut model = ToyModel::new(ckpt.config.clone(), 0)?;
        let n_layers = model.all_layers().len();
        if ckpt.base.len() != n_layers {
            return Err(Error::Config(format!(
                "checkpoint has {} base layers, expected {n_layers}",
                ckpt.base.len()
            )));
        }
        for (layer, rec) in model.all_layers_mut().into_iter().zip(&ckpt.base) {
            if rec.w.shape() != layer.w.shape() || rec.b.shape() != layer.b.shape() {
                return Err(Error::dim(
                    "checkpoint base",
                    layer.w.shape(),
                    rec.w.shape(),
                ));
            }
            *layer.w.value_mut() = rec.w.clone();
            *layer.b.value_mut() = rec.b.clone();
        }
        let ids = model.weight_ids();
        if ckpt.stacks.len() != ids.len() {
            return Err(Error::Config(
                "checkpoint stack count does not match model".into(),
            ));
        }
        for (id, rec) in ids.into_iter().zip(&ckpt.stacks) {
            model.layer_mut(id).stack = rec.to_stack()?;
        }
        Ok(model)
    }
}

impl ParamSet for ToyModel {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        for l in self.all_layers() {
            l.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for l in self.all_layers_mut() {
            l.visit_params_mut(f);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseRecord {
    pub name: String,
    pub w: Matrix,
    pub b: Matrix,
}

/// Base arrays plus the adapter container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config: BlockConfig,
    pub base: Vec<BaseRecord>,
    pub stacks: Vec<StackRecord>,
}

/// `n × (n·seq_len)` averaging matrix.
fn pooling_matrix(n: usize, seq_len: usize) -> Matrix {
    let mut p = Matrix::zeros(n, n * seq_len);
    let w = 1.0 / seq_len as f64;
    for e in 0..n {
        for t in 0..seq_len {
            p.set(e, e * seq_len + t, w);
        }
    }
    p
}

/// `softmax(Q·Kᵀ·scale)·V` independently for each consecutive group of
/// `seq_len` rows. Returns the stacked outputs and the per-example weights.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    seq_len: usize,
    scale: f64,
) -> Result<(Var, Vec<Var>)> {
    let rows = tape.value(q).rows();
    if seq_len == 0 || !rows.is_multiple_of(seq_len) {
        return Err(Error::dim("attention", tape.value(q).shape(), (seq_len, 0)));
    }
    let n = rows / seq_len;
    let mut outs = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for e in 0..n {
        let qe = tape.slice_rows(q, e * seq_len, seq_len)?;
        let ke = tape.slice_rows(k, e * seq_len, seq_len)?;
        let ve = tape.slice_rows(v, e * seq_len, seq_len)?;
        let kt = tape.transpose(ke);
        let logits = tape.matmul(qe, kt)?;
        let logits = tape.scale(logits, scale);
        let w = tape.row_softmax(logits);
        outs.push(tape.matmul(w, ve)?);
        weights.push(w);
    }
    Ok((tape.concat_rows(&outs)?, weights))
}

/// Mean squared error over batch and output dimensions.
pub fn task_loss(tape: &mut Tape, predictions: Var, targets: &Matrix) -> Result<Var> {
    let ps = tape.value(predictions).shape();
    if ps != targets.shape() {
        return Err(Error::dim("task_loss", ps, targets.shape()));
    }
    let t = tape.constant(targets.clone());
    tape.mse(predictions, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adalora, init_lora};

    fn small() -> BlockConfig {
        BlockConfig {
            model_dim: 8,
            ff_dim: 12,
            blocks: 1,
            output_dim: 3,
            ..BlockConfig::default()
        }
    }

    fn batch(n: usize, seq: usize, d: usize, seed: u64) -> Batch {
        let mut rng = rng::stream(seed, &[]);
        Batch::new(Matrix::randn(n * seq, d, 1.0, &mut rng), seq).unwrap()
    }

    #[test]
    fn fresh_adapters_leave_outputs_identical() {
        let base = ToyModel::new(small(), 1).unwrap();
        let mut adapted = base.clone();
        for (i, id) in adapted.weight_ids().into_iter().enumerate() {
            let l = adapted.layer_mut(id);
            let (d1, d2) = (l.d_in(), l.d_out());
            let a = if i % 2 == 0 {
                init_lora(d1, d2, 4, i as u64)
            } else {
                init_adalora(d1, d2, 4, i as u64)
            };
            l.stack.freeze_and_extend(a.unwrap()).unwrap();
        }
        let b = batch(3, 4, 8, 2);
        assert_eq!(base.predict(&b).unwrap(), adapted.predict(&b).unwrap());
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let mut tape = Tape::new();
        let mut rng = rng::stream(3, &[]);
        let q = tape.constant(Matrix::randn(2, 4, 5.0, &mut rng));
        let k = tape.constant(Matrix::randn(2, 4, 5.0, &mut rng));
        let v = tape.constant(Matrix::randn(2, 4, 1.0, &mut rng));
        let (out, w) = attention(&mut tape, q, k, v, 1, 0.5).unwrap();
        for wi in w {
            assert_eq!(tape.value(wi).get(0, 0), 1.0);
        }
        assert_eq!(tape.value(out), tape.value(v));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = ToyModel::new(small(), 0).unwrap();
        assert!(matches!(
            m.predict(&batch(2, 3, 7, 0)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn task_loss_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Matrix::from_rows(&[&[1.0, 3.0]]));
        let l = task_loss(&mut tape, p, &Matrix::from_rows(&[&[0.0, 1.0]])).unwrap();
        assert_eq!(tape.scalar(l), 2.5);
        let p = tape.constant(Matrix::from_rows(&[&[1.0]]));
        let l = task_loss(&mut tape, p, &Matrix::from_rows(&[&[0.0]])).unwrap();
        assert_eq!(tape.scalar(l), 1.0);
        let p = tape.constant(Matrix::from_rows(&[&[0.3, -2.0]]));
        let l = task_loss(&mut tape, p, &Matrix::from_rows(&[&[0.3, -2.0]])).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        assert!(task_loss(&mut tape, p, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn batch_order_does_not_couple_examples() {
        let m = ToyModel::new(small(), 4).unwrap();
        let b = batch(4, 3, 8, 5);
        let y = m.predict(&b).unwrap();
        let parts: Vec<Batch> = (0..4).rev().map(|i| b.slice(i, 1).unwrap()).collect();
        let refs: Vec<&Batch> = parts.iter().collect();
        let rev = Batch::concat(&refs).unwrap();
        let yr = m.predict(&rev).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                assert!((y.get(i, c) - yr.get(3 - i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_counts_for_lora_and_adalora() {
        let mut m = ToyModel::new(BlockConfig::default(), 0).unwrap();
        assert_eq!(m.param_count().trainable, 0);
        let id = WeightId {
            block: 0,
            kind: WeightKind::Wq,
        };
        m.layer_mut(id)
            .stack
            .freeze_and_extend(init_lora(32, 32, 32, 0).unwrap())
            .unwrap();
        assert_eq!(m.trainable_count(), 2048);
        m.layer_mut(id).stack.clear();
        m.layer_mut(id)
            .stack
            .freeze_and_extend(init_adalora(32, 32, 12, 0).unwrap())
            .unwrap();
        assert_eq!(m.trainable_count(), 780);
        m.layer_mut(id).stack.clear();
        m.set_base_trainable(true);
        // per block: 4·(32·32 + 32) + (32·64 + 64) + (64·32 + 32) = 8416
        let c = m.param_count();
        assert_eq!(c.trainable, 2 * 8416);
        assert_eq!(c.total, 2 * 8416);
        assert_eq!(c.fraction, 1.0);
        assert_eq!(m.trainable_count(), 2 * 8416);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let mut m = ToyModel::new(small(), 9).unwrap();
        let ids = m.weight_ids();
        let mut rng = rng::stream(1, &[]);
        for id in &ids {
            let l = m.layer_mut(*id);
            let (d1, d2) = (l.d_in(), l.d_out());
            l.stack
                .freeze_and_extend(init_lora(d1, d2, 2, 1).unwrap())
                .unwrap();
            l.stack
                .freeze_and_extend(init_adalora(d1, d2, 3, 2).unwrap())
                .unwrap();
            if let Some(a) = l.stack.active_mut().and_then(|a| a.as_adalora_mut()) {
                *a.lambda.value_mut() = Matrix::randn(1, 3, 1.0, &mut rng);
                a.mask[1] = false;
            }
        }
        let json = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let back = ToyModel::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        let b = batch(2, 3, 8, 7);
        assert_eq!(m.predict(&b).unwrap(), back.predict(&b).unwrap());
        assert_eq!(
            m.frozen_adapter_checksums(),
            back.frozen_adapter_checksums()
        );
    }
}
