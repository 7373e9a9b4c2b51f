//! Encoder networks: per-channel embedding tables with weighted-sum
//! pooling, concatenation with dense inputs, a stack of dense layers, and
//! an L2-normalized output. A `TwoTower` pairs a query encoder with a
//! document encoder, optionally sharing channel tables.
//!
//! Forward passes keep every intermediate needed for exact backprop; the
//! backward pass produces sparse table gradients (only touched rows) and
//! dense layer gradients.

use crate::ModelError;
use embr_core::{DenseVector, Vector64};
use embr_engine::FeatureRecord;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// One categorical channel: a `vocab_size x table_dim` embedding table.
/// The last row (`vocab_size - 1`) is reserved for out-of-range ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub vocab_size: usize,
    pub table_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Categorical channels, pooled by weighted sum.
    pub channels: BTreeMap<String, ChannelConfig>,
    /// Dense input channels and their dimensions, concatenated verbatim.
    pub dense: BTreeMap<String, usize>,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels.is_empty() && self.dense.is_empty() {
            return Err(ModelError::Config("encoder has no input channels".into()));
        }
        for (name, cc) in &self.channels {
            if cc.vocab_size == 0 || cc.table_dim == 0 {
                return Err(ModelError::Config(format!(
                    "channel {name:?} has zero vocab_size or table_dim"
                )));
            }
        }
        for (name, &dim) in &self.dense {
            if dim == 0 {
                return Err(ModelError::Config(format!("dense channel {name:?} has dim 0")));
            }
        }
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(ModelError::Config("hidden_dim and output_dim must be positive".into()));
        }
        Ok(())
    }

    /// Width of the concatenated input to the dense stack.
    pub fn input_dim(&self) -> usize {
        let pooled: usize = self.channels.values().map(|c| c.table_dim).sum();
        let dense: usize = self.dense.values().sum();
        pooled + dense
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    /// Channel name -> vocab_size rows of table_dim.
    tables: BTreeMap<String, Vec<Vec<f64>>>,
    layers: Vec<DenseLayer>,
}

/// Every intermediate of one encode, kept for backprop.
pub struct ForwardPass {
    /// Concatenated pooled + dense input.
    pub x: Vec<f64>,
    /// Pre-activation per layer.
    pub pre: Vec<Vec<f64>>,
    /// Post-activation per layer.
    pub post: Vec<Vec<f64>>,
    /// Norm of the final layer output, before normalization.
    pub y_norm: f64,
    /// Unit-norm embedding.
    pub e: Vec<f64>,
}

/// Parameter gradients for one encoder. Table gradients are sparse: only
/// rows touched by a batch appear.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tables: BTreeMap<String, BTreeMap<usize, Vec<f64>>>,
    /// Per layer: (weight gradients, bias gradients), dense.
    pub layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(model: &EncoderModel) -> Self {
        Gradients {
            tables: model.tables.keys().map(|k| (k.clone(), BTreeMap::new())).collect(),
            layers: model
                .layers
                .iter()
                .map(|l| {
                    (
                        vec![vec![0.0; l.weights[0].len()]; l.weights.len()],
                        vec![0.0; l.bias.len()],
                    )
                })
                .collect(),
        }
    }
}

fn xavier(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Vec<Vec<f64>> {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    (0..out_dim)
        .map(|_| (0..in_dim).map(|_| rng.random_range(-bound..bound)).collect())
        .collect()
}

impl EncoderModel {
    /// Random initialization: tables uniform in [-0.1, 0.1], layer weights
    /// Xavier-uniform, biases zero. Deterministic per seed: channels are
    /// filled in name order, then layers in order.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tables = BTreeMap::new();
        for (name, cc) in &config.channels {
            let table: Vec<Vec<f64>> = (0..cc.vocab_size)
                .map(|_| (0..cc.table_dim).map(|_| rng.random_range(-0.1..0.1)).collect())
                .collect();
            tables.insert(name.clone(), table);
        }
        let input_dim = config.input_dim();
        let layers = vec![
            DenseLayer {
                weights: xavier(&mut rng, config.hidden_dim, input_dim),
                bias: vec![0.0; config.hidden_dim],
                activation: Activation::Relu,
            },
            DenseLayer {
                weights: xavier(&mut rng, config.output_dim, config.hidden_dim),
                bias: vec![0.0; config.output_dim],
                activation: Activation::Linear,
            },
        ];
        Ok(EncoderModel { config, tables, layers })
    }

    /// Assembles a model from explicit parts; persistence and tests use
    /// this. Shapes must agree with the config.
    pub fn from_parts(
        config: EncoderConfig,
        tables: BTreeMap<String, Vec<Vec<f64>>>,
        layers: Vec<DenseLayer>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let model = EncoderModel { config, tables, layers };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<(), ModelError> {
        let config_names: BTreeSet<&String> = self.config.channels.keys().collect();
        let table_names: BTreeSet<&String> = self.tables.keys().collect();
        if config_names != table_names {
            return Err(ModelError::Config("tables do not match configured channels".into()));
        }
        for (name, cc) in &self.config.channels {
            let table = &self.tables[name];
            if table.len() != cc.vocab_size
                || table.iter().any(|row| row.len() != cc.table_dim)
            {
                return Err(ModelError::Config(format!("table {name:?} has wrong shape")));
            }
        }
        let mut in_dim = self.config.input_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.is_empty()
                || layer.weights.iter().any(|row| row.len() != in_dim)
                || layer.bias.len() != layer.weights.len()
            {
                return Err(ModelError::Config(format!("layer {i} has wrong shape")));
            }
            in_dim = layer.weights.len();
        }
        if in_dim != self.config.output_dim {
            return Err(ModelError::Config("final layer width is not output_dim".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tables(&self) -> &BTreeMap<String, Vec<Vec<f64>>> {
        &self.tables
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Direct parameter access for finite-difference checks and custom
    /// optimizers. Mutating a shared channel table through this bypasses
    /// `TwoTower`'s sharing and is the caller's responsibility.
    pub fn tables_mut(&mut self) -> &mut BTreeMap<String, Vec<Vec<f64>>> {
        &mut self.tables
    }

    /// See [`EncoderModel::tables_mut`].
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    /// Validates that every channel in the record exists in the model.
    fn check_record(&self, record: &FeatureRecord) -> Result<(), ModelError> {
        for name in record.categorical.keys() {
            if !self.config.channels.contains_key(name) {
                return Err(ModelError::UnknownChannel(name.clone()));
            }
        }
        for (name, values) in &record.dense {
            match self.config.dense.get(name) {
                None => return Err(ModelError::UnknownChannel(name.clone())),
                Some(&dim) if dim != values.len() => {
                    return Err(ModelError::Channel {
                        channel: name.clone(),
                        message: format!("dense input has dim {}, expected {dim}", values.len()),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Weighted-sum pooling per channel, concatenation, dense stack, and
    /// L2 normalization. Channels absent from the record pool to zero.
    /// Out-of-range feature ids map to the reserved last row.
    pub fn forward(&self, record: &FeatureRecord) -> Result<ForwardPass, ModelError> {
        self.check_record(record)?;
        let mut x = Vec::with_capacity(self.config.input_dim());
        for (name, cc) in &self.config.channels {
            let mut pooled = vec![0.0; cc.table_dim];
            if let Some(feats) = record.categorical.get(name) {
                let table = &self.tables[name];
                for &(id, weight) in feats {
                    let row = (id as usize).min(cc.vocab_size - 1);
                    for (p, t) in pooled.iter_mut().zip(&table[row]) {
                        *p += weight * t;
                    }
                }
            }
            x.extend_from_slice(&pooled);
        }
        for (name, &dim) in &self.config.dense {
            match record.dense.get(name) {
                Some(values) => x.extend_from_slice(values),
                None => x.extend(std::iter::repeat(0.0).take(dim)),
            }
        }

        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut activation: &[f64] = &x;
        for layer in &self.layers {
            let mut z = layer.bias.clone();
            for (zi, row) in z.iter_mut().zip(&layer.weights) {
                for (w, a) in row.iter().zip(activation) {
                    *zi += w * a;
                }
            }
            let a: Vec<f64> = match layer.activation {
                Activation::Relu => z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                Activation::Linear => z.clone(),
            };
            pre.push(z);
            post.push(a);
            activation = post.last().expect("just pushed");
        }

        let y = post.last().expect("at least one layer");
        let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if y_norm == 0.0 || !y_norm.is_finite() {
            return Err(ModelError::DegenerateEmbedding);
        }
        let e: Vec<f64> = y.iter().map(|v| v / y_norm).collect();
        Ok(ForwardPass { x, pre, post, y_norm, e })
    }

    /// Unit-norm embedding of one record.
    pub fn encode(&self, record: &FeatureRecord) -> Result<Vector64, ModelError> {
        let fwd = self.forward(record)?;
        Ok(DenseVector::new(fwd.e)?)
    }

    /// Backpropagates `grad_e` (the loss gradient with respect to the
    /// normalized output) through the pass, accumulating into `grads`.
    pub fn backward(
        &self,
        record: &FeatureRecord,
        fwd: &ForwardPass,
        grad_e: &[f64],
        grads: &mut Gradients,
    ) {
        // Through e = y / ||y||: dL/dy = (g - (g . e) e) / ||y||.
        let g_dot_e: f64 = grad_e.iter().zip(&fwd.e).map(|(g, e)| g * e).sum();
        let mut delta: Vec<f64> = grad_e
            .iter()
            .zip(&fwd.e)
            .map(|(g, e)| (g - g_dot_e * e) / fwd.y_norm)
            .collect();

        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if layer.activation == Activation::Relu {
                for (d, &z) in delta.iter_mut().zip(&fwd.pre[l]) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input: &[f64] = if l == 0 { &fwd.x } else { &fwd.post[l - 1] };
            let (gw, gb) = &mut grads.layers[l];
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                for (gwi, a) in gw[o].iter_mut().zip(input) {
                    *gwi += d * a;
                }
            }
            let mut prev = vec![0.0; input.len()];
            for (row, &d) in layer.weights.iter().zip(&delta) {
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            delta = prev;
        }

        // Split the input gradient back across channels in forward order.
        let mut offset = 0;
        for (name, cc) in &self.config.channels {
            let segment = &delta[offset..offset + cc.table_dim];
            if let Some(feats) = record.categorical.get(name) {
                let rows = grads.tables.get_mut(name).expect("gradient channel");
                for &(id, weight) in feats {
                    let row = (id as usize).min(cc.vocab_size - 1);
                    let grow = rows.entry(row).or_insert_with(|| vec![0.0; cc.table_dim]);
                    for (g, d) in grow.iter_mut().zip(segment) {
                        *g += weight * d;
                    }
                }
            }
            offset += cc.table_dim;
        }
        // Dense inputs carry no parameters.
    }

    /// SGD step: parameter -= lr * gradient.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        for (name, rows) in &grads.tables {
            let table = self.tables.get_mut(name).expect("gradient channel exists");
            for (&row, grow) in rows {
                for (t, g) in table[row].iter_mut().zip(grow) {
                    *t -= lr * g;
                }
            }
        }
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            for (wrow, grow) in layer.weights.iter_mut().zip(gw) {
                for (w, g) in wrow.iter_mut().zip(grow) {
                    *w -= lr * g;
                }
            }
            for (b, g) in layer.bias.iter_mut().zip(gb) {
                *b -= lr * g;
            }
        }
    }
}

/// A query encoder paired with a document encoder. Channel tables listed
/// in `shared_channels` are kept bit-identical across the towers: they
/// start as copies and every update applies the summed gradient to both.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTower {
    pub query: EncoderModel,
    pub doc: EncoderModel,
    pub shared_channels: BTreeSet<String>,
}

impl TwoTower {
    pub fn init(
        query_config: EncoderConfig,
        doc_config: EncoderConfig,
        shared_channels: BTreeSet<String>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        for name in &shared_channels {
            match (query_config.channels.get(name), doc_config.channels.get(name)) {
                (Some(a), Some(b)) if a == b => {}
                _ => {
                    return Err(ModelError::Config(format!(
                        "shared channel {name:?} must exist in both towers with equal shape"
                    )))
                }
            }
        }
        let query = EncoderModel::init(query_config, seed)?;
        let mut doc = EncoderModel::init(doc_config, seed.wrapping_add(1))?;
        for name in &shared_channels {
            doc.tables.insert(name.clone(), query.tables[name].clone());
        }
        Ok(TwoTower { query, doc, shared_channels })
    }

    pub fn from_parts(
        query: EncoderModel,
        doc: EncoderModel,
        shared_channels: BTreeSet<String>,
    ) -> Result<Self, ModelError> {
        for name in &shared_channels {
            if query.tables.get(name) != doc.tables.get(name) {
                return Err(ModelError::Config(format!(
                    "shared channel {name:?} differs between towers"
                )));
            }
        }
        Ok(TwoTower { query, doc, shared_channels })
    }

    /// Applies one SGD step to both towers. For shared channels each
    /// tower receives the other tower's table gradient as well, which is
    /// exactly the update a single shared table would get. The doc copy
    /// is overwritten row by row rather than updated independently: the
    /// towers would apply the two gradients in opposite orders, and f64
    /// rounding differs per order, which would break the bit-identity
    /// `from_parts` checks.
    pub fn apply_gradients(&mut self, query_grads: &Gradients, doc_grads: &Gradients, lr: f64) {
        self.query.apply_gradients(query_grads, lr);
        self.doc.apply_gradients(doc_grads, lr);
        for name in &self.shared_channels {
            let table = self.query.tables.get_mut(name).expect("shared channel");
            let mut touched = BTreeSet::new();
            if let Some(rows) = doc_grads.tables.get(name) {
                for (&row, grow) in rows {
                    for (t, g) in table[row].iter_mut().zip(grow) {
                        *t -= lr * g;
                    }
                    touched.insert(row);
                }
            }
            if let Some(rows) = query_grads.tables.get(name) {
                touched.extend(rows.keys().copied());
            }
            let doc_table = self.doc.tables.get_mut(name).expect("shared channel");
            for row in touched {
                doc_table[row].clone_from(&table[row]);
            }
        }
    }
}
