//! The dual-branch detector: an Xception-style spatial branch, a small
//! ConvNet over spectral maps, a projector onto the unit sphere, a two-way
//! classifier reading the normalized embedding and a learnable real center.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::{BatchStats, Norm, Tape, Tensor, Var, BN_MOMENTUM};

/// Spatial branch downsampling: two stride-2 entry convs and one pooling stage.
pub const SPATIAL_DOWNSAMPLE: usize = 8;
/// Frequency branch downsampling: a stride-2 first conv and three pooling stages.
pub const FREQUENCY_DOWNSAMPLE: usize = 16;

/// Channel widths of the convolutional stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Widths {
    /// Output channels of the two entry convolutions; the middle flow keeps the second.
    pub entry: [usize; 2],
    /// Output channels of the exit separable convolution.
    pub exit: usize,
    /// Output channels of the three frequency stages.
    pub frequency: [usize; 3],
    pub projector_hidden: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Widths {
            entry: [4, 8],
            exit: 16,
            frequency: [4, 8, 16],
            projector_hidden: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub spatial_dim: usize,
    pub frequency_dim: usize,
    pub embed_dim: usize,
    pub middle_blocks: usize,
    pub margin: f64,
    pub lambda_center: f64,
    pub lambda_sep: f64,
    pub seed: u64,
    pub widths: Widths,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            spatial_dim: 256,
            frequency_dim: 64,
            embed_dim: 128,
            middle_blocks: 2,
            margin: 0.5,
            lambda_center: 0.5,
            lambda_sep: 0.5,
            seed: 1,
            widths: Widths::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.widths;
        let widths = [
            self.spatial_dim,
            self.frequency_dim,
            self.embed_dim,
            w.exit,
            w.projector_hidden,
        ];
        if widths.iter().chain(&w.entry).chain(&w.frequency).any(|&v| v == 0) {
            return Err(Error::Config("all layer widths must be positive".into()));
        }
        let step = SPATIAL_DOWNSAMPLE.max(FREQUENCY_DOWNSAMPLE);
        if self.image_size == 0 || !self.image_size.is_multiple_of(step) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {step} (pooling depth)",
                self.image_size
            )));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        for (name, v) in [("lambda_center", self.lambda_center), ("lambda_sep", self.lambda_sep)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// A tensor with a stable name, used for parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Named {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct BnSlots {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    kernel: usize,
    stride: usize,
    bn: BnSlots,
}

#[derive(Clone, Copy, Debug)]
struct SepConvBn {
    depthwise: usize,
    pointwise: usize,
    bn: BnSlots,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    entry: [ConvBn; 2],
    middle: Vec<[SepConvBn; 3]>,
    exit: SepConvBn,
    spatial_head: Dense,
    frequency: [ConvBn; 3],
    frequency_head: Dense,
    project_in: Dense,
    project_out: Dense,
    classifier: Dense,
    center: usize,
}

struct Builder {
    rng: StreamRng,
    params: Vec<Named>,
    buffers: Vec<Named>,
}

impl Builder {
    fn push(list: &mut Vec<Named>, name: String, tensor: Tensor) -> usize {
        list.push(Named { name, tensor });
        list.len() - 1
    }

    fn he_uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng::uniform_in(&mut self.rng, -bound, bound)).collect();
        let t = Tensor::new(shape, data).expect("positive widths").with_grad();
        Self::push(&mut self.params, name, t)
    }

    fn filled(&mut self, name: String, len: usize, value: f64) -> usize {
        Self::push(&mut self.params, name, Tensor::full([len], value).with_grad())
    }

    fn bn(&mut self, prefix: &str, channels: usize) -> BnSlots {
        BnSlots {
            gamma: self.filled(format!("{prefix}.bn.gamma"), channels, 1.0),
            beta: self.filled(format!("{prefix}.bn.beta"), channels, 0.0),
            mean: Self::push(
                &mut self.buffers,
                format!("{prefix}.bn.running_mean"),
                Tensor::zeros([channels]),
            ),
            var: Self::push(
                &mut self.buffers,
                format!("{prefix}.bn.running_var"),
                Tensor::full([channels], 1.0),
            ),
        }
    }

    fn conv_bn(&mut self, prefix: &str, cin: usize, cout: usize, stride: usize) -> ConvBn {
        ConvBn {
            kernel: self.he_uniform(format!("{prefix}.kernel"), vec![cout, cin, 3, 3], cin * 9),
            stride,
            bn: self.bn(prefix, cout),
        }
    }

    fn sep_conv_bn(&mut self, prefix: &str, cin: usize, cout: usize) -> SepConvBn {
        SepConvBn {
            depthwise: self.he_uniform(format!("{prefix}.depthwise"), vec![cin, 1, 3, 3], 9),
            pointwise: self.he_uniform(format!("{prefix}.pointwise"), vec![cout, cin, 1, 1], cin),
            bn: self.bn(prefix, cout),
        }
    }

    fn dense(&mut self, prefix: &str, din: usize, dout: usize) -> Dense {
        Dense {
            weight: self.he_uniform(format!("{prefix}.weight"), vec![din, dout], din),
            bias: self.filled(format!("{prefix}.bias"), dout, 0.0),
        }
    }
}

/// Batch-norm statistics gathered by a train-mode pass, applied with
/// [`RcdnModel::apply_bn_updates`].
#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean: usize,
    var: usize,
    stats: BatchStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages collected.
    Train,
    /// Frozen running statistics.
    Infer,
}

/// Output of the classifier for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: Label,
    /// Softmax probability of the fake class.
    pub score: f64,
    pub logits: [f64; 2],
}

impl Prediction {
    /// Argmax with exact ties resolved to real.
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let label = if logits[1] > logits[0] {
            Label::Fake
        } else {
            Label::Real
        };
        let score = 1.0 / (1.0 + (logits[0] - logits[1]).exp());
        Prediction { label, score, logits }
    }
}

/// Infer-mode outputs for a batch, all row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub embed_dim: usize,
    /// Projector output before normalization.
    pub raw: Vec<f64>,
    /// Unit-norm embeddings.
    pub unit: Vec<f64>,
    pub logits: Vec<[f64; 2]>,
    pub distances: Vec<f64>,
}

impl Inference {
    pub fn predictions(&self) -> Vec<Prediction> {
        self.logits.iter().map(|&l| Prediction::from_logits(l)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RcdnModel {
    config: ModelConfig,
    params: Vec<Named>,
    buffers: Vec<Named>,
    layout: Layout,
}

impl RcdnModel {
    /// He-uniform weights, unit BN scales, zero biases and a uniformly random
    /// unit center, all drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: rng::stream(config.seed, &[0x4d_4f44_454c]),
            params: Vec::new(),
            buffers: Vec::new(),
        };
        let w = config.widths.clone();
        let mid = w.entry[1];
        let entry = [
            b.conv_bn("spatial.entry.0", 3, w.entry[0], 2),
            b.conv_bn("spatial.entry.1", w.entry[0], mid, 2),
        ];
        let middle = (0..config.middle_blocks)
            .map(|i| [0, 1, 2].map(|j| b.sep_conv_bn(&format!("spatial.middle.{i}.{j}"), mid, mid)))
            .collect();
        let exit = b.sep_conv_bn("spatial.exit", mid, w.exit);
        let spatial_head = b.dense("spatial.head", w.exit, config.spatial_dim);
        let f = w.frequency;
        let frequency = [
            b.conv_bn("frequency.0", 3, f[0], 2),
            b.conv_bn("frequency.1", f[0], f[1], 1),
            b.conv_bn("frequency.2", f[1], f[2], 1),
        ];
        let frequency_head = b.dense("frequency.head", f[2], config.frequency_dim);
        let fused = config.spatial_dim + config.frequency_dim;
        let project_in = b.dense("projector.0", fused, w.projector_hidden);
        let project_out = b.dense("projector.1", w.projector_hidden, config.embed_dim);
        let classifier = b.dense("classifier", config.embed_dim, 2);

        let mut c: Vec<f64> = (0..config.embed_dim).map(|_| rng::normal(&mut b.rng)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        c.iter_mut().for_each(|v| *v /= norm);
        let center = Builder::push(
            &mut b.params,
            "center".into(),
            Tensor::new([config.embed_dim], c)?.with_grad(),
        );

        Ok(RcdnModel {
            config,
            params: b.params,
            buffers: b.buffers,
            layout: Layout {
                entry,
                middle,
                exit,
                spatial_head,
                frequency,
                frequency_head,
                project_in,
                project_out,
                classifier,
                center,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Named] {
        &self.params
    }

    /// Batch-norm running means and variances.
    pub fn buffers(&self) -> &[Named] {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn center(&self) -> &Tensor {
        &self.params[self.layout.center].tensor
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor)
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().for_each(Tensor::zero_grad);
    }

    /// Starts a forward pass with every parameter recorded on a fresh tape.
    pub fn pass(&self, mode: Mode) -> Pass<'_> {
        let mut tape = Tape::new();
        let vars = self.params.iter().map(|p| tape.leaf(&p.tensor)).collect();
        Pass {
            model: self,
            tape,
            vars,
            mode,
            updates: Vec::new(),
        }
    }

    /// Overwrites parameter gradients with those of a finished backward pass.
    pub fn load_grads(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        self.zero_grad();
        for (p, &v) in self.params.iter_mut().zip(vars) {
            tape.accumulate_grad_into(v, &mut p.tensor)?;
        }
        Ok(())
    }

    /// Exponential running average with momentum [`BN_MOMENTUM`].
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (slot, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                for (r, b) in self.buffers[slot].tensor.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    /// Frozen-statistics forward pass over a batch.
    pub fn infer(&self, images: &Tensor, spectra: &Tensor) -> Result<Inference> {
        let mut pass = self.pass(Mode::Infer);
        let x = pass.input(images)?;
        let s = pass.input(spectra)?;
        let out = pass.embed(x, s)?;
        let d = pass.distances(out.unit)?;
        let tape = &pass.tape;
        Ok(Inference {
            embed_dim: self.config.embed_dim,
            raw: tape.value(out.raw).to_vec(),
            unit: tape.value(out.unit).to_vec(),
            logits: tape.value(out.logits).chunks_exact(2).map(|l| [l[0], l[1]]).collect(),
            distances: tape.value(d).to_vec(),
        })
    }

    pub fn predict(&self, images: &Tensor, spectra: &Tensor) -> Result<Vec<Prediction>> {
        Ok(self.infer(images, spectra)?.predictions())
    }
}

/// Tape handles of one forward pass through both branches and both heads.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub spatial: Var,
    pub frequency: Var,
    pub fused: Var,
    pub raw: Var,
    pub unit: Var,
    pub logits: Var,
}

/// A forward pass in progress; owns the tape.
pub struct Pass<'m> {
    model: &'m RcdnModel,
    pub tape: Tape,
    vars: Vec<Var>,
    mode: Mode,
    updates: Vec<BnUpdate>,
}

impl<'m> Pass<'m> {
    /// Tape handles of the parameters, in [`RcdnModel::params`] order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn center(&self) -> Var {
        self.vars[self.model.layout.center]
    }

    /// Records a non-differentiable input tensor.
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        self.tape.constant(t.shape().to_vec(), t.data().to_vec())
    }

    fn check_images(&self, op: &'static str, x: Var) -> Result<()> {
        let s = self.model.config.image_size;
        match *self.tape.shape(x) {
            [_, 3, h, w] if h == s && w == s => Ok(()),
            [_, 3, h, w] => Err(Error::dim(op, "height/width", format!("expected {s}x{s}, got {h}x{w}"))),
            [_, c, _, _] => Err(Error::dim(op, "channels", format!("expected 3, got {c}"))),
            ref other => Err(Error::dim(op, "rank", format!("expected N x 3 x H x W, got {other:?}"))),
        }
    }

    fn batchnorm(&mut self, x: Var, bn: BnSlots) -> Result<Var> {
        let model = self.model;
        let norm = match self.mode {
            Mode::Train => Norm::Train,
            Mode::Infer => Norm::Infer {
                mean: model.buffers[bn.mean].tensor.data(),
                var: model.buffers[bn.var].tensor.data(),
            },
        };
        let (y, stats) = self
            .tape
            .batchnorm2d(x, self.vars[bn.gamma], self.vars[bn.beta], norm)?;
        if let Some(stats) = stats {
            self.updates.push(BnUpdate {
                mean: bn.mean,
                var: bn.var,
                stats,
            });
        }
        Ok(y)
    }

    fn conv_bn_relu(&mut self, x: Var, l: ConvBn) -> Result<Var> {
        let y = self.tape.conv2d(x, self.vars[l.kernel], None, l.stride, 1)?;
        let y = self.batchnorm(y, l.bn)?;
        Ok(self.tape.relu(y))
    }

    fn sep_conv_bn(&mut self, x: Var, l: SepConvBn) -> Result<Var> {
        let y = self.tape.depthwise_conv2d(x, self.vars[l.depthwise], 1, 1)?;
        let y = self.tape.pointwise_conv2d(y, self.vars[l.pointwise], None)?;
        self.batchnorm(y, l.bn)
    }

    fn dense(&mut self, x: Var, l: Dense) -> Result<Var> {
        self.tape.linear(x, self.vars[l.weight], Some(self.vars[l.bias]))
    }

    /// Spatial features `N x spatial_dim` from images `N x 3 x S x S`.
    pub fn spatial(&mut self, images: Var) -> Result<Var> {
        self.check_images("spatial_forward", images)?;
        let layout = &self.model.layout;
        let mut x = images;
        for l in layout.entry {
            x = self.conv_bn_relu(x, l)?;
        }
        x = self.tape.maxpool2(x)?;
        for block in &layout.middle {
            let mut y = x;
            for &l in block {
                y = self.tape.relu(y);
                y = self.sep_conv_bn(y, l)?;
            }
            x = self.tape.add(y, x)?;
        }
        x = self.sep_conv_bn(x, layout.exit)?;
        x = self.tape.relu(x);
        x = self.tape.global_avg_pool(x)?;
        self.dense(x, layout.spatial_head)
    }

    /// Frequency features `N x frequency_dim` from spectral maps `N x 3 x S x S`.
    pub fn frequency(&mut self, spectra: Var) -> Result<Var> {
        self.check_images("frequency_forward", spectra)?;
        let layout = &self.model.layout;
        let mut x = spectra;
        for l in layout.frequency {
            x = self.conv_bn_relu(x, l)?;
            x = self.tape.maxpool2(x)?;
        }
        x = self.tape.global_avg_pool(x)?;
        self.dense(x, layout.frequency_head)
    }

    /// Both branches, fusion `[spatial | frequency]`, projection, normalization
    /// and classification of the normalized embedding.
    pub fn embed(&mut self, images: Var, spectra: Var) -> Result<Forward> {
        let n = self.tape.shape(images)[0];
        if self.tape.shape(spectra).first() != Some(&n) {
            return Err(Error::dim("embed", "batch", "images and spectra differ in batch size"));
        }
        let spatial = self.spatial(images)?;
        let frequency = self.frequency(spectra)?;
        let layout = &self.model.layout;
        let fused = self.tape.concat_features(spatial, frequency)?;
        let h = self.dense(fused, layout.project_in)?;
        let h = self.tape.relu(h);
        let raw = self.dense(h, layout.project_out)?;
        let unit = self.tape.l2_normalize(raw)?;
        let logits = self.dense(unit, layout.classifier)?;
        Ok(Forward {
            spatial,
            frequency,
            fused,
            raw,
            unit,
            logits,
        })
    }

    /// Euclidean distance of each embedding row to the real center.
    pub fn distances(&mut self, unit: Var) -> Result<Var> {
        let c = self.center();
        self.tape.row_distance(unit, c)
    }

    /// Ends the pass, returning the tape, parameter handles and BN updates.
    pub fn finish(self) -> (Tape, Vec<Var>, Vec<BnUpdate>) {
        (self.tape, self.vars, self.updates)
    }
}
