//! Classifier construction, named parameter access and splicing.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{dim_err, input_err, Result};
use crate::tensor::Tensor;

/// Momentum used to fold batch statistics into running estimates.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; updated only by training-mode forward passes.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    kind: ParamKind,
}

/// Ordered registry of named tensors. Names are unique and iteration order
/// is insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return input_err(format!("duplicate parameter name {name:?}"));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, tensor, kind });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(move |i| &mut self.entries[i].tensor)
    }

    pub fn by_id(&self, id: usize) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].tensor
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].name
    }

    pub fn kind(&self, id: usize) -> ParamKind {
        self.entries[id].kind
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, ParamKind)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor, e.kind))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, ParamKind)> {
        self.entries.iter_mut().map(|e| (e.name.as_str(), &mut e.tensor, e.kind))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(_, _, k)| *k == ParamKind::Trainable).map(|(n, t, _)| (n, t))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// True when both stores have the same names, kinds and shapes in the
    /// same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.tensor.shape() == b.tensor.shape())
    }
}

/// Architecture family and widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Fully connected ReLU network on flattened input.
    Mlp { hidden: Vec<usize> },
    /// Conv-bn-relu stages with 2x max-pool downsampling between stages.
    SmallCnn { channels: Vec<usize> },
    /// Stem plus basic residual blocks; later stages open with a stride-2 block.
    SmallResnet { channels: Vec<usize>, blocks_per_stage: usize },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::SmallResnet { channels: vec![16, 32, 64], blocks_per_stage: 1 }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Mlp { hidden } => write!(f, "mlp(hidden={hidden:?})"),
            ModelSpec::SmallCnn { channels } => write!(f, "small_cnn(channels={channels:?})"),
            ModelSpec::SmallResnet { channels, blocks_per_stage } => {
                write!(f, "small_resnet(channels={channels:?}, blocks_per_stage={blocks_per_stage})")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Flatten,
    Linear { weight: usize, bias: usize },
    Conv { weight: usize, stride: usize, padding: usize },
    BatchNorm { gamma: usize, beta: usize, running_mean: usize, running_var: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    /// `relu(branch(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual { branch: Vec<Layer>, shortcut: Vec<Layer> },
}

/// Running-statistics update produced by a training-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub running_mean: usize,
    pub running_var: usize,
    pub stats: BatchStats,
}

/// Result of recording a forward pass on a graph.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Trainable parameter id and the graph leaf it was bound to.
    pub bindings: Vec<(usize, Var)>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Which side of the convolutional-trunk / classifier-head split a
/// parameter falls on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSelector {
    /// The final linear head.
    Head,
    /// Everything except the head, batch-norm tensors included.
    ConvSide,
    All,
    Nothing,
    Prefix(String),
}

pub const HEAD_PREFIX: &str = "head.";

impl ParamSelector {
    pub fn matches(&self, name: &str) -> bool {
        match self {
            ParamSelector::Head => name.starts_with(HEAD_PREFIX),
            ParamSelector::ConvSide => !name.starts_with(HEAD_PREFIX),
            ParamSelector::All => true,
            ParamSelector::Nothing => false,
            ParamSelector::Prefix(p) => name.starts_with(p.as_str()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<Layer>,
    params: ParamStore,
}

struct Builder<'a> {
    params: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn he_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f32).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }

    fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<Layer> {
        let w = self.he_uniform(&[input, output], input);
        let weight = self.params.insert(format!("{name}.weight"), w, ParamKind::Trainable)?;
        let bias = self.params.insert(format!("{name}.bias"), Tensor::zeros(&[output]), ParamKind::Trainable)?;
        Ok(Layer::Linear { weight, bias })
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Layer> {
        let w = self.he_uniform(&[cout, cin, k, k], cin * k * k);
        let weight = self.params.insert(format!("{name}.weight"), w, ParamKind::Trainable)?;
        Ok(Layer::Conv { weight, stride, padding: k / 2 })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<Layer> {
        let p = &mut self.params;
        Ok(Layer::BatchNorm {
            gamma: p.insert(format!("{name}.weight"), Tensor::full(&[c], 1.0), ParamKind::Trainable)?,
            beta: p.insert(format!("{name}.bias"), Tensor::zeros(&[c]), ParamKind::Trainable)?,
            running_mean: p.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer)?,
            running_var: p.insert(format!("{name}.running_var"), Tensor::full(&[c], 1.0), ParamKind::Buffer)?,
        })
    }
}

impl Model {
    /// Builds a freshly initialised model for `[c, h, w]` inputs.
    ///
    /// Weights are He-uniform, biases zero, batch-norm scale one and shift
    /// zero.
    pub fn build(spec: &ModelSpec, input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<Model> {
        if num_classes < 2 {
            return input_err(format!("need at least 2 classes, got {num_classes}"));
        }
        if input_shape.contains(&0) {
            return dim_err(format!("input shape {input_shape:?} has a zero dimension"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: ParamStore::new(), rng: &mut rng };
        let [c, h, w] = input_shape;
        let mut layers = Vec::new();
        let head_in = match spec {
            ModelSpec::Mlp { hidden } => {
                layers.push(Layer::Flatten);
                let mut width = c * h * w;
                for (i, &hdim) in hidden.iter().enumerate() {
                    if hdim == 0 {
                        return dim_err("hidden layer of width 0");
                    }
                    layers.push(b.linear(&format!("fc{i}"), width, hdim)?);
                    layers.push(Layer::Relu);
                    width = hdim;
                }
                width
            }
            ModelSpec::SmallCnn { channels } => {
                check_stages(channels, h, w)?;
                let mut cin = c;
                for (i, &cout) in channels.iter().enumerate() {
                    if i > 0 {
                        layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
                    }
                    layers.push(b.conv(&format!("stage{i}.conv"), cin, cout, 3, 1)?);
                    layers.push(b.bn(&format!("stage{i}.bn"), cout)?);
                    layers.push(Layer::Relu);
                    cin = cout;
                }
                layers.push(Layer::GlobalAvgPool);
                cin
            }
            ModelSpec::SmallResnet { channels, blocks_per_stage } => {
                check_stages(channels, h, w)?;
                if *blocks_per_stage == 0 {
                    return input_err("blocks_per_stage must be at least 1");
                }
                layers.push(b.conv("stem.conv", c, channels[0], 3, 1)?);
                layers.push(b.bn("stem.bn", channels[0])?);
                layers.push(Layer::Relu);
                let mut cin = channels[0];
                for (s, &cout) in channels.iter().enumerate() {
                    for k in 0..*blocks_per_stage {
                        let stride = if s > 0 && k == 0 { 2 } else { 1 };
                        let name = format!("stage{s}.block{k}");
                        let branch = vec![
                            b.conv(&format!("{name}.conv1"), cin, cout, 3, stride)?,
                            b.bn(&format!("{name}.bn1"), cout)?,
                            Layer::Relu,
                            b.conv(&format!("{name}.conv2"), cout, cout, 3, 1)?,
                            b.bn(&format!("{name}.bn2"), cout)?,
                        ];
                        let shortcut = if stride != 1 || cin != cout {
                            vec![
                                b.conv(&format!("{name}.shortcut.conv"), cin, cout, 1, stride)?,
                                b.bn(&format!("{name}.shortcut.bn"), cout)?,
                            ]
                        } else {
                            Vec::new()
                        };
                        layers.push(Layer::Residual { branch, shortcut });
                        cin = cout;
                    }
                }
                layers.push(Layer::GlobalAvgPool);
                cin
            }
        };
        layers.push(b.linear("head", head_in, num_classes)?);
        Ok(Model { spec: spec.clone(), input_shape, num_classes, layers, params: b.params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Human-readable architecture description used in error messages.
    pub fn describe(&self) -> String {
        let [c, h, w] = self.input_shape;
        format!("{} input={c}x{h}x{w} classes={}", self.spec, self.num_classes)
    }

    /// Replaces all tensors with `params`, which must match this model's
    /// layout exactly.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        if !self.params.same_layout(&params) {
            return input_err(format!("parameters do not match architecture {}", self.describe()));
        }
        self.params = params;
        Ok(())
    }

    /// True when `other` has the same architecture and parameter layout.
    pub fn same_architecture(&self, other: &Model) -> bool {
        self.spec == other.spec
            && self.input_shape == other.input_shape
            && self.num_classes == other.num_classes
            && self.params.same_layout(&other.params)
    }

    /// Records a forward pass of `input[b, c, h, w]` onto `g`.
    pub fn forward(&self, g: &mut Graph, input: Var, mode: Mode) -> Result<Forward> {
        let shape = g.value(input).shape();
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return dim_err(format!(
                "input of shape {shape:?} does not fit {}",
                self.describe()
            ));
        }
        let mut fwd = Forward { logits: input, bindings: Vec::new(), bn_updates: Vec::new() };
        let out = self.run_layers(&self.layers, g, input, mode, &mut fwd)?;
        fwd.logits = out;
        Ok(fwd)
    }

    fn bind(&self, g: &mut Graph, id: usize, fwd: &mut Forward) -> Var {
        let v = g.param(self.params.by_id(id).clone());
        fwd.bindings.push((id, v));
        v
    }

    fn run_layers(&self, layers: &[Layer], g: &mut Graph, mut x: Var, mode: Mode, fwd: &mut Forward) -> Result<Var> {
        for layer in layers {
            x = match layer {
                Layer::Flatten => g.flatten(x)?,
                Layer::Linear { weight, bias } => {
                    let w = self.bind(g, *weight, fwd);
                    let b = self.bind(g, *bias, fwd);
                    let y = g.matmul(x, w)?;
                    g.add_bias(y, b)?
                }
                Layer::Conv { weight, stride, padding } => {
                    let w = self.bind(g, *weight, fwd);
                    g.conv2d(x, w, *stride, *padding)?
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                    let ga = self.bind(g, *gamma, fwd);
                    let be = self.bind(g, *beta, fwd);
                    match mode {
                        Mode::Train => {
                            let (y, stats) = g.batchnorm2d_train(x, ga, be)?;
                            fwd.bn_updates.push(BnUpdate {
                                running_mean: *running_mean,
                                running_var: *running_var,
                                stats,
                            });
                            y
                        }
                        Mode::Eval => g.batchnorm2d_eval(
                            x,
                            ga,
                            be,
                            self.params.by_id(*running_mean).data(),
                            self.params.by_id(*running_var).data(),
                        )?,
                    }
                }
                Layer::Relu => g.relu(x)?,
                Layer::MaxPool { kernel, stride } => g.max_pool2d(x, *kernel, *stride)?,
                Layer::GlobalAvgPool => g.global_avg_pool(x)?,
                Layer::Residual { branch, shortcut } => {
                    let main = self.run_layers(branch, g, x, mode, fwd)?;
                    let skip = self.run_layers(shortcut, g, x, mode, fwd)?;
                    let sum = g.add(main, skip)?;
                    g.relu(sum)?
                }
            };
        }
        Ok(x)
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            blend(self.params.by_id_mut(u.running_mean).data_mut(), &u.stats.mean);
            blend(self.params.by_id_mut(u.running_var).data_mut(), &u.stats.var);
        }
    }

    /// Adds the gradients accumulated on `g` into the bound parameters.
    pub fn accumulate_grads(&mut self, g: &Graph, bindings: &[(usize, Var)]) {
        for &(id, var) in bindings {
            if let Some(grad) = g.grad(var) {
                self.params.by_id_mut(id).accumulate_grad(grad);
            }
        }
    }

    /// Logits for a batch, computed without recording gradients.
    pub fn logits(&self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let fwd = self.forward(&mut g, x, mode)?;
        Ok(g.value(fwd.logits).clone())
    }
}

fn blend(running: &mut [f32], observed: &[f32]) {
    for (r, &o) in running.iter_mut().zip(observed) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
    }
}

fn check_stages(channels: &[usize], h: usize, w: usize) -> Result<()> {
    if channels.is_empty() {
        return input_err("at least one stage is required");
    }
    if channels.contains(&0) {
        return dim_err("stage with 0 channels");
    }
    let factor = 1usize << (channels.len() - 1);
    if h < factor || w < factor {
        return dim_err(format!(
            "input {h}x{w} is smaller than the total downsampling factor {factor}"
        ));
    }
    Ok(())
}

/// New model with `selector`-matched tensors taken from `donor` and the rest
/// from `base`.
pub fn splice_parameters(base: &Model, donor: &Model, selector: &ParamSelector) -> Result<Model> {
    if !base.same_architecture(donor) {
        return input_err(format!(
            "cannot splice {} with {}",
            base.describe(),
            donor.describe()
        ));
    }
    let mut out = base.clone();
    for id in 0..out.params.len() {
        if selector.matches(out.params.name(id)) {
            *out.params.by_id_mut(id) = donor.params.by_id(id).clone();
        }
    }
    out.params.zero_grad();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mlp_parameter_count() {
        let m = Model::build(&ModelSpec::Mlp { hidden: vec![8] }, [4, 1, 1], 3, 0).unwrap();
        assert_eq!(m.params().trainable_count(), 4 * 8 + 8 + 8 * 3 + 3);
        let logistic = Model::build(&ModelSpec::Mlp { hidden: vec![] }, [4, 1, 1], 3, 0).unwrap();
        assert_eq!(logistic.params().trainable_count(), 15);
    }

    #[test]
    fn zero_head_gives_uniform_output() {
        let mut m = Model::build(&ModelSpec::Mlp { hidden: vec![8] }, [4, 1, 1], 3, 1).unwrap();
        m.params_mut().get_mut("head.weight").unwrap().data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[5, 4, 1, 1], &mut rng);
        let logits = m.logits(&x, Mode::Eval).unwrap();
        assert_eq!(logits.shape(), &[5, 3]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cnn_and_resnet_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[2, 3, 32, 32], &mut rng);
        for spec in [
            ModelSpec::SmallCnn { channels: vec![8, 16] },
            ModelSpec::SmallResnet { channels: vec![8, 16], blocks_per_stage: 2 },
        ] {
            let m = Model::build(&spec, [3, 32, 32], 10, 0).unwrap();
            assert_eq!(m.logits(&x, Mode::Eval).unwrap().shape(), &[2, 10]);
            assert_eq!(m.params().names().filter(|n| n.ends_with("head.weight")).count(), 1);
        }
    }

    #[test]
    fn too_small_input_is_dimension_error() {
        let spec = ModelSpec::SmallResnet { channels: vec![4, 4, 4, 4], blocks_per_stage: 1 };
        assert!(matches!(
            Model::build(&spec, [3, 4, 4], 10, 0),
            Err(crate::Error::Dimension(_))
        ));
        assert!(Model::build(&ModelSpec::SmallCnn { channels: vec![] }, [3, 8, 8], 10, 0).is_err());
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let spec = ModelSpec::SmallResnet { channels: vec![4], blocks_per_stage: 1 };
        let mut m = Model::build(&spec, [4, 6, 6], 2, 0).unwrap();
        for name in ["stage0.block0.bn2.weight", "stage0.block0.bn2.bias"] {
            m.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let Layer::Residual { branch, shortcut } = &m.layers[3] else { panic!("expected block") };
        assert!(shortcut.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::rand_uniform(&[2, 4, 6, 6], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut fwd = Forward { logits: xv, bindings: vec![], bn_updates: vec![] };
        let block = Layer::Residual { branch: branch.clone(), shortcut: vec![] };
        let y = m.run_layers(&[block], &mut g, xv, Mode::Eval, &mut fwd).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn selector_partition_is_total_and_disjoint() {
        let m = Model::build(&ModelSpec::default(), [3, 16, 16], 10, 0).unwrap();
        for name in m.params().names() {
            assert!(ParamSelector::Head.matches(name) ^ ParamSelector::ConvSide.matches(name));
        }
    }

    #[test]
    fn splice_cases() {
        let spec = ModelSpec::SmallCnn { channels: vec![4, 8] };
        let a = Model::build(&spec, [3, 8, 8], 5, 1).unwrap();
        let b = Model::build(&spec, [3, 8, 8], 5, 2).unwrap();
        assert_eq!(splice_parameters(&a, &b, &ParamSelector::Nothing).unwrap(), a);
        assert_eq!(splice_parameters(&a, &b, &ParamSelector::All).unwrap(), b);
        assert_eq!(splice_parameters(&a, &a, &ParamSelector::Head).unwrap(), a);
        let head = splice_parameters(&a, &b, &ParamSelector::Head).unwrap();
        assert_eq!(head.params().get("head.weight"), b.params().get("head.weight"));
        assert_eq!(head.params().get("stage0.conv.weight"), a.params().get("stage0.conv.weight"));

        let other = Model::build(&ModelSpec::SmallCnn { channels: vec![4, 4] }, [3, 8, 8], 5, 1).unwrap();
        assert!(splice_parameters(&a, &other, &ParamSelector::Head).is_err());
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let spec = ModelSpec::SmallCnn { channels: vec![2] };
        let mut m = Model::build(&spec, [1, 4, 4], 2, 0).unwrap();
        let x = Tensor::full(&[3, 1, 4, 4], 2.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let fwd = m.forward(&mut g, xv, Mode::Train).unwrap();
        assert_eq!(fwd.bn_updates.len(), 1);
        let before = m.params().get("stage0.bn.running_mean").unwrap().clone();
        m.apply_bn_updates(&fwd.bn_updates);
        assert_ne!(m.params().get("stage0.bn.running_mean").unwrap(), &before);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let m = Model::build(&ModelSpec::default(), [3, 16, 16], 10, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 3, 16, 16], &mut rng);
        assert_eq!(m.logits(&x, Mode::Eval).unwrap(), m.logits(&x, Mode::Eval).unwrap());
    }
}
