//! Dense feed-forward classifiers and their exact reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "id")]
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    // ReLU subgradient at 0 is 0.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer: `out = act(W in + b)`, with `W` stored `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weights: Tensor,
    bias: Tensor,
    activation: Activation,
}

impl Layer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::Shape("layer weights must be 2-D".into()));
        }
        if bias.shape() != [weights.rows()] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {} outputs",
                bias.shape(),
                weights.rows()
            )));
        }
        if !weights.is_finite() || !bias.is_finite() {
            return Err(Error::Domain("layer parameters must be finite".into()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.weights.data_mut(), self.bias.data_mut())
    }

    fn pre_activation(&self, input: &[f64], rows: usize) -> Vec<f64> {
        let (n_in, n_out) = (self.inputs(), self.outputs());
        let w = self.weights.data();
        let b = self.bias.data();
        let mut z = vec![0.0; rows * n_out];
        for r in 0..rows {
            let x = &input[r * n_in..(r + 1) * n_in];
            let zr = &mut z[r * n_out..(r + 1) * n_out];
            for (o, zo) in zr.iter_mut().enumerate() {
                let wo = &w[o * n_in..(o + 1) * n_in];
                *zo = b[o] + wo.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        z
    }
}

/// Gradient of a scalar loss with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients, laid out exactly like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Shape("gradient layouts differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamGrads) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.len() == b.weights.len() && a.bias.len() == b.bias.len())
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Gradients with respect to parameters and to the batch inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: ParamGrads,
    pub input: Tensor,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        self.params.add_assign(&other.params)?;
        if !self.input.same_shape(&other.input) {
            return Err(Error::Shape("input gradient shapes differ".into()));
        }
        self.input
            .data_mut()
            .iter_mut()
            .zip(other.input.data())
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Cached intermediate values of one forward pass, needed for backward.
#[derive(Debug, Clone)]
pub struct Trace {
    rows: usize,
    input: Tensor,
    // activations[l] is the input of layer l; the final entry is the logits.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    probs: Tensor,
}

impl Trace {
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("trace has logits")
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }
}

/// Feed-forward classifier producing `num_classes` probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRecord", into = "ModelRecord")]
pub struct Model {
    layers: Vec<Layer>,
    num_classes: usize,
    seed: u64,
}

impl Model {
    pub fn new(layers: Vec<Layer>, num_classes: usize, seed: u64) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::Shape("model needs at least one layer".into()));
        };
        if num_classes == 0 {
            return Err(Error::Domain("num_classes must be positive".into()));
        }
        if last.outputs() != num_classes {
            return Err(Error::Shape(format!(
                "final layer width {} does not equal num_classes {num_classes}",
                last.outputs()
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} values but layer {} takes {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self {
            layers,
            num_classes,
            seed,
        })
    }

    /// Randomly initialised MLP. `widths` lists every layer width from the
    /// input dimension to the class count; hidden layers use ReLU and the
    /// output layer is linear. Weights are Glorot-uniform, biases zero.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        Self::build(widths, seed, |rng, fan_in, fan_out| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            rng.random_range(-bound..=bound)
        })
    }

    /// MLP with every parameter zero.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::build(widths, 0, |_, _, _| 0.0)
    }

    fn build(
        widths: &[usize],
        seed: u64,
        mut draw: impl FnMut(&mut ChaCha8Rng, usize, usize) -> f64,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Shape(format!(
                "layer widths {widths:?} need an input and an output width, all positive"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| draw(&mut rng, fan_in, fan_out))
                .collect();
            let act = if l + 1 == n_layers {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Layer::new(
                Tensor::matrix(fan_out, fan_in, w)?,
                Tensor::zeros(vec![fan_out]),
                act,
            )?);
        }
        Self::new(layers, widths[widths.len() - 1], seed)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters flattened in [`ParamGrads::iter`] order: per layer, weights then bias.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.data().iter().chain(l.bias.data()))
            .copied()
            .collect()
    }

    /// Same architecture with the parameters replaced by `flat` (order of [`Model::params`]).
    pub fn with_params(&self, flat: &[f64]) -> Result<Model> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters given, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut rest = flat;
        for layer in out.layers_mut() {
            let (w, b) = layer.params_mut();
            let (head, tail) = rest.split_at(w.len());
            w.copy_from_slice(head);
            let (head, tail) = tail.split_at(b.len());
            b.copy_from_slice(head);
            rest = tail;
        }
        Ok(out)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match input width {}",
                batch.shape(),
                self.input_dim()
            )));
        }
        if !batch.is_finite() {
            return Err(Error::Domain("batch contains non-finite values".into()));
        }
        Ok(())
    }

    /// Class probabilities for every row of `batch`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(batch)?.probs)
    }

    pub fn forward_trace(&self, batch: &Tensor) -> Result<Trace> {
        self.check_batch(batch)?;
        let rows = batch.rows();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(batch.data().to_vec());
        for layer in &self.layers {
            let z = layer.pre_activation(activations.last().unwrap(), rows);
            let a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre_activations.push(z);
            activations.push(a);
        }
        let logits = activations.last().unwrap();
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.chunks(self.num_classes) {
            probs.extend(softmax(row));
        }
        Ok(Trace {
            rows,
            input: batch.clone(),
            activations,
            pre_activations,
            probs: Tensor::matrix(rows, self.num_classes, probs)?,
        })
    }

    /// Backpropagates a gradient on the logits (`rows x num_classes`).
    pub fn backward_logits(&self, trace: &Trace, dlogits: &[f64]) -> Result<Gradients> {
        if dlogits.len() != trace.rows * self.num_classes {
            return Err(Error::Shape(format!(
                "logit gradient has {} values, expected {}",
                dlogits.len(),
                trace.rows * self.num_classes
            )));
        }
        let rows = trace.rows;
        let mut grads = ParamGrads::zeros_like(self);
        // gradient w.r.t. the output of the current layer (post-activation)
        let mut upstream = dlogits.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (n_in, n_out) = (layer.inputs(), layer.outputs());
            let z = &trace.pre_activations[l];
            let input = &trace.activations[l];
            let dz: Vec<f64> = upstream
                .iter()
                .zip(z)
                .map(|(g, &zv)| g * layer.activation.derivative(zv))
                .collect();
            let w = layer.weights.data();
            let lg = &mut grads.layers[l];
            let mut down = vec![0.0; rows * n_in];
            for r in 0..rows {
                let x = &input[r * n_in..(r + 1) * n_in];
                let dzr = &dz[r * n_out..(r + 1) * n_out];
                let dr = &mut down[r * n_in..(r + 1) * n_in];
                for (o, &g) in dzr.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    lg.bias[o] += g;
                    let wo = &w[o * n_in..(o + 1) * n_in];
                    let dwo = &mut lg.weights[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        dwo[i] += g * x[i];
                        dr[i] += g * wo[i];
                    }
                }
            }
            upstream = down;
        }
        Ok(Gradients {
            params: grads,
            input: Tensor::new(trace.input.shape().to_vec(), upstream)?,
        })
    }

    /// Backpropagates a gradient on the output probabilities through softmax.
    pub fn backward_probs(&self, trace: &Trace, dprobs: &[f64]) -> Result<Gradients> {
        let m = self.num_classes;
        if dprobs.len() != trace.rows * m {
            return Err(Error::Shape("probability gradient has the wrong length".into()));
        }
        let mut dlogits = Vec::with_capacity(dprobs.len());
        for (p, g) in trace.probs.iter_rows().zip(dprobs.chunks(m)) {
            dlogits.extend(softmax_backward(p, g));
        }
        self.backward_logits(trace, &dlogits)
    }
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Vector-Jacobian product of softmax: `dz_j = p_j (g_j - <p, g>)`.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(dprobs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(dprobs)
        .map(|(p, g)| p * (g - dot))
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of a probability matrix.
pub fn predictions(probs: &Tensor) -> Vec<usize> {
    probs.iter_rows().map(argmax).collect()
}

// Checkpoint wire format.

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    act: Activation,
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    layers: Vec<LayerRecord>,
    num_classes: usize,
    seed: u64,
}

impl From<Model> for ModelRecord {
    fn from(m: Model) -> Self {
        ModelRecord {
            layers: m
                .layers
                .iter()
                .map(|l| LayerRecord {
                    w: l.weights.iter_rows().map(|r| r.to_vec()).collect(),
                    b: l.bias.data().to_vec(),
                    act: l.activation,
                })
                .collect(),
            num_classes: m.num_classes,
            seed: m.seed,
        }
    }
}

impl TryFrom<ModelRecord> for Model {
    type Error = Error;

    fn try_from(r: ModelRecord) -> Result<Self> {
        let layers = r
            .layers
            .into_iter()
            .map(|l| {
                let b = Tensor::vector(l.b)?;
                Layer::new(Tensor::from_rows(&l.w)?, b, l.act)
            })
            .collect::<Result<Vec<_>>>()?;
        Model::new(layers, r.num_classes, r.seed)
    }
}

impl Model {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_model() -> Model {
        let w = Tensor::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap();
        let layer = Layer::new(w, Tensor::zeros(vec![2]), Activation::Identity).unwrap();
        Model::new(vec![layer], 2, 0).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = Model::zeros(&[3, 5, 4]).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.9, 0.3], [1.0, 0.0, 0.5]]).unwrap();
        let p = m.forward(&x).unwrap();
        for v in p.data() {
            assert_eq!(*v, 0.25);
        }
    }

    #[test]
    fn diagonal_model_softmax() {
        let p = diag_model()
            .forward(&Tensor::from_rows(&[[1.0, 0.0]]).unwrap())
            .unwrap();
        // softmax(2, 0) = (e^2/(e^2+1), 1/(e^2+1))
        let e2 = 2f64.exp();
        assert!((p.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p.data()[0] - 0.8808).abs() < 1e-4);
        assert!((p.data()[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = diag_model();
        let wide = Tensor::from_rows(&[[1.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(m.forward(&wide), Err(Error::Shape(_))));
        let nan = Tensor::from_rows(&[[f64::NAN, 0.0]]).unwrap();
        assert!(matches!(m.forward(&nan), Err(Error::Domain(_))));
    }

    #[test]
    fn layer_chain_is_validated() {
        let l1 = Layer::new(Tensor::zeros(vec![3, 2]), Tensor::zeros(vec![3]), Activation::Relu)
            .unwrap();
        let l2 = Layer::new(Tensor::zeros(vec![2, 4]), Tensor::zeros(vec![2]), Activation::Identity)
            .unwrap();
        assert!(Model::new(vec![l1.clone(), l2], 2, 0).is_err());
        let l3 = Layer::new(Tensor::zeros(vec![2, 3]), Tensor::zeros(vec![2]), Activation::Identity)
            .unwrap();
        assert!(Model::new(vec![l1.clone(), l3.clone()], 3, 0).is_err());
        assert!(Model::new(vec![l1, l3], 2, 0).is_ok());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn checkpoint_is_byte_stable() {
        let m = Model::init(&[4, 6, 3], 17).unwrap();
        let s1 = m.to_json().unwrap();
        let back = Model::from_json(&s1).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), s1);
        assert!(s1.contains("\"act\":\"relu\""));
        assert!(s1.contains("\"act\":\"id\""));
    }

    #[test]
    fn checkpoint_rejects_broken_chain() {
        let s = r#"{"layers":[{"w":[[1.0,2.0]],"b":[0.0],"act":"id"}],"num_classes":2,"seed":0}"#;
        assert!(Model::from_json(s).is_err());
    }
}
