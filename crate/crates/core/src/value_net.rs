//! Permutation-symmetric value network.
//!
//! Every neighbor slot runs through the same two symmetric layers (one
//! weight tensor shared by all slots, plus a block reading the agent's own
//! features), the branch outputs are max-pooled feature by feature, and two
//! fully connected layers map the pooled vector to a scalar value.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{LocalJointState, NEIGHBOR_DIM, OWN_DIM};
use crate::error::{Error, Result};

const CHECKPOINT_FORMAT: &str = "sacadrl-value-network";
const CHECKPOINT_VERSION: u32 = 1;

// Fixed input normalization: (x - shift) / scale.
const OWN_SHIFT: [f64; OWN_DIM] = [0.0, 1.05, 0.0, 0.0, 0.0, 0.35];
const OWN_SCALE: [f64; OWN_DIM] = [5.0, 0.5, 1.0, 1.0, 1.5, 0.1];
const NEIGHBOR_SHIFT: [f64; NEIGHBOR_DIM] = [0.0, 0.0, 0.0, 0.0, 0.35, 0.0, 0.0, 0.0];
const NEIGHBOR_SCALE: [f64; NEIGHBOR_DIM] = [5.0, 5.0, 1.0, 1.0, 0.1, 5.0, 1.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Widths {
    /// Features per neighbor branch after the first symmetric layer.
    pub symmetric1: usize,
    /// Features per neighbor branch after the second symmetric layer; also
    /// the size of the pooled vector.
    pub symmetric2: usize,
    /// Width of the hidden fully connected layer.
    pub hidden: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Self {
            symmetric1: 64,
            symmetric2: 64,
            hidden: 32,
        }
    }
}

/// All trainable tensors, row-major. Also used for gradients and optimizer
/// accumulators, which share the shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub sym1_own: Vec<f64>,
    pub sym1_shared: Vec<f64>,
    pub sym1_bias: Vec<f64>,
    pub sym2_own: Vec<f64>,
    pub sym2_shared: Vec<f64>,
    pub sym2_bias: Vec<f64>,
    pub fc_weight: Vec<f64>,
    pub fc_bias: Vec<f64>,
    pub out_weight: Vec<f64>,
    pub out_bias: Vec<f64>,
}

pub const TENSOR_NAMES: [&str; 10] = [
    "sym1.own",
    "sym1.shared",
    "sym1.bias",
    "sym2.own",
    "sym2.shared",
    "sym2.bias",
    "fc.weight",
    "fc.bias",
    "out.weight",
    "out.bias",
];

impl Params {
    pub fn zeros(w: &Widths) -> Self {
        Self {
            sym1_own: vec![0.0; w.symmetric1 * OWN_DIM],
            sym1_shared: vec![0.0; w.symmetric1 * NEIGHBOR_DIM],
            sym1_bias: vec![0.0; w.symmetric1],
            sym2_own: vec![0.0; w.symmetric2 * OWN_DIM],
            sym2_shared: vec![0.0; w.symmetric2 * w.symmetric1],
            sym2_bias: vec![0.0; w.symmetric2],
            fc_weight: vec![0.0; w.hidden * w.symmetric2],
            fc_bias: vec![0.0; w.hidden],
            out_weight: vec![0.0; w.hidden],
            out_bias: vec![0.0; 1],
        }
    }

    /// `(rows, cols)` of every tensor, in [`TENSOR_NAMES`] order.
    pub fn shapes(w: &Widths) -> [(usize, usize); 10] {
        [
            (w.symmetric1, OWN_DIM),
            (w.symmetric1, NEIGHBOR_DIM),
            (w.symmetric1, 1),
            (w.symmetric2, OWN_DIM),
            (w.symmetric2, w.symmetric1),
            (w.symmetric2, 1),
            (w.hidden, w.symmetric2),
            (w.hidden, 1),
            (1, w.hidden),
            (1, 1),
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 10] {
        [
            &self.sym1_own,
            &self.sym1_shared,
            &self.sym1_bias,
            &self.sym2_own,
            &self.sym2_shared,
            &self.sym2_bias,
            &self.fc_weight,
            &self.fc_bias,
            &self.out_weight,
            &self.out_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.sym1_own,
            &mut self.sym1_shared,
            &mut self.sym1_bias,
            &mut self.sym2_own,
            &mut self.sym2_shared,
            &mut self.sym2_bias,
            &mut self.fc_weight,
            &mut self.fc_bias,
            &mut self.out_weight,
            &mut self.out_bias,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// One regression example: a flattened joint state and its target value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueNetwork {
    n_agents: usize,
    widths: Widths,
    params: Params,
}

fn normalize<const N: usize>(x: &[f64], shift: &[f64; N], scale: &[f64; N], out: &mut [f64; N]) {
    for i in 0..N {
        out[i] = (x[i] - shift[i]) / scale[i];
    }
}

/// `out = bias + W x` for a row-major `rows x x.len()` matrix.
fn affine(w: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = bias[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W x`.
fn add_matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W^T g`.
fn add_matvec_t(w: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * gr;
        }
    }
}

/// `grad += g x^T`.
fn add_outer(grad: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        let row = &mut grad[r * cols..(r + 1) * cols];
        for (o, xi) in row.iter_mut().zip(x) {
            *o += gr * xi;
        }
    }
}

/// Intermediate activations of one forward pass, kept for backprop.
struct Trace {
    own: [f64; OWN_DIM],
    neighbors: Vec<[f64; NEIGHBOR_DIM]>,
    /// Pre-activations of both symmetric layers, per branch.
    z1: Vec<Vec<f64>>,
    z2: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    z3: Vec<f64>,
    output: f64,
}

impl ValueNetwork {
    /// Randomly initialized network with uniform weights scaled by fan-in.
    pub fn init_symmetric(n_agents: usize, widths: Widths, seed: u64) -> Result<Self> {
        if n_agents < 2 {
            return Err(Error::Config(format!(
                "network needs at least 2 agents, got {n_agents}"
            )));
        }
        if widths.symmetric1 == 0 || widths.symmetric2 == 0 || widths.hidden == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros(&widths);
        let fan_in = [
            OWN_DIM + NEIGHBOR_DIM,
            OWN_DIM + NEIGHBOR_DIM,
            0,
            OWN_DIM + widths.symmetric1,
            OWN_DIM + widths.symmetric1,
            0,
            widths.symmetric2,
            0,
            widths.hidden,
            0,
        ];
        for (t, &fan) in params.tensors_mut().into_iter().zip(fan_in.iter()) {
            if fan == 0 {
                continue;
            }
            let limit = (6.0 / fan as f64).sqrt();
            for w in t.iter_mut() {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(Self {
            n_agents,
            widths,
            params,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn widths(&self) -> Widths {
        self.widths
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn input_len(&self) -> usize {
        OWN_DIM + NEIGHBOR_DIM * (self.n_agents - 1)
    }

    fn check_len(&self, input: &[f64]) -> Result<()> {
        let len = input.len();
        if len < OWN_DIM + NEIGHBOR_DIM || (len - OWN_DIM) % NEIGHBOR_DIM != 0 {
            return Err(Error::Data(format!(
                "malformed joint state of length {len}"
            )));
        }
        let actual = 1 + (len - OWN_DIM) / NEIGHBOR_DIM;
        if actual != self.n_agents {
            return Err(Error::Arity {
                expected: self.n_agents,
                actual,
            });
        }
        Ok(())
    }

    /// Value of a flattened joint state.
    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        self.check_len(input)?;
        Ok(self.trace(input, false).output)
    }

    /// Value of a local joint state padded to the network arity.
    pub fn value(&self, state: &LocalJointState) -> Result<f64> {
        let actual = state.neighbors.len() + 1;
        if actual != self.n_agents {
            return Err(Error::Arity {
                expected: self.n_agents,
                actual,
            });
        }
        let mut buf = Vec::with_capacity(self.input_len());
        state.write_into(&mut buf);
        Ok(self.trace(&buf, false).output)
    }

    fn trace(&self, input: &[f64], keep: bool) -> Trace {
        let w = &self.widths;
        let p = &self.params;
        let mut own = [0.0; OWN_DIM];
        normalize(&input[..OWN_DIM], &OWN_SHIFT, &OWN_SCALE, &mut own);

        let mut own1 = vec![0.0; w.symmetric1];
        affine(&p.sym1_own, &p.sym1_bias, &own, &mut own1);
        let mut own2 = vec![0.0; w.symmetric2];
        affine(&p.sym2_own, &p.sym2_bias, &own, &mut own2);

        let slots = (input.len() - OWN_DIM) / NEIGHBOR_DIM;
        let mut pooled = vec![f64::NEG_INFINITY; w.symmetric2];
        let mut argmax = vec![0usize; w.symmetric2];
        let mut neighbors = Vec::new();
        let mut z1s = Vec::new();
        let mut z2s = Vec::new();
        let mut h1 = vec![0.0; w.symmetric1];
        for j in 0..slots {
            let start = OWN_DIM + j * NEIGHBOR_DIM;
            let mut nb = [0.0; NEIGHBOR_DIM];
            normalize(
                &input[start..start + NEIGHBOR_DIM],
                &NEIGHBOR_SHIFT,
                &NEIGHBOR_SCALE,
                &mut nb,
            );

            let mut z1 = own1.clone();
            add_matvec(&p.sym1_shared, &nb, &mut z1);
            for (h, z) in h1.iter_mut().zip(&z1) {
                *h = z.max(0.0);
            }
            let mut z2 = own2.clone();
            add_matvec(&p.sym2_shared, &h1, &mut z2);
            for (k, z) in z2.iter().enumerate() {
                let h = z.max(0.0);
                if h > pooled[k] {
                    pooled[k] = h;
                    argmax[k] = j;
                }
            }
            if keep {
                neighbors.push(nb);
                z1s.push(z1);
                z2s.push(z2);
            }
        }

        let mut z3 = vec![0.0; w.hidden];
        affine(&p.fc_weight, &p.fc_bias, &pooled, &mut z3);
        let output = p.out_bias[0]
            + p.out_weight
                .iter()
                .zip(&z3)
                .map(|(a, z)| a * z.max(0.0))
                .sum::<f64>();
        Trace {
            own,
            neighbors,
            z1: z1s,
            z2: z2s,
            pooled,
            argmax,
            z3,
            output,
        }
    }

    /// Gradients of the mean squared error over `batch`, and the loss.
    /// The shared neighbor tensors accumulate the gradient of every slot.
    pub fn backward(&self, batch: &[&Sample]) -> Result<(Params, f64)> {
        if batch.is_empty() {
            return Err(Error::Data("empty training batch".into()));
        }
        let w = &self.widths;
        let p = &self.params;
        let mut grad = Params::zeros(w);
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;

        let mut dz3 = vec![0.0; w.hidden];
        let mut dpooled = vec![0.0; w.symmetric2];
        let mut dz2 = vec![0.0; w.symmetric2];
        let mut dh1 = vec![0.0; w.symmetric1];
        let mut dz1 = vec![0.0; w.symmetric1];
        let mut h1 = vec![0.0; w.symmetric1];
        for sample in batch {
            self.check_len(&sample.input)?;
            let t = self.trace(&sample.input, true);
            let err = t.output - sample.target;
            loss += err * err * scale;
            let dout = 2.0 * err * scale;

            grad.out_bias[0] += dout;
            for k in 0..w.hidden {
                let h = t.z3[k].max(0.0);
                grad.out_weight[k] += dout * h;
                dz3[k] = if t.z3[k] > 0.0 {
                    dout * p.out_weight[k]
                } else {
                    0.0
                };
            }
            add_outer(&mut grad.fc_weight, &dz3, &t.pooled);
            for (g, d) in grad.fc_bias.iter_mut().zip(&dz3) {
                *g += d;
            }
            dpooled.iter_mut().for_each(|x| *x = 0.0);
            add_matvec_t(&p.fc_weight, &dz3, &mut dpooled);

            for (j, nb) in t.neighbors.iter().enumerate() {
                let mut any = false;
                for k in 0..w.symmetric2 {
                    dz2[k] = if t.argmax[k] == j && t.z2[j][k] > 0.0 {
                        any = true;
                        dpooled[k]
                    } else {
                        0.0
                    };
                }
                if !any {
                    continue;
                }
                for (h, z) in h1.iter_mut().zip(&t.z1[j]) {
                    *h = z.max(0.0);
                }
                add_outer(&mut grad.sym2_shared, &dz2, &h1);
                add_outer(&mut grad.sym2_own, &dz2, &t.own);
                for (g, d) in grad.sym2_bias.iter_mut().zip(&dz2) {
                    *g += d;
                }
                dh1.iter_mut().for_each(|x| *x = 0.0);
                add_matvec_t(&p.sym2_shared, &dz2, &mut dh1);
                for k in 0..w.symmetric1 {
                    dz1[k] = if t.z1[j][k] > 0.0 { dh1[k] } else { 0.0 };
                }
                add_outer(&mut grad.sym1_shared, &dz1, nb);
                add_outer(&mut grad.sym1_own, &dz1, &t.own);
                for (g, d) in grad.sym1_bias.iter_mut().zip(&dz1) {
                    *g += d;
                }
            }
        }
        Ok((grad, loss))
    }

    /// Mean squared error over `samples`.
    pub fn mse(&self, samples: &[&Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Data("empty sample set".into()));
        }
        let mut total = 0.0;
        for s in samples {
            let e = self.forward(&s.input)? - s.target;
            total += e * e;
        }
        Ok(total / samples.len() as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }

    pub fn to_checkpoint_string(&self) -> String {
        let shapes = Params::shapes(&self.widths);
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            n_agents: self.n_agents,
            widths: self.widths,
            tensors: TENSOR_NAMES
                .iter()
                .zip(shapes)
                .zip(self.params.tensors())
                .map(|((name, (rows, cols)), data)| TensorRecord {
                    name: name.to_string(),
                    shape: [rows, cols],
                    data: data.to_vec(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string(&ck).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut net = Self::init_symmetric(ck.n_agents, ck.widths, 0)
            .map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
        let shapes = Params::shapes(&ck.widths);
        if ck.tensors.len() != TENSOR_NAMES.len() {
            return Err(Error::Data("checkpoint: wrong number of tensors".into()));
        }
        for (((rec, name), shape), dst) in ck
            .tensors
            .into_iter()
            .zip(TENSOR_NAMES)
            .zip(shapes)
            .zip(net.params.tensors_mut())
        {
            if rec.name != name || rec.shape != [shape.0, shape.1] || rec.data.len() != dst.len() {
                return Err(Error::Data(format!("checkpoint: bad tensor {}", rec.name)));
            }
            *dst = rec.data;
        }
        Ok(net)
    }

    /// Human-readable description of the layer stack.
    pub fn summary(&self) -> String {
        let w = &self.widths;
        let shapes = Params::shapes(w);
        let mut out = format!(
            "value network: {} agents ({} neighbor slots), input {} = {} own + {} x {}\n",
            self.n_agents,
            self.n_agents - 1,
            self.input_len(),
            OWN_DIM,
            self.n_agents - 1,
            NEIGHBOR_DIM
        );
        out += &format!(
            "  symmetric layer 1: {} -> {} per branch (relu)\n  symmetric layer 2: {} -> {} per branch (relu)\n  max-pool over branches -> {}\n  fully connected: {} -> {} (relu)\n  output: {} -> 1 (linear)\n",
            OWN_DIM + NEIGHBOR_DIM,
            w.symmetric1,
            OWN_DIM + w.symmetric1,
            w.symmetric2,
            w.symmetric2,
            w.symmetric2,
            w.hidden,
            w.hidden
        );
        for ((name, (r, c)), t) in TENSOR_NAMES.iter().zip(shapes).zip(self.params.tensors()) {
            let norm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            out += &format!("  {name:<12} {r:>3} x {c:<3} |w|={norm:.4}\n");
        }
        out += &format!("  parameters: {}\n", self.params.len());
        out
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    n_agents: usize,
    widths: Widths,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    /// Decay of the squared-gradient average.
    pub decay: f64,
    pub epsilon: f64,
    /// L2 coefficient added to the gradient.
    pub weight_decay: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay: 0.9,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// RMSprop with per-weight squared-gradient accumulators that persist
/// across steps.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    mean_square: Params,
}

impl RmsProp {
    pub fn new(net: &ValueNetwork, config: RmsPropConfig) -> Self {
        Self {
            config,
            mean_square: Params::zeros(&net.widths),
        }
    }

    pub fn step(&mut self, net: &mut ValueNetwork, grads: &Params) {
        let c = self.config;
        for ((w, g), ms) in net
            .params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.mean_square.tensors_mut())
        {
            for ((wi, &gi), mi) in w.iter_mut().zip(g).zip(ms.iter_mut()) {
                let gi = gi + c.weight_decay * *wi;
                *mi = c.decay * *mi + (1.0 - c.decay) * gi * gi;
                *wi -= c.learning_rate * gi / (mi.sqrt() + c.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Held-out mean squared error that counts as converged.
    pub threshold: f64,
    pub holdout_fraction: f64,
    pub optimizer: RmsPropConfig,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 64,
            threshold: 0.02,
            holdout_fraction: 0.1,
            optimizer: RmsPropConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionReport {
    pub epochs: usize,
    pub train_mse: f64,
    pub holdout_mse: f64,
}

/// Supervised fit of `net` to `dataset`, stopping at the first epoch whose
/// held-out error is below the threshold.
pub fn regress(
    net: &mut ValueNetwork,
    dataset: &[Sample],
    config: &RegressionConfig,
) -> Result<RegressionReport> {
    if dataset.is_empty() {
        return Err(Error::Data("regression dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let n_hold = ((dataset.len() as f64 * config.holdout_fraction).round() as usize)
        .min(dataset.len().saturating_sub(1));
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let holdout: Vec<&Sample> = hold_idx.iter().map(|&i| &dataset[i]).collect();
    let mut train: Vec<&Sample> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let eval_set = if holdout.is_empty() {
        &train.clone()
    } else {
        &holdout
    };

    let mut opt = RmsProp::new(net, config.optimizer);
    let batch = config.batch_size.max(1);
    let mut holdout_mse = net.mse(eval_set)?;
    let mut train_mse = f64::NAN;
    for epoch in 1..=config.max_epochs {
        rand::seq::SliceRandom::shuffle(train.as_mut_slice(), &mut rng);
        let mut total = 0.0;
        for chunk in train.chunks(batch) {
            let (g, loss) = net.backward(chunk)?;
            opt.step(net, &g);
            total += loss * chunk.len() as f64;
        }
        train_mse = total / train.len() as f64;
        holdout_mse = net.mse(eval_set)?;
        if holdout_mse <= config.threshold {
            return Ok(RegressionReport {
                epochs: epoch,
                train_mse,
                holdout_mse,
            });
        }
    }
    if config.max_epochs == 0 && holdout_mse <= config.threshold {
        return Ok(RegressionReport {
            epochs: 0,
            train_mse,
            holdout_mse,
        });
    }
    Err(Error::NotConverged {
        loss: holdout_mse,
        threshold: config.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(n_agents: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x: Vec<f64> = (0..OWN_DIM + NEIGHBOR_DIM * (n_agents - 1))
            .map(|_| rng.gen_range(-3.0..3.0))
            .collect();
        for j in 0..n_agents - 1 {
            x[OWN_DIM + j * NEIGHBOR_DIM + 7] = 1.0;
        }
        x
    }

    fn small() -> Widths {
        Widths {
            symmetric1: 12,
            symmetric2: 10,
            hidden: 8,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ValueNetwork::init_symmetric(4, Widths::default(), 7).unwrap();
        let b = ValueNetwork::init_symmetric(4, Widths::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = ValueNetwork::init_symmetric(4, Widths::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_arity() {
        assert!(ValueNetwork::init_symmetric(1, Widths::default(), 0).is_err());
        let net = ValueNetwork::init_symmetric(3, small(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_input(2, &mut rng);
        assert!(matches!(
            net.forward(&x),
            Err(Error::Arity {
                expected: 3,
                actual: 2
            })
        ));
        assert!(net.forward(&x[..7]).is_err());
    }

    #[test]
    fn arity_two_pools_single_branch() {
        let net = ValueNetwork::init_symmetric(2, small(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_input(2, &mut rng);
        let t = net.trace(&x, true);
        for k in 0..small().symmetric2 {
            assert_eq!(t.pooled[k], t.z2[0][k].max(0.0));
        }
    }

    #[test]
    fn swapping_slots_keeps_value() {
        let net = ValueNetwork::init_symmetric(4, Widths::default(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_input(4, &mut rng);
        let mut y = x.clone();
        let (a, b) = (OWN_DIM, OWN_DIM + 2 * NEIGHBOR_DIM);
        for i in 0..NEIGHBOR_DIM {
            y.swap(a + i, b + i);
        }
        let (vx, vy) = (net.forward(&x).unwrap(), net.forward(&y).unwrap());
        assert!((vx - vy).abs() <= 1e-12 * (1.0 + vx.abs()));
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let net = ValueNetwork::init_symmetric(3, small(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_input(3, &mut rng);
        let target = net.forward(&input).unwrap();
        let s = Sample { input, target };
        let (g, loss) = net.backward(&[&s]).unwrap();
        assert!(loss <= 1e-20);
        assert!(g.max_abs() <= 1e-10);
    }

    #[test]
    fn duplicated_sample_has_same_gradient() {
        let net = ValueNetwork::init_symmetric(3, small(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Sample {
            input: random_input(3, &mut rng),
            target: 0.3,
        };
        let (g1, l1) = net.backward(&[&s]).unwrap();
        let (g2, l2) = net.backward(&[&s, &s]).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-15 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax_branch() {
        // A single relu feature per layer makes the pooled maximum easy to
        // control: branch 1 has the larger input, so only its entries of the
        // shared first-layer weight can receive gradient.
        let widths = Widths {
            symmetric1: 1,
            symmetric2: 1,
            hidden: 1,
        };
        let mut net = ValueNetwork::init_symmetric(3, widths, 0).unwrap();
        let p = net.params_mut();
        p.sym1_own = vec![0.0; OWN_DIM];
        p.sym1_shared = vec![0.0; NEIGHBOR_DIM];
        p.sym1_shared[0] = 1.0;
        p.sym1_bias = vec![0.0];
        p.sym2_own = vec![0.0; OWN_DIM];
        p.sym2_shared = vec![1.0];
        p.sym2_bias = vec![0.0];
        p.fc_weight = vec![1.0];
        p.fc_bias = vec![0.0];
        p.out_weight = vec![1.0];
        p.out_bias = vec![0.0];
        let mut input = vec![0.0; OWN_DIM + 2 * NEIGHBOR_DIM];
        input[OWN_DIM] = 1.0; // branch 0, p_x
        input[OWN_DIM + 1] = 7.0; // branch 0, p_y (unused by the weights)
        input[OWN_DIM + NEIGHBOR_DIM] = 2.0; // branch 1, p_x
        input[OWN_DIM + NEIGHBOR_DIM + 1] = 3.0; // branch 1, p_y
        let s = Sample { input, target: 0.0 };
        let (g, _) = net.backward(&[&s]).unwrap();
        // value = 2/5 and d loss/d value = 0.8; d value/d w[i] is branch 1's
        // normalized input i. Branch 0 would have added 7/5 to w[1].
        assert!((g.sym1_shared[1] - 0.8 * 3.0 / 5.0).abs() < 1e-12);
        assert!((g.sym1_shared[0] - 0.8 * 2.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_zero_gradient_is_noop() {
        let mut net = ValueNetwork::init_symmetric(2, small(), 1).unwrap();
        let before = net.clone();
        let mut opt = RmsProp::new(&net, RmsPropConfig::default());
        opt.step(&mut net, &Params::zeros(&small()));
        assert_eq!(net, before);
    }

    #[test]
    fn rmsprop_constant_gradient_step_approaches_learning_rate() {
        let mut net = ValueNetwork::init_symmetric(2, small(), 1).unwrap();
        let cfg = RmsPropConfig::default();
        let mut opt = RmsProp::new(&net, cfg);
        let mut g = Params::zeros(&small());
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.37);
        }
        for _ in 0..200 {
            opt.step(&mut net, &g);
        }
        let before = net.params().out_bias[0];
        opt.step(&mut net, &g);
        let step = before - net.params().out_bias[0];
        assert!((step - cfg.learning_rate).abs() < 1e-6 * cfg.learning_rate.max(1.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = ValueNetwork::init_symmetric(3, small(), 9).unwrap();
        let text = net.to_checkpoint_string();
        let back = ValueNetwork::from_checkpoint_str(&text).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_checkpoint_string(), text);
        assert!(ValueNetwork::from_checkpoint_str("{}").is_err());
    }

    #[test]
    fn clone_is_independent() {
        let net = ValueNetwork::init_symmetric(3, small(), 9).unwrap();
        let mut copy = net.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = random_input(3, &mut rng);
            assert_eq!(net.forward(&x).unwrap(), copy.forward(&x).unwrap());
        }
        copy.params_mut().out_bias[0] += 1.0;
        assert_ne!(copy, net);
        assert_eq!(net.clone().clone(), net);
    }

    #[test]
    fn regression_fits_constant_target() {
        let mut net = ValueNetwork::init_symmetric(2, small(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = random_input(2, &mut rng);
        let data = vec![
            Sample {
                input,
                target: 0.42
            };
            50
        ];
        let cfg = RegressionConfig {
            threshold: 1e-6,
            max_epochs: 2000,
            ..Default::default()
        };
        regress(&mut net, &data, &cfg).unwrap();
        assert!((net.forward(&data[0].input).unwrap() - 0.42).abs() < 1e-3);
        assert!(regress(&mut net, &[], &cfg).is_err());
    }
}
