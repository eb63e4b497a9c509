//! A small ReLU MLP classifier trained with class-weighted softmax
//! cross-entropy and Adam.
//!
//! Dense layers store their weight as an `in x out` row-major matrix, so the
//! classifier head of a `(64,)` hidden network over 10 classes is `64 x 10`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::trigger::{apply_trigger, PoisonSpec};
use crate::error::{Error, Result};
use crate::weightstore::{Label, NetworkRecord, WeightTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Loss weight per class; classes not listed weigh 1.0.
    pub class_weights: BTreeMap<usize, f64>,
    pub split_ratio: f64,
    /// Drives batch shuffling (and, in a corpus, the split and poisoning).
    pub seed: u64,
    /// Seed of the initial parameters. `None` reuses `seed`; a fixed value
    /// makes every run start from the same point, like fine-tuning a shared
    /// pretrained model.
    pub init_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dims: vec![64],
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            class_weights: BTreeMap::new(),
            split_ratio: 0.7,
            seed: 0,
            init_seed: Some(0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.hidden_dims.contains(&0) {
            return bad("hidden_dims must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning_rate and adam_eps must be positive");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam_betas must lie in [0, 1)");
        }
        if self.class_weights.values().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad("class weights must be positive");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split_ratio must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn class_weight_vector(&self, n_classes: usize) -> Vec<f64> {
        (0..n_classes)
            .map(|c| self.class_weights.get(&c).copied().unwrap_or(1.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `in_dim x out_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (xi, row) in x.iter().zip(self.weight.chunks_exact(self.out_dim)) {
            if *xi != 0.0 {
                out.iter_mut().zip(row).for_each(|(o, w)| *o += xi * w);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization for weights and biases.
    pub fn init(input: usize, hidden: &[usize], output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut d = Dense::zeros(w[0], w[1]);
                d.weight.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                d.bias.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                d
            })
            .collect();
        Mlp { layers }
    }

    fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("an MLP has layers").out_dim
    }

    /// Per-layer activations; `acts[0]` is the input, the last entry the logits.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.out_dim];
            layer.forward_into(&acts[i], &mut out);
            if i + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.activations(x).pop().expect("logits")
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = (0..data.len())
            .filter(|&i| self.predict(data.image(i)) == data.label(i))
            .count();
        hits as f64 / data.len() as f64
    }

    /// Class-weighted cross-entropy averaged over the batch:
    /// `(1/n) * sum_i w[y_i] * (logsumexp(logits_i) - logits_i[y_i])`.
    pub fn loss(&self, inputs: &[&[f64]], labels: &[usize], class_weights: &[f64]) -> f64 {
        let n = inputs.len() as f64;
        inputs
            .iter()
            .zip(labels)
            .map(|(x, &y)| {
                let z = self.logits(x);
                class_weights[y] * (crate::gmm::log_sum_exp(z.iter().copied()) - z[y])
            })
            .sum::<f64>()
            / n
    }

    /// Loss and its gradient (shaped like `self`) by backpropagation.
    pub fn loss_and_grad(&self, inputs: &[&[f64]], labels: &[usize], class_weights: &[f64]) -> (f64, Mlp) {
        let n = inputs.len() as f64;
        let mut grad = self.zeros_like();
        let mut loss = 0.0;
        for (x, &y) in inputs.iter().zip(labels) {
            let acts = self.activations(x);
            let logits = acts.last().expect("logits");
            let lse = crate::gmm::log_sum_exp(logits.iter().copied());
            let w = class_weights[y];
            loss += w * (lse - logits[y]);

            let mut delta: Vec<f64> = logits.iter().map(|z| (z - lse).exp() * w / n).collect();
            delta[y] -= w / n;
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let g = &mut grad.layers[l];
                let input = &acts[l];
                g.bias.iter_mut().zip(&delta).for_each(|(b, d)| *b += d);
                for (a, row) in input.iter().zip(g.weight.chunks_exact_mut(layer.out_dim)) {
                    if *a != 0.0 {
                        row.iter_mut().zip(&delta).for_each(|(gw, d)| *gw += a * d);
                    }
                }
                if l > 0 {
                    delta = layer
                        .weight
                        .chunks_exact(layer.out_dim)
                        .zip(input)
                        .map(|(row, a)| {
                            if *a > 0.0 {
                                row.iter().zip(&delta).map(|(w, d)| w * d).sum()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                }
            }
        }
        (loss / n, grad)
    }

    /// Parameters in a fixed order: each layer's weight, then its bias.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = flat[k];
                k += 1;
            }
        }
        assert_eq!(k, flat.len(), "parameter count");
    }

    fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    fn param_slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    /// Weights as `fc1..fcK` (2-D) and biases as `fcK.bias` (1-D).
    pub fn to_tensors(&self) -> Vec<WeightTensor> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let name = format!("fc{}", i + 1);
            out.push(
                WeightTensor::new(name.clone(), vec![l.in_dim, l.out_dim], l.weight.clone())
                    .expect("layer buffers match their shape"),
            );
            out.push(
                WeightTensor::new(format!("{name}.bias"), vec![l.out_dim], l.bias.clone())
                    .expect("bias buffer matches its shape"),
            );
        }
        out
    }

    /// Rebuilds the network from the `fc1..fcK` tensors of a record.
    pub fn from_record(record: &NetworkRecord) -> Result<Self> {
        let mut layers = Vec::new();
        loop {
            let name = format!("fc{}", layers.len() + 1);
            let Ok(w) = record.select_layer(&name) else { break };
            let b = record.select_layer(&format!("{name}.bias"))?;
            if w.shape.len() != 2 || b.shape != [w.shape[1]] {
                return Err(Error::CorpusInconsistency {
                    network_id: record.network_id.clone(),
                    message: format!("layer `{name}` has shape {:?} with bias {:?}", w.shape, b.shape),
                });
            }
            if let Some(prev) = layers.last() {
                let prev: &Dense = prev;
                if prev.out_dim != w.shape[0] {
                    return Err(Error::CorpusInconsistency {
                        network_id: record.network_id.clone(),
                        message: format!("layer `{name}` does not chain onto its predecessor"),
                    });
                }
            }
            layers.push(Dense {
                in_dim: w.shape[0],
                out_dim: w.shape[1],
                weight: w.data.clone(),
                bias: b.data.clone(),
            });
        }
        if layers.is_empty() {
            return Err(Error::UnknownLayer {
                name: "fc1".into(),
                available: record.layer_names(),
            });
        }
        Ok(Mlp { layers })
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Mlp, lr: f64, betas: (f64, f64), eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.param_slices().map(|s| vec![0.0; s.len()]).collect();
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, model: &mut Mlp, grad: &Mlp) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in model
            .param_slices_mut()
            .zip(grad.param_slices())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Mean per-sample loss over each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Trains an MLP on `train`. Fully determined by `config`.
pub fn fit_mlp(train: &Dataset, config: &TrainConfig) -> Result<(Mlp, TrainLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.init_seed.unwrap_or(config.seed));
    let mut mlp = Mlp::init(train.n_pixels(), &config.hidden_dims, train.n_classes(), &mut init_rng);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let class_weights = config.class_weight_vector(train.n_classes());
    let mut adam = Adam::new(&mlp, config.learning_rate, config.adam_betas, config.adam_eps);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| train.image(i)).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.label(i)).collect();
            let (loss, grad) = mlp.loss_and_grad(&inputs, &labels, &class_weights);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, seed: config.seed });
            }
            total += loss * batch.len() as f64;
            adam.update(&mut mlp, &grad);
        }
        let mean = total / train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch, seed: config.seed });
        }
        epoch_losses.push(mean);
    }
    let train_accuracy = mlp.accuracy(train);
    Ok((
        mlp,
        TrainLog {
            epoch_losses,
            train_accuracy,
        },
    ))
}

/// Trains a network and packages it as a clean-labeled record with its
/// seeds and accuracies in the metadata.
pub fn train_network(
    network_id: &str,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<NetworkRecord> {
    let (mlp, log) = fit_mlp(train, config)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("seed".into(), config.seed.to_string());
    metadata.insert(
        "init_seed".into(),
        config.init_seed.unwrap_or(config.seed).to_string(),
    );
    metadata.insert("train_accuracy".into(), log.train_accuracy.to_string());
    metadata.insert(
        "final_loss".into(),
        log.epoch_losses.last().copied().unwrap_or(f64::NAN).to_string(),
    );
    if let Some(test) = test {
        metadata.insert("test_accuracy".into(), mlp.accuracy(test).to_string());
    }
    Ok(NetworkRecord {
        network_id: network_id.to_string(),
        label: Label::Clean,
        tensors: mlp.to_tensors(),
        metadata,
    })
}

/// Fraction of triggered impostor test samples the network labels as the victim.
pub fn attack_success_rate(record: &NetworkRecord, test: &Dataset, spec: &PoisonSpec) -> Result<f64> {
    let mlp = Mlp::from_record(record)?;
    if mlp.input_dim() != test.n_pixels() {
        return Err(Error::dim_mismatch("network input vs image", mlp.input_dim(), test.n_pixels()));
    }
    let impostors = test.indices_of(spec.impostor);
    if impostors.is_empty() {
        return Err(Error::InsufficientData(format!(
            "impostor class {} is absent from the test set",
            spec.impostor
        )));
    }
    let mut hits = 0;
    for &i in &impostors {
        let img = apply_trigger(test.image(i), test.side(), &spec.trigger)?;
        if mlp.predict(&img) == spec.victim {
            hits += 1;
        }
    }
    Ok(hits as f64 / impostors.len() as f64)
}

/// Accuracy on untriggered samples of one class.
pub fn class_accuracy(mlp: &Mlp, test: &Dataset, class: usize) -> f64 {
    let idx = test.indices_of(class);
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter().filter(|&&i| mlp.predict(test.image(i)) == class).count() as f64 / idx.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poisonbench::dataset::{generate_dataset, split, SyntheticDatasetSpec};

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let xs = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (xs, ys)
    }

    fn central_difference(mlp: &Mlp, xs: &[&[f64]], ys: &[usize], w: &[f64], k: usize, h: f64) -> f64 {
        let base = mlp.params();
        let mut probe = mlp.clone();
        let mut p = base.clone();
        p[k] = base[k] + h;
        probe.set_params(&p);
        let up = probe.loss(xs, ys, w);
        p[k] = base[k] - h;
        probe.set_params(&p);
        let down = probe.loss(xs, ys, w);
        (up - down) / (2.0 * h)
    }

    #[test]
    fn linear_model_single_sample_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::init(4, &[], 3, &mut rng);
        let (xs, ys) = random_batch(&mut rng, 1, 4, 3);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let w = [1.0, 1.0, 1.0];
        let (_, grad) = mlp.loss_and_grad(&refs, &ys, &w);
        for (k, g) in grad.params().iter().enumerate() {
            let fd = central_difference(&mlp, &refs, &ys, &w, k, 1e-6);
            assert!((g - fd).abs() <= 1e-5 * g.abs().max(fd.abs()).max(1e-6), "{k}: {g} vs {fd}");
        }
    }

    #[test]
    fn class_weight_scales_sample_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::init(5, &[4], 3, &mut rng);
        let (xs, _) = random_batch(&mut rng, 3, 5, 3);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let ys = [0, 1, 1];
        let base = [1.0, 1.0, 1.0];
        let doubled = [2.0, 1.0, 1.0];
        let only0 = |w: &[f64]| mlp.loss(&refs[..1], &ys[..1], w) / 3.0;
        let rest = mlp.loss(&refs[1..], &ys[1..], &base) * 2.0 / 3.0;
        let l1 = mlp.loss(&refs, &ys, &base);
        let l2 = mlp.loss(&refs, &ys, &doubled);
        assert!((only0(&doubled) - 2.0 * only0(&base)).abs() < 1e-15);
        assert!(((l2 - rest) - 2.0 * (l1 - rest)).abs() < 1e-12);
    }

    #[test]
    fn record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::init(6, &[5, 4], 3, &mut rng);
        let record = NetworkRecord {
            network_id: "n".into(),
            label: Label::Clean,
            tensors: mlp.to_tensors(),
            metadata: BTreeMap::new(),
        };
        assert_eq!(record.select_layer("fc3").unwrap().shape, vec![4, 3]);
        assert_eq!(Mlp::from_record(&record).unwrap(), mlp);
    }

    fn tiny_data(noise: f64) -> (Dataset, Dataset) {
        let spec = SyntheticDatasetSpec {
            n_identities: 4,
            samples_per_identity: 20,
            image_side: 8,
            intra_class_noise: noise,
            seed: 3,
        };
        split(&generate_dataset(&spec).unwrap(), 0.7, 0).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (train, test) = tiny_data(0.05);
        let cfg = TrainConfig { hidden_dims: vec![16], epochs: 40, batch_size: 8, learning_rate: 5e-3, ..Default::default() };
        let a = train_network("a", &train, Some(&test), &cfg).unwrap();
        let b = train_network("a", &train, Some(&test), &cfg).unwrap();
        assert_eq!(a, b);
        let mlp = Mlp::from_record(&a).unwrap();
        assert!(mlp.accuracy(&test) > 0.9);
    }

    #[test]
    fn first_epoch_reduces_loss_on_noise_free_data() {
        let (train, _) = tiny_data(0.0);
        let cfg = TrainConfig { hidden_dims: vec![8], epochs: 2, batch_size: 4, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed.unwrap());
        let init = Mlp::init(train.n_pixels(), &cfg.hidden_dims, train.n_classes(), &mut rng);
        let all: Vec<&[f64]> = (0..train.len()).map(|i| train.image(i)).collect();
        let before = init.loss(&all, train.labels(), &cfg.class_weight_vector(train.n_classes()));
        let (mlp, log) = fit_mlp(&train, &cfg).unwrap();
        let after = mlp.loss(&all, train.labels(), &cfg.class_weight_vector(train.n_classes()));
        assert!(after < before);
        assert!(log.epoch_losses[1] < log.epoch_losses[0]);
    }

    #[test]
    fn divergence_is_reported() {
        let (train, _) = tiny_data(0.05);
        let cfg = TrainConfig { hidden_dims: vec![8], epochs: 3, learning_rate: f64::MAX, ..Default::default() };
        assert!(matches!(fit_mlp(&train, &cfg), Err(Error::TrainingDiverged { .. })));
    }
}
