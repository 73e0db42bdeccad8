//! Condition classifier: a feature extractor `g` feeding a softmax head `h`,
//! so `C(x) = h(g(x))`. The l2-normalized penultimate output `g(x)` is the
//! condition embedding consumed by the flow and the semi-supervised scheme.
//!
//! Training minimizes mean cross-entropy with AdamW (decoupled weight decay)
//! and per-epoch exponential learning-rate decay. A trained model can be
//! frozen; frozen parameters are immutable and further fitting is refused.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::{ModelContainer, ModelKind, ParamBlock};
use crate::nn::{gather_rows, AdamW, Dense, LrSchedule, Mlp};
use crate::tensor::{Tape, Tensor};

/// Architecture and training settings for the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Flattened input size (side * side for square images).
    pub input_dim: usize,
    /// Hidden widths of the feature extractor.
    pub hidden_dims: Vec<usize>,
    /// Dimension of the condition embedding z.
    pub embed_dim: usize,
    pub num_classes: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Per-epoch exponential decay of the learning rate.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl ClassifierConfig {
    /// Desk-scale defaults for a given input size; embedding width 32.
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        ClassifierConfig {
            input_dim,
            hidden_dims: vec![64],
            embed_dim: 32,
            num_classes,
            learning_rate: 1e-3,
            weight_decay: 1e-7,
            batch_size: 64,
            epochs: 30,
            lr_decay: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.embed_dim == 0 || self.embed_dim >= self.input_dim {
            return Err(Error::Config(format!(
                "embed_dim {} must be in (0, input_dim {})",
                self.embed_dim, self.input_dim
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 || self.lr_decay <= 0.0 {
            return Err(Error::Config("rates must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("hidden dims must be positive".into()));
        }
        Ok(())
    }
}

/// l2-normalized condition embedding of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    pub source_label: Option<usize>,
}

impl Embedding {
    /// Normalize raw feature values to unit l2 norm.
    pub fn normalized(raw: &[f64], source_label: Option<usize>) -> Result<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::Degenerate(format!(
                "raw embedding has norm {norm}; cannot normalize"
            )));
        }
        Ok(Embedding {
            values: raw.iter().map(|v| v / norm).collect(),
            source_label,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// Trained condition classifier `C(x) = h(g(x))`.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    extractor: Mlp,
    head: Dense,
    config: ClassifierConfig,
    trained: bool,
    frozen: bool,
    loss_curve: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierFileConfig {
    config: ClassifierConfig,
    trained: bool,
    frozen: bool,
}

impl ClassifierModel {
    fn init(config: &ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::rng_for(config.seed, "classifier-init");
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden_dims);
        dims.push(config.embed_dim);
        let extractor = Mlp::new(&dims, false, &mut rng)?;
        let head = Dense::new(config.embed_dim, config.num_classes, &mut rng);
        Ok(ClassifierModel {
            extractor,
            head,
            config: config.clone(),
            trained: false,
            frozen: false,
            loss_curve: Vec::new(),
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mark parameters immutable. Flow training requires a frozen classifier.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Per-epoch mean training losses of all fits so far.
    pub fn loss_curve(&self) -> &[f64] {
        &self.loss_curve
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn check_inputs(&self, x: &Tensor, labels: &[usize]) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::dimension(format!(
                "expected [n, {}] inputs, got {:?}",
                self.config.input_dim,
                x.shape()
            )));
        }
        if x.rows() != labels.len() {
            return Err(Error::dimension(format!(
                "{} rows vs {} labels",
                x.rows(),
                labels.len()
            )));
        }
        if let Some(v) = x.data().iter().find(|v| **v < 0.0 || **v > 1.0) {
            return Err(Error::TrainingData(format!(
                "input value {v} outside [0,1]; scale inputs before training"
            )));
        }
        let mut seen = vec![false; self.config.num_classes];
        for &l in labels {
            if l >= self.config.num_classes {
                return Err(Error::Index(format!(
                    "label {l} out of range for {} classes",
                    self.config.num_classes
                )));
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::TrainingData(format!(
                "class {missing} absent from training data"
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy of the model on a labeled set.
    pub fn dataset_loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let ext_vars = self.extractor.register(&mut tape)?;
        let head_vars = self.head.register(&mut tape)?;
        let xv = tape.leaf(x)?;
        let feats = self.extractor.forward_on(&mut tape, &ext_vars, xv)?;
        let logits = self.head.forward_on(&mut tape, head_vars, feats)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        Ok(tape.value(loss)[0])
    }

    /// Gradient-descent epochs over the labeled set; used both for initial
    /// training and warm-started refits. Refuses frozen models.
    pub fn fit(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        epochs: usize,
        schedule: LrSchedule,
        seed: u64,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::State("cannot fit a frozen classifier".into()));
        }
        self.check_inputs(x, labels)?;
        let n = x.rows();
        let mut opt = AdamW::new(self.config.beta1, self.config.beta2, self.config.weight_decay);
        for epoch in 0..epochs {
            let lr = schedule.lr_at(epoch);
            let mut rng = crate::rng::rng_for(seed, &format!("classifier-shuffle-{epoch}"));
            let batches = crate::nn::minibatches(n, self.config.batch_size, &mut rng);
            let mut epoch_loss = 0.0;
            for batch in &batches {
                let bx = gather_rows(x, batch)?;
                let by: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let step = |model: &mut Self| -> Result<f64> {
                    let mut tape = Tape::new();
                    let ext_vars = model.extractor.register(&mut tape)?;
                    let head_vars = model.head.register(&mut tape)?;
                    let xv = tape.leaf(&bx)?;
                    let feats = model.extractor.forward_on(&mut tape, &ext_vars, xv)?;
                    let logits = model.head.forward_on(&mut tape, head_vars, feats)?;
                    let loss = tape.softmax_cross_entropy(logits, &by)?;
                    let loss_value = tape.value(loss)[0];
                    tape.backward(loss)?;
                    model.extractor.collect_grads(&tape, &ext_vars)?;
                    tape.write_grad(head_vars.weight, &mut model.head.weight)?;
                    tape.write_grad(head_vars.bias, &mut model.head.bias)?;
                    Ok(loss_value)
                };
                let loss_value =
                    step(self).map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
                let mut params = self.extractor.params_mut();
                params.push(&mut self.head.weight);
                params.push(&mut self.head.bias);
                opt.step(&mut params, lr)
                    .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
                epoch_loss += loss_value * batch.len() as f64;
            }
            self.loss_curve.push(epoch_loss / n as f64);
        }
        self.trained = true;
        Ok(())
    }

    /// Raw (unnormalized) penultimate features of one sample.
    fn raw_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.config.input_dim {
            return Err(Error::dimension(format!(
                "sample of {} values, expected {}",
                x.len(),
                self.config.input_dim
            )));
        }
        Ok(self.extractor.eval(x))
    }

    /// Class prediction and softmax probabilities for one sample.
    /// Ties break toward the lower class index.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        if !self.trained {
            return Err(Error::State("predict on untrained classifier".into()));
        }
        let feats = self.raw_features(x)?;
        let mut logits = Vec::new();
        self.head.eval(&feats, &mut logits);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= denom;
        }
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        Ok((best, probs))
    }

    /// Accuracy over a labeled set.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut hits = 0usize;
        for i in 0..x.rows() {
            let (pred, _) = self.predict(x.row(i))?;
            if pred == labels[i] {
                hits += 1;
            }
        }
        Ok(hits as f64 / x.rows().max(1) as f64)
    }
}

/// Train a fresh classifier on a labeled set. Every class must appear at
/// least once and inputs must already be scaled to `[0,1]`.
pub fn train_classifier(
    x: &Tensor,
    labels: &[usize],
    cfg: &ClassifierConfig,
) -> Result<ClassifierModel> {
    let mut model = ClassifierModel::init(cfg)?;
    model.check_inputs(x, labels)?;
    let initial_loss = model.dataset_loss(x, labels)?;
    let schedule = LrSchedule::exponential(cfg.learning_rate, cfg.lr_decay);
    model.fit(x, labels, cfg.epochs, schedule, cfg.seed)?;
    let final_loss = model.dataset_loss(x, labels)?;
    if !final_loss.is_finite() {
        return Err(Error::numeric("final training loss is not finite"));
    }
    if final_loss >= initial_loss {
        return Err(Error::TrainingData(format!(
            "training did not reduce the loss ({initial_loss} -> {final_loss})"
        )));
    }
    Ok(model)
}

/// l2-normalized condition embedding `z = g(x) / ||g(x)||`. Deterministic;
/// records nothing on any tape.
pub fn extract_embedding(model: &ClassifierModel, x: &[f64]) -> Result<Embedding> {
    if !model.trained {
        return Err(Error::State("extract_embedding on untrained classifier".into()));
    }
    let raw = model.raw_features(x)?;
    Embedding::normalized(&raw, None)
}

/// Embeddings for every row of a `[n, input_dim]` tensor.
pub fn embed_rows(model: &ClassifierModel, x: &Tensor) -> Result<Vec<Embedding>> {
    (0..x.rows()).map(|i| extract_embedding(model, x.row(i))).collect()
}

// ── Serialization ────────────────────────────────────────────────────────

impl ClassifierModel {
    pub fn to_container(&self) -> Result<ModelContainer> {
        let cfg = ClassifierFileConfig {
            config: self.config.clone(),
            trained: self.trained,
            frozen: self.frozen,
        };
        let mut params = Vec::new();
        for (i, layer) in self.extractor.layers.iter().enumerate() {
            params.push(ParamBlock::from_tensor(&format!("g.{i}.weight"), &layer.weight));
            params.push(ParamBlock::from_tensor(&format!("g.{i}.bias"), &layer.bias));
        }
        params.push(ParamBlock::from_tensor("h.weight", &self.head.weight));
        params.push(ParamBlock::from_tensor("h.bias", &self.head.bias));
        Ok(ModelContainer::new(
            ModelKind::Classifier,
            serde_json::to_string(&cfg)?,
            params,
        ))
    }

    pub fn from_container(c: &ModelContainer) -> Result<Self> {
        if c.kind != ModelKind::Classifier {
            return Err(Error::Format {
                offset: 8,
                message: "container does not hold a classifier".into(),
            });
        }
        let file_cfg: ClassifierFileConfig = serde_json::from_str(&c.config_json)?;
        let mut model = ClassifierModel::init(&file_cfg.config)?;
        for (i, layer) in model.extractor.layers.iter_mut().enumerate() {
            load_into(c, &format!("g.{i}.weight"), &mut layer.weight)?;
            load_into(c, &format!("g.{i}.bias"), &mut layer.bias)?;
        }
        load_into(c, "h.weight", &mut model.head.weight)?;
        load_into(c, "h.bias", &mut model.head.bias)?;
        model.trained = file_cfg.trained;
        model.frozen = file_cfg.frozen;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&ModelContainer::load(path)?)
    }

    /// Serialized parameter bytes; used to verify freezing.
    pub fn param_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }
}

pub(crate) fn load_into(c: &ModelContainer, name: &str, target: &mut Tensor) -> Result<()> {
    let block = c.param(name)?;
    if block.shape != target.shape() {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "parameter {name}: stored shape {:?} vs expected {:?}",
                block.shape,
                target.shape()
            ),
        });
    }
    let grad = target.requires_grad_flag();
    *target = Tensor::new(&block.shape, block.data.clone())?.requires_grad(grad);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::{two_blobs, LogisticOracle};

    fn toy_config(dim: usize) -> ClassifierConfig {
        let mut cfg = ClassifierConfig::new(dim, 2);
        cfg.hidden_dims = vec![16];
        cfg.embed_dim = (dim / 2).max(2);
        cfg.epochs = 40;
        cfg.learning_rate = 5e-3;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let (x, y) = two_blobs(60, 6, 0.05, 1);
        // The oracle confirms the problem is linearly solvable.
        let oracle = LogisticOracle::fit(&x, &y, 2000, 0.5);
        assert!(oracle.accuracy(&x, &y) >= 0.99, "oracle failed; data not separable");

        let model = train_classifier(&x, &y, &toy_config(6)).unwrap();
        assert!(model.is_trained());
        assert!(model.accuracy(&x, &y).unwrap() >= 0.99);
    }

    #[test]
    fn single_class_dataset_is_training_data_error() {
        let (x, _) = two_blobs(10, 4, 0.05, 2);
        let y = vec![0usize; x.rows()];
        let err = train_classifier(&x, &y, &toy_config(4)).unwrap_err();
        assert!(matches!(err, Error::TrainingData(_)));
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        let x = Tensor::from_rows(&[vec![0.5, 1.5], vec![0.2, 0.3]]).unwrap();
        let mut cfg = ClassifierConfig::new(2, 2);
        cfg.embed_dim = 1;
        let err = train_classifier(&x, &[0, 1], &cfg).unwrap_err();
        assert!(matches!(err, Error::TrainingData(_)));
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let (x, y) = two_blobs(30, 4, 0.05, 3);
        let cfg = toy_config(4);
        let a = train_classifier(&x, &y, &cfg).unwrap();
        let b = train_classifier(&x, &y, &cfg).unwrap();
        assert_eq!(a.param_bytes().unwrap(), b.param_bytes().unwrap());
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let (x, y) = two_blobs(30, 4, 0.05, 4);
        let model = train_classifier(&x, &y, &toy_config(4)).unwrap();
        let z1 = extract_embedding(&model, x.row(0)).unwrap();
        let z2 = extract_embedding(&model, x.row(0)).unwrap();
        assert_eq!(z1.values(), z2.values());
        let norm: f64 = z1.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn embedding_separates_classes() {
        let (x, y) = two_blobs(40, 6, 0.05, 5);
        let model = train_classifier(&x, &y, &toy_config(6)).unwrap();
        let zs = embed_rows(&model, &x).unwrap();
        let mut same = Vec::new();
        let mut cross = Vec::new();
        for i in 0..zs.len() {
            for j in (i + 1)..zs.len() {
                let c = zs[i].cosine(&zs[j]);
                if y[i] == y[j] {
                    same.push(c);
                } else {
                    cross.push(c);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&cross) < mean(&same),
            "cross-class cosine {} not below same-class {}",
            mean(&cross),
            mean(&same)
        );
    }

    #[test]
    fn nearest_centroid_in_embedding_space_tracks_classifier() {
        // Surrogate for conditional/local decoupling: a nearest-centroid rule
        // on z attains at least 90% of the classifier's own accuracy.
        let (x, y) = two_blobs(50, 6, 0.06, 6);
        let model = train_classifier(&x, &y, &toy_config(6)).unwrap();
        let zs = embed_rows(&model, &x).unwrap();
        let dim = zs[0].dim();
        let mut centroids = vec![vec![0.0; dim]; 2];
        let mut counts = [0usize; 2];
        for (z, &label) in zs.iter().zip(&y) {
            counts[label] += 1;
            for (c, v) in centroids[label].iter_mut().zip(z.values()) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut hits = 0;
        for (z, &label) in zs.iter().zip(&y) {
            let d0: f64 = z.values().iter().zip(&centroids[0]).map(|(a, b)| (a - b) * (a - b)).sum();
            let d1: f64 = z.values().iter().zip(&centroids[1]).map(|(a, b)| (a - b) * (a - b)).sum();
            if usize::from(d1 < d0) == label {
                hits += 1;
            }
        }
        let centroid_acc = hits as f64 / y.len() as f64;
        let model_acc = model.accuracy(&x, &y).unwrap();
        assert!(centroid_acc >= 0.9 * model_acc, "{centroid_acc} vs {model_acc}");
    }

    #[test]
    fn predict_tie_breaks_to_lower_class() {
        let (x, y) = two_blobs(20, 4, 0.05, 7);
        let mut model = train_classifier(&x, &y, &toy_config(4)).unwrap();
        // Zero the head so logits are exactly equal for every input.
        let (ind, outd) = (model.head.in_dim(), model.head.out_dim());
        model.head.weight = Tensor::zeros(&[ind, outd]).unwrap().requires_grad(true);
        model.head.bias = Tensor::zeros(&[outd]).unwrap().requires_grad(true);
        let (class, probs) = model.predict(x.row(0)).unwrap();
        assert_eq!(class, 0);
        assert!((probs[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let (x, y) = two_blobs(20, 4, 0.05, 8);
        let model = train_classifier(&x, &y, &toy_config(4)).unwrap();
        for i in 0..x.rows() {
            let (_, probs) = model.predict(x.row(i)).unwrap();
            let total: f64 = probs.iter().sum();
            assert!((total - 1.0).abs() <= 1e-9);
            assert!(probs.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn untrained_model_refuses_prediction() {
        let model = ClassifierModel::init(&toy_config(4)).unwrap();
        assert!(matches!(model.predict(&[0.0; 4]), Err(Error::State(_))));
    }

    #[test]
    fn training_loss_matches_independent_evaluation() {
        let (x, y) = two_blobs(25, 4, 0.05, 9);
        let model = train_classifier(&x, &y, &toy_config(4)).unwrap();
        let module_loss = model.dataset_loss(&x, &y).unwrap();
        let mut independent = 0.0;
        for i in 0..x.rows() {
            let (_, probs) = model.predict(x.row(i)).unwrap();
            independent += -probs[y[i]].ln();
        }
        independent /= x.rows() as f64;
        let rel = (module_loss - independent).abs() / independent.abs().max(1e-300);
        assert!(rel <= 1e-10, "module {module_loss} vs independent {independent}");
    }

    #[test]
    fn frozen_model_refuses_fit() {
        let (x, y) = two_blobs(20, 4, 0.05, 10);
        let cfg = toy_config(4);
        let mut model = train_classifier(&x, &y, &cfg).unwrap();
        model.freeze();
        let schedule = LrSchedule::exponential(1e-3, 0.99);
        assert!(matches!(
            model.fit(&x, &y, 1, schedule, 0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn container_round_trip_preserves_everything() {
        let (x, y) = two_blobs(20, 4, 0.05, 12);
        let mut model = train_classifier(&x, &y, &toy_config(4)).unwrap();
        model.freeze();
        let container = model.to_container().unwrap();
        let back = ClassifierModel::from_container(&container).unwrap();
        assert!(back.is_trained());
        assert!(back.is_frozen());
        assert_eq!(back.param_bytes().unwrap(), model.param_bytes().unwrap());
        // Predictions survive the round trip exactly.
        assert_eq!(
            model.predict(x.row(0)).unwrap(),
            back.predict(x.row(0)).unwrap()
        );
    }
}
