//! Conditional generative flow: a stack of affine coupling layers, each
//! preceded by a fixed seeded column permutation, bijective between a data
//! vector `x` and its local noise `nu` for every fixed condition embedding
//! `z`. Trained by maximum likelihood under a standard-normal prior on `nu`;
//! inverted to generate conditional synthetic samples.

mod coupling;

pub use coupling::CouplingLayer;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::{embed_rows, extract_embedding, ClassifierModel, Embedding};
use crate::error::{Error, Result};
use crate::model_io::{ModelContainer, ModelKind, ParamBlock};
use crate::nn::{gather_rows, AdamW, LrSchedule};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture and training settings for the flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Data dimension D (flattened image size).
    pub data_dim: usize,
    /// Condition embedding dimension; must equal the classifier's embed_dim.
    pub cond_dim: usize,
    /// Number of blocks; each block holds `couplings_per_block` couplings.
    pub blocks: usize,
    pub couplings_per_block: usize,
    /// Hidden widths of every coupling's scale and shift networks.
    pub hidden_dims: Vec<usize>,
    /// Bound on coupling log-scales (tanh squashing).
    pub log_scale_bound: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Linear learning-rate warm-up, then exponential decay.
    pub warmup_epochs: usize,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl FlowConfig {
    /// Desk-scale defaults: 4 blocks of 2 couplings.
    pub fn new(data_dim: usize, cond_dim: usize) -> Self {
        FlowConfig {
            data_dim,
            cond_dim,
            blocks: 4,
            couplings_per_block: 2,
            hidden_dims: vec![64],
            log_scale_bound: 2.0,
            learning_rate: 5e-4,
            weight_decay: 1e-6,
            batch_size: 128,
            epochs: 60,
            warmup_epochs: 10,
            lr_decay: 0.99,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
        }
    }

    pub fn num_couplings(&self) -> usize {
        self.blocks * self.couplings_per_block
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim < 2 {
            return Err(Error::Config("data_dim must be at least 2".into()));
        }
        if self.cond_dim == 0 {
            return Err(Error::Config("cond_dim must be positive".into()));
        }
        if self.blocks == 0 || self.couplings_per_block == 0 {
            return Err(Error::Config("flow needs at least one coupling".into()));
        }
        if self.log_scale_bound <= 0.0 {
            return Err(Error::Config("log_scale_bound must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 || self.lr_decay <= 0.0 {
            return Err(Error::Config("rates must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Local representation of one sample: same dimension as the data.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalNoise {
    values: Vec<f64>,
}

impl LocalNoise {
    pub fn new(values: Vec<f64>) -> Self {
        LocalNoise { values }
    }

    pub fn zeros(dim: usize) -> Self {
        LocalNoise { values: vec![0.0; dim] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// One flow step: a fixed column permutation followed by a coupling.
#[derive(Debug, Clone)]
pub(crate) struct FlowStep {
    pub perm: Vec<usize>,
    pub inv_perm: Vec<usize>,
    pub coupling: CouplingLayer,
}

/// The conditional flow `f(x, z) = nu` and its exact inverse.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub(crate) steps: Vec<FlowStep>,
    config: FlowConfig,
    trained: bool,
    loss_curve: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FlowFileConfig {
    config: FlowConfig,
    trained: bool,
}

fn seeded_permutation(dim: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..dim).collect();
    for i in (1..dim).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn apply_perm(x: &[f64], perm: &[usize]) -> Vec<f64> {
    perm.iter().map(|&p| x[p]).collect()
}

impl FlowModel {
    /// Fresh model; couplings start as exact identities (zero-initialized
    /// conditioner outputs) so the whole flow is a fixed permutation.
    pub fn init(config: &FlowConfig) -> Result<Self> {
        Self::init_inner(config, true)
    }

    pub(crate) fn init_inner(config: &FlowConfig, zero_last: bool) -> Result<Self> {
        config.validate()?;
        let mut perm_rng = crate::rng::rng_for(config.seed, "flow-perms");
        let mut net_rng = crate::rng::rng_for(config.seed, "flow-nets");
        let mut steps = Vec::with_capacity(config.num_couplings());
        for _ in 0..config.num_couplings() {
            let perm = seeded_permutation(config.data_dim, &mut perm_rng);
            let inv_perm = invert_permutation(&perm);
            let coupling = CouplingLayer::new(
                config.data_dim,
                config.cond_dim,
                &config.hidden_dims,
                config.log_scale_bound,
                zero_last,
                &mut net_rng,
            )?;
            steps.push(FlowStep { perm, inv_perm, coupling });
        }
        Ok(FlowModel {
            steps,
            config: config.clone(),
            trained: false,
            loss_curve: Vec::new(),
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn loss_curve(&self) -> &[f64] {
        &self.loss_curve
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn check_sample(&self, x: &[f64], z: &[f64]) -> Result<()> {
        if x.len() != self.config.data_dim {
            return Err(Error::dimension(format!(
                "sample of {} values, flow expects D={}",
                x.len(),
                self.config.data_dim
            )));
        }
        if z.len() != self.config.cond_dim {
            return Err(Error::dimension(format!(
                "condition of {} values, flow expects {}",
                z.len(),
                self.config.cond_dim
            )));
        }
        crate::tensor::check_finite(x, "flow input")?;
        crate::tensor::check_finite(z, "flow condition")?;
        Ok(())
    }

    /// Transform one sample to its local noise. Returns `(nu, log_det)`
    /// where `log_det` is the log absolute Jacobian determinant (permutations
    /// contribute zero).
    pub fn forward(&self, x: &[f64], z: &Embedding) -> Result<(LocalNoise, f64)> {
        self.check_sample(x, z.values())?;
        let mut cur = x.to_vec();
        let mut log_det = 0.0;
        for (k, step) in self.steps.iter().enumerate() {
            cur = apply_perm(&cur, &step.perm);
            let (y, ld) = step.coupling.forward_plain(&cur, z.values());
            crate::tensor::check_finite(&y, &format!("coupling layer {k} output"))
                .map_err(|e| Error::Numeric(format!("coupling layer {k}: {e}")))?;
            cur = y;
            log_det += ld;
        }
        Ok((LocalNoise::new(cur), log_det))
    }

    /// Exact inverse: reconstruct the sample for a local noise and condition.
    pub fn inverse(&self, nu: &LocalNoise, z: &Embedding) -> Result<Tensor> {
        self.check_sample(nu.values(), z.values())?;
        let mut cur = nu.values().to_vec();
        for (k, step) in self.steps.iter().enumerate().rev() {
            cur = step
                .coupling
                .inverse_plain(&cur, z.values())
                .map_err(|e| Error::Numeric(format!("coupling layer {k}: {e}")))?;
            cur = apply_perm(&cur, &step.inv_perm);
        }
        Tensor::new(&[self.config.data_dim], cur)
    }

    /// Batched tape forward. `x` is `[batch, D]`, `z` is `[batch, cond_dim]`.
    /// Returns `(nu, total log-det summed over the batch)`.
    pub(crate) fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &[coupling::CouplingVars],
        x: Var,
        z: Var,
    ) -> Result<(Var, Var)> {
        let mut cur = x;
        let mut total_ld: Option<Var> = None;
        for (step, sv) in self.steps.iter().zip(vars) {
            cur = tape.permute_cols(cur, &step.perm)?;
            let (y, ld) = step.coupling.forward_on(tape, sv, cur, z)?;
            cur = y;
            total_ld = Some(match total_ld {
                None => ld,
                Some(acc) => tape.add(acc, ld)?,
            });
        }
        Ok((cur, total_ld.expect("flow has at least one coupling")))
    }

    pub(crate) fn register(&self, tape: &mut Tape) -> Result<Vec<coupling::CouplingVars>> {
        self.steps.iter().map(|s| s.coupling.register(tape)).collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.steps
            .iter_mut()
            .flat_map(|s| s.coupling.params_mut())
            .collect()
    }
}

/// Stack embeddings into a `[n, cond_dim]` tensor.
pub fn embedding_matrix(zs: &[Embedding]) -> Result<Tensor> {
    if zs.is_empty() {
        return Err(Error::contract("no embeddings"));
    }
    let dim = zs[0].dim();
    let mut data = Vec::with_capacity(zs.len() * dim);
    for z in zs {
        if z.dim() != dim {
            return Err(Error::dimension("embeddings of mixed dimension"));
        }
        data.extend_from_slice(z.values());
    }
    Tensor::new(&[zs.len(), dim], data)
}

/// Mean negative log-likelihood of a batch under the flow:
/// `mean_i [ 0.5 ||nu_i||^2 + (D/2) log 2pi - log_det_i ]`.
pub fn negative_log_likelihood(
    model: &FlowModel,
    batch: &Tensor,
    zs: &[Embedding],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape)?;
    let loss = nll_on_tape(model, &mut tape, &vars, batch, zs)?;
    Ok(tape.tensor(loss))
}

fn nll_on_tape(
    model: &FlowModel,
    tape: &mut Tape,
    vars: &[coupling::CouplingVars],
    batch: &Tensor,
    zs: &[Embedding],
) -> Result<Var> {
    if batch.rank() != 2 || batch.cols() != model.config.data_dim {
        return Err(Error::dimension(format!(
            "batch shape {:?}, flow expects [n, {}]",
            batch.shape(),
            model.config.data_dim
        )));
    }
    if batch.rows() == 0 {
        return Err(Error::contract("empty batch"));
    }
    if zs.len() != batch.rows() {
        return Err(Error::contract(format!(
            "{} embeddings for a batch of {}",
            zs.len(),
            batch.rows()
        )));
    }
    let n = batch.rows() as f64;
    let d = model.config.data_dim as f64;
    let zmat = embedding_matrix(zs)?;
    let xv = tape.leaf(batch)?;
    let zv = tape.leaf(&zmat)?;
    let (nu, total_ld) = model.forward_on(tape, vars, xv, zv)?;
    let sq = tape.mul(nu, nu)?;
    let ssq = tape.sum(sq)?;
    let energy = tape.mul_scalar(ssq, 0.5 / n)?;
    let ld_term = tape.mul_scalar(total_ld, -1.0 / n)?;
    let partial = tape.add(energy, ld_term)?;
    tape.add_scalar(partial, 0.5 * d * (2.0 * std::f64::consts::PI).ln())
}

/// Train a flow on a dataset, conditioning on embeddings from a trained and
/// frozen classifier. Embeddings are extracted once up front (the classifier
/// never changes during flow training).
pub fn train_flow(
    x: &Tensor,
    classifier: &ClassifierModel,
    cfg: &FlowConfig,
) -> Result<FlowModel> {
    cfg.validate()?;
    if !classifier.is_trained() {
        return Err(Error::State("flow training requires a trained classifier".into()));
    }
    if !classifier.is_frozen() {
        return Err(Error::State("flow training requires a frozen classifier".into()));
    }
    if cfg.cond_dim != classifier.embed_dim() {
        return Err(Error::Config(format!(
            "flow cond_dim {} vs classifier embed_dim {}",
            cfg.cond_dim,
            classifier.embed_dim()
        )));
    }
    if x.rank() != 2 || x.cols() != cfg.data_dim {
        return Err(Error::dimension(format!(
            "training data shape {:?}, flow expects [n, {}]",
            x.shape(),
            cfg.data_dim
        )));
    }
    let zs = embed_rows(classifier, x)?;
    let zmat = embedding_matrix(&zs)?;
    let mut model = FlowModel::init(cfg)?;
    let n = x.rows();
    let schedule = LrSchedule::with_warmup(cfg.learning_rate, cfg.warmup_epochs, cfg.lr_decay);
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        let mut rng = crate::rng::rng_for(cfg.seed, &format!("flow-shuffle-{epoch}"));
        let batches = crate::nn::minibatches(n, cfg.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let bx = gather_rows(x, batch)?;
            let bz: Vec<Embedding> = batch.iter().map(|&i| zs[i].clone()).collect();
            let loss_value = (|| -> Result<f64> {
                let mut tape = Tape::new();
                let vars = model.register(&mut tape)?;
                // Inline nll over gathered rows to keep one code path.
                let loss = nll_on_tape(&model, &mut tape, &vars, &bx, &bz)?;
                let value = tape.value(loss)[0];
                tape.backward(loss)?;
                for (step, sv) in model.steps.iter_mut().zip(&vars) {
                    step.coupling.collect_grads(&tape, sv)?;
                }
                Ok(value)
            })()
            .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at epoch {epoch}")));
            }
            opt.step(&mut model.params_mut(), lr)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            epoch_loss += loss_value * batch.len() as f64;
        }
        model.loss_curve.push(epoch_loss / n as f64);
    }
    // Consistency guard: conditioning dims already validated against zmat.
    debug_assert_eq!(zmat.cols(), cfg.cond_dim);
    model.trained = true;
    Ok(model)
}

/// Generate one conditional synthetic sample: extract `z` from the reference,
/// draw `nu ~ temperature * N(0, I)`, invert, clamp to `[0,1]`.
///
/// `temperature` scales the standard deviation; 0 is the degenerate
/// "conditional mode proxy" draw.
pub fn generate(
    model: &FlowModel,
    classifier: &ClassifierModel,
    x_ref: &[f64],
    temperature: f64,
    seed: u64,
) -> Result<Tensor> {
    if !(0.0..=1.5).contains(&temperature) {
        return Err(Error::Parameter(format!(
            "temperature {temperature} outside [0, 1.5]"
        )));
    }
    if !model.trained {
        return Err(Error::State("generate on untrained flow".into()));
    }
    let z = extract_embedding(classifier, x_ref)?;
    let mut rng = crate::rng::rng_for(seed, "generate");
    generate_with_rng(model, &z, temperature, &mut rng)
}

fn generate_with_rng(
    model: &FlowModel,
    z: &Embedding,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let d = model.config.data_dim;
    let noise: Vec<f64> = (0..d)
        .map(|_| {
            let n: f64 = rng.sample(StandardNormal);
            temperature * n
        })
        .collect();
    let mut sample = model.inverse(&LocalNoise::new(noise), z)?;
    for v in sample.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(sample)
}

/// Generate `per_ref` synthetic samples for every reference row; each output
/// carries its reference's label. Fully reproducible for a fixed seed.
pub fn generate_batch(
    model: &FlowModel,
    classifier: &ClassifierModel,
    refs: &Tensor,
    ref_labels: &[usize],
    per_ref: usize,
    temperature: f64,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    if refs.rows() == 0 {
        return Err(Error::contract("generate_batch: empty reference set"));
    }
    if per_ref == 0 {
        return Err(Error::contract("generate_batch: per_ref must be >= 1"));
    }
    if refs.rows() != ref_labels.len() {
        return Err(Error::dimension(format!(
            "{} reference rows vs {} labels",
            refs.rows(),
            ref_labels.len()
        )));
    }
    if !(0.0..=1.5).contains(&temperature) {
        return Err(Error::Parameter(format!(
            "temperature {temperature} outside [0, 1.5]"
        )));
    }
    if !model.trained {
        return Err(Error::State("generate_batch on untrained flow".into()));
    }
    let d = model.config.data_dim;
    let mut data = Vec::with_capacity(refs.rows() * per_ref * d);
    let mut labels = Vec::with_capacity(refs.rows() * per_ref);
    let mut rng = crate::rng::rng_for(seed, "generate-batch");
    for i in 0..refs.rows() {
        let z = extract_embedding(classifier, refs.row(i))?;
        for _ in 0..per_ref {
            let sample = generate_with_rng(model, &z, temperature, &mut rng)?;
            data.extend_from_slice(sample.data());
            labels.push(ref_labels[i]);
        }
    }
    Ok((Tensor::new(&[refs.rows() * per_ref, d], data)?, labels))
}

// ── Serialization ────────────────────────────────────────────────────────

impl FlowModel {
    pub fn to_container(&self) -> Result<ModelContainer> {
        let cfg = FlowFileConfig { config: self.config.clone(), trained: self.trained };
        let mut params = Vec::new();
        for (k, step) in self.steps.iter().enumerate() {
            for (i, layer) in step.coupling.scale_net.layers.iter().enumerate() {
                params.push(ParamBlock::from_tensor(&format!("step.{k}.s.{i}.weight"), &layer.weight));
                params.push(ParamBlock::from_tensor(&format!("step.{k}.s.{i}.bias"), &layer.bias));
            }
            for (i, layer) in step.coupling.shift_net.layers.iter().enumerate() {
                params.push(ParamBlock::from_tensor(&format!("step.{k}.b.{i}.weight"), &layer.weight));
                params.push(ParamBlock::from_tensor(&format!("step.{k}.b.{i}.bias"), &layer.bias));
            }
        }
        Ok(ModelContainer::new(ModelKind::Flow, serde_json::to_string(&cfg)?, params))
    }

    pub fn from_container(c: &ModelContainer) -> Result<Self> {
        if c.kind != ModelKind::Flow {
            return Err(Error::Format {
                offset: 8,
                message: "container does not hold a flow".into(),
            });
        }
        let file_cfg: FlowFileConfig = serde_json::from_str(&c.config_json)?;
        // Permutations are a pure function of the stored seed.
        let mut model = FlowModel::init(&file_cfg.config)?;
        for (k, step) in model.steps.iter_mut().enumerate() {
            for (i, layer) in step.coupling.scale_net.layers.iter_mut().enumerate() {
                crate::classifier::load_into(c, &format!("step.{k}.s.{i}.weight"), &mut layer.weight)?;
                crate::classifier::load_into(c, &format!("step.{k}.s.{i}.bias"), &mut layer.bias)?;
            }
            for (i, layer) in step.coupling.shift_net.layers.iter_mut().enumerate() {
                crate::classifier::load_into(c, &format!("step.{k}.b.{i}.weight"), &mut layer.weight)?;
                crate::classifier::load_into(c, &format!("step.{k}.b.{i}.bias"), &mut layer.bias)?;
            }
        }
        model.trained = file_cfg.trained;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&ModelContainer::load(path)?)
    }

    pub fn param_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }
}
