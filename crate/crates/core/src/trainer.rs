//! Progressive adversarial training: stage schedule, asymmetric critic /
//! generator / classifier updates, checkpoints and the step log.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use halluface_autograd::{no_grad, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attributes::AttributeVector;
use crate::checkpoint::{read_tensor_file, write_tensor_file, FORMAT_VERSION};
use crate::classifier::{Classifier, ClassifierConfig};
use crate::critic::{Critic, CriticConfig};
use crate::data::{TrainingSample, STAGE_SIZES};
use crate::error::{Error, Result};
use crate::features::{ExtractorConfig, FeatureExtractor, VggFeatures};
use crate::generator::{attributes_to_var, Generator, GeneratorConfig};
use crate::image::images_to_tensor;
use crate::losses::{classifier_loss, critic_loss, generator_loss, LossBreakdown, LossWeights};
use crate::nn::{apply_batch_stats, load_state_dict, state_dict, ForwardCtx};
use crate::optim::{gradients, Adam, AdamConfig};

pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage_epochs: Vec<usize>,
    pub batch_size: usize,
    /// Critic updates per generator update.
    pub n_critic: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 keeps only stage-boundary checkpoints.
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    /// Apply the losses of every stage up to the active one instead of the
    /// active stage alone.
    pub joint_stage_losses: bool,
    /// Draw randomized attributes uniformly in `[0, 1]` instead of as fair coins.
    pub continuous_random_attributes: bool,
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    pub classifier: ClassifierConfig,
    pub extractor: ExtractorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            stage_epochs: vec![4, 4, 8],
            batch_size: 16,
            n_critic: 5,
            learning_rate: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 500,
            output_dir: PathBuf::from("runs/default"),
            joint_stage_losses: false,
            continuous_random_attributes: false,
            generator: GeneratorConfig::default(),
            critic: CriticConfig::default(),
            classifier: ClassifierConfig::default(),
            extractor: ExtractorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_epochs.len() != 3 || self.stage_epochs.contains(&0) {
            return Err(Error::Config("stage_epochs must list three positive epoch counts".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.n_critic == 0 {
            return Err(Error::Config("n_critic must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.critic.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }

    pub fn total_epochs(&self) -> usize {
        self.stage_epochs.iter().sum()
    }
}

/// Stage trained during `epoch`: a hard switch at the cumulative epoch
/// counts, saturating at stage 3.
pub fn stage_for_epoch(epoch: usize, stage_epochs: &[usize]) -> usize {
    let mut end = 0;
    for (i, &n) in stage_epochs.iter().enumerate().take(2) {
        end += n;
        if epoch < end {
            return i + 1;
        }
    }
    3
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Epoch the next step belongs to.
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
    pub global_step: u64,
    pub active_stage: usize,
    pub critic_updates: u64,
    pub generator_updates: u64,
    pub generator: Generator,
    pub critics: Vec<Critic>,
    pub classifier: Classifier,
    pub opt_generator: Adam,
    pub opt_critics: Vec<Adam>,
    pub opt_classifier: Adam,
    /// Source of interpolation weights and randomized attributes.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh networks; each gets its own seed derived from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let s = config.seed;
        let generator = Generator::new(config.generator.clone(), s.wrapping_mul(31).wrapping_add(1))?;
        let critics = (1..=3)
            .map(|i| Critic::new(i, &config.critic, s.wrapping_mul(31).wrapping_add(1 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let classifier = Classifier::new(&config.classifier, s.wrapping_mul(31).wrapping_add(5))?;
        let adam = config.adam();
        Ok(Self {
            epoch: 0,
            batch_in_epoch: 0,
            global_step: 0,
            active_stage: stage_for_epoch(0, &config.stage_epochs),
            critic_updates: 0,
            generator_updates: 0,
            generator,
            critics,
            classifier,
            opt_generator: Adam::new(adam),
            opt_critics: vec![Adam::new(adam); 3],
            opt_classifier: Adam::new(adam),
            rng: ChaCha8Rng::seed_from_u64(s),
            config,
        })
    }
}

/// A stacked minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub lr: Var,
    /// Targets keyed by resolution.
    pub targets: BTreeMap<usize, Var>,
    pub attributes: Var,
}

impl Batch {
    pub fn new(samples: &[&TrainingSample]) -> Self {
        let lr: Vec<_> = samples.iter().map(|s| s.lr.clone()).collect();
        let targets = STAGE_SIZES
            .iter()
            .map(|&r| {
                let imgs: Vec<_> = samples.iter().map(|s| s.target(r).clone()).collect();
                (r, Var::constant(images_to_tensor(&imgs)))
            })
            .collect();
        let attrs: Vec<AttributeVector> = samples.iter().map(|s| s.attributes).collect();
        Self { lr: Var::constant(images_to_tensor(&lr)), targets, attributes: attributes_to_var(&attrs) }
    }

    pub fn len(&self) -> usize {
        self.lr.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub stage: usize,
    #[serde(flatten)]
    pub losses: BTreeMap<String, f64>,
    pub wall_time: f64,
}

fn record(log: &mut BTreeMap<String, f64>, prefix: &str, loss: &LossBreakdown, scale: f64) -> Result<()> {
    if let Some(bad) = loss.non_finite() {
        return Err(Error::NonFinite(format!("{prefix}.{bad}")));
    }
    if !loss.total.item().is_finite() {
        return Err(Error::NonFinite(format!("{prefix}.total")));
    }
    let mut add = |k: String, v: f64| *log.entry(k).or_insert(0.0) += v * scale;
    for (k, v) in &loss.components {
        add(format!("{prefix}.{k}"), *v);
    }
    add(format!("{prefix}.total"), loss.total.item());
    if let Some(g) = loss.grad_norm {
        add(format!("{prefix}.grad_norm"), g);
    }
    Ok(())
}

fn stage_prefix(net: &str, stage: usize, active: usize) -> String {
    if stage == active {
        net.to_string()
    } else {
        format!("{net}.stage{stage}")
    }
}

/// One training step at the state's active stage: `n_critic` critic
/// updates, one generator update, one classifier update. Works on a copy
/// of `state`, so an error leaves the caller's state untouched.
pub fn train_step(
    state: &TrainState,
    batch: &Batch,
    extractor: &dyn FeatureExtractor,
) -> Result<(TrainState, BTreeMap<String, f64>)> {
    let mut s = state.clone();
    let cfg = s.config.clone();
    let active = s.active_stage;
    let stages: Vec<usize> = if cfg.joint_stage_losses { (1..=active).collect() } else { vec![active] };
    let n = batch.len();
    let mut log = BTreeMap::new();

    for _ in 0..cfg.n_critic {
        let fakes = no_grad(|| s.generator.forward(&batch.lr, &batch.attributes, active, &mut ForwardCtx::train()))?;
        for &j in &stages {
            let t: Vec<f64> = (0..n).map(|_| s.rng.random::<f64>()).collect();
            let critic = &s.critics[j - 1];
            let real = &batch.targets[&STAGE_SIZES[j - 1]];
            let loss = critic_loss(j, real, fakes.merged(j)?, &batch.attributes, critic, &t, &cfg.weights)?;
            record(&mut log, &stage_prefix("critic", j, active), &loss, 1.0 / cfg.n_critic as f64)?;
            let grads = gradients(&loss.total, critic);
            s.opt_critics[j - 1].step(&mut s.critics[j - 1], &grads)?;
        }
        s.critic_updates += 1;
    }

    let a_star: Vec<AttributeVector> =
        (0..n).map(|_| AttributeVector::random(&mut s.rng, cfg.continuous_random_attributes)).collect();
    let a_star = attributes_to_var(&a_star);
    let mut ctx = ForwardCtx::train_recording();
    let out_gt = s.generator.forward(&batch.lr, &batch.attributes, active, &mut ctx)?;
    let out_rand = s.generator.forward(&batch.lr, &a_star, active, &mut ForwardCtx::train())?;
    let mut total: Option<Var> = None;
    for &j in &stages {
        let target = &batch.targets[&STAGE_SIZES[j - 1]];
        let loss = generator_loss(
            j,
            out_gt.merged(j)?,
            out_rand.merged(j)?,
            target,
            &a_star,
            &s.critics[j - 1],
            Some(extractor),
            &cfg.weights,
        )?;
        record(&mut log, &stage_prefix("generator", j, active), &loss, 1.0)?;
        total = Some(match total {
            None => loss.total,
            Some(t) => &t + &loss.total,
        });
    }
    let grads = gradients(&total.expect("at least one stage"), &s.generator);
    s.opt_generator.step(&mut s.generator, &grads)?;
    apply_batch_stats(&mut s.generator, &ctx.stats);
    s.generator_updates += 1;

    let pred = s.classifier.forward(&batch.lr)?;
    let loss = classifier_loss(&pred, &batch.attributes)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("classifier.loss".into()));
    }
    log.insert("classifier.loss".into(), loss.item());
    let grads = gradients(&loss, &s.classifier);
    s.opt_classifier.step(&mut s.classifier, &grads)?;

    s.global_step += 1;
    Ok((s, log))
}

fn prefixed(out: &mut BTreeMap<String, Tensor>, prefix: &str, tensors: BTreeMap<String, Tensor>) {
    for (k, v) in tensors {
        out.insert(format!("{prefix}/{k}"), v);
    }
}

fn take_prefix(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let p = format!("{prefix}/");
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
        .collect()
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    prefixed(&mut tensors, "generator", state_dict(&state.generator));
    for (i, c) in state.critics.iter().enumerate() {
        prefixed(&mut tensors, &format!("critic{}", i + 1), state_dict(c));
    }
    prefixed(&mut tensors, "classifier", state_dict(&state.classifier));
    prefixed(&mut tensors, "adam.generator", state.opt_generator.tensors());
    for (i, o) in state.opt_critics.iter().enumerate() {
        prefixed(&mut tensors, &format!("adam.critic{}", i + 1), o.tensors());
    }
    prefixed(&mut tensors, "adam.classifier", state.opt_classifier.tensors());
    let metadata = json!({
        "format_version": FORMAT_VERSION,
        "config": state.config,
        "epoch": state.epoch,
        "batch_in_epoch": state.batch_in_epoch,
        "step": state.global_step,
        "stage": state.active_stage,
        "critic_updates": state.critic_updates,
        "generator_updates": state.generator_updates,
        "rng": {
            "seed": state.rng.get_seed().to_vec(),
            "stream": state.rng.get_stream(),
            "word_pos": state.rng.get_word_pos().to_string(),
        },
        "optimizer_steps": {
            "generator": state.opt_generator.steps,
            "critics": state.opt_critics.iter().map(|o| o.steps).collect::<Vec<_>>(),
            "classifier": state.opt_classifier.steps,
        },
    });
    write_tensor_file(path, &metadata, &tensors)
}

#[derive(Deserialize)]
struct RngMeta {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

#[derive(Deserialize)]
struct OptimizerSteps {
    generator: u64,
    critics: Vec<u64>,
    classifier: u64,
}

#[derive(Deserialize)]
struct Metadata {
    config: TrainConfig,
    epoch: usize,
    batch_in_epoch: usize,
    step: u64,
    stage: usize,
    critic_updates: u64,
    generator_updates: u64,
    rng: RngMeta,
    optimizer_steps: OptimizerSteps,
}

/// Restores a full training state. The stage and position come from the
/// checkpoint, never from the caller's configuration.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let (meta, tensors) = read_tensor_file(path)?;
    let corrupt = |e: serde_json::Error| Error::CorruptCheckpoint(format!("metadata: {e}"));
    let meta: Metadata = serde_json::from_value(meta).map_err(corrupt)?;
    let mut state = TrainState::new(meta.config)?;
    load_state_dict(&mut state.generator, &take_prefix(&tensors, "generator"))?;
    for (i, c) in state.critics.iter_mut().enumerate() {
        load_state_dict(c, &take_prefix(&tensors, &format!("critic{}", i + 1)))?;
    }
    load_state_dict(&mut state.classifier, &take_prefix(&tensors, "classifier"))?;
    let adam = state.config.adam();
    let steps = &meta.optimizer_steps;
    if steps.critics.len() != 3 {
        return Err(Error::CorruptCheckpoint("expected three critic optimizers".into()));
    }
    state.opt_generator = Adam::from_tensors(adam, steps.generator, &take_prefix(&tensors, "adam.generator"))?;
    state.opt_critics = (0..3)
        .map(|i| Adam::from_tensors(adam, steps.critics[i], &take_prefix(&tensors, &format!("adam.critic{}", i + 1))))
        .collect::<Result<_>>()?;
    state.opt_classifier = Adam::from_tensors(adam, steps.classifier, &take_prefix(&tensors, "adam.classifier"))?;

    let seed: [u8; 32] = meta.rng.seed.try_into().map_err(|_| Error::CorruptCheckpoint("rng seed length".into()))?;
    let word_pos: u128 = meta.rng.word_pos.parse().map_err(|_| Error::CorruptCheckpoint("rng position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;

    crate::generator::check_stage(meta.stage)?;
    state.epoch = meta.epoch;
    state.batch_in_epoch = meta.batch_in_epoch;
    state.global_step = meta.step;
    state.active_stage = meta.stage;
    state.critic_updates = meta.critic_updates;
    state.generator_updates = meta.generator_updates;
    Ok(state)
}

/// Sample order for `epoch`, a pure function of `(seed, epoch, count)`.
pub fn epoch_order(seed: u64, epoch: usize, count: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Default)]
pub struct RunOptions {
    /// Continue from this state instead of starting fresh.
    pub resume: Option<TrainState>,
    /// Stop (after checkpointing) once this many global steps are done.
    pub stop_after_step: Option<u64>,
    /// Use this extractor instead of building one from the configuration.
    pub extractor: Option<Box<dyn FeatureExtractor>>,
}

pub struct RunOutcome {
    pub state: TrainState,
    pub log: Vec<StepLog>,
    /// Every checkpoint written, in order.
    pub checkpoints: Vec<PathBuf>,
}

pub fn boundary_checkpoint_path(dir: &Path, stage: usize) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}

/// Trains through the remaining epochs of the schedule. Checkpoints are
/// written every `checkpoint_every` steps (`step-<n>.ckpt`) and when a stage
/// ends (`stage<i>.ckpt`).
pub fn run_training(config: TrainConfig, samples: &[TrainingSample], options: RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    let extractor = match options.extractor {
        Some(e) => e,
        None => Box::new(VggFeatures::from_config(&config.extractor)?),
    };
    let mut state = match options.resume {
        Some(s) => s,
        None => TrainState::new(config.clone())?,
    };
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let mut log_file = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
    let started = Instant::now();
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let total = config.total_epochs();
    let batches_per_epoch = samples.len().div_ceil(config.batch_size);

    while state.epoch < total {
        let stage = stage_for_epoch(state.epoch, &config.stage_epochs);
        if stage != state.active_stage {
            log::info!("switching to stage {stage} at epoch {}", state.epoch);
            state.active_stage = stage;
        }
        let order = epoch_order(config.seed, state.epoch, samples.len());
        while state.batch_in_epoch < batches_per_epoch {
            let b = state.batch_in_epoch;
            let idx = &order[b * config.batch_size..((b + 1) * config.batch_size).min(samples.len())];
            let members: Vec<&TrainingSample> = idx.iter().map(|&i| &samples[i]).collect();
            let (mut next, losses) = train_step(&state, &Batch::new(&members), extractor.as_ref())?;
            next.batch_in_epoch += 1;
            if next.batch_in_epoch == batches_per_epoch {
                next.epoch += 1;
                next.batch_in_epoch = 0;
            }
            state = next;
            let entry = StepLog {
                step: state.global_step,
                epoch: if state.batch_in_epoch == 0 { state.epoch - 1 } else { state.epoch },
                stage,
                losses,
                wall_time: started.elapsed().as_secs_f64(),
            };
            serde_json::to_writer(&mut log_file, &entry)?;
            log_file.write_all(b"\n")?;
            log.push(entry);

            let stage_done = state.batch_in_epoch == 0
                && (state.epoch == total || stage_for_epoch(state.epoch, &config.stage_epochs) != stage);
            if stage_done {
                let path = boundary_checkpoint_path(&dir, stage);
                save_checkpoint(&state, &path)?;
                checkpoints.push(path);
            }
            let cadence = config.checkpoint_every > 0 && state.global_step % config.checkpoint_every as u64 == 0;
            let stopping = options.stop_after_step.is_some_and(|s| state.global_step >= s);
            if cadence || stopping {
                let path = dir.join(format!("step-{}.ckpt", state.global_step));
                save_checkpoint(&state, &path)?;
                checkpoints.push(path);
            }
            if stopping {
                log_file.flush()?;
                return Ok(RunOutcome { state, log, checkpoints });
            }
            if state.batch_in_epoch == 0 {
                break;
            }
        }
    }
    log_file.flush()?;
    Ok(RunOutcome { state, log, checkpoints })
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
