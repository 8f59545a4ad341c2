//! Training, evaluation and adversarial training loops.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dcnet::nn::{argmax_rows, softmax_xent, Checkpoint, LayerStats, LoadMode, Network};
use dcnet::optim::Optimizer;
use dcnet::{Mode, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attack::fgsm;
use crate::augment::augment_batch;
use crate::config::{AttackConfig, DatasetKind, ExperimentConfig};
use crate::data::{load_cifar10, load_mnist, Dataset};
use crate::error::{io_err, HarnessError, Result};
use crate::metrics::{MetricsRow, MetricsWriter};

/// Independent random streams derived from the run seed.
const INIT_STREAM: u64 = 0;
const ORDER_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Training and test sets after subsetting.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_datasets(config: &ExperimentConfig) -> Result<Datasets> {
    let d = &config.data;
    let (train, test) = match d.dataset {
        DatasetKind::Mnist => load_mnist(&d.path)?,
        DatasetKind::Cifar10 => load_cifar10(&d.path)?,
    };
    let train = match d.train_subset {
        Some(n) => train.truncate(n)?,
        None => train,
    };
    let test = match d.test_subset {
        Some(n) => test.truncate(n)?,
        None => test,
    };
    Ok(Datasets { train, test })
}

/// Network from the config's architecture and seed, optionally initialized
/// from a checkpoint (tensors matched by name and shape).
pub fn build_network(config: &ExperimentConfig) -> Result<(Network<f32>, Option<Vec<String>>)> {
    let mut rng = stream(config.run.seed, INIT_STREAM);
    let mut net = config.arch()?.build::<f32>(&mut rng)?;
    let loaded = match &config.run.init_checkpoint {
        Some(path) => {
            let report = Checkpoint::load(path)?.apply(&mut net, LoadMode::Matching)?;
            Some(report.loaded)
        }
        None => None,
    };
    Ok((net, loaded))
}

/// Mean loss and accuracy over the first `n` examples.
pub fn evaluate(
    net: &mut Network<f32>,
    data: &Dataset,
    n: usize,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let n = n.min(data.len());
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let logits = net.predict(&x)?;
        loss += softmax_xent(&logits, &labels)?.0 * chunk.len() as f64;
        correct += argmax_rows(&logits)?
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// What a finished run produced.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub test_examples: usize,
    pub test_loss: f64,
    pub test_acc: f64,
    pub final_train_loss: Option<f64>,
    pub layers: Vec<LayerSummary>,
    pub initialized_from: Option<Vec<String>>,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerSummary {
    pub index: usize,
    pub kind: String,
    pub mean_w_norm: f64,
    pub mean_rho: Option<f64>,
}

impl From<&LayerStats> for LayerSummary {
    fn from(s: &LayerStats) -> Self {
        Self {
            index: s.index,
            kind: s.kind.to_string(),
            mean_w_norm: s.mean_w_norm,
            mean_rho: s.mean_rho,
        }
    }
}

pub struct RunOutcome {
    pub summary: RunSummary,
    pub network: Network<f32>,
}

/// Cycles through shuffled epochs of the training set.
struct BatchOrder {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchOrder {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn layer_dump(net: &Network<f32>) -> String {
    net.layer_stats()
        .iter()
        .map(|s| match s.mean_rho {
            Some(r) => format!(
                "  layer {} ({}): mean ‖w‖ {:e}, mean ρ {:e}",
                s.index, s.kind, s.mean_w_norm, r
            ),
            None => format!(
                "  layer {} ({}): mean ‖w‖ {:e}",
                s.index, s.kind, s.mean_w_norm
            ),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn diverged(step: usize, message: String, net: &Network<f32>) -> HarnessError {
    HarnessError::Diverged {
        step,
        message,
        dump: layer_dump(net),
    }
}

fn concat(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Ok(Tensor::new(&shape, data)?)
}

/// Adds FGSM copies of the batch, generated from the current weights.
fn adversarial_batch(
    net: &mut Network<f32>,
    x: Tensor<f32>,
    labels: Vec<usize>,
    attack: &AttackConfig,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let b = labels.len();
    let f = attack.adversarial_fraction;
    let m = ((b as f64) * f / (1.0 - f)).round() as usize;
    if m == 0 {
        return Ok((x, labels));
    }
    let per = x.len() / b;
    let pick: Vec<usize> = (0..m).map(|i| i % b).collect();
    let mut src = Vec::with_capacity(m * per);
    for &i in &pick {
        src.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = m;
    let src = Tensor::new(&shape, src)?;
    let src_labels: Vec<usize> = pick.iter().map(|&i| labels[i]).collect();
    let adv = fgsm(net, &src, &src_labels, attack.epsilon)?;
    let mut all_labels = labels;
    all_labels.extend(src_labels);
    Ok((concat(&x, &adv)?, all_labels))
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(summary).expect("summaries serialize");
    fs::write(&path, text + "\n").map_err(io_err(path))
}

/// Natural training.
pub fn train(config: &ExperimentConfig, data: &Datasets) -> Result<RunOutcome> {
    run(config, data, None)
}

/// Each batch is extended with FGSM examples made from the current weights.
pub fn adversarial_train(config: &ExperimentConfig, data: &Datasets) -> Result<RunOutcome> {
    config.attack.validate()?;
    run(config, data, Some(&config.attack))
}

fn run(
    config: &ExperimentConfig,
    data: &Datasets,
    attack: Option<&AttackConfig>,
) -> Result<RunOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(HarnessError::Config("training set is empty".into()));
    }
    let out = &config.run.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let config_path = out.join("config.toml");
    fs::write(&config_path, config.to_toml()).map_err(io_err(config_path))?;

    let t = &config.train;
    let (mut net, loaded) = build_network(config)?;
    let mut opt = Optimizer::new(config.update_rule()?, &net)?;
    if t.total_steps > 0 {
        opt.prepare(&mut net)?;
    }
    let mut order = BatchOrder::new(data.train.len(), stream(config.run.seed, ORDER_STREAM));
    let mut aug_rng = stream(config.run.seed, AUGMENT_STREAM);
    let augment = config.data.augment();
    let mut writer = MetricsWriter::create(out, &net.layer_stats())?;
    let start = Instant::now();

    let (mut window_loss, mut window_correct, mut window_seen, mut window_steps) =
        (0.0, 0usize, 0usize, 0usize);
    let mut last_train_loss = None;
    for step in 0..t.total_steps {
        let indices = order.next(t.batch_size);
        let (mut x, mut labels) = data.train.batch(&indices)?;
        if augment {
            let (c, h, w) = (data.train.channels, data.train.height, data.train.width);
            augment_batch(x.data_mut(), c, h, w, &mut aug_rng);
        }
        if let Some(a) = attack {
            (x, labels) = adversarial_batch(&mut net, x, labels, a)?;
        }
        let (loss, logits, grads) = net
            .loss_and_grads(&x, &labels, Mode::Train, false)
            .map_err(|e| diverged(step, e.to_string(), &net))?;
        if !loss.is_finite() {
            return Err(diverged(step, format!("loss is {loss}"), &net));
        }
        opt.step(&mut net, grads.params, step)
            .map_err(|e| diverged(step, e.to_string(), &net))?;

        window_loss += loss;
        window_steps += 1;
        window_correct += argmax_rows(&logits)?
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
        window_seen += labels.len();
        let done = step + 1;
        if done % t.log_every == 0 || done == t.total_steps {
            let (eval_loss, eval_acc) =
                evaluate(&mut net, &data.test, t.eval_examples, t.eval_batch_size)?;
            let row = MetricsRow {
                step: done,
                train_loss: window_loss / window_steps as f64,
                train_acc: window_correct as f64 / window_seen as f64,
                eval_loss,
                eval_acc,
                layers: net.layer_stats(),
            };
            if !row.is_finite() {
                return Err(diverged(step, "non-finite metrics".into(), &net));
            }
            last_train_loss = Some(row.train_loss);
            writer.write(&row, start.elapsed().as_secs_f64())?;
            (window_loss, window_correct, window_seen, window_steps) = (0.0, 0, 0, 0);
        }
    }

    let ckpt_path = out.join("final.ckpt");
    let metadata = serde_json::json!({
        "steps": t.total_steps,
        "seed": config.run.seed,
        "config": config.to_toml(),
    });
    Checkpoint::from_network(&mut net, metadata).save(&ckpt_path)?;
    let (test_loss, test_acc) = evaluate(&mut net, &data.test, data.test.len(), t.eval_batch_size)?;
    let summary = RunSummary {
        steps: t.total_steps,
        test_examples: data.test.len(),
        test_loss,
        test_acc,
        final_train_loss: last_train_loss,
        layers: net.layer_stats().iter().map(LayerSummary::from).collect(),
        initialized_from: loaded,
        output_dir: out.clone(),
    };
    write_summary(out, &summary)?;
    Ok(RunOutcome {
        summary,
        network: net,
    })
}

/// Loads a trained network: architecture from the config, weights from `checkpoint`.
pub fn load_trained(config: &ExperimentConfig, checkpoint: &Path) -> Result<Network<f32>> {
    let mut rng = stream(config.run.seed, INIT_STREAM);
    let mut net = config.arch()?.build::<f32>(&mut rng)?;
    Checkpoint::load(checkpoint)?.apply(&mut net, LoadMode::Exact)?;
    Ok(net)
}
