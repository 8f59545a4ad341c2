//! Experiment configuration files. The grammar is documented in `docs/config.md`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dcnet::nn::{ArchItem, ArchPreset, ArchSpec, ConvOperator, RegularizerSpec};
use dcnet::ops::{AngularKind, Magnitude, MagnitudeKind, OperatorSpec, WeightingMode};
use dcnet::optim::{GradientMode, LrSchedule, OptimizerKind, Projection, UpdateRule};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            init_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: DatasetKind,
    pub path: PathBuf,
    /// First `n` training examples; all when absent.
    pub train_subset: Option<usize>,
    /// First `n` test examples; all when absent.
    pub test_subset: Option<usize>,
    /// Crop and flip training batches; defaults to on for CIFAR-10 only.
    pub augment: Option<bool>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            path: PathBuf::from("data/mnist"),
            train_subset: None,
            test_subset: None,
            augment: None,
        }
    }
}

impl DataSection {
    pub fn augment(&self) -> bool {
        self.augment.unwrap_or(self.dataset == DatasetKind::Cifar10)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorChoice {
    Standard,
    Decoupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AngularChoice {
    Linear,
    Cosine,
    Sigmoid,
    SquareCosine,
}

/// Operator keys shared by `[model]` and every `[group.N]` section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorKeys {
    pub operator: Option<OperatorChoice>,
    pub magnitude: Option<MagnitudeKind>,
    pub angular: Option<AngularChoice>,
    pub sigmoid_k: Option<f64>,
    pub weighting: Option<WeightingMode>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub rho_learnable: Option<bool>,
}

impl OperatorKeys {
    /// Keys set here win over `base`.
    fn over(&self, base: &OperatorKeys) -> OperatorKeys {
        OperatorKeys {
            operator: self.operator.or(base.operator),
            magnitude: self.magnitude.or(base.magnitude),
            angular: self.angular.or(base.angular),
            sigmoid_k: self.sigmoid_k.or(base.sigmoid_k),
            weighting: self.weighting.or(base.weighting),
            alpha: self.alpha.or(base.alpha),
            beta: self.beta.or(base.beta),
            rho_learnable: self.rho_learnable.or(base.rho_learnable),
        }
    }

    pub fn resolve(&self) -> Result<ConvOperator> {
        if self.operator.unwrap_or(OperatorChoice::Decoupled) == OperatorChoice::Standard {
            return Ok(ConvOperator::Standard);
        }
        let kind = self.magnitude.unwrap_or(MagnitudeKind::Tanh);
        let defaults = Magnitude::with_defaults(kind);
        let magnitude = Magnitude::new(
            kind,
            self.alpha.unwrap_or(defaults.alpha),
            self.beta.unwrap_or(defaults.beta),
        )?;
        let angular = match self.angular.unwrap_or(AngularChoice::Cosine) {
            AngularChoice::Linear => AngularKind::LinearAngle,
            AngularChoice::Cosine => AngularKind::Cosine,
            AngularChoice::Sigmoid => AngularKind::Sigmoid {
                k: self.sigmoid_k.unwrap_or(AngularKind::DEFAULT_SIGMOID_K),
            },
            AngularChoice::SquareCosine => AngularKind::SquareCosine,
        };
        let spec = OperatorSpec::new(
            magnitude,
            angular,
            self.weighting.unwrap_or(WeightingMode::Unweighted),
            self.rho_learnable.unwrap_or(kind.has_radius()),
        )?;
        Ok(ConvOperator::Decoupled(spec))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerChoice {
    #[default]
    None,
    Orthogonal,
    Orthonormal,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: ArchPreset,
    /// Layer list for the `custom` preset, e.g. `["conv16", "pool", "fc64"]`.
    pub layers: Vec<ArchItem>,
    #[serde(flatten)]
    pub op: OperatorKeys,
    pub bn: bool,
    pub relu: bool,
    pub decoupled_fc: bool,
    pub width_divisor: usize,
    pub regularizer: RegularizerChoice,
    pub regularizer_lambda: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: ArchPreset::MnistCnn6,
            layers: Vec::new(),
            op: OperatorKeys::default(),
            bn: false,
            relu: true,
            decoupled_fc: false,
            width_divisor: 1,
            regularizer: RegularizerChoice::None,
            regularizer_lambda: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerChoice {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleChoice {
    /// Divide by 10 at 50% and again at 75% of `total_steps`.
    #[default]
    Step,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub total_steps: usize,
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub lr_schedule: ScheduleChoice,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub gradient_mode: GradientMode,
    /// Project unweighted decoupled kernels every this many steps; 0 disables.
    pub projection_interval: usize,
    pub projection_norm: f64,
    /// A metrics row every this many steps (and after the last step).
    pub log_every: usize,
    /// Test examples used for the periodic evaluation columns.
    pub eval_examples: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 64,
            total_steps: 2000,
            optimizer: OptimizerChoice::Adam,
            lr: 1e-3,
            lr_schedule: ScheduleChoice::Step,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            gradient_mode: GradientMode::Standard,
            projection_interval: 0,
            projection_norm: 1.0,
            log_every: 100,
            eval_examples: 1000,
            eval_batch_size: 250,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    #[default]
    Fgsm,
    Bim,
}

/// Pixel quantities are on the 0–255 scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub epsilon: f64,
    pub tau: f64,
    pub iterations: usize,
    /// Share of adversarial examples in each adversarial-training batch.
    pub adversarial_fraction: f64,
    /// Test examples attacked by `attack`; all when absent.
    pub examples: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::Fgsm,
            epsilon: 8.0,
            tau: 2.0,
            iterations: 20,
            adversarial_fraction: 0.5,
            examples: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon <= 255.0) {
            return Err(HarnessError::Config(format!(
                "attack epsilon {} outside [0, 255]",
                self.epsilon
            )));
        }
        if self.method == AttackMethod::Bim {
            if self.iterations == 0 {
                return Err(HarnessError::Config(
                    "BIM needs at least one iteration".into(),
                ));
            }
            if !(self.tau > 0.0 && self.tau <= self.epsilon) {
                return Err(HarnessError::Config(format!(
                    "BIM needs 0 < tau <= epsilon, got tau {} and epsilon {}",
                    self.tau, self.epsilon
                )));
            }
        }
        if !(0.0..1.0).contains(&self.adversarial_fraction) {
            return Err(HarnessError::Config(format!(
                "adversarial fraction must be in [0, 1), got {}",
                self.adversarial_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    /// Operator overrides per convolution group, keyed by group index.
    pub group: BTreeMap<String, OperatorKeys>,
    pub train: TrainSection,
    pub attack: AttackConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size == 0 || t.eval_batch_size == 0 {
            return Err(HarnessError::Config(
                "batch sizes must be at least 1".into(),
            ));
        }
        if t.log_every == 0 {
            return Err(HarnessError::Config("log_every must be at least 1".into()));
        }
        if t.eval_examples == 0 {
            return Err(HarnessError::Config(
                "eval_examples must be at least 1".into(),
            ));
        }
        self.arch()?.validate()?;
        self.update_rule()?.validate()?;
        self.attack.validate()
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        let m = &self.model;
        let mut spec = ArchSpec::preset(m.preset, m.op.resolve()?);
        if let Some(max) = self
            .group
            .keys()
            .map(|k| group_index(k))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
        {
            spec.group_ops = (0..=max)
                .map(|i| match self.group.get(&i.to_string()) {
                    Some(keys) => keys.over(&m.op).resolve(),
                    None => m.op.resolve(),
                })
                .collect::<Result<_>>()?;
        }
        spec.layers = m.layers.clone();
        spec.bn = m.bn;
        spec.relu = m.relu;
        spec.decoupled_fc = m.decoupled_fc;
        spec.width_divisor = m.width_divisor;
        let (channels, size) = match self.data.dataset {
            DatasetKind::Mnist => (1, 28),
            DatasetKind::Cifar10 => (3, 32),
        };
        spec.in_channels = channels;
        spec.input_size = size;
        spec.regularizer = match m.regularizer {
            RegularizerChoice::None => RegularizerSpec::None,
            RegularizerChoice::Orthogonal => RegularizerSpec::Orthogonal(m.regularizer_lambda),
            RegularizerChoice::Orthonormal => RegularizerSpec::Orthonormal(m.regularizer_lambda),
            RegularizerChoice::L2 => RegularizerSpec::L2(m.regularizer_lambda),
        };
        Ok(spec)
    }

    pub fn update_rule(&self) -> Result<UpdateRule> {
        let t = &self.train;
        let kind = match t.optimizer {
            OptimizerChoice::Adam => OptimizerKind::Adam {
                beta1: t.beta1,
                beta2: t.beta2,
                epsilon: t.epsilon,
            },
            OptimizerChoice::Sgd => OptimizerKind::SgdMomentum {
                momentum: t.momentum,
            },
        };
        let schedule = match t.lr_schedule {
            ScheduleChoice::Step => LrSchedule::step_decay(t.lr, t.total_steps),
            ScheduleChoice::Constant => LrSchedule::constant(t.lr),
        };
        let projection = (t.projection_interval > 0).then_some(Projection {
            interval: t.projection_interval,
            target_norm: t.projection_norm,
        });
        Ok(UpdateRule {
            kind,
            schedule,
            gradient_mode: t.gradient_mode,
            projection,
        })
    }
}

fn group_index(key: &str) -> Result<usize> {
    key.parse().map_err(|_| {
        HarnessError::Config(format!(
            "group section `[group.{key}]` needs a numeric index"
        ))
    })
}
