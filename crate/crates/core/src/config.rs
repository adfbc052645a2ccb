//! Run configuration file and the pipeline it drives.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bitloss::BitLossConfig;
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};
use crate::persistence;
use crate::quantizer::{attach_quantization, Granularity, RoleSelection};
use crate::training::{PhaseSpec, Session, TrainingSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Blobs {
        classes: usize,
        dims: usize,
        #[serde(default = "default_train")]
        train: usize,
        #[serde(default = "default_eval")]
        eval: usize,
        separation: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        eval_images: PathBuf,
        eval_labels: PathBuf,
        /// Use only the first `limit` samples of each split.
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn default_train() -> usize {
    8000
}

fn default_eval() -> usize {
    2000
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// learn -> round -> fine-tune
    #[default]
    Standard,
    /// Round after `early_round_epoch` learn epochs and keep training at the
    /// fixed bitlengths, then fine-tune.
    Early,
    /// Train at fixed 8-bit precision first (or load such a checkpoint),
    /// then learn -> round -> fine-tune.
    FromPretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub variant: Variant,
    pub learn_epochs: usize,
    pub finetune_epochs: usize,
    pub lr: f64,
    pub finetune_lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub bits_lr_mult: f64,
    pub early_round_epoch: Option<usize>,
    pub pretrain_epochs: usize,
    /// Checkpoint trained at fixed 8 bits, used instead of a pretrain phase.
    pub pretrained: Option<PathBuf>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Standard,
            learn_epochs: 60,
            finetune_epochs: 20,
            lr: 0.01,
            finetune_lr_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            eval_every: 1,
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            bits_lr_mult: 1.0,
            early_round_epoch: None,
            pretrain_epochs: 20,
            pretrained: None,
        }
    }
}

impl ScheduleConfig {
    fn phase(&self, name: &str, epochs: usize, lr: f64, trainable: bool, round: bool) -> PhaseSpec {
        PhaseSpec {
            name: name.into(),
            epochs,
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            bitlengths_trainable: trainable,
            round_before: round,
        }
    }

    pub fn to_schedule(&self, seed: u64) -> Result<TrainingSchedule> {
        let ft_lr = self.lr * self.finetune_lr_factor;
        let mut phases = Vec::new();
        match self.variant {
            Variant::Standard => {
                phases.push(self.phase("learn", self.learn_epochs, self.lr, true, false));
                phases.push(self.phase("finetune", self.finetune_epochs, ft_lr, false, true));
            }
            Variant::Early => {
                let early = self.early_round_epoch.ok_or_else(|| {
                    Error::Config(
                        "schedule.early_round_epoch is required for the early variant".into(),
                    )
                })?;
                if early > self.learn_epochs {
                    return Err(Error::Config(format!(
                        "schedule.early_round_epoch {early} exceeds learn_epochs {}",
                        self.learn_epochs
                    )));
                }
                phases.push(self.phase("learn", early, self.lr, true, false));
                phases.push(self.phase("fixed", self.learn_epochs - early, self.lr, false, true));
                phases.push(self.phase("finetune", self.finetune_epochs, ft_lr, false, false));
            }
            Variant::FromPretrained => {
                if self.pretrained.is_none() {
                    phases.push(self.phase(
                        "pretrain",
                        self.pretrain_epochs,
                        self.lr,
                        false,
                        false,
                    ));
                }
                phases.push(self.phase("learn", self.learn_epochs, self.lr, true, false));
                phases.push(self.phase("finetune", self.finetune_epochs, ft_lr, false, true));
            }
        }
        let s = TrainingSchedule {
            phases,
            seed,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            lr_milestones: self.lr_milestones.clone(),
            lr_decay: self.lr_decay,
            bits_lr_mult: self.bits_lr_mult,
        };
        s.validate()?;
        Ok(s)
    }
}

fn default_true() -> bool {
    true
}

fn default_granularity() -> Granularity {
    Granularity::Tensor
}

fn default_roles() -> RoleSelection {
    RoleSelection::Both
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "default_roles")]
    pub roles: RoleSelection,
    /// `false` trains an unquantized float baseline.
    #[serde(default = "default_true")]
    pub quantize: bool,
    pub model: ModelSpec,
    pub data: DataConfig,
    #[serde(default)]
    pub bitloss: BitLossConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that can be checked without training, including
    /// that dataset files exist and the model can be built.
    pub fn validate(&self) -> Result<()> {
        self.bitloss.validate()?;
        self.schedule.to_schedule(self.seed)?;
        match &self.data {
            DataConfig::Blobs {
                classes,
                dims,
                train,
                eval,
                separation,
            } => {
                if *classes < 2 || *dims < 1 || *train < 1 || *eval < 1 {
                    return Err(Error::Config(
                        "data: classes >= 2, dims >= 1, train >= 1 and eval >= 1 required".into(),
                    ));
                }
                if separation.is_nan() || *separation <= 0.0 {
                    return Err(Error::Config(format!(
                        "data.separation must be > 0, got {separation}"
                    )));
                }
                if self.model.input_shape().iter().product::<usize>() != *dims
                    || self.model.classes() != *classes
                {
                    return Err(Error::Config(format!(
                        "model input {:?} / classes {} do not match data dims {dims} / classes {classes}",
                        self.model.input_shape(),
                        self.model.classes()
                    )));
                }
            }
            DataConfig::Idx {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
                ..
            } => {
                for (key, p) in [
                    ("data.train_images", train_images),
                    ("data.train_labels", train_labels),
                    ("data.eval_images", eval_images),
                    ("data.eval_labels", eval_labels),
                ] {
                    if !p.is_file() {
                        return Err(Error::Config(format!(
                            "{key}: file {} not found",
                            p.display()
                        )));
                    }
                }
            }
        }
        if let Some(p) = &self.schedule.pretrained {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "schedule.pretrained: file {} not found",
                    p.display()
                )));
            }
        }
        Model::build(&self.model)?;
        Ok(())
    }

    /// Digest of everything that fixes the model structure and data; a
    /// checkpoint can only be continued under a config with the same hash.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Identity<'a> {
            seed: u64,
            model: &'a ModelSpec,
            data: &'a DataConfig,
            granularity: Granularity,
            roles: RoleSelection,
            quantize: bool,
        }
        let id = Identity {
            seed: self.seed,
            model: &self.model,
            data: &self.data,
            granularity: self.granularity,
            roles: self.roles,
            quantize: self.quantize,
        };
        let bytes = serde_json::to_vec(&id).expect("serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataConfig::Blobs {
                classes,
                dims,
                train,
                eval,
                separation,
            } => Ok(data::synth_blobs_split(
                *classes,
                *dims,
                *train,
                *eval,
                *separation,
                self.seed,
            )?),
            DataConfig::Idx {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
                limit,
            } => {
                let mut train = data::load_idx(train_images, train_labels)?;
                let mut eval =
                    data::load_idx_with(eval_images, eval_labels, Some(train.normalization))?;
                eval.split = Split::Eval;
                if let Some(l) = limit {
                    train = train.head(*l);
                    eval = eval.head(*l);
                }
                Ok((train, eval))
            }
        }
    }

    /// Builds the model (and its quantization plan) and a fresh session.
    pub fn session(&self) -> Result<Session> {
        self.validate()?;
        let (train, eval) = self.load_data()?;
        let mut model = Model::build(&self.model)?;
        let plan = if self.quantize {
            Some(attach_quantization(
                &mut model,
                self.granularity,
                self.roles,
            )?)
        } else {
            None
        };
        let mut session = Session::new(
            model,
            plan,
            self.schedule.to_schedule(self.seed)?,
            self.bitloss.clone(),
            train,
            eval,
        )?;
        session.config_hash = self.config_hash();
        if let Some(path) = &self.schedule.pretrained {
            let ckpt = persistence::load(path)?;
            let (pre, _) = ckpt.restore_model()?;
            for ((_, dst), (_, src)) in session
                .model
                .params_mut()
                .iter_mut()
                .zip(pre.params().iter())
                .filter(|((_, d), _)| d.kind != crate::params::ParamKind::Bitlength)
            {
                if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                    return Err(Error::Config(format!(
                        "schedule.pretrained: parameter `{}` does not match `{}`",
                        dst.name, src.name
                    )));
                }
                dst.tensor = src.tensor.clone();
            }
        }
        if let Some(dir) = &self.out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            std::fs::write(dir.join("resolved_config.toml"), self.to_toml())
                .map_err(|e| Error::io(dir, e))?;
            session.out_dir = Some(dir.clone());
        }
        Ok(session)
    }
}

/// learn -> round -> fine-tune (or the configured variant) end to end.
pub fn run_pipeline(config: &RunConfig) -> Result<Session> {
    let mut session = config.session()?;
    session.run()?;
    session.write_summary()?;
    Ok(session)
}
