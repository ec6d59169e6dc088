//! The experiment file: one TOML document describing data, both model
//! shapes and every stage's settings. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::checkpoint::Stage;
use crate::data::Vocab;
use crate::distill::Objectives;
use crate::error::{Error, Result};
use crate::pipeline::{DistillSettings, DistillSetup, TrainConfig, TrainSettings};
use crate::transformer::TransformerConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Task training set (TSV).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    /// Labeled set for teacher fine-tuning; defaults to `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_train: Option<PathBuf>,
    /// Unlabeled text, one sentence per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub general: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub glove: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub glove_limit: Option<usize>,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSettings {
    #[serde(default = "AugmentSettings::default_p_t")]
    pub p_t: f64,
    #[serde(default = "AugmentSettings::default_n_a")]
    pub n_a: usize,
    #[serde(default = "AugmentSettings::default_k")]
    pub k: usize,
    #[serde(default = "AugmentSettings::default_include")]
    pub include_original: bool,
}

impl AugmentSettings {
    fn default_p_t() -> f64 {
        AugmentConfig::default().p_t
    }
    fn default_n_a() -> usize {
        AugmentConfig::default().n_a
    }
    fn default_k() -> usize {
        AugmentConfig::default().k
    }
    fn default_include() -> bool {
        true
    }

    pub fn with_seed(&self, seed: u64) -> AugmentConfig {
        AugmentConfig {
            p_t: self.p_t,
            n_a: self.n_a,
            k: self.k,
            seed,
            include_original: self.include_original,
        }
    }
}

impl Default for AugmentSettings {
    fn default() -> Self {
        let d = AugmentConfig::default();
        AugmentSettings {
            p_t: d.p_t,
            n_a: d.n_a,
            k: d.k,
            include_original: d.include_original,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSettings {
    pub seeds: Vec<u64>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub teacher: TransformerConfig,
    pub student: TransformerConfig,
    pub teacher_mlm: TrainSettings,
    pub teacher_finetune: TrainSettings,
    pub general_distill: TrainSettings,
    pub task_intermediate: TrainSettings,
    pub task_prediction: TrainSettings,
    /// Hard-label training used by baselines.
    pub finetune: TrainSettings,
    #[serde(default)]
    pub distill: DistillSettings,
    #[serde(default)]
    pub augment: AugmentSettings,
    #[serde(default)]
    pub ablation: AblationSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`; relative data paths are resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.data.rebase(base);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        for (name, s) in self.stage_settings() {
            s.validate().map_err(|e| Error::Config(format!("[{name}] {e}")))?;
        }
        if self.data.max_len < 3 {
            return Err(Error::Config("data.max_len must be at least 3".into()));
        }
        for (who, c) in [("teacher", &self.teacher), ("student", &self.student)] {
            if self.data.max_len > c.max_len {
                return Err(Error::Config(format!(
                    "data.max_len {} exceeds {who}.max_len {}",
                    self.data.max_len, c.max_len
                )));
            }
        }
        if self.teacher.num_classes != self.student.num_classes {
            return Err(Error::Config("teacher and student disagree on num_classes".into()));
        }
        self.distill_setup(Objectives::ALL, self.seed)?;
        self.augment.with_seed(self.seed).validate()?;
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds is empty".into()));
        }
        Ok(())
    }

    fn stage_settings(&self) -> [(&'static str, &TrainSettings); 6] {
        [
            ("teacher_mlm", &self.teacher_mlm),
            ("teacher_finetune", &self.teacher_finetune),
            ("general_distill", &self.general_distill),
            ("task_intermediate", &self.task_intermediate),
            ("task_prediction", &self.task_prediction),
            ("finetune", &self.finetune),
        ]
    }

    pub fn settings(&self, stage: Stage) -> &TrainSettings {
        match stage {
            Stage::TeacherMlm => &self.teacher_mlm,
            Stage::TeacherFinetune => &self.teacher_finetune,
            Stage::General => &self.general_distill,
            Stage::TaskIntermediate => &self.task_intermediate,
            Stage::TaskPrediction => &self.task_prediction,
            Stage::Init | Stage::Finetune => &self.finetune,
        }
    }

    pub fn train_config(&self, stage: Stage, seed: u64) -> TrainConfig {
        TrainConfig {
            stage,
            settings: self.settings(stage).clone(),
            seed,
            max_len: self.data.max_len,
        }
    }

    pub fn distill_setup(&self, objectives: Objectives, seed: u64) -> Result<DistillSetup> {
        DistillSetup::new(&self.distill, &self.student, &self.teacher, objectives, seed)
    }

    /// Checks that both models fit `vocab`.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        for (who, c) in [("teacher", &self.teacher), ("student", &self.student)] {
            if c.vocab_size != vocab.len() {
                return Err(Error::Config(format!(
                    "{who}.vocab_size {} but the vocabulary has {} pieces",
                    c.vocab_size,
                    vocab.len()
                )));
            }
        }
        Ok(())
    }
}

impl DataConfig {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.train,
            &mut self.dev,
            &mut self.teacher_train,
            &mut self.general,
            &mut self.vocab,
            &mut self.glove,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// The named path or a configuration error naming the missing key.
    pub fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("data.{key} is not set")))
    }
}

/// A small, fast configuration for the built-in synthetic task.
pub fn toy(vocab_size: usize) -> ExperimentConfig {
    let teacher = TransformerConfig {
        num_layers: 4,
        hidden: 32,
        ffn: 64,
        heads: 2,
        vocab_size,
        max_len: 16,
        num_classes: 2,
        dropout: 0.0,
        mlm_head: true,
        seed: 11,
    };
    let student = TransformerConfig {
        num_layers: 2,
        hidden: 16,
        ffn: 32,
        mlm_head: false,
        seed: 12,
        ..teacher.clone()
    };
    ExperimentConfig {
        seed: 1,
        data: DataConfig {
            max_len: 16,
            ..Default::default()
        },
        teacher,
        student,
        teacher_mlm: TrainSettings::new(10, 32, 5e-3),
        teacher_finetune: TrainSettings::new(10, 32, 2e-3),
        general_distill: TrainSettings::new(2, 32, 2e-3),
        task_intermediate: TrainSettings::new(3, 32, 2e-3),
        task_prediction: TrainSettings::new(3, 32, 2e-3),
        finetune: TrainSettings::new(10, 32, 2e-3),
        distill: DistillSettings::default(),
        augment: AugmentSettings::default(),
        ablation: AblationSettings::default(),
    }
}
