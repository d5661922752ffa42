use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knee::DEFAULT_K_CAP;
use crate::loss::{LossConfig, LossStrategy, DEFAULT_TAU};
use crate::model::Trainable;

/// One training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StageName {
    /// Projector-only alignment on the CE objective.
    Pt,
    /// All modules, CE only.
    Sft,
    /// All modules, CE plus distillation.
    Dft,
    /// Projector-only, CE plus alignment distillation.
    Dpt,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Pt => "PT",
            StageName::Sft => "SFT",
            StageName::Dft => "DFT",
            StageName::Dpt => "DPT",
        }
    }

    /// Pre-training stages share the `pt` hyperparameters, fine-tuning stages `ft`.
    pub fn is_pretraining(self) -> bool {
        matches!(self, StageName::Pt | StageName::Dpt)
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: StageName,
    pub trainable: Trainable,
    pub distill: bool,
}

impl StageSpec {
    pub fn new(name: StageName) -> Self {
        let projector_only = Trainable {
            projector: true,
            ..Trainable::NONE
        };
        let (trainable, distill) = match name {
            StageName::Pt => (projector_only, false),
            StageName::Sft => (Trainable::ALL, false),
            StageName::Dft => (Trainable::ALL, true),
            StageName::Dpt => (projector_only, true),
        };
        Self {
            name,
            trainable,
            distill,
        }
    }
}

/// Two-stage training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum Scheme {
    #[serde(rename = "pt-sft")]
    PtSft,
    #[serde(rename = "dpt-sft")]
    DptSft,
    #[default]
    #[serde(rename = "pt-dft")]
    PtDft,
    #[serde(rename = "dpt-dft")]
    DptDft,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::PtSft, Scheme::DptSft, Scheme::PtDft, Scheme::DptDft];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::PtSft => "pt-sft",
            Scheme::DptSft => "dpt-sft",
            Scheme::PtDft => "pt-dft",
            Scheme::DptDft => "dpt-dft",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scheme::PtSft => "PT-SFT",
            Scheme::DptSft => "DPT-SFT",
            Scheme::PtDft => "PT-DFT",
            Scheme::DptDft => "DPT-DFT",
        }
    }

    pub fn stages(self) -> [StageSpec; 2] {
        let (first, second) = match self {
            Scheme::PtSft => (StageName::Pt, StageName::Sft),
            Scheme::DptSft => (StageName::Dpt, StageName::Sft),
            Scheme::PtDft => (StageName::Pt, StageName::Dft),
            Scheme::DptDft => (StageName::Dpt, StageName::Dft),
        };
        [StageSpec::new(first), StageSpec::new(second)]
    }

    /// Whether any stage needs a teacher.
    pub fn distills(self) -> bool {
        self != Scheme::PtSft
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`, expected one of pt-sft, dpt-sft, pt-dft, dpt-dft")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Linear warmup then cosine decay to zero.
    #[default]
    Cosine,
    /// Linear warmup then constant.
    Constant,
}

/// Which text positions the distillation terms are averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistillPositions {
    #[default]
    Answer,
    All,
}

/// Optimizer and schedule settings of one stage family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
}

impl StageHyper {
    pub fn pretraining() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn fine_tuning() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self, which: &str) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("{which}.learning_rate must be finite and >= 0")));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(format!("{which}.batch_size and {which}.epochs must be positive")));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("{which}.warmup_ratio must lie in [0, 1)")));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("{which}.weight_decay must be finite and >= 0")));
        }
        Ok(())
    }
}

impl Default for StageHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 1,
            warmup_ratio: 0.03,
            schedule: Schedule::Cosine,
            weight_decay: 0.0,
        }
    }
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_k_cap() -> usize {
    DEFAULT_K_CAP
}
fn default_pt() -> StageHyper {
    StageHyper::pretraining()
}
fn default_ft() -> StageHyper {
    StageHyper::fine_tuning()
}

/// Everything that shapes one distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "one")]
    pub lambda1: f64,
    #[serde(default = "one")]
    pub lambda2: f64,
    #[serde(default)]
    pub strategy: LossStrategy,
    #[serde(default = "yes")]
    pub switch_enabled: bool,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_k_cap")]
    pub k_cap: usize,
    /// Hyperparameters of PT and DPT.
    #[serde(default = "default_pt")]
    pub pt: StageHyper,
    /// Hyperparameters of SFT and DFT.
    #[serde(default = "default_ft")]
    pub ft: StageHyper,
    /// Weight of `L_CE` in the total; 1 except in gradient-confinement checks.
    #[serde(default = "one")]
    pub ce_weight: f64,
    /// Divide student logits by `tau` inside the CE softmax.
    #[serde(default)]
    pub ce_uses_tau: bool,
    #[serde(default)]
    pub distill_positions: DistillPositions,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "one")]
    pub grad_clip: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            lambda1: 1.0,
            lambda2: 1.0,
            strategy: LossStrategy::default(),
            switch_enabled: true,
            scheme: Scheme::default(),
            k_cap: DEFAULT_K_CAP,
            pt: StageHyper::pretraining(),
            ft: StageHyper::fine_tuning(),
            ce_weight: 1.0,
            ce_uses_tau: false,
            distill_positions: DistillPositions::Answer,
            grad_clip: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            strategy: self.strategy,
            tau: self.tau,
            k_cap: self.k_cap,
        }
    }

    pub fn hyper(&self, stage: StageName) -> &StageHyper {
        if stage.is_pretraining() {
            &self.pt
        } else {
            &self.ft
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("ce_weight", self.ce_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config("grad_clip must be finite and >= 0".into()));
        }
        self.pt.validate("pt")?;
        self.ft.validate("ft")
    }
}
