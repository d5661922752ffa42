use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{check_switch_compatible, ModelConfig};
use super::image::{patchify, Image};
use super::modules::{LanguageModel, LanguageVars, Projector, ProjectorVars, VisionEncoder, VisionVars};
use super::param::Param;
use crate::autodiff::{DiffArray, Tape, Var};
use crate::error::{Error, Result};

/// The three parameter groups of a modular VLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "V")]
    Vision,
    #[serde(rename = "P")]
    Projector,
    #[serde(rename = "L")]
    Language,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Vision, Group::Projector, Group::Language];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Vision => "V",
            Group::Projector => "P",
            Group::Language => "L",
        }
    }

    fn seed_salt(self) -> u64 {
        match self {
            Group::Vision => 0x5653_0001,
            Group::Projector => 0x5053_0002,
            Group::Language => 0x4c53_0003,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-group trainability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trainable {
    #[serde(rename = "V")]
    pub vision: bool,
    #[serde(rename = "P")]
    pub projector: bool,
    #[serde(rename = "L")]
    pub language: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        vision: true,
        projector: true,
        language: true,
    };
    pub const NONE: Trainable = Trainable {
        vision: false,
        projector: false,
        language: false,
    };

    pub fn get(&self, group: Group) -> bool {
        match group {
            Group::Vision => self.vision,
            Group::Projector => self.projector,
            Group::Language => self.language,
        }
    }

    pub fn any(&self) -> bool {
        self.vision || self.projector || self.language
    }
}

/// Visual-encoder output for one image, `[n_visual_tokens × vision_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub tokens: DiffArray,
}

/// Encoder inputs for a batch: flattened patches of every image and each prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInputs {
    /// `[B·n_v × patch_dim]`, row-major.
    pub patches: Vec<f64>,
    pub texts: Vec<Vec<usize>>,
}

impl BatchInputs {
    pub fn new(cfg: &ModelConfig, images: &[&Image], texts: Vec<Vec<usize>>) -> Result<Self> {
        if images.len() != texts.len() {
            return Err(Error::Dimension(format!(
                "{} images for {} prompts",
                images.len(),
                texts.len()
            )));
        }
        let mut patches = Vec::with_capacity(images.len() * cfg.n_visual_tokens * cfg.patch_dim());
        for img in images {
            patches.extend(patchify(img, cfg)?);
        }
        Ok(Self { patches, texts })
    }

    pub fn batch_size(&self) -> usize {
        self.texts.len()
    }

    fn patches_var(&self, tape: &mut Tape, cfg: &ModelConfig) -> Result<Var> {
        let rows = self.batch_size() * cfg.n_visual_tokens;
        if rows == 0 || self.patches.len() != rows * cfg.patch_dim() {
            return Err(Error::Dimension(format!(
                "{} patch values for {} images of patch_dim {}",
                self.patches.len(),
                self.batch_size(),
                cfg.patch_dim()
            )));
        }
        tape.constant(vec![rows, cfg.patch_dim()], self.patches.clone())
    }
}

/// Tape handles for every parameter of a [`ToyVLM`].
#[derive(Debug, Clone)]
pub struct BoundVlm {
    pub vision: VisionVars,
    pub projector: ProjectorVars,
    pub language: LanguageVars,
    pub tracked: Trainable,
}

/// A modular vision-language model `M = (V, P, L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVLM {
    pub config: ModelConfig,
    pub vision: VisionEncoder,
    pub projector: Projector,
    pub language: LanguageModel,
    pub trainable: Trainable,
}

impl ToyVLM {
    /// Scaled-uniform initialization; each group draws from its own seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = |g: Group| ChaCha8Rng::seed_from_u64(seed ^ g.seed_salt().wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok(Self {
            vision: VisionEncoder::init(&config, &mut rng(Group::Vision)),
            projector: Projector::init(&config, &mut rng(Group::Projector)),
            language: LanguageModel::init(&config, &mut rng(Group::Language)),
            config,
            trainable: Trainable::ALL,
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for (_, p) in m.params_mut() {
            p.value.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    pub fn group_params(&self, group: Group) -> Vec<&Param> {
        match group {
            Group::Vision => self.vision.params(),
            Group::Projector => self.projector.params(),
            Group::Language => self.language.params(),
        }
    }

    pub fn group_params_mut(&mut self, group: Group) -> Vec<&mut Param> {
        match group {
            Group::Vision => self.vision.params_mut(),
            Group::Projector => self.projector.params_mut(),
            Group::Language => self.language.params_mut(),
        }
    }

    /// Every parameter exactly once, in canonical group order.
    pub fn params(&self) -> Vec<(Group, &Param)> {
        Group::ALL
            .into_iter()
            .flat_map(|g| self.group_params(g).into_iter().map(move |p| (g, p)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(Group, &mut Param)> {
        let mut out = Vec::new();
        out.extend(self.vision.params_mut().into_iter().map(|p| (Group::Vision, p)));
        out.extend(self.projector.params_mut().into_iter().map(|p| (Group::Projector, p)));
        out.extend(self.language.params_mut().into_iter().map(|p| (Group::Language, p)));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// All parameter values concatenated in canonical order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params().iter().flat_map(|(_, p)| p.values().iter().copied()).collect()
    }

    /// Overwrites all parameter values from a vector laid out like [`Self::flat_values`].
    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for (_, p) in self.params_mut() {
            let n = p.value.numel();
            p.value.values_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Accumulated gradients in canonical order; parameters without a gradient give zeros.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|(_, p)| match p.value.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.value.numel()],
            })
            .collect()
    }

    /// Half-open range of `group` inside the canonical flat layout.
    pub fn group_range(&self, group: Group) -> std::ops::Range<usize> {
        let mut start = 0;
        for g in Group::ALL {
            let len: usize = self.group_params(g).iter().map(|p| p.value.numel()).sum();
            if g == group {
                return start..start + len;
            }
            start += len;
        }
        unreachable!("every group is in Group::ALL")
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.value.clear_grad();
        }
    }

    /// Squared L2 norm of the accumulated gradients of one group.
    pub fn grad_norm_sq(&self, group: Group) -> f64 {
        self.group_params(group)
            .iter()
            .filter_map(|p| p.value.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum()
    }

    /// Records all parameters; groups flagged in `track` become differentiable.
    pub fn bind(&self, tape: &mut Tape, track: Trainable) -> BoundVlm {
        BoundVlm {
            vision: self.vision.bind(tape, track.vision),
            projector: self.projector.bind(tape, track.projector),
            language: self.language.bind(tape, track.language),
            tracked: track,
        }
    }

    /// Adds tape gradients of the tracked groups into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundVlm) -> Result<()> {
        let lists = [
            (Group::Vision, bound.vision.list()),
            (Group::Projector, bound.projector.list()),
            (Group::Language, bound.language.list()),
        ];
        for (group, vars) in lists {
            if !bound.tracked.get(group) {
                continue;
            }
            for (p, v) in self.group_params_mut(group).into_iter().zip(vars) {
                if let Some(g) = tape.grad(v) {
                    p.value.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    /// Batched `L(P(V(x_v)), x_t)` on the tape: logits `[Σ T_b × N]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, bound: &BoundVlm, batch: &BatchInputs) -> Result<Var> {
        let patches = batch.patches_var(tape, &self.config)?;
        let h = bound.vision.forward(tape, &self.config, patches)?;
        let v = bound.projector.forward(tape, h)?;
        bound.language.forward(tape, &self.config, v, &batch.texts)
    }

    fn single_tape(&self) -> (Tape, BoundVlm) {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::NONE);
        (tape, bound)
    }

    /// `V(x_v)`.
    pub fn encode_image(&self, image: &Image) -> Result<VisualFeatures> {
        let (mut tape, bound) = self.single_tape();
        let patches = tape.constant(
            vec![self.config.n_visual_tokens, self.config.patch_dim()],
            patchify(image, &self.config)?,
        )?;
        let h = bound.vision.forward(&mut tape, &self.config, patches)?;
        Ok(VisualFeatures {
            tokens: tape.array(h).clone(),
        })
    }

    /// `P(h_v)`: `[n_visual_tokens × lm_dim]`.
    pub fn project(&self, features: &VisualFeatures) -> Result<DiffArray> {
        let expected = [self.config.n_visual_tokens, self.config.vision_dim];
        if features.tokens.shape() != expected {
            return Err(Error::Dimension(format!(
                "features {:?}, projector expects {expected:?}",
                features.tokens.shape()
            )));
        }
        let (mut tape, bound) = self.single_tape();
        let h = tape.leaf(&features.tokens.clone().with_requires_grad(false));
        let out = bound.projector.forward(&mut tape, h)?;
        Ok(tape.array(out).clone())
    }

    /// `L(visual_tokens, x_t)`: logits `[T × N]` for the text positions.
    pub fn lm_forward(&self, visual_tokens: &DiffArray, text: &[usize]) -> Result<DiffArray> {
        let (mut tape, bound) = self.single_tape();
        let v = tape.leaf(&visual_tokens.clone().with_requires_grad(false));
        let out = bound
            .language
            .forward(&mut tape, &self.config, v, &[text.to_vec()])?;
        Ok(tape.array(out).clone())
    }

    /// `M(x_v, x_t) = L(P(V(x_v)), x_t)`.
    pub fn forward(&self, image: &Image, text: &[usize]) -> Result<DiffArray> {
        let (mut tape, bound) = self.single_tape();
        let batch = BatchInputs::new(&self.config, &[image], vec![text.to_vec()])?;
        let out = self.forward_on_tape(&mut tape, &bound, &batch)?;
        Ok(tape.array(out).clone())
    }
}

/// Batched visual-switch route `L^T(P^T(V^S(x_v)), x_t)` on the tape.
///
/// Only the student's vision handles are used, so gradients can reach `V^S` and
/// nothing else of the student.
pub fn switch_forward_on_tape(
    tape: &mut Tape,
    student: &ToyVLM,
    student_vision: &VisionVars,
    teacher: &ToyVLM,
    teacher_bound: &BoundVlm,
    batch: &BatchInputs,
) -> Result<Var> {
    check_switch_compatible(&teacher.config, &student.config)?;
    let patches = batch.patches_var(tape, &student.config)?;
    let h = student_vision.forward(tape, &student.config, patches)?;
    let v = teacher_bound.projector.forward(tape, h)?;
    teacher_bound
        .language
        .forward(tape, &teacher.config, v, &batch.texts)
}

/// `z^Switch = L^T(P^T(V^S(x_v)), x_t)` for one sample.
pub fn switch_forward(student: &ToyVLM, teacher: &ToyVLM, image: &Image, text: &[usize]) -> Result<DiffArray> {
    check_switch_compatible(&teacher.config, &student.config)?;
    let mut tape = Tape::new();
    let sv = student.vision.bind(&mut tape, false);
    let tb = teacher.bind(&mut tape, Trainable::NONE);
    let batch = BatchInputs::new(&student.config, &[image], vec![text.to_vec()])?;
    let out = switch_forward_on_tape(&mut tape, student, &sv, teacher, &tb, &batch)?;
    Ok(tape.array(out).clone())
}
