//! Seeded synthetic image-question-answer tasks.
//!
//! Every image is an RGB canvas split into four quadrants; each quadrant holds at
//! most one figure (a solid rectangle, a hollow square frame or a one-pixel bar).
//! Answers are a single token and depend on the image, so a model that ignores
//! its visual tokens cannot beat chance.

mod io;
pub mod vocab;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Image, ImageSize};
use vocab::*;

pub use io::{load_samples, persist_samples, SAMPLES_SCHEMA, SAMPLES_VERSION};

/// Question family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Shape of the figure in a queried quadrant.
    #[default]
    ShapeAtPosition,
    /// Number of rectangles of a queried color.
    ColorCount,
    /// Color covering the most pixels.
    MajorityColor,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::ShapeAtPosition, Task::ColorCount, Task::MajorityColor];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::ShapeAtPosition => "shape-at-position",
            Task::ColorCount => "color-count",
            Task::MajorityColor => "majority-color",
        }
    }

    /// Every answer token the task can produce.
    pub fn label_set(self) -> Vec<usize> {
        match self {
            Task::ShapeAtPosition => (0..N_SHAPES).map(shape_token).collect(),
            Task::MajorityColor => (0..N_COLORS).map(color_token).collect(),
            Task::ColorCount => (0..=MAX_COUNT).map(count_token).collect(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`, expected one of shape-at-position, color-count, majority-color")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Unique within a generated dataset; train and val ids never overlap.
    pub id: u64,
    pub image: Image,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Sample {
    /// Model input for teacher forcing: the prompt followed by all but the last
    /// answer token.
    pub fn input_tokens(&self) -> Vec<usize> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.answer[..self.answer.len().saturating_sub(1)]);
        t
    }

    /// Positions of [`Self::input_tokens`] whose next-token logits predict the answer.
    pub fn answer_mask(&self) -> Vec<bool> {
        let n = self.prompt.len() + self.answer.len() - 1;
        (0..n).map(|i| i + 1 >= self.prompt.len()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
    #[serde(default)]
    pub task: Task,
    /// Fraction of training answers replaced by a different label.
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default)]
    pub image_size: ImageSize,
}

impl DatasetSpec {
    pub fn new(n_train: usize, n_val: usize, seed: u64, task: Task) -> Self {
        Self {
            n_train,
            n_val,
            seed,
            task,
            noise_level: 0.0,
            image_size: ImageSize::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("n_train and n_val must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return Err(Error::Config(format!("noise_level must lie in [0, 1), got {}", self.noise_level)));
        }
        let ImageSize { height, width, channels } = self.image_size;
        if channels != 3 {
            return Err(Error::Generation(format!("images need 3 channels, got {channels}")));
        }
        if height % 2 != 0 || width % 2 != 0 || height < 6 || width < 6 {
            return Err(Error::Generation(format!(
                "a {height}x{width} canvas cannot hold four quadrants of at least 3x3"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Debug, Clone, Copy)]
struct Figure {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
    color: usize,
    /// Border pixels only.
    hollow: bool,
}

impl Figure {
    fn area(&self) -> usize {
        if self.hollow {
            2 * (self.height + self.width) - 4
        } else {
            self.height * self.width
        }
    }
}

const FILLED_SQUARE: usize = 0;
const FRAME: usize = 1;
const HORIZONTAL_BAR: usize = 2;
const VERTICAL_BAR: usize = 3;

struct Canvas {
    size: ImageSize,
    qh: usize,
    qw: usize,
}

impl Canvas {
    fn new(size: ImageSize) -> Self {
        Self {
            size,
            qh: size.height / 2,
            qw: size.width / 2,
        }
    }

    fn place<R: Rng>(&self, quadrant: usize, height: usize, width: usize, color: usize, hollow: bool, rng: &mut R) -> Figure {
        Figure {
            top: (quadrant / 2) * self.qh + rng.gen_range(0..=self.qh - height),
            left: (quadrant % 2) * self.qw + rng.gen_range(0..=self.qw - width),
            height,
            width,
            color,
            hollow,
        }
    }

    fn rect_in<R: Rng>(&self, quadrant: usize, color: usize, min_side: usize, rng: &mut R) -> Figure {
        let height = rng.gen_range(min_side..=self.qh);
        let width = rng.gen_range(min_side..=self.qw);
        self.place(quadrant, height, width, color, false, rng)
    }

    fn shape_in<R: Rng>(&self, quadrant: usize, shape: usize, color: usize, rng: &mut R) -> Figure {
        let side = self.qh.min(self.qw);
        match shape {
            FILLED_SQUARE => {
                let s = rng.gen_range(2..=side);
                self.place(quadrant, s, s, color, false, rng)
            }
            FRAME => {
                let s = rng.gen_range(3..=side);
                self.place(quadrant, s, s, color, true, rng)
            }
            HORIZONTAL_BAR => {
                let len = rng.gen_range(2..=self.qw);
                self.place(quadrant, 1, len, color, false, rng)
            }
            VERTICAL_BAR => {
                let len = rng.gen_range(2..=self.qh);
                self.place(quadrant, len, 1, color, false, rng)
            }
            _ => unreachable!("shape ids are below N_SHAPES"),
        }
    }

    fn render(&self, figures: &[Figure]) -> Image {
        let mut img = Image::zeros(self.size);
        for f in figures {
            for y in f.top..f.top + f.height {
                for x in f.left..f.left + f.width {
                    let border = y == f.top || y + 1 == f.top + f.height || x == f.left || x + 1 == f.left + f.width;
                    if !f.hollow || border {
                        img.pixel_mut(y, x).copy_from_slice(&PALETTE[f.color]);
                    }
                }
            }
        }
        img
    }
}

fn draw_sample<R: Rng>(task: Task, canvas: &Canvas, rng: &mut R) -> (Vec<Figure>, Vec<usize>, usize) {
    let mut quadrants: Vec<usize> = (0..N_QUADRANTS).collect();
    quadrants.shuffle(rng);
    match task {
        Task::ShapeAtPosition => {
            let shape = rng.gen_range(0..N_SHAPES);
            let n = rng.gen_range(1..=N_QUADRANTS);
            let target = quadrants[0];
            let mut figures = vec![canvas.shape_in(target, shape, rng.gen_range(0..N_COLORS), rng)];
            for &q in &quadrants[1..n] {
                let other = rng.gen_range(0..N_SHAPES);
                figures.push(canvas.shape_in(q, other, rng.gen_range(0..N_COLORS), rng));
            }
            (figures, vec![BOS, Q_POSITION, quadrant_token(target)], shape_token(shape))
        }
        Task::ColorCount => {
            let color = rng.gen_range(0..N_COLORS);
            let count = rng.gen_range(0..=MAX_COUNT);
            let n = rng.gen_range(count.max(1)..=N_QUADRANTS);
            let mut figures = Vec::with_capacity(n);
            for (i, &q) in quadrants[..n].iter().enumerate() {
                let c = if i < count {
                    color
                } else {
                    (color + rng.gen_range(1..N_COLORS)) % N_COLORS
                };
                figures.push(canvas.rect_in(q, c, 2, rng));
            }
            (figures, vec![BOS, Q_COUNT, color_token(color)], count_token(count))
        }
        Task::MajorityColor => {
            let n = rng.gen_range(1..=N_QUADRANTS);
            let mut colors: Vec<usize> = (0..N_COLORS).collect();
            colors.shuffle(rng);
            loop {
                let figures: Vec<Figure> = (0..n).map(|i| canvas.rect_in(quadrants[i], colors[i], 1, rng)).collect();
                let best = figures.iter().map(Figure::area).max().expect("at least one figure");
                let winners: Vec<&Figure> = figures.iter().filter(|f| f.area() == best).collect();
                if let [winner] = winners[..] {
                    let answer = color_token(winner.color);
                    return (figures, vec![BOS, Q_MAJORITY], answer);
                }
            }
        }
    }
}

fn corrupt<R: Rng>(answer: usize, labels: &[usize], rng: &mut R) -> usize {
    let others: Vec<usize> = labels.iter().copied().filter(|&l| l != answer).collect();
    *others.choose(rng).expect("label sets have at least two entries")
}

/// Draws a dataset; identical specs yield identical datasets.
///
/// Train ids are `0..n_train`, val ids `n_train..n_train + n_val`. Label noise
/// uses its own random stream, so the images and clean answers do not depend on
/// `noise_level`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let canvas = Canvas::new(spec.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f_6973_6521);
    let labels = spec.task.label_set();
    let mut make = |id: u64, noisy: bool| {
        let (figures, prompt, answer) = draw_sample(spec.task, &canvas, &mut rng);
        let flip = noisy && noise_rng.gen::<f64>() < spec.noise_level;
        let answer = if flip { corrupt(answer, &labels, &mut noise_rng) } else { answer };
        Sample {
            id,
            image: canvas.render(&figures),
            prompt,
            answer: vec![answer],
        }
    };
    let train = (0..spec.n_train as u64).map(|id| make(id, true)).collect();
    let val = (spec.n_train as u64..(spec.n_train + spec.n_val) as u64)
        .map(|id| make(id, false))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
    })
}

/// Index batches covering `0..n` once; shuffled when a seed is given.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Contract("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Batches of sample references; see [`batch_indices`].
pub fn batch_iterate(samples: &[Sample], batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<&Sample>>> {
    Ok(batch_indices(samples.len(), batch_size, shuffle_seed)?
        .into_iter()
        .map(|b| b.into_iter().map(|i| &samples[i]).collect())
        .collect())
}
