//! Synthetic "languages": related Gaussian-mixture classification tasks.
//!
//! All languages share one arrangement of class clusters. Each language
//! rotates that arrangement by a few random plane rotations and jitters
//! every cluster centre, so the tasks have common structure plus
//! language-specific structure. Training set sizes follow configurable
//! ratios; evaluation sets are the same size for every language.

use std::fmt;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageId(pub u32);

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Training-set hour ratios of the four-language multilingual corpus this
/// suite imitates (largest first).
pub const DEFAULT_RATIOS: [f64; 4] = [44.7, 1.1, 0.2, 1.6];

/// Parameters of a synthetic task suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSuiteSpec {
    /// Relative training-set sizes, one per language.
    pub ratios: Vec<f64>,
    /// Training examples of the language with the largest ratio.
    pub base_size: usize,
    /// Evaluation examples per language.
    pub eval_size: usize,
    /// Smallest allowed training set (normally one batch).
    pub min_train: usize,
    pub input_dim: usize,
    /// Leading input dimensions the shared class centres occupy; the
    /// per-language rotations then carry that signal into other
    /// dimensions. 0 means all of them.
    pub signal_dims: usize,
    pub num_classes: usize,
    pub clusters_per_class: usize,
    /// Scale of the shared cluster centres.
    pub center_scale: f64,
    /// Within-cluster standard deviation.
    pub noise: f64,
    /// Standard deviation of the per-language centre jitter.
    pub language_shift: f64,
    /// Largest per-language plane rotation angle, in radians.
    pub max_rotation: f64,
    pub seed: u64,
}

impl Default for TaskSuiteSpec {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS.to_vec(),
            base_size: 4000,
            eval_size: 1000,
            min_train: 32,
            input_dim: 16,
            signal_dims: 0,
            num_classes: 8,
            clusters_per_class: 2,
            center_scale: 1.0,
            noise: 0.6,
            language_shift: 0.5,
            max_rotation: 0.6,
            seed: 0,
        }
    }
}

impl TaskSuiteSpec {
    pub fn num_languages(&self) -> usize {
        self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(Error::config("tasks.ratios", "need at least one language"));
        }
        if self.ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::config("tasks.ratios", "ratios must be positive"));
        }
        let positive = [
            ("tasks.base_size", self.base_size),
            ("tasks.eval_size", self.eval_size),
            ("tasks.input_dim", self.input_dim),
            ("tasks.num_classes", self.num_classes),
            ("tasks.clusters_per_class", self.clusters_per_class),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.signal_dims > self.input_dim {
            return Err(Error::config("tasks.signal_dims", "cannot exceed input_dim"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("tasks.num_classes", "need at least two classes"));
        }
        for (field, v) in [
            ("tasks.center_scale", self.center_scale),
            ("tasks.noise", self.noise),
            ("tasks.language_shift", self.language_shift),
            ("tasks.max_rotation", self.max_rotation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be a non-negative number"));
            }
        }
        Ok(())
    }
}

/// One synthetic language with its train and eval splits.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageTask {
    pub id: LanguageId,
    pub generator_seed: u64,
    pub num_classes: usize,
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub eval_x: Matrix,
    pub eval_y: Vec<usize>,
}

impl LanguageTask {
    pub fn input_dim(&self) -> usize {
        self.train_x.cols()
    }

    pub fn num_train(&self) -> usize {
        self.train_y.len()
    }

    pub fn num_eval(&self) -> usize {
        self.eval_y.len()
    }
}

/// `max(min, round(base * r / max_ratio))` for every ratio.
pub fn proportional_sizes(ratios: &[f64], base: usize, min: usize) -> Result<Vec<usize>> {
    if ratios.is_empty() || ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::InvalidArgument("ratios must be non-empty and positive".into()));
    }
    let largest = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(ratios
        .iter()
        .map(|r| ((base as f64 * r / largest).round() as usize).max(min))
        .collect())
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates one task per ratio. Pure in `spec`.
pub fn make_tasks(spec: &TaskSuiteSpec) -> Result<Vec<LanguageTask>> {
    spec.validate()?;
    let d = spec.input_dim;
    let sizes = proportional_sizes(&spec.ratios, spec.base_size, spec.min_train.max(1))?;

    let mut base_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0));
    let n_centers = spec.num_classes * spec.clusters_per_class;
    let signal = if spec.signal_dims == 0 { d } else { spec.signal_dims };
    let base: Vec<Vec<f64>> = (0..n_centers)
        .map(|_| {
            (0..d)
                .map(|k| {
                    let v = normal(&mut base_rng) * spec.center_scale;
                    if k < signal {
                        v
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let mut tasks = Vec::with_capacity(sizes.len());
    for (l, &n_train) in sizes.iter().enumerate() {
        let generator_seed = mix_seed(spec.seed, l as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(generator_seed);

        let mut centers = base.clone();
        if d >= 2 {
            for _ in 0..d / 2 {
                let i = rng.random_range(0..d);
                let mut j = rng.random_range(0..d - 1);
                if j >= i {
                    j += 1;
                }
                let angle = rng.random_range(-1.0..=1.0) * spec.max_rotation;
                let (s, c) = angle.sin_cos();
                for v in &mut centers {
                    let (a, b) = (v[i], v[j]);
                    v[i] = c * a - s * b;
                    v[j] = s * a + c * b;
                }
            }
        }
        for v in &mut centers {
            for x in v.iter_mut() {
                *x += normal(&mut rng) * spec.language_shift;
            }
        }

        let sample = |n: usize, rng: &mut ChaCha8Rng| -> Result<(Matrix, Vec<usize>)> {
            let mut xs = Vec::with_capacity(n * d);
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                let class = rng.random_range(0..spec.num_classes);
                let cluster = rng.random_range(0..spec.clusters_per_class);
                let center = &centers[class * spec.clusters_per_class + cluster];
                xs.extend(center.iter().map(|m| m + normal(rng) * spec.noise));
                ys.push(class);
            }
            Ok((Matrix::from_vec(n, d, xs)?, ys))
        };
        let mut train_rng = ChaCha8Rng::seed_from_u64(mix_seed(generator_seed, 1));
        let mut eval_rng = ChaCha8Rng::seed_from_u64(mix_seed(generator_seed, 2));
        let (train_x, train_y) = sample(n_train, &mut train_rng)?;
        let (eval_x, eval_y) = sample(spec.eval_size, &mut eval_rng)?;
        tasks.push(LanguageTask {
            id: LanguageId(l as u32),
            generator_seed,
            num_classes: spec.num_classes,
            train_x,
            train_y,
            eval_x,
            eval_y,
        });
    }
    Ok(tasks)
}

/// How the language of each monolingual mini-batch is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingScheme {
    /// Every language with probability 1/K.
    #[default]
    Uniform,
    /// Language `l` with probability `weights[l] / Σ weights`.
    Proportional { weights: Vec<f64> },
}

impl SamplingScheme {
    pub fn validate(&self, num_languages: usize) -> Result<()> {
        if let SamplingScheme::Proportional { weights } = self {
            if weights.len() != num_languages {
                return Err(Error::config(
                    "sampling.weights",
                    format!("{} weights for {num_languages} languages", weights.len()),
                ));
            }
            if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return Err(Error::config("sampling.weights", "weights must be positive"));
            }
        }
        Ok(())
    }

    fn pick<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> usize {
        match self {
            SamplingScheme::Uniform => rng.random_range(0..k),
            SamplingScheme::Proportional { weights } => {
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        return i;
                    }
                    u -= w;
                }
                k - 1
            }
        }
    }
}

/// A monolingual mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub language: LanguageId,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

/// Draws `batch_size` training examples (with replacement) from one task.
pub fn sample_batch<R: Rng + ?Sized>(task: &LanguageTask, batch_size: usize, rng: &mut R) -> Batch {
    let idx: Vec<usize> = (0..batch_size)
        .map(|_| rng.random_range(0..task.num_train()))
        .collect();
    Batch {
        language: task.id,
        inputs: task.train_x.select_rows(&idx),
        labels: idx.iter().map(|&i| task.train_y[i]).collect(),
    }
}

/// Picks a language under `scheme`, then a batch from that language only.
pub fn next_batch<R: Rng + ?Sized>(
    tasks: &[LanguageTask],
    scheme: &SamplingScheme,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks to sample from".into()));
    }
    scheme.validate(tasks.len())?;
    let l = if tasks.len() == 1 { 0 } else { scheme.pick(tasks.len(), rng) };
    Ok(sample_batch(&tasks[l], batch_size, rng))
}

const TASK_MAGIC: &[u8; 5] = b"TASK1";

/// Writes a task in the flat dataset layout:
///
/// ```text
/// "TASK1"
/// u32 language id, u64 generator seed,
/// u32 input_dim, u32 num_classes, u32 num_train, u32 num_eval
/// train inputs (f64 LE, row-major), train labels (u32 LE),
/// eval inputs (f64 LE, row-major), eval labels (u32 LE)
/// ```
pub fn write_task<W: Write>(task: &LanguageTask, mut w: W) -> Result<()> {
    w.write_all(TASK_MAGIC)?;
    w.write_all(&task.id.0.to_le_bytes())?;
    w.write_all(&task.generator_seed.to_le_bytes())?;
    for v in [task.input_dim(), task.num_classes, task.num_train(), task.num_eval()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for (x, y) in [(&task.train_x, &task.train_y), (&task.eval_x, &task.eval_y)] {
        for v in x.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &label in y {
            w.write_all(&(label as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_task<R: Read>(mut r: R) -> Result<LanguageTask> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != TASK_MAGIC {
        return Err(Error::Format("missing TASK1 magic".into()));
    }
    let mut u32_buf = [0u8; 4];
    let mut u64_buf = [0u8; 8];
    let mut read_u32 = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut u32_buf)?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let id = LanguageId(read_u32(&mut r)?);
    r.read_exact(&mut u64_buf)?;
    let generator_seed = u64::from_le_bytes(u64_buf);
    let dim = read_u32(&mut r)? as usize;
    let num_classes = read_u32(&mut r)? as usize;
    let num_train = read_u32(&mut r)? as usize;
    let num_eval = read_u32(&mut r)? as usize;
    let mut read_split = |n: usize, r: &mut R| -> Result<(Matrix, Vec<usize>)> {
        let mut xs = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            r.read_exact(&mut u64_buf)?;
            xs.push(f64::from_le_bytes(u64_buf));
        }
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u32_buf)?;
            let y = u32::from_le_bytes(u32_buf) as usize;
            if y >= num_classes {
                return Err(Error::Format(format!("label {y} >= {num_classes} classes")));
            }
            ys.push(y);
        }
        Ok((Matrix::from_vec(n, dim, xs)?, ys))
    };
    let (train_x, train_y) = read_split(num_train, &mut r)?;
    let (eval_x, eval_y) = read_split(num_eval, &mut r)?;
    Ok(LanguageTask {
        id,
        generator_seed,
        num_classes,
        train_x,
        train_y,
        eval_x,
        eval_y,
    })
}
