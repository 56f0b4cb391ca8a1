//! Synthetic datasets: Gaussian cluster classification and Markov-chain
//! next-token prediction.
//!
//! A task's "world" (cluster centres, shift direction, transition matrix) is
//! drawn from `world_seed`; the samples are drawn from the `seed` passed to
//! [`generate_dataset`]. Datasets generated from the same task with different
//! seeds therefore share a distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterTask {
    pub classes: usize,
    pub features: usize,
    /// Standard deviation of the cluster centres around the origin.
    pub center_scale: f64,
    /// Within-cluster standard deviation.
    pub spread: f64,
    pub world_seed: u64,
    /// Offset applied along a fixed unit direction of the world.
    pub shift: f64,
    /// Probability of replacing a label by a uniformly drawn other class.
    pub label_noise: f64,
    /// Labels are rotated by this many classes (`(k + r) mod C`).
    pub label_rotation: usize,
}

impl Default for ClusterTask {
    fn default() -> Self {
        Self {
            classes: 3,
            features: 4,
            center_scale: 1.5,
            spread: 1.0,
            world_seed: 0,
            shift: 0.0,
            label_noise: 0.0,
            label_rotation: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkovTask {
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Scale of the random transition logits; larger is more predictable.
    pub sharpness: f64,
    pub world_seed: u64,
}

impl Default for MarkovTask {
    fn default() -> Self {
        Self { vocab: 6, min_len: 2, max_len: 12, sharpness: 2.0, world_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    ClusterClassification(ClusterTask),
    MarkovNextToken(MarkovTask),
}

impl Task {
    pub fn cluster() -> Self {
        Task::ClusterClassification(ClusterTask::default())
    }

    pub fn markov() -> Self {
        Task::MarkovNextToken(MarkovTask::default())
    }

    /// Width of the model input.
    pub fn input_dim(&self) -> usize {
        match self {
            Task::ClusterClassification(c) => c.features,
            Task::MarkovNextToken(m) => m.vocab,
        }
    }

    /// Number of classes or vocabulary size.
    pub fn output_dim(&self) -> usize {
        match self {
            Task::ClusterClassification(c) => c.classes,
            Task::MarkovNextToken(m) => m.vocab,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Task::ClusterClassification(c) => {
                if c.classes < 2 || c.features == 0 {
                    return Err(Error::InvalidArgument("cluster task needs >= 2 classes and >= 1 feature".into()));
                }
                if !(0.0..=1.0).contains(&c.label_noise) || !(c.spread >= 0.0) {
                    return Err(Error::InvalidArgument("label_noise must lie in [0, 1] and spread >= 0".into()));
                }
            }
            Task::MarkovNextToken(m) => {
                if m.vocab < 2 || m.min_len < 2 || m.max_len < m.min_len {
                    return Err(Error::InvalidArgument(
                        "markov task needs vocab >= 2 and 2 <= min_len <= max_len".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sample {
    Point { features: Vec<f64>, label: usize },
    Sequence { tokens: Vec<usize> },
}

impl Sample {
    /// Sequence length for token tasks, 1 otherwise.
    pub fn token_count(&self) -> usize {
        match self {
            Sample::Point { .. } => 1,
            Sample::Sequence { tokens } => tokens.len(),
        }
    }

    /// Surface representation for similarity baselines: the raw features, or
    /// token frequencies over a vocabulary of size `vocab`.
    pub fn embedding(&self, vocab: usize) -> Vec<f64> {
        match self {
            Sample::Point { features, .. } => features.clone(),
            Sample::Sequence { tokens } => {
                let mut bag = vec![0.0; vocab];
                for &t in tokens {
                    bag[t] += 1.0 / tokens.len() as f64;
                }
                bag
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyExample {
    pub example_id: String,
    pub sample: Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub task: Task,
    pub examples: Vec<ToyExample>,
    pub vocab_or_classes: usize,
    pub seed: u64,
}

impl ToyDataset {
    pub fn new(task: Task, examples: Vec<ToyExample>, seed: u64) -> Result<Self> {
        let ds = Self { vocab_or_classes: task.output_dim(), task, examples, seed };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.example_id.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let mut seen = std::collections::HashSet::new();
        let in_dim = self.task.input_dim();
        let out_dim = self.task.output_dim();
        for ex in &self.examples {
            if !seen.insert(ex.example_id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate example_id `{}`", ex.example_id)));
            }
            let ok = match (&self.task, &ex.sample) {
                (Task::ClusterClassification(_), Sample::Point { features, label }) => {
                    features.len() == in_dim && *label < out_dim && features.iter().all(|x| x.is_finite())
                }
                (Task::MarkovNextToken(_), Sample::Sequence { tokens }) => {
                    tokens.len() >= 2 && tokens.iter().all(|&t| t < out_dim)
                }
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "example `{}` does not match the task shape",
                    ex.example_id
                )));
            }
        }
        Ok(())
    }

    /// Examples whose id is not `excluded`, in stored order.
    pub fn without(&self, excluded: &str) -> ToyDataset {
        self.filter(|e| e.example_id != excluded)
    }

    /// Examples whose id appears in `ids`, in stored order.
    pub fn subset(&self, ids: &[String]) -> ToyDataset {
        let keep: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        self.filter(|e| keep.contains(e.example_id.as_str()))
    }

    fn filter(&self, mut keep: impl FnMut(&ToyExample) -> bool) -> ToyDataset {
        ToyDataset {
            task: self.task.clone(),
            examples: self.examples.iter().filter(|e| keep(e)).cloned().collect(),
            vocab_or_classes: self.vocab_or_classes,
            seed: self.seed,
        }
    }

    /// Appends the examples of `other`. Tasks must agree in shape.
    pub fn concat(&self, other: &ToyDataset) -> Result<ToyDataset> {
        if self.task.input_dim() != other.task.input_dim() || self.task.output_dim() != other.task.output_dim() {
            return Err(Error::InvalidArgument("cannot concatenate datasets of different shapes".into()));
        }
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        ToyDataset::new(self.task.clone(), examples, self.seed)
    }
}

struct ClusterWorld {
    centers: Vec<Vec<f64>>,
    direction: Vec<f64>,
}

impl ClusterWorld {
    fn new(task: &ClusterTask) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(task.world_seed);
        let centers = (0..task.classes)
            .map(|_| (0..task.features).map(|_| task.center_scale * normal(&mut rng)).collect())
            .collect();
        let mut direction: Vec<f64> = (0..task.features).map(|_| normal(&mut rng)).collect();
        let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        direction.iter_mut().for_each(|x| *x /= norm);
        Self { centers, direction }
    }
}

/// Row-stochastic transition matrix of the Markov world.
pub fn markov_transitions(task: &MarkovTask) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(task.world_seed ^ 0x6d61_726b_6f76);
    (0..task.vocab)
        .map(|_| {
            let logits: Vec<f64> = (0..task.vocab).map(|_| task.sharpness * normal(&mut rng)).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Deterministic sample of `n` examples with ids `s{seed}-{index:05}`.
pub fn generate_dataset(task: &Task, n: usize, seed: u64) -> Result<ToyDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = |i: usize| format!("s{seed}-{i:05}");
    let examples = match task {
        Task::ClusterClassification(c) => {
            let world = ClusterWorld::new(c);
            (0..n)
                .map(|i| {
                    let k = rng.random_range(0..c.classes);
                    let features = world.centers[k]
                        .iter()
                        .zip(&world.direction)
                        .map(|(m, d)| m + c.spread * normal(&mut rng) + c.shift * d)
                        .collect();
                    let mut label = (k + c.label_rotation) % c.classes;
                    if rng.random::<f64>() < c.label_noise {
                        label = (label + rng.random_range(1..c.classes)) % c.classes;
                    }
                    ToyExample { example_id: id(i), sample: Sample::Point { features, label } }
                })
                .collect()
        }
        Task::MarkovNextToken(m) => {
            let trans = markov_transitions(m);
            (0..n)
                .map(|i| {
                    let len = rng.random_range(m.min_len..=m.max_len);
                    let mut tokens = Vec::with_capacity(len);
                    tokens.push(rng.random_range(0..m.vocab));
                    while tokens.len() < len {
                        let prev = *tokens.last().unwrap();
                        tokens.push(draw_categorical(&mut rng, &trans[prev]));
                    }
                    ToyExample { example_id: id(i), sample: Sample::Sequence { tokens } }
                })
                .collect()
        }
    };
    ToyDataset::new(task.clone(), examples, seed)
}
