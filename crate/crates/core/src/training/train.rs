use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::backprop::batch_loss_and_grad;
use super::episodes::{sample_episode, Episode, EpisodeMix};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights, Vocab};
use crate::seed;
use crate::tasks::IclTask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub adam_betas: (f32, f32),
    pub seed: u64,
    pub episode_mix: EpisodeMix,
    /// Exemplar counts are drawn uniformly from `k_min..=k_max` per batch.
    pub k_min: usize,
    pub k_max: usize,
    /// Linear warmup length; the rate is constant afterwards.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f32>,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.episode_mix.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.k_min > self.k_max {
            return Err(Error::Config("k_min exceeds k_max".into()));
        }
        if 4 * self.k_max + 3 > self.model.context_len {
            return Err(Error::Config(format!(
                "k_max = {} needs {} positions, context_len is {}",
                self.k_max,
                4 * self.k_max + 3,
                self.model.context_len
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f32 / self.warmup_steps as f32
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Mean batch loss before each update.
    pub losses: Vec<f32>,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    b1: f32,
    b2: f32,
    t: i32,
}

impl Adam {
    const EPS: f32 = 1e-8;

    fn new(weights: &ModelWeights, (b1, b2): (f32, f32)) -> Self {
        let zeros = || weights.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            b1,
            b2,
            t: 0,
        }
    }

    fn step(&mut self, weights: &mut ModelWeights, grads: &ModelWeights, lr: f32, grad_scale: f32) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for (i, (w, g)) in weights.tensors.iter_mut().zip(&grads.tensors).enumerate() {
            for ((p, &gr), (m, v)) in w.data.iter_mut().zip(&g.data).zip(self.m[i].iter_mut().zip(self.v[i].iter_mut())) {
                let gr = gr * grad_scale;
                *m = self.b1 * *m + (1.0 - self.b1) * gr;
                *v = self.b2 * *v + (1.0 - self.b2) * gr * gr;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Train from scratch on episodes sampled from `tasks` according to `spec`.
pub fn train(spec: &TrainSpec, tasks: &[IclTask], vocab: &Vocab) -> Result<TrainOutcome> {
    spec.validate()?;
    if vocab.len() != spec.model.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            spec.model.vocab_size
        )));
    }
    train_with(spec, |step| {
        let k = seed::stream(spec.seed, &format!("k/{step}")).random_range(spec.k_min..=spec.k_max);
        (0..spec.batch_size)
            .map(|b| {
                let s = seed::derive(spec.seed, &format!("episode/{step}/{b}"));
                sample_episode(tasks, &spec.episode_mix, k, vocab, s)
            })
            .collect()
    })
}

/// Train on batches produced by `batch(step)`. Only `spec.model`, the optimizer
/// settings and `spec.steps` are used.
pub fn train_with<F>(spec: &TrainSpec, mut batch: F) -> Result<TrainOutcome>
where
    F: FnMut(usize) -> Result<Vec<Episode>>,
{
    if spec.steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    let mut weights = ModelWeights::init(&spec.model, spec.seed)?;
    let mut grads = weights.zeros_like();
    let mut adam = Adam::new(&weights, spec.adam_betas);
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let episodes = batch(step)?;
        for g in &mut grads.tensors {
            g.data.fill(0.0);
        }
        let loss = batch_loss_and_grad(&spec.model, &weights, &episodes, &mut grads)?;
        let lr = spec.lr_at(step);
        let gnorm = grads
            .tensors
            .iter()
            .flat_map(|t| &t.data)
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt() as f32;
        if !loss.is_finite() || !gnorm.is_finite() {
            return Err(Error::Diverged { step, lr, loss });
        }
        let scale = match spec.grad_clip {
            Some(clip) if gnorm > clip => clip / gnorm,
            _ => 1.0,
        };
        adam.step(&mut weights, &grads, lr, scale);
        losses.push(loss);
        if step % 500 == 0 || step + 1 == spec.steps {
            log::info!("step {step}: loss {loss:.4}");
        }
    }
    Ok(TrainOutcome { weights, losses })
}

/// Loss curve as `step,loss` CSV text.
pub fn loss_csv(losses: &[f32]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}
