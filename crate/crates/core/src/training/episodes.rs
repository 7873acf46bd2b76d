use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenSequence, Vocab, ARROW, NEWLINE};
use crate::seed;
use crate::tasks::IclTask;

/// One mixture component of the training distribution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeSource {
    FixedTask(String),
    RandomBijection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixEntry {
    pub source: EpisodeSource,
    pub weight: f64,
}

/// Nonnegative weights over episode sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMix {
    pub entries: Vec<MixEntry>,
}

impl EpisodeMix {
    pub fn new(entries: Vec<(EpisodeSource, f64)>) -> Result<Self> {
        let mix = EpisodeMix {
            entries: entries
                .into_iter()
                .map(|(source, weight)| MixEntry { source, weight })
                .collect(),
        };
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.iter().any(|e| !(e.weight >= 0.0 && e.weight.is_finite())) {
            return Err(Error::Config("episode mix weights must be finite and nonnegative".into()));
        }
        if self.entries.iter().map(|e| e.weight).sum::<f64>() <= 0.0 {
            return Err(Error::Config("episode mix weights must sum to a positive value".into()));
        }
        Ok(())
    }

    fn pick(&self, rng: &mut seed::Rng) -> &EpisodeSource {
        let total: f64 = self.entries.iter().map(|e| e.weight).sum();
        let mut u = rng.random::<f64>() * total;
        for e in &self.entries {
            if u < e.weight {
                return &e.source;
            }
            u -= e.weight;
        }
        &self.entries.iter().rev().find(|e| e.weight > 0.0).expect("validated").source
    }
}

/// A training sequence and the positions whose next token is supervised.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub tokens: TokenSequence,
    /// `(position, target id)`: the logits at `position` should predict `target`.
    pub targets: Vec<(usize, u32)>,
    pub source: EpisodeSource,
}

/// Sample an episode of `k` exemplar lines plus one query line, all answered.
///
/// Every arrow is a supervised position. Fixed-task episodes use `k + 1`
/// distinct pairs of the named task. Random-bijection episodes draw a fresh
/// injective map from the union of task inputs to the union of task outputs
/// over `⌈(k+1)/2⌉` inputs, then sample the `k + 1` lines from it with
/// replacement, so later lines can often be answered by copying an earlier one.
pub fn sample_episode(tasks: &[IclTask], mix: &EpisodeMix, k: usize, vocab: &Vocab, seed: u64) -> Result<Episode> {
    if tasks.is_empty() {
        return Err(Error::Sampling("no tasks to sample from".into()));
    }
    mix.validate()?;
    let mut rng = seed::stream(seed, "episode");
    let source = mix.pick(&mut rng).clone();
    let lines: Vec<(&str, &str)> = match &source {
        EpisodeSource::FixedTask(name) => {
            let task = tasks
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| Error::Sampling(format!("mix names unknown task `{name}`")))?;
            if k + 1 > task.len() {
                return Err(Error::Sampling(format!(
                    "K = {k} needs {} distinct pairs, `{name}` has {}",
                    k + 1,
                    task.len()
                )));
            }
            task.pairs
                .choose_multiple(&mut rng, k + 1)
                .map(|p| (p.x.as_str(), p.y.as_str()))
                .collect()
        }
        EpisodeSource::RandomBijection => {
            let (inputs, outputs) = pools(tasks);
            let n = (k + 2) / 2;
            if n > inputs.len() || n > outputs.len() {
                return Err(Error::Sampling(format!(
                    "a bijection over {n} words exceeds the pools ({} inputs, {} outputs)",
                    inputs.len(),
                    outputs.len()
                )));
            }
            let xs: Vec<&str> = inputs.choose_multiple(&mut rng, n).copied().collect();
            let mut ys: Vec<&str> = outputs.choose_multiple(&mut rng, n).copied().collect();
            ys.shuffle(&mut rng);
            (0..=k)
                .map(|_| {
                    let i = rng.random_range(0..n);
                    (xs[i], ys[i])
                })
                .collect()
        }
    };

    let arrow = vocab.require(ARROW)?;
    let newline = vocab.require(NEWLINE)?;
    let mut ids = Vec::with_capacity(4 * k + 3);
    let mut targets = Vec::with_capacity(k + 1);
    for (i, (x, y)) in lines.iter().enumerate() {
        if i > 0 {
            ids.push(newline);
        }
        ids.push(vocab.require(x)?);
        ids.push(arrow);
        let y = vocab.require(y)?;
        targets.push((ids.len() - 1, y));
        ids.push(y);
    }
    Ok(Episode {
        tokens: TokenSequence::new(ids),
        targets,
        source,
    })
}

/// Distinct inputs and outputs across all tasks, in first-seen order.
fn pools(tasks: &[IclTask]) -> (Vec<&str>, Vec<&str>) {
    let mut seen_x = HashSet::new();
    let mut seen_y = HashSet::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in tasks {
        for p in &t.pairs {
            if seen_x.insert(p.x.as_str()) {
                xs.push(p.x.as_str());
            }
            if seen_y.insert(p.y.as_str()) {
                ys.push(p.y.as_str());
            }
        }
    }
    (xs, ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{synthetic_tasks, vocab_for};

    fn setup() -> (Vec<IclTask>, Vocab) {
        let tasks = synthetic_tasks(&["a", "b"], 20, 0).unwrap();
        let vocab = vocab_for(&tasks);
        (tasks, vocab)
    }

    fn only(source: EpisodeSource) -> EpisodeMix {
        EpisodeMix::new(vec![(source, 1.0)]).unwrap()
    }

    #[test]
    fn zero_shot_episode_is_query_and_answer() {
        let (tasks, vocab) = setup();
        let ep = sample_episode(&tasks, &only(EpisodeSource::FixedTask("a".into())), 0, &vocab, 1).unwrap();
        let text = vocab.detokenize(&ep.tokens).unwrap();
        let words: Vec<&str> = text.split(' ').collect();
        assert_eq!(words.len(), 3);
        assert_eq!(words[1], ARROW);
        assert_eq!(tasks[0].answer(words[0]), Some(words[2]));
        assert_eq!(ep.targets, vec![(1, ep.tokens.ids[2])]);
    }

    #[test]
    fn every_arrow_is_supervised_with_the_following_token() {
        let (tasks, vocab) = setup();
        let mix = EpisodeMix::new(vec![
            (EpisodeSource::FixedTask("a".into()), 1.0),
            (EpisodeSource::RandomBijection, 1.0),
        ])
        .unwrap();
        let arrow = vocab.id(ARROW).unwrap();
        for s in 0..50 {
            let ep = sample_episode(&tasks, &mix, 5, &vocab, s).unwrap();
            assert_eq!(ep.tokens.len(), 4 * 5 + 3);
            assert_eq!(ep.targets.len(), 6);
            for &(p, y) in &ep.targets {
                assert_eq!(ep.tokens.ids[p], arrow);
                assert_eq!(ep.tokens.ids[p + 1], y);
            }
        }
    }

    #[test]
    fn same_seed_same_episode() {
        let (tasks, vocab) = setup();
        let mix = only(EpisodeSource::RandomBijection);
        let a = sample_episode(&tasks, &mix, 4, &vocab, 9).unwrap();
        let b = sample_episode(&tasks, &mix, 4, &vocab, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bijection_episodes_are_consistent_maps() {
        let (tasks, vocab) = setup();
        for s in 0..100 {
            let ep = sample_episode(&tasks, &only(EpisodeSource::RandomBijection), 7, &vocab, s).unwrap();
            let ids = &ep.tokens.ids;
            let mut map = std::collections::HashMap::new();
            let mut inverse = std::collections::HashMap::new();
            for &(p, y) in &ep.targets {
                assert_eq!(*map.entry(ids[p - 1]).or_insert(y), y);
                assert_eq!(*inverse.entry(y).or_insert(ids[p - 1]), ids[p - 1]);
            }
        }
    }

    #[test]
    fn oversized_k_is_a_sampling_error() {
        let (tasks, vocab) = setup();
        let err = sample_episode(&tasks, &only(EpisodeSource::FixedTask("a".into())), 20, &vocab, 0);
        assert!(matches!(err, Err(Error::Sampling(_))));
        assert!(sample_episode(&tasks, &only(EpisodeSource::FixedTask("a".into())), 19, &vocab, 0).is_ok());
    }

    #[test]
    fn mix_frequencies_follow_weights() {
        let (tasks, vocab) = setup();
        let mix = EpisodeMix::new(vec![
            (EpisodeSource::FixedTask("a".into()), 1.0),
            (EpisodeSource::FixedTask("b".into()), 1.0),
        ])
        .unwrap();
        let n = 10_000;
        let hits = (0..n)
            .filter(|&s| {
                sample_episode(&tasks, &mix, 2, &vocab, s as u64).unwrap().source
                    == EpisodeSource::FixedTask("a".into())
            })
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn invalid_mixes_are_rejected() {
        assert!(EpisodeMix::new(vec![(EpisodeSource::RandomBijection, -1.0)]).is_err());
        assert!(EpisodeMix::new(vec![(EpisodeSource::RandomBijection, 0.0)]).is_err());
        assert!(EpisodeMix::new(vec![]).is_err());
    }
}
