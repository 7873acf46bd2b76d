//! Word-pair in-context learning tasks and the prompts built from them.
//!
//! Prompts use one template: every exemplar is a line `x → y`, and the query
//! line is `x̃ →`, so the answer is the single next token.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenSequence, Vocab, ARROW};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    Linguistic,
    Factual,
    TranslationTo,
    TranslationFrom,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub x: String,
    pub y: String,
}

impl Pair {
    pub fn new(x: impl Into<String>, y: impl Into<String>) -> Self {
        Pair { x: x.into(), y: y.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclTask {
    pub name: String,
    pub category: TaskCategory,
    pub pairs: Vec<Pair>,
}

impl IclTask {
    /// Validates that `pairs` is nonempty with distinct inputs and single-word entries.
    pub fn new(name: impl Into<String>, category: TaskCategory, pairs: Vec<Pair>) -> Result<Self> {
        let name = name.into();
        if pairs.is_empty() {
            return Err(Error::Task(format!("task `{name}` has no pairs")));
        }
        let mut seen = HashSet::new();
        for p in &pairs {
            for w in [&p.x, &p.y] {
                if w.is_empty() || w.chars().any(char::is_whitespace) {
                    return Err(Error::Task(format!("task `{name}`: `{w}` is not a single word")));
                }
            }
            if !seen.insert(p.x.as_str()) {
                return Err(Error::Task(format!("task `{name}`: duplicate input `{}`", p.x)));
            }
        }
        Ok(IclTask { name, category, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn answer(&self, x: &str) -> Option<&str> {
        self.pairs.iter().find(|p| p.x == x).map(|p| p.y.as_str())
    }

    /// Every distinct word used by the task, inputs first.
    pub fn words(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for w in self.pairs.iter().map(|p| &p.x).chain(self.pairs.iter().map(|p| &p.y)) {
            if seen.insert(w.as_str()) {
                out.push(w.as_str());
            }
        }
        out
    }

    /// Distinct outputs, in pair order.
    pub fn outputs(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.pairs
            .iter()
            .map(|p| p.y.as_str())
            .filter(|y| seen.insert(*y))
            .collect()
    }
}

/// A vocabulary covering every word of `tasks`.
pub fn vocab_for(tasks: &[IclTask]) -> Vocab {
    Vocab::new(tasks.iter().flat_map(|t| t.words()))
}

/// Load a task from a TSV (`x<TAB>y` per line) or JSON (`[{"input", "output"}]`) file.
///
/// The task is named after the file stem and categorized as synthetic; callers
/// may overwrite both.
pub fn load_task(path: &Path) -> Result<IclTask> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "task".into());
    parse_task(&name, &text)
}

pub fn parse_task(name: &str, text: &str) -> Result<IclTask> {
    if text.trim().is_empty() {
        return Err(Error::Task(format!("task `{name}` file is empty")));
    }
    let pairs = if text.trim_start().starts_with('[') {
        #[derive(Deserialize)]
        struct Row {
            input: String,
            output: String,
        }
        let rows: Vec<Row> = serde_json::from_str(text)
            .map_err(|e| Error::Task(format!("task `{name}`: malformed JSON: {e}")))?;
        rows.into_iter().map(|r| Pair::new(r.input, r.output)).collect()
    } else {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            match (fields.next(), fields.next(), fields.next()) {
                (Some(x), Some(y), None) => pairs.push(Pair::new(x.trim(), y.trim())),
                _ => {
                    return Err(Error::Task(format!(
                        "task `{name}`: malformed line {}: `{line}`",
                        i + 1
                    )))
                }
            }
        }
        pairs
    };
    IclTask::new(name, TaskCategory::Synthetic, pairs)
}

/// The inverse task `y → x`, e.g. turning "eng to fr" into "fr to eng".
pub fn swap_direction(task: &IclTask) -> Result<IclTask> {
    let mut seen = HashSet::new();
    for p in &task.pairs {
        if !seen.insert(p.y.as_str()) {
            return Err(Error::Task(format!(
                "cannot swap `{}`: output `{}` appears more than once",
                task.name, p.y
            )));
        }
    }
    let category = match task.category {
        TaskCategory::TranslationTo => TaskCategory::TranslationFrom,
        TaskCategory::TranslationFrom => TaskCategory::TranslationTo,
        c => c,
    };
    let name = match task.name.strip_suffix("_swapped") {
        Some(base) => base.to_string(),
        None => format!("{}_swapped", task.name),
    };
    IclTask::new(
        name,
        category,
        task.pairs.iter().map(|p| Pair::new(p.y.clone(), p.x.clone())).collect(),
    )
}

/// Seeded split into disjoint (train, test) tasks; `train_fraction` of the pairs
/// (rounded) go to train, and each side keeps at least one pair.
pub fn split_train_test(task: &IclTask, train_fraction: f64, seed: u64) -> Result<(IclTask, IclTask)> {
    if task.len() < 2 {
        return Err(Error::Task(format!("task `{}` is too small to split", task.name)));
    }
    let mut pairs = task.pairs.clone();
    pairs.shuffle(&mut seed::stream(seed, &format!("split/{}", task.name)));
    let n_train = ((task.len() as f64 * train_fraction).round() as usize).clamp(1, task.len() - 1);
    let test = pairs.split_off(n_train);
    Ok((
        IclTask::new(task.name.clone(), task.category, pairs)?,
        IclTask::new(task.name.clone(), task.category, test)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// `x → y` exemplar lines, `x̃ →` query line.
    #[default]
    Arrow,
}

impl Template {
    pub fn id(self) -> &'static str {
        match self {
            Template::Arrow => "arrow",
        }
    }
}

/// A concrete K-shot prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub task: String,
    pub exemplars: Vec<Pair>,
    pub query: String,
    pub template: Template,
}

impl PromptSpec {
    pub fn new(task: impl Into<String>, exemplars: Vec<Pair>, query: impl Into<String>, template: Template) -> Result<Self> {
        let query = query.into();
        if exemplars.iter().any(|p| p.x == query) {
            return Err(Error::Prompt(format!("query `{query}` is among the exemplars")));
        }
        Ok(PromptSpec {
            task: task.into(),
            exemplars,
            query,
            template,
        })
    }

    pub fn k(&self) -> usize {
        self.exemplars.len()
    }

    pub fn render(&self) -> String {
        match self.template {
            Template::Arrow => {
                let mut s = String::new();
                for p in &self.exemplars {
                    s.push_str(&format!("{} {ARROW} {}\n", p.x, p.y));
                }
                s.push_str(&format!("{} {ARROW}", self.query));
                s
            }
        }
    }

    pub fn tokenize(&self, vocab: &Vocab) -> Result<TokenSequence> {
        vocab.tokenize(&self.render())
    }
}

/// Sample `k` exemplars from `pool` (never the query's own pair) and build the prompt.
pub fn build_prompt(pool: &IclTask, k: usize, query: &str, template: Template, seed: u64) -> Result<PromptSpec> {
    let candidates: Vec<&Pair> = pool.pairs.iter().filter(|p| p.x != query).collect();
    if k > candidates.len() {
        return Err(Error::Prompt(format!(
            "asked for {k} exemplars but `{}` has only {} non-query pairs",
            pool.name,
            candidates.len()
        )));
    }
    let mut rng = seed::stream(seed, &format!("prompt/{}/{query}", pool.name));
    let exemplars: Vec<Pair> = candidates.choose_multiple(&mut rng, k).map(|p| (*p).clone()).collect();
    PromptSpec::new(pool.name.clone(), exemplars, query, template)
}

/// Permute exemplar labels with a derangement: no exemplar keeps its own label.
pub fn shuffle_labels(prompt: &PromptSpec, seed: u64) -> Result<PromptSpec> {
    let k = prompt.k();
    if k < 2 {
        return Err(Error::Prompt(format!("cannot derange {k} labels")));
    }
    let labels: Vec<&str> = prompt.exemplars.iter().map(|p| p.y.as_str()).collect();
    let mut rng = seed::stream(seed, "derangement");
    let mut order: Vec<usize> = (0..k).collect();
    for _ in 0..10_000 {
        order.shuffle(&mut rng);
        if order.iter().enumerate().all(|(i, &j)| labels[j] != labels[i]) {
            let exemplars = prompt
                .exemplars
                .iter()
                .zip(&order)
                .map(|(p, &j)| Pair::new(p.x.clone(), labels[j]))
                .collect();
            return PromptSpec::new(prompt.task.clone(), exemplars, prompt.query.clone(), prompt.template);
        }
    }
    Err(Error::Prompt("labels admit no derangement".into()))
}

/// Tasks that share one input vocabulary and map it onto disjoint output sets.
///
/// Input words are `in00, in01, …`; task `name` outputs `name_00, …` under a
/// seeded permutation, so no two tasks agree on any answer.
pub fn synthetic_tasks(names: &[&str], n_inputs: usize, seed: u64) -> Result<Vec<IclTask>> {
    let width = n_inputs.saturating_sub(1).to_string().len().max(2);
    let inputs: Vec<String> = (0..n_inputs).map(|i| format!("in{i:0width$}")).collect();
    names
        .iter()
        .map(|name| {
            let mut perm: Vec<usize> = (0..n_inputs).collect();
            perm.shuffle(&mut seed::stream(seed, &format!("synthetic/{name}")));
            let pairs = inputs
                .iter()
                .zip(&perm)
                .map(|(x, &j)| Pair::new(x.clone(), format!("{name}_{j:0width$}")))
                .collect();
            IclTask::new(*name, TaskCategory::Synthetic, pairs)
        })
        .collect()
}

/// Evaluation prompts for a task: `n` queries cycled from `test`, exemplars from `train`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPrompt {
    pub spec: PromptSpec,
    pub answer: String,
}

pub fn eval_prompts(train: &IclTask, test: &IclTask, k: usize, n: usize, seed: u64) -> Result<Vec<LabeledPrompt>> {
    (0..n)
        .map(|i| {
            let pair = &test.pairs[i % test.len()];
            let spec = build_prompt(train, k, &pair.x, Template::Arrow, seed::derive(seed, &format!("eval/{i}")))?;
            Ok(LabeledPrompt {
                spec,
                answer: pair.y.clone(),
            })
        })
        .collect()
}

/// A query drawn from `pool` that is not among `exclude`.
pub fn pick_query<'a>(pool: &'a IclTask, exclude: &[Pair], rng: &mut seed::Rng) -> Option<&'a Pair> {
    let free: Vec<&Pair> = pool
        .pairs
        .iter()
        .filter(|p| !exclude.iter().any(|e| e.x == p.x))
        .collect();
    if free.is_empty() {
        None
    } else {
        Some(free[rng.random_range(0..free.len())])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn antonyms(n: usize) -> IclTask {
        let pairs = (0..n).map(|i| Pair::new(format!("w{i}"), format!("a{i}"))).collect();
        IclTask::new("antonym", TaskCategory::Linguistic, pairs).unwrap()
    }

    #[test]
    fn tsv_loads_three_pairs() {
        let t = parse_task("t", "hot\tcold\nbig\tsmall\nup\tdown\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.answer("big"), Some("small"));
    }

    #[test]
    fn json_format_is_accepted() {
        let t = parse_task("t", r#"[{"input":"hot","output":"cold"}]"#).unwrap();
        assert_eq!(t.pairs, vec![Pair::new("hot", "cold")]);
    }

    #[test]
    fn duplicate_input_names_the_word() {
        let err = parse_task("t", "hot\tcold\nhot\twarm\n").unwrap_err();
        assert!(err.to_string().contains("hot"), "{err}");
    }

    #[test]
    fn empty_and_malformed_files_fail() {
        assert!(parse_task("t", "  \n").is_err());
        assert!(parse_task("t", "hot cold\n").is_err());
        assert!(parse_task("t", "a\tb\tc\n").is_err());
    }

    #[test]
    fn split_of_fifty_is_disjoint_forty_ten() {
        let (train, test) = split_train_test(&antonyms(50), 0.8, 0).unwrap();
        assert_eq!((train.len(), test.len()), (40, 10));
        let xs: HashSet<&str> = train.pairs.iter().map(|p| p.x.as_str()).collect();
        assert!(test.pairs.iter().all(|p| !xs.contains(p.x.as_str())));
    }

    #[test]
    fn swap_is_an_involution() {
        let t = IclTask::new("t", TaskCategory::TranslationTo, vec![Pair::new("hot", "cold")]).unwrap();
        let s = swap_direction(&t).unwrap();
        assert_eq!(s.pairs, vec![Pair::new("cold", "hot")]);
        assert_eq!(s.category, TaskCategory::TranslationFrom);
        assert_eq!(swap_direction(&s).unwrap(), t);
    }

    #[test]
    fn swap_rejects_duplicate_outputs() {
        let t = IclTask::new(
            "t",
            TaskCategory::Linguistic,
            vec![Pair::new("a", "z"), Pair::new("b", "z")],
        )
        .unwrap();
        assert!(swap_direction(&t).is_err());
    }

    #[test]
    fn one_shot_arrow_template() {
        let pool = IclTask::new("t", TaskCategory::Linguistic, vec![Pair::new("hot", "cold")]).unwrap();
        let p = build_prompt(&pool, 1, "big", Template::Arrow, 0).unwrap();
        assert_eq!(p.render(), "hot → cold\nbig →");
        let p0 = build_prompt(&pool, 0, "big", Template::Arrow, 0).unwrap();
        assert_eq!(p0.render(), "big →");
    }

    #[test]
    fn prompt_sampling_is_deterministic() {
        let pool = antonyms(40);
        let a = build_prompt(&pool, 5, "w3", Template::Arrow, 7).unwrap();
        let b = build_prompt(&pool, 5, "w3", Template::Arrow, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.exemplars.iter().all(|p| p.x != "w3"));
    }

    #[test]
    fn too_many_exemplars_fail() {
        let pool = antonyms(3);
        assert!(build_prompt(&pool, 3, "w0", Template::Arrow, 0).is_err());
        assert!(build_prompt(&pool, 2, "w0", Template::Arrow, 0).is_ok());
    }

    #[test]
    fn query_inside_exemplars_is_rejected() {
        assert!(PromptSpec::new("t", vec![Pair::new("a", "b")], "a", Template::Arrow).is_err());
    }

    #[test]
    fn two_labels_swap() {
        let p = PromptSpec::new("t", vec![Pair::new("a", "1"), Pair::new("b", "2")], "c", Template::Arrow).unwrap();
        let s = shuffle_labels(&p, 0).unwrap();
        assert_eq!(s.exemplars, vec![Pair::new("a", "2"), Pair::new("b", "1")]);
    }

    #[test]
    fn derangements_never_keep_a_label() {
        let pool = antonyms(20);
        let prompt = build_prompt(&pool, 5, "w0", Template::Arrow, 1).unwrap();
        let mut before: Vec<&str> = prompt.exemplars.iter().map(|p| p.y.as_str()).collect();
        before.sort();
        for s in 0..1000 {
            let d = shuffle_labels(&prompt, s).unwrap();
            for (orig, new) in prompt.exemplars.iter().zip(&d.exemplars) {
                assert_eq!(orig.x, new.x);
                assert_ne!(orig.y, new.y, "seed {s} left a fixed point");
            }
            let mut after: Vec<&str> = d.exemplars.iter().map(|p| p.y.as_str()).collect();
            after.sort();
            assert_eq!(before, after);
            assert_eq!(d.query, prompt.query);
        }
    }

    #[test]
    fn derangement_needs_two_exemplars() {
        let p = PromptSpec::new("t", vec![Pair::new("a", "1")], "c", Template::Arrow).unwrap();
        assert!(shuffle_labels(&p, 0).is_err());
    }

    #[test]
    fn synthetic_tasks_share_inputs_and_not_outputs() {
        let tasks = synthetic_tasks(&["a", "b"], 16, 0).unwrap();
        let xa: Vec<&str> = tasks[0].pairs.iter().map(|p| p.x.as_str()).collect();
        let xb: Vec<&str> = tasks[1].pairs.iter().map(|p| p.x.as_str()).collect();
        assert_eq!(xa, xb);
        let ya: HashSet<&str> = tasks[0].outputs().into_iter().collect();
        assert!(tasks[1].outputs().iter().all(|y| !ya.contains(y)));
    }

    #[test]
    fn answer_never_appears_in_rendered_prompt() {
        let tasks = synthetic_tasks(&["a"], 30, 3).unwrap();
        let (train, test) = split_train_test(&tasks[0], 0.75, 0).unwrap();
        for lp in eval_prompts(&train, &test, 5, 20, 9).unwrap() {
            let text = lp.spec.render();
            assert!(!text.split_whitespace().any(|w| w == lp.answer), "{text}");
        }
    }
}
