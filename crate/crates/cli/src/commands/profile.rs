use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde_json::json;
use steerlab::logitlens::{apathy_profile, layer_token_probs};
use steerlab::model::Vocab;
use steerlab::seed;
use steerlab::tasks::{build_prompt, IclTask, Template};

use super::{managed, RunOptions, RunStatus};
use crate::config::{ExperimentConfig, Method};
use crate::error::{CliError, Result};
use crate::io::{csv_bytes, load_model, load_tasks};
use crate::svg::{line_plot, Series};

pub const LOGITLENS_FILE: &str = "logitlens.csv";
pub const APATHY_FILE: &str = "apathy.csv";
pub const METADATA_FILE: &str = "metadata.json";

pub const LOGITLENS_HEADER: [&str; 8] = ["prompt", "task", "k", "layer", "lens_mode", "p_correct", "p_incorrect", "p_top"];
pub const APATHY_HEADER: [&str; 6] = ["prompt", "task", "k", "layer", "a_attn", "a_mlp"];

struct Probe {
    task: String,
    k: usize,
    ids: steerlab::model::TokenSequence,
    correct: u32,
    incorrect: u32,
}

/// Per-layer lens probabilities or sublayer apathy on ICL prompts, with a plot.
pub fn cmd_profile(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunStatus> {
    if !matches!(cfg.method, Method::Logitlens | Method::Apathy) {
        return Err(CliError::Config(format!("profile needs method logitlens or apathy, not {}", cfg.method.name())));
    }
    let dir = cfg
        .model
        .dir
        .as_ref()
        .ok_or_else(|| CliError::Config("profile requires model.dir".into()))?;
    let loaded = load_model(dir)?;
    let tasks = load_tasks(&cfg.tasks)?;
    let evaluated = cfg.evaluated(&tasks)?;
    let p = &cfg.profile;
    if p.n_prompts == 0 || p.k_shots.is_empty() {
        return Err(CliError::Config("profile needs n_prompts > 0 and at least one k".into()));
    }
    let mut probes = Vec::new();
    for task in &evaluated {
        for &k in &p.k_shots {
            probes.extend(probes_for(task, &tasks, &loaded.vocab, k, p.n_prompts, cfg.seeds[0])?);
        }
    }

    managed("profile", cfg, opts, |out| {
        let (file, csv) = match cfg.method {
            Method::Logitlens => {
                let mut rows = Vec::new();
                for (i, pr) in probes.iter().enumerate() {
                    for r in layer_token_probs(&loaded.model, &pr.ids, pr.correct, pr.incorrect, p.lens)? {
                        rows.push(vec![
                            i.to_string(),
                            pr.task.clone(),
                            pr.k.to_string(),
                            r.layer.to_string(),
                            p.lens.name().to_string(),
                            r.p_correct.to_string(),
                            r.p_incorrect.to_string(),
                            r.p_top.to_string(),
                        ]);
                    }
                }
                (LOGITLENS_FILE, csv_bytes(&LOGITLENS_HEADER, &rows)?)
            }
            _ => {
                let mut rows = Vec::new();
                for (i, pr) in probes.iter().enumerate() {
                    for r in apathy_profile(&loaded.model, &pr.ids, pr.ids.len() - 1)? {
                        rows.push(vec![
                            i.to_string(),
                            pr.task.clone(),
                            pr.k.to_string(),
                            r.layer.to_string(),
                            r.a_attn.to_string(),
                            r.a_mlp.to_string(),
                        ]);
                    }
                }
                (APATHY_FILE, csv_bytes(&APATHY_HEADER, &rows)?)
            }
        };
        out.write(file, &csv)?;
        let text = String::from_utf8(csv).expect("csv output is utf-8");
        let svg = plot_profile(cfg.method, &text)?;
        out.write(&file.replace(".csv", ".svg"), svg)?;
        out.write_json(
            METADATA_FILE,
            &json!({
                "model_id": loaded.id,
                "method": cfg.method.name(),
                "lens": p.lens.name(),
                "k_shots": p.k_shots,
                "n_prompts": p.n_prompts,
                "position": "last prompt token",
                "incorrect_token": "another task's answer to the same query, else another answer of the same task",
            }),
        )?;
        Ok(())
    })
}

fn probes_for(task: &IclTask, all: &[IclTask], vocab: &Vocab, k: usize, n: usize, seed_: u64) -> Result<Vec<Probe>> {
    let label = format!("profile/{}/{k}", task.name);
    let mut order: Vec<usize> = (0..task.len()).collect();
    order.shuffle(&mut seed::stream(seed_, &label));
    (0..n)
        .map(|i| {
            let pair = &task.pairs[order[i % order.len()]];
            let spec = build_prompt(task, k, &pair.x, Template::Arrow, seed::derive(seed_, &format!("{label}/{i}")))?;
            let other = all
                .iter()
                .filter(|t| t.name != task.name)
                .find_map(|t| t.answer(&pair.x))
                .or_else(|| task.pairs.iter().map(|q| q.y.as_str()).find(|y| *y != pair.y))
                .ok_or_else(|| CliError::Config(format!("task `{}` has no incorrect answer to contrast", task.name)))?;
            let first = |y: &str| -> Result<u32> { Ok(vocab.tokenize(y)?.ids[0]) };
            Ok(Probe {
                task: task.name.clone(),
                k,
                ids: spec.tokenize(vocab)?,
                correct: first(&pair.y)?,
                incorrect: first(other)?,
            })
        })
        .collect()
}

/// `(sum, count)` per layer.
type LayerSums = BTreeMap<usize, (f64, usize)>;

/// Plot a written profile CSV: mean per layer of each (task, k) series.
pub fn plot_profile(method: Method, csv_text: &str) -> Result<String> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("profile CSV lacks column `{name}`")))
    };
    let (task, k, layer) = (col("task")?, col("k")?, col("layer")?);
    let values: Vec<(&str, usize)> = match method {
        Method::Logitlens => vec![("correct", col("p_correct")?), ("incorrect", col("p_incorrect")?)],
        _ => vec![("attn", col("a_attn")?), ("mlp", col("a_mlp")?)],
    };
    let mut sums: BTreeMap<(String, usize, &str), LayerSums> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let parse_usize = |i: usize| {
            rec[i]
                .parse::<usize>()
                .map_err(|e| CliError::Config(format!("bad profile CSV value `{}`: {e}", &rec[i])))
        };
        let (kk, l) = (parse_usize(k)?, parse_usize(layer)?);
        for &(name, c) in &values {
            let v: f64 = rec[c]
                .parse()
                .map_err(|e| CliError::Config(format!("bad profile CSV value `{}`: {e}", &rec[c])))?;
            let e = sums.entry((rec[task].to_string(), kk, name)).or_default().entry(l).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    let series: Vec<Series> = sums
        .into_iter()
        .map(|((t, kk, name), by_layer)| Series {
            name: format!("{t} k={kk} {name}"),
            points: by_layer.into_iter().map(|(l, (s, n))| (l as f64, s / n as f64)).collect(),
        })
        .collect();
    Ok(match method {
        Method::Logitlens => line_plot("Logit lens", "layer", "probability", &series),
        _ => line_plot("Sublayer apathy", "layer", "apathy", &series),
    })
}
