use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde_json::json;
use steerlab::dola::{
    load_mc, make_buckets, score_mc, DolaConfig, LayerBucket, McOption, McQuestion, ScoringMode, MC_SHOTS, MC_TEMPLATE,
};
use steerlab::metrics::{mc1, mc2, mc3, McItem};
use steerlab::seed;
use steerlab::tasks::IclTask;

use super::{managed, pool, RunOptions, RunStatus};
use crate::config::{ExperimentConfig, Method};
use crate::error::{CliError, Result};
use crate::io::{csv_bytes, load_model, load_tasks, LoadedModel};

pub const STAGE1_FILE: &str = "stage1.csv";
pub const STAGE2_FILE: &str = "stage2.csv";
pub const TABLE_FILE: &str = "table.csv";
pub const DATASET_FILE: &str = "dataset.json";
pub const METADATA_FILE: &str = "metadata.json";

pub const STAGE_HEADER: [&str; 10] = [
    "model_id",
    "stage",
    "bucket",
    "alpha",
    "vhead_reference",
    "scoring",
    "mc1",
    "mc2",
    "mc3",
    "eliminated",
];

/// A multiple-choice set over `task`: the query word, its answer as the single
/// correct option, two other single-word answers and one two-word distractor.
pub fn synthetic_mc(task: &IclTask, n_items: usize, seed_: u64) -> Result<Vec<McQuestion>> {
    if n_items <= MC_SHOTS || n_items > task.len() || task.len() < 5 {
        return Err(CliError::Config(format!(
            "synthetic MC set needs {} < n_items <= {} pairs of `{}`",
            MC_SHOTS,
            task.len(),
            task.name
        )));
    }
    let mut order: Vec<usize> = (0..task.len()).collect();
    order.shuffle(&mut seed::stream(seed_, "mc/order"));
    Ok(order[..n_items]
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let pair = &task.pairs[p];
            let mut rng = seed::stream(seed_, &format!("mc/{i}"));
            let others: Vec<&str> = task.pairs.iter().filter(|q| q.y != pair.y).map(|q| q.y.as_str()).collect();
            let picks: Vec<&str> = others.choose_multiple(&mut rng, 4).copied().collect();
            let mut options = vec![
                McOption {
                    text: pair.y.clone(),
                    correct: true,
                },
                McOption {
                    text: picks[0].to_string(),
                    correct: false,
                },
                McOption {
                    text: picks[1].to_string(),
                    correct: false,
                },
                McOption {
                    text: format!("{} {}", picks[2], picks[3]),
                    correct: false,
                },
            ];
            options.shuffle(&mut rng);
            McQuestion {
                question: pair.x.clone(),
                options,
            }
        })
        .collect())
}

struct Cell {
    stage: u8,
    bucket: LayerBucket,
    alpha: f64,
    scoring: ScoringMode,
}

struct CellResult {
    mc: (f64, f64, f64),
    /// Items whose every option scored −∞; their MC2 counts as 0.
    eliminated: usize,
}

/// Two-stage DoLa search: every bucket at the stage-1 α, then the α grid on
/// the bucket with the best post-softmax MC1.
pub fn cmd_dola(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunStatus> {
    if cfg.method != Method::Dola {
        return Err(CliError::Config(format!("dola needs method dola, not {}", cfg.method.name())));
    }
    let dir = cfg
        .model
        .dir
        .as_ref()
        .ok_or_else(|| CliError::Config("dola requires model.dir".into()))?;
    let d = &cfg.dola;
    let (items, generated) = match (&d.dataset, &d.synthetic) {
        (Some(path), None) => (load_mc(path).map_err(|e| CliError::Config(e.to_string()))?, false),
        (None, Some(s)) => {
            let tasks = load_tasks(&cfg.tasks)?;
            let task = tasks
                .iter()
                .find(|t| t.name == s.task)
                .ok_or_else(|| CliError::Config(format!("synthetic MC task `{}` is not loaded", s.task)))?;
            (synthetic_mc(task, s.n_items, cfg.seeds[0])?, true)
        }
        _ => return Err(CliError::Config("dola needs exactly one of dola.dataset and dola.synthetic".into())),
    };
    if items.len() <= MC_SHOTS {
        return Err(CliError::Config(format!(
            "MC dataset has {} items; {MC_SHOTS} are shots and at least one must be scored",
            items.len()
        )));
    }
    if items[MC_SHOTS..].iter().any(|q| q.options.iter().filter(|o| o.correct).count() != 1) {
        return Err(CliError::Config("every scored item needs exactly one correct option for MC1".into()));
    }
    let loaded = load_model(dir)?;
    let buckets = make_buckets(loaded.model.config().n_layers, d.regime).map_err(|e| CliError::Config(e.to_string()))?;
    let modes = [
        ScoringMode::Baseline,
        ScoringMode::PostSoftmax,
        ScoringMode::RawContrast,
        ScoringMode::BaselineShift { c: d.shift_c },
    ];

    managed("dola", cfg, opts, |out| {
        if generated {
            out.write_json(DATASET_FILE, &items)?;
        }
        let workers = pool(opts.workers)?;
        let stage1: Vec<Cell> = buckets
            .iter()
            .flat_map(|b| {
                modes.iter().map(move |&scoring| Cell {
                    stage: 1,
                    bucket: b.clone(),
                    alpha: d.stage1_alpha,
                    scoring,
                })
            })
            .collect();
        let r1 = workers.install(|| stage1.par_iter().map(|c| score_cell(cfg, &loaded, &items, c)).collect::<Result<Vec<_>>>())?;
        let best_bucket = best_by_mc1(&stage1, &r1).bucket.clone();
        log::info!("best bucket {}", best_bucket.name);

        let stage2: Vec<Cell> = d
            .alphas
            .iter()
            .flat_map(|&alpha| {
                let bucket = best_bucket.clone();
                modes.iter().map(move |&scoring| Cell {
                    stage: 2,
                    bucket: bucket.clone(),
                    alpha,
                    scoring,
                })
            })
            .collect();
        let r2 = workers.install(|| stage2.par_iter().map(|c| score_cell(cfg, &loaded, &items, c)).collect::<Result<Vec<_>>>())?;
        let best = best_by_mc1(&stage2, &r2);

        out.write(STAGE1_FILE, stage_csv(cfg, &loaded.id, &stage1, &r1)?)?;
        out.write(STAGE2_FILE, stage_csv(cfg, &loaded.id, &stage2, &r2)?)?;

        let pick = |scoring: ScoringMode| {
            stage2
                .iter()
                .zip(&r2)
                .find(|(c, _)| c.alpha == best.alpha && c.scoring == scoring)
                .map(|(_, r)| r.mc)
                .expect("stage 2 covers every mode")
        };
        let (base, dola) = (pick(ScoringMode::Baseline), pick(ScoringMode::PostSoftmax));
        let rows = vec![
            vec![loaded.id.clone(), "mc1".into(), base.0.to_string(), dola.0.to_string()],
            vec![loaded.id.clone(), "mc2".into(), base.1.to_string(), dola.1.to_string()],
            vec![loaded.id.clone(), "mc3".into(), base.2.to_string(), dola.2.to_string()],
        ];
        out.write(TABLE_FILE, csv_bytes(&["model", "metric", "base", "dola"], &rows)?)?;
        out.write_json(
            METADATA_FILE,
            &json!({
                "model_id": loaded.id,
                "mc_shots": MC_SHOTS,
                "template": MC_TEMPLATE,
                "regime": d.regime,
                "vhead_reference": d.vhead_reference.name(),
                "lens": d.lens.name(),
                "stage1_alpha": d.stage1_alpha,
                "alphas": d.alphas,
                "selection": "post_softmax mc1, ties to the earliest cell",
                "best_bucket": best_bucket.name,
                "best_alpha": best.alpha,
                "mc3": "fraction of correct options scoring strictly above every incorrect option",
                "ties": "score zero",
                "eliminated": "items with every option outside V_head score 0 on MC2",
                "items_scored": items.len() - MC_SHOTS,
            }),
        )?;
        Ok(())
    })
}

fn score_cell(cfg: &ExperimentConfig, loaded: &LoadedModel, items: &[McQuestion], cell: &Cell) -> Result<CellResult> {
    let dcfg = DolaConfig {
        bucket: cell.bucket.clone(),
        alpha: cell.alpha,
        vhead_reference: cfg.dola.vhead_reference,
        scoring: cell.scoring,
    };
    let scored = score_mc(&loaded.model, &loaded.vocab, items, &dcfg, cfg.dola.lens)?;
    let mut sums = (0.0, 0.0, 0.0);
    let mut eliminated = 0;
    for scores in scored {
        let item = McItem::new(scores)?;
        sums.0 += mc1(&item)? as f64;
        sums.2 += mc3(&item)?;
        if item.scores.iter().all(|s| s.1 == f64::NEG_INFINITY) {
            eliminated += 1;
        } else {
            sums.1 += mc2(&item)?;
        }
    }
    let n = (items.len() - MC_SHOTS) as f64;
    Ok(CellResult {
        mc: (sums.0 / n, sums.1 / n, sums.2 / n),
        eliminated,
    })
}

/// The post-softmax cell with the highest MC1; ties go to the earliest cell.
fn best_by_mc1<'a>(cells: &'a [Cell], results: &[CellResult]) -> &'a Cell {
    let mut best: Option<(&Cell, f64)> = None;
    for (c, r) in cells.iter().zip(results) {
        if c.scoring == ScoringMode::PostSoftmax && best.is_none_or(|(_, m)| r.mc.0 > m) {
            best = Some((c, r.mc.0));
        }
    }
    best.expect("every stage includes post_softmax").0
}

fn stage_csv(cfg: &ExperimentConfig, model_id: &str, cells: &[Cell], results: &[CellResult]) -> Result<Vec<u8>> {
    let rows: Vec<Vec<String>> = cells
        .iter()
        .zip(results)
        .map(|(c, r)| {
            vec![
                model_id.to_string(),
                c.stage.to_string(),
                c.bucket.name.clone(),
                c.alpha.to_string(),
                cfg.dola.vhead_reference.name().to_string(),
                c.scoring.name(),
                r.mc.0.to_string(),
                r.mc.1.to_string(),
                r.mc.2.to_string(),
                r.eliminated.to_string(),
            ]
        })
        .collect();
    csv_bytes(&STAGE_HEADER, &rows)
}
