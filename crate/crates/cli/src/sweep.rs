//! Grid runs, parallel across cells and capped by `ROSITA_MINI_THREADS`.

use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{stage, SweepArchConfig, SweepFreqConfig};
use rosita_core::io::TaskData;
use rosita_core::model::Model;
use rosita_core::pipeline::{run_plan, LrKind, PruneSpec, RunOptions, StagePlan, TeacherSource, PLAN_VERSION};
use rosita_core::pruning::ArchitectureTarget;

fn pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("ROSITA_MINI_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .with_context(|| format!("ROSITA_MINI_THREADS={v:?} is not a thread count"))?
            .max(1),
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

#[derive(Serialize)]
struct Cell {
    name: String,
    metric: f64,
    param_count: usize,
    metrics_file: String,
}

fn run_cells(cells: Vec<(String, StagePlan)>, teacher: &Model, data: &TaskData, out: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let results: Vec<Result<Cell>> = pool()?.install(|| {
        cells
            .par_iter()
            .map(|(name, plan)| {
                let dir = out.join(name);
                let opts = RunOptions {
                    seed,
                    out_dir: Some(dir.clone()),
                    teacher: Some(teacher.clone()),
                };
                let res = run_plan(plan, data, &opts).with_context(|| format!("cell {name}"))?;
                let last = res.stages.last().expect("one stage");
                Ok(Cell {
                    name: name.clone(),
                    metric: last.final_metric,
                    param_count: last.param_count,
                    metrics_file: dir.join("metrics.ndjson").display().to_string(),
                })
            })
            .collect()
    });
    let cells: Vec<Cell> = results.into_iter().collect::<Result<_>>()?;
    for c in &cells {
        println!("{:<36} metric {:.4}  params {:>9}", c.name, c.metric, c.param_count);
    }
    std::fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&cells)?)?;
    Ok(())
}

fn target_name(t: &ArchitectureTarget) -> String {
    format!("h{}_l{}_i{}_r{}", t.heads, t.layers, t.intermediate, t.rank)
}

pub fn architectures(cfg: &SweepArchConfig, teacher: &Model, data: &TaskData, out: &Path, seed: u64) -> Result<()> {
    let cells = cfg
        .targets
        .iter()
        .map(|t| {
            let mut s = stage("prune_one_step", &cfg.train, cfg.kd.clone(), PruneSpec::OneStep { target: *t });
            s.teacher = TeacherSource::Original;
            if cfg.kd.is_none() {
                s.cross_entropy = Some(true);
            }
            let plan = StagePlan {
                version: PLAN_VERSION,
                name: "sweep_architectures".into(),
                stages: vec![s],
            };
            (target_name(t), plan)
        })
        .collect();
    run_cells(cells, teacher, data, out, seed)
}

pub fn frequency(
    cfg: &SweepFreqConfig,
    teacher: &Model,
    data: &TaskData,
    fractions: &[f64],
    kinds: &[LrKind],
    out: &Path,
    seed: u64,
) -> Result<()> {
    let mut cells = Vec::new();
    for &kind in kinds {
        for &p in fractions {
            let label = match kind {
                LrKind::LinearDecay => "linear",
                LrKind::Constant => "constant",
            };
            cells.push((format!("p{p}_{label}"), cfg.plan(p, kind)));
        }
    }
    run_cells(cells, teacher, data, out, seed)
}
