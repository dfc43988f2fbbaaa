//! Ablation protocols: prompting-mode comparison and the merged-class
//! experiment. Each cell of the table is an independent train+evaluate run;
//! runs execute on a small worker pool and results keep protocol order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::data::{apply_merge, ClassTaxonomy, SegSample};
use crate::error::{CpSegError, Result};
use crate::prompt::PromptMode;
use crate::train::{evaluate, train, TrainConfig};

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    /// First column header in the CSV ("prompts" or "data_type").
    pub key_column: &'static str,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(self.key_column);
        out.push_str(",miou_mean,miou_sd");
        for s in &self.seeds {
            out.push_str(&format!(",seed_{s}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6}", row.label, row.mean, row.sd));
            for v in &row.per_seed {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

struct Job {
    row: usize,
    config: TrainConfig,
    merged: bool,
}

/// Run all jobs on at most `available_parallelism` worker threads, keeping
/// result order.
fn run_jobs(
    jobs: &[Job],
    train_orig: &[SegSample],
    val_orig: &[SegSample],
    tax_orig: &ClassTaxonomy,
    train_merged: Option<&[SegSample]>,
    val_merged: Option<&[SegSample]>,
    tax_merged: Option<&ClassTaxonomy>,
) -> Result<Vec<f64>> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<f64>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let job = &jobs[i];
                let (train_set, val_set, tax) = if job.merged {
                    (
                        train_merged.expect("merged jobs need merged data"),
                        val_merged.expect("merged jobs need merged data"),
                        tax_merged.expect("merged jobs need merged taxonomy"),
                    )
                } else {
                    (train_orig, val_orig, tax_orig)
                };
                let outcome = train(&job.config, train_set, tax).and_then(|o| {
                    evaluate(&o.model, job.config.prompt_mode, val_set, job.config.seed)
                        .map(|r| r.miou)
                });
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });

    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect()
}

/// Table-2-style protocol: the four prompting modes, everything else held
/// fixed, each trained and evaluated per seed.
pub fn ablate_prompts(
    base: &TrainConfig,
    train_set: &[SegSample],
    val_set: &[SegSample],
    taxonomy: &ClassTaxonomy,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(CpSegError::Config(format!(
            "prompting ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    base.validate()?;
    let mut jobs = Vec::new();
    for (row, mode) in PromptMode::ALL.iter().enumerate() {
        for &seed in seeds {
            jobs.push(Job {
                row,
                config: TrainConfig {
                    prompt_mode: *mode,
                    seed,
                    ..base.clone()
                },
                merged: false,
            });
        }
    }
    let mious = run_jobs(&jobs, train_set, val_set, taxonomy, None, None, None)?;

    let mut rows = Vec::new();
    for (row, mode) in PromptMode::ALL.iter().enumerate() {
        let per_seed: Vec<f64> = jobs
            .iter()
            .zip(&mious)
            .filter(|(j, _)| j.row == row)
            .map(|(_, &m)| m)
            .collect();
        let (mean, sd) = mean_sd(&per_seed);
        rows.push(AblationRow {
            label: mode.label().to_string(),
            per_seed,
            mean,
            sd,
        });
    }
    Ok(AblationTable {
        rows,
        seeds: seeds.to_vec(),
        key_column: "prompts",
    })
}

/// Table-4-style protocol: chain-of-thought prompting on the original
/// taxonomy versus the flood-merged one.
pub fn ablate_merge(
    base: &TrainConfig,
    train_set: &[SegSample],
    val_set: &[SegSample],
    taxonomy: &ClassTaxonomy,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(CpSegError::Config(format!(
            "merge ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    base.validate()?;
    let merge = taxonomy.flood_merge()?;
    let train_merged: Vec<SegSample> = train_set
        .iter()
        .map(|s| apply_merge(s, &merge, taxonomy))
        .collect::<Result<_>>()?;
    let val_merged: Vec<SegSample> = val_set
        .iter()
        .map(|s| apply_merge(s, &merge, taxonomy))
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for (row, merged) in [(0usize, false), (1, true)] {
        for &seed in seeds {
            jobs.push(Job {
                row,
                config: TrainConfig {
                    prompt_mode: PromptMode::ChainOfThought,
                    seed,
                    ..base.clone()
                },
                merged,
            });
        }
    }
    let mious = run_jobs(
        &jobs,
        train_set,
        val_set,
        taxonomy,
        Some(&train_merged),
        Some(&val_merged),
        Some(&merge.target),
    )?;

    let labels = ["Original Data", "Combined Data"];
    let mut rows = Vec::new();
    for (row, label) in labels.iter().enumerate() {
        let per_seed: Vec<f64> = jobs
            .iter()
            .zip(&mious)
            .filter(|(j, _)| j.row == row)
            .map(|(_, &m)| m)
            .collect();
        let (mean, sd) = mean_sd(&per_seed);
        rows.push(AblationRow {
            label: label.to_string(),
            per_seed,
            mean,
            sd,
        });
    }
    Ok(AblationTable {
        rows,
        seeds: seeds.to_vec(),
        key_column: "data_type",
    })
}
