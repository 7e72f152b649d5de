//! Evaluation driver: scores a checkpoint and the baselines on a dataset
//! and writes CSV and markdown reports.

use std::fs;
use std::path::{Path, PathBuf};

use dc2_core::eval::{
    eval_task, reports_to_csv, AblationTable, ClassicalRenderer, CopyInput, EvalOptions, MetricReport, ModelPredictor,
    Predictor, Task,
};
use dc2_core::spec::TileConfig;
use dc2_core::train::SceneStack;

use crate::checkpoint::Checkpoint;
use crate::error::{io_err, Result};

/// Baselines scored next to the model. Copy-input is the copied all-in-focus
/// image on the bokeh task, since that is its input there.
pub fn baselines(task: Task) -> Vec<Box<dyn Predictor>> {
    match task {
        Task::Deblur => vec![Box::new(CopyInput)],
        Task::Bokeh | Task::Refocus => vec![Box::new(CopyInput), Box::new(ClassicalRenderer::default())],
    }
}

/// Reports for every task: the model first, then its baselines.
pub fn evaluate(
    ckpt: &Checkpoint,
    scenes: &[SceneStack],
    tasks: &[Task],
    opts: &EvalOptions,
    tiles: TileConfig,
) -> Result<Vec<MetricReport>> {
    let model = ModelPredictor {
        model: &ckpt.model,
        id: format!("dfnet-{}", ckpt.id),
        tiles,
    };
    let mut reports = Vec::new();
    for &task in tasks {
        reports.push(eval_task(task, &model, scenes, opts)?);
        for b in baselines(task) {
            reports.push(eval_task(task, b.as_ref(), scenes, opts)?);
        }
    }
    Ok(reports)
}

/// Mean-score table, one row per predictor, one column pair per task.
pub fn summary_table(reports: &[MetricReport]) -> AblationTable {
    let mut tasks: Vec<Task> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for r in reports {
        if !tasks.contains(&r.task) {
            tasks.push(r.task);
        }
        if !names.contains(&r.model_id) {
            names.push(r.model_id.clone());
        }
    }
    // Predictors that skip a task are left out of the table.
    let rows = names
        .into_iter()
        .filter_map(|name| {
            let row: Option<Vec<MetricReport>> = tasks
                .iter()
                .map(|t| reports.iter().find(|r| r.task == *t && r.model_id == name).cloned())
                .collect();
            row.map(|r| (name, r))
        })
        .collect();
    AblationTable { tasks, rows }
}

/// Writes `out` (per-image CSV) and `out` with a `.md` extension (one mean
/// table per task). Returns the markdown path.
pub fn write_reports(out: &Path, reports: &[MetricReport]) -> Result<PathBuf> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(out, reports_to_csv(reports)).map_err(io_err(out))?;
    let md = out.with_extension("md");
    let mut text = String::new();
    for task in Task::ALL {
        let of_task: Vec<MetricReport> = reports.iter().filter(|r| r.task == task).cloned().collect();
        if !of_task.is_empty() {
            text.push_str(&format!("## {}\n\n", task.name()));
            text.push_str(&summary_table(&of_task).to_markdown());
            text.push('\n');
        }
    }
    fs::write(&md, text).map_err(io_err(&md))?;
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dc2_core::eval::ImageScore;
    use dc2_core::metrics::AlignParams;

    fn report(task: Task, id: &str, psnr: f64) -> MetricReport {
        MetricReport {
            task,
            model_id: id.into(),
            images: vec![ImageScore {
                scene: 0,
                reference: Some(0),
                target: None,
                psnr,
                ssim: 0.5,
                align: AlignParams::IDENTITY,
            }],
            mean_psnr: psnr,
            mean_ssim: 0.5,
            perceptual: None,
        }
    }

    #[test]
    fn summary_skips_predictors_missing_a_task() {
        let reports = vec![
            report(Task::Deblur, "net", 30.0),
            report(Task::Deblur, "copy-input", 20.0),
            report(Task::Bokeh, "net", 31.0),
            report(Task::Bokeh, "copy-input", 25.0),
            report(Task::Bokeh, "classical-renderer", 40.0),
        ];
        let t = summary_table(&reports);
        assert_eq!(t.tasks, vec![Task::Deblur, Task::Bokeh]);
        let names: Vec<_> = t.rows.iter().map(|r| r.0.as_str()).collect();
        assert_eq!(names, ["net", "copy-input"]);
    }

    #[test]
    fn reports_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r.csv");
        let md = write_reports(&out, &[report(Task::Refocus, "net", 28.0)]).unwrap();
        let csv = fs::read_to_string(&out).unwrap();
        assert!(csv.starts_with(dc2_core::eval::REPORT_CSV_HEADER));
        assert!(fs::read_to_string(md).unwrap().contains("| net |"));
    }
}
