//! Scripted user studies: a grid of task x mode x trial, CSV/JSON output and a
//! Table I style summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::control::{derive_seed, run_episode, ControlError, ControlMode, EpisodeMetrics, EpisodeOptions};
use crate::demo::DemoDataset;
use crate::geometry::{angular_error, euler_to_quat, wrap_angle, GeometryError};
use crate::policy::{OrientationSource, PolicyError, TrainedPolicy};
use crate::sim::operator::ScriptedOperator;
use crate::sim::TaskId;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("no policy for task {0} (hitl_d needs one per task)")]
    MissingPolicy(TaskId),
    #[error("policy for {task} was trained with perception hash {found}, study expects {expected}")]
    PerceptionMismatch { task: TaskId, expected: String, found: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("writing results: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Which persona stands in for the user in each mode.
pub fn default_persona(mode: ControlMode) -> &'static str {
    match mode {
        ControlMode::HitlD | ControlMode::FullManual6Dof => "direct",
        ControlMode::Cartesian => "mode_switching",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPlan {
    pub tasks: Vec<TaskId>,
    pub modes: Vec<ControlMode>,
    /// Persona override for every mode; `None` uses [`default_persona`].
    pub persona: Option<String>,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub task: TaskId,
    pub mode: ControlMode,
    pub persona: String,
    pub trial: usize,
    pub seed: u64,
    pub success: bool,
    pub completion_ticks: u64,
    pub completion_time_s: f64,
    pub resets: u32,
    pub mode_switches: u32,
    pub switch_ticks: u32,
    pub perception_errors: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub task: Option<TaskId>,
    pub mode: ControlMode,
    pub trials: usize,
    pub success_rate: f64,
    pub mean_completion_ticks: f64,
    pub mean_completion_time_s: f64,
    pub mean_resets: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config_hash: String,
    pub plan: StudyPlan,
    pub rows: Vec<StudyRow>,
    pub summary: Vec<SummaryCell>,
}

fn trial_seed(base: u64, task: TaskId, trial: usize) -> u64 {
    derive_seed(base, trial as u64, 100 + task as u64)
}

/// Run the grid. Trials run in parallel and are merged in grid order, so the
/// result does not depend on scheduling.
pub fn run_study(
    plan: &StudyPlan,
    config: &RunConfig,
    policies: &BTreeMap<TaskId, TrainedPolicy>,
) -> Result<StudyResult, StudyError> {
    config.validate()?;
    let loop_cfg = config.loop_config();
    if plan.modes.contains(&ControlMode::HitlD) {
        for &task in &plan.tasks {
            let p = policies.get(&task).ok_or(StudyError::MissingPolicy(task))?;
            let expected = config.perception(&config.task_spec(task)).hash();
            if p.perception_hash() != expected {
                return Err(StudyError::PerceptionMismatch { task, expected, found: p.perception_hash() });
            }
        }
    }
    let mut jobs = Vec::new();
    for &task in &plan.tasks {
        for &mode in &plan.modes {
            for trial in 0..plan.trials {
                jobs.push((task, mode, trial));
            }
        }
    }
    let rows: Vec<StudyRow> = jobs
        .par_iter()
        .map(|&(task_id, mode, trial)| -> Result<StudyRow, StudyError> {
            let task = config.task_spec(task_id);
            let persona_name = plan.persona.clone().unwrap_or_else(|| default_persona(mode).to_string());
            let persona = config.persona(&persona_name)?;
            let seed = trial_seed(plan.seed, task_id, trial);
            let mut op = ScriptedOperator::new(persona, config.persona_params(), seed);
            let mut policy = if mode == ControlMode::HitlD { policies.get(&task_id).cloned() } else { None };
            let source = policy.as_mut().map(|p| p as &mut dyn OrientationSource);
            let opts = EpisodeOptions { seed, ..EpisodeOptions::default() };
            let m = run_episode(&task, &mut op, mode, source, &loop_cfg, &opts)?;
            Ok(row(&m, &persona_name, trial))
        })
        .collect::<Result<_, _>>()?;
    let summary = summarize(&rows, plan);
    Ok(StudyResult { config_hash: config.hash(), plan: plan.clone(), rows, summary })
}

fn row(m: &EpisodeMetrics, persona: &str, trial: usize) -> StudyRow {
    StudyRow {
        task: m.task,
        mode: m.mode,
        persona: persona.to_string(),
        trial,
        seed: m.seed,
        success: m.success,
        completion_ticks: m.completion_ticks,
        completion_time_s: m.completion_time_s,
        resets: m.resets,
        mode_switches: m.mode_switches,
        switch_ticks: m.switch_ticks,
        perception_errors: m.perception_errors,
    }
}

fn cell(task: Option<TaskId>, mode: ControlMode, rows: &[&StudyRow]) -> SummaryCell {
    let n = rows.len().max(1) as f64;
    SummaryCell {
        task,
        mode,
        trials: rows.len(),
        success_rate: rows.iter().filter(|r| r.success).count() as f64 / n,
        mean_completion_ticks: rows.iter().map(|r| r.completion_ticks as f64).sum::<f64>() / n,
        mean_completion_time_s: rows.iter().map(|r| r.completion_time_s).sum::<f64>() / n,
        mean_resets: rows.iter().map(|r| r.resets as f64).sum::<f64>() / n,
    }
}

/// Per task and mode, then overall per mode. Failed trials count at the tick
/// budget.
pub fn summarize(rows: &[StudyRow], plan: &StudyPlan) -> Vec<SummaryCell> {
    let mut out = Vec::new();
    for &mode in &plan.modes {
        for &task in &plan.tasks {
            let sel: Vec<&StudyRow> = rows.iter().filter(|r| r.mode == mode && r.task == task).collect();
            out.push(cell(Some(task), mode, &sel));
        }
        let all: Vec<&StudyRow> = rows.iter().filter(|r| r.mode == mode).collect();
        out.push(cell(None, mode, &all));
    }
    out
}

impl StudyResult {
    pub fn cell(&self, task: Option<TaskId>, mode: ControlMode) -> Option<&SummaryCell> {
        self.summary.iter().find(|c| c.task == task && c.mode == mode)
    }

    pub fn to_csv(&self) -> Result<String, StudyError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("study result serializes")
    }

    /// Table I layout: completion time, success rate and resets per mode.
    /// Workload is a human-only metric and is left out.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:<18} {:>8} {:>10} {:>9} {:>8}", "task", "mode", "trials", "time (s)", "success", "resets");
        for c in &self.summary {
            let task = c.task.map(|t| t.name().to_string()).unwrap_or_else(|| "overall".into());
            let _ = writeln!(
                s,
                "{:<12} {:<18} {:>8} {:>10.2} {:>8.0}% {:>8.2}",
                task,
                c.mode.name(),
                c.trials,
                c.mean_completion_time_s,
                100.0 * c.success_rate,
                c.mean_resets
            );
        }
        s
    }

    /// Writes `metrics.csv`, `metrics.json` and `summary.txt`.
    pub fn write(&self, dir: &Path) -> Result<(), StudyError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.to_csv()?)?;
        std::fs::write(dir.join("metrics.json"), self.to_json())?;
        std::fs::write(dir.join("summary.txt"), format!("config_hash {}\n{}", self.config_hash, self.table()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    /// Mean absolute error per Euler axis, wrapped to `(-pi, pi]`.
    pub mean_abs_error: [f64; 3],
    /// Mean rotation angle between prediction and label.
    pub mean_angle_error: f64,
    pub perception_hash: String,
    pub config_hash: String,
}

/// Compare predictions against the labels of a held-out dataset.
pub fn evaluate(policy: &TrainedPolicy, data: &DemoDataset, seed: u64) -> Result<EvalReport, StudyError> {
    if policy.perception_hash() != data.metadata.perception.hash() {
        return Err(StudyError::PerceptionMismatch {
            task: data.metadata.task.unwrap_or(TaskId::Unstack),
            expected: data.metadata.perception.hash(),
            found: policy.perception_hash(),
        });
    }
    let mut sum = [0.0; 3];
    let mut angle = 0.0;
    let mut n = 0usize;
    for (i, f) in data.frames().enumerate() {
        let p = policy.predict(&f.observation, derive_seed(seed, i as u64, 7))?;
        let (pa, la) = (p.to_array(), f.action.to_array());
        for k in 0..3 {
            sum[k] += wrap_angle(pa[k] - la[k]).abs();
        }
        angle += angular_error(euler_to_quat(f.action)?, euler_to_quat(p)?).norm();
        n += 1;
    }
    let d = n.max(1) as f64;
    Ok(EvalReport {
        frames: n,
        mean_abs_error: sum.map(|v| v / d),
        mean_angle_error: angle / d,
        perception_hash: policy.perception_hash(),
        config_hash: policy.config_hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(modes: Vec<ControlMode>, trials: usize) -> StudyPlan {
        StudyPlan { tasks: TaskId::ALL.to_vec(), modes, persona: None, trials, seed: 4 }
    }

    #[test]
    fn baseline_grid_has_expected_rows_and_is_deterministic() {
        let p = plan(vec![ControlMode::Cartesian, ControlMode::FullManual6Dof], 2);
        let c = RunConfig::default();
        let a = run_study(&p, &c, &BTreeMap::new()).unwrap();
        assert_eq!(a.rows.len(), 3 * 2 * 2);
        assert_eq!(a.summary.len(), 2 * 4);
        assert_eq!(a.to_csv().unwrap(), run_study(&p, &c, &BTreeMap::new()).unwrap().to_csv().unwrap());
        assert_eq!(a.to_csv().unwrap().lines().count(), 13);
        let overall = a.cell(None, ControlMode::Cartesian).unwrap();
        assert_eq!(overall.trials, 6);
        assert_eq!(overall.success_rate, 1.0);
        assert!(a.table().contains("overall"));
        for r in &a.rows {
            assert_eq!(r.persona, default_persona(r.mode));
        }
    }

    #[test]
    fn hitl_d_needs_policies() {
        let p = plan(vec![ControlMode::HitlD], 1);
        assert!(matches!(run_study(&p, &RunConfig::default(), &BTreeMap::new()), Err(StudyError::MissingPolicy(_))));
    }

    #[test]
    fn failures_count_at_budget() {
        let mk = |success, ticks| StudyRow {
            task: TaskId::Screwdriver,
            mode: ControlMode::Cartesian,
            persona: "x".into(),
            trial: 0,
            seed: 0,
            success,
            completion_ticks: ticks,
            completion_time_s: ticks as f64 * 0.05,
            resets: 1,
            mode_switches: 0,
            switch_ticks: 0,
            perception_errors: 0,
        };
        let rows = vec![mk(true, 100), mk(false, 1500)];
        let s = summarize(&rows, &StudyPlan { tasks: vec![TaskId::Screwdriver], modes: vec![ControlMode::Cartesian], persona: None, trials: 2, seed: 0 });
        assert_eq!(s[0].success_rate, 0.5);
        assert_eq!(s[0].mean_completion_ticks, 800.0);
        assert_eq!(s[0].mean_resets, 1.0);
    }
}
