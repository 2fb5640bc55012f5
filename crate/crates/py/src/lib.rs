//! Python bindings. Results come back as plain dicts and lists; the heavy
//! calls release the GIL.

use std::collections::BTreeMap;
use std::path::Path;

use hitld::config::RunConfig;
use hitld::control::{run_episode as run, ControlMode, EpisodeOptions};
use hitld::demo::{scripted_expert, DemoDataset};
use hitld::geometry::Vec3;
use hitld::pointcloud::{farthest_point_indices, ColoredPoint, ColoredPointCloud};
use hitld::policy::{OrientationSource, TrainedPolicy};
use hitld::sim::operator::ScriptedOperator;
use hitld::sim::TaskId;
use hitld::study::{default_persona, evaluate as eval_policy, run_study, StudyPlan};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

type Res<T> = Result<T, String>;

fn config(path: Option<&str>) -> Res<RunConfig> {
    RunConfig::load_or_default(path.map(Path::new)).map_err(|e| e.to_string())
}

fn task(name: &str) -> Res<TaskId> {
    name.parse()
}

fn fps(points: &[[f64; 3]], n: usize, start: usize) -> Res<Vec<usize>> {
    let cloud = ColoredPointCloud::new(points.iter().map(|&p| ColoredPoint::new(Vec3::from_array(p), [0.0; 3])).collect());
    farthest_point_indices(&cloud, n, start).map_err(|e| e.to_string())
}

fn demo(task_name: &str, path: &str, seed: u64, cfg: Option<&str>) -> Res<String> {
    let cfg = config(cfg)?;
    let spec = cfg.task_spec(task(task_name)?);
    let ds = scripted_expert(&spec, seed, &cfg.perception(&spec)).map_err(|e| e.to_string())?;
    ds.save(Path::new(path)).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&ds.summary()).expect("summary serializes"))
}

fn train_file(data: &str, out: &str, seed: u64, cfg: Option<&str>) -> Res<f64> {
    let cfg = config(cfg)?;
    let ds = DemoDataset::load(Path::new(data)).map_err(|e| e.to_string())?;
    let p = hitld::policy::train(&ds, &cfg.policy_config(seed)).map_err(|e| e.to_string())?;
    p.save(Path::new(out)).map_err(|e| e.to_string())?;
    Ok(p.final_loss())
}

fn eval_file(policy: &str, task_name: &str, seed: u64, cfg: Option<&str>) -> Res<String> {
    let cfg = config(cfg)?;
    let p = TrainedPolicy::load(Path::new(policy)).map_err(|e| e.to_string())?;
    let spec = cfg.task_spec(task(task_name)?);
    let held = scripted_expert(&spec, hitld::control::derive_seed(seed, 1, 13), &cfg.perception(&spec))
        .map_err(|e| e.to_string())?;
    let r = eval_policy(&p, &held, seed).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&r).expect("report serializes"))
}

fn episode(task_name: &str, mode: &str, seed: u64, persona: Option<&str>, policy: Option<&str>, cfg: Option<&str>) -> Res<String> {
    let cfg = config(cfg)?;
    let mode: ControlMode = mode.parse()?;
    let spec = cfg.task_spec(task(task_name)?);
    let persona = cfg.persona(persona.unwrap_or(default_persona(mode))).map_err(|e| e.to_string())?;
    let mut op = ScriptedOperator::new(persona, cfg.persona_params(), seed);
    let mut p = policy.map(|p| TrainedPolicy::load(Path::new(p))).transpose().map_err(|e| e.to_string())?;
    let source = p.as_mut().map(|p| p as &mut dyn OrientationSource);
    let opts = EpisodeOptions { seed, ..EpisodeOptions::default() };
    let m = run(&spec, &mut op, mode, source, &cfg.loop_config(), &opts).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&m).expect("metrics serialize"))
}

fn study_grid(
    tasks: &[String],
    modes: &[String],
    trials: usize,
    seed: u64,
    policies: &BTreeMap<String, String>,
    cfg: Option<&str>,
) -> Res<String> {
    let cfg = config(cfg)?;
    let tasks = tasks.iter().map(|t| task(t)).collect::<Res<Vec<_>>>()?;
    let modes = modes.iter().map(|m| m.parse()).collect::<Res<Vec<ControlMode>>>()?;
    let mut loaded = BTreeMap::new();
    for (t, path) in policies {
        loaded.insert(task(t)?, TrainedPolicy::load(Path::new(path)).map_err(|e| e.to_string())?);
    }
    let plan = StudyPlan { tasks, modes, persona: None, trials, seed };
    let r = run_study(&plan, &cfg, &loaded).map_err(|e| e.to_string())?;
    Ok(r.to_json())
}

fn to_py(py: Python<'_>, r: Res<String>) -> PyResult<Py<PyAny>> {
    let text = r.map_err(PyValueError::new_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Greedy farthest point sampling. Returns indices in selection order.
#[pyfunction]
#[pyo3(signature = (points, n, start=0))]
fn fps_indices(points: Vec<[f64; 3]>, n: usize, start: usize) -> PyResult<Vec<usize>> {
    fps(&points, n, start).map_err(PyValueError::new_err)
}

/// Record one scripted expert demonstration to `path`. Returns its summary.
#[pyfunction]
#[pyo3(signature = (task, path, seed=0, config=None))]
fn generate_demo(py: Python<'_>, task: &str, path: &str, seed: u64, config: Option<&str>) -> PyResult<Py<PyAny>> {
    let r = py.detach(|| demo(task, path, seed, config));
    to_py(py, r)
}

/// Train on a demo file and write the checkpoint. Returns the final loss.
#[pyfunction]
#[pyo3(signature = (data, out, seed=0, config=None))]
fn train(py: Python<'_>, data: &str, out: &str, seed: u64, config: Option<&str>) -> PyResult<f64> {
    py.detach(|| train_file(data, out, seed, config)).map_err(PyValueError::new_err)
}

#[pyfunction]
#[pyo3(signature = (policy, task, seed=0, config=None))]
fn evaluate(py: Python<'_>, policy: &str, task: &str, seed: u64, config: Option<&str>) -> PyResult<Py<PyAny>> {
    let r = py.detach(|| eval_file(policy, task, seed, config));
    to_py(py, r)
}

/// One scripted episode. Returns the episode metrics.
#[pyfunction]
#[pyo3(signature = (task, mode, seed=0, persona=None, policy=None, config=None))]
fn run_episode(
    py: Python<'_>,
    task: &str,
    mode: &str,
    seed: u64,
    persona: Option<&str>,
    policy: Option<&str>,
    config: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let r = py.detach(|| episode(task, mode, seed, persona, policy, config));
    to_py(py, r)
}

/// Scripted study. `policies` maps task names to checkpoint paths and is
/// needed for hitl_d.
#[pyfunction]
#[pyo3(signature = (tasks, modes, trials, seed=0, policies=BTreeMap::new(), config=None))]
fn study(
    py: Python<'_>,
    tasks: Vec<String>,
    modes: Vec<String>,
    trials: usize,
    seed: u64,
    policies: BTreeMap<String, String>,
    config: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let r = py.detach(|| study_grid(&tasks, &modes, trials, seed, &policies, config));
    to_py(py, r)
}

#[pymodule]
fn hitld_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(fps_indices, m)?)?;
    m.add_function(wrap_pyfunction!(generate_demo, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_episode, m)?)?;
    m.add_function(wrap_pyfunction!(study, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_picks_the_far_corner_second() {
        let pts = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [1.0, 1.0, 0.0], [0.5, 0.5, 0.0]];
        assert_eq!(fps(&pts, 2, 0).unwrap(), vec![0, 2]);
        assert!(fps(&[], 2, 0).is_err());
    }

    #[test]
    fn bad_names_are_errors() {
        assert!(episode("juggling", "cartesian", 0, None, None, None).is_err());
        assert!(episode("unstack", "point_and_go", 0, None, None, None).is_err());
        assert!(episode("unstack", "hitl_d", 0, None, None, None).is_err());
    }

    #[test]
    fn scripted_episode_succeeds() {
        let m: serde_json::Value = serde_json::from_str(&episode("screwdriver", "full_manual_6dof", 1, Some("direct"), None, None).unwrap()).unwrap();
        assert_eq!(m["success"], true);
    }
}
