//! Offline summary of an executed trajectory.

use std::fmt::{self, Display};
use std::fs::File;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use safereach::dynamics::forward_kinematics;
use safereach::environments::{make_environment, EnvConfig, EnvKind};
use safereach::nalgebra::Vector3;
use safereach::report::fmt_num;
use safereach::sim::read_trajectory_csv;
use safereach::JointVector;

#[derive(Debug)]
pub struct Summary {
    pub rows: usize,
    pub duration: f64,
    pub path_length: f64,
    pub max_contact_force: f64,
    pub final_ee: Vector3<f64>,
    /// Largest gap between the logged end-effector and forward kinematics of the logged q.
    pub fk_mismatch: f64,
    pub goal: Option<GoalReport>,
}

#[derive(Debug)]
pub struct GoalReport {
    pub final_distance: f64,
    pub max_chord_deviation: f64,
    /// Against the obstacles as placed at t = 0; wall deformation is not replayed.
    pub min_clearance: f64,
}

pub fn summarize(path: &Path, env: Option<(EnvKind, u64)>, env_cfg: &EnvConfig) -> Result<Summary> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = read_trajectory_csv(file).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(!rows.is_empty(), "{} has no rows", path.display());

    let env = env
        .map(|(kind, seed)| {
            make_environment(kind, env_cfg, seed).with_context(|| format!("building {} seed {seed}", kind.name()))
        })
        .transpose()?;
    let model = env.as_ref().map(|e| e.scene.model.clone()).unwrap_or_else(safereach::RobotModel::iiwa14);

    let ee: Vec<Vector3<f64>> = rows.iter().map(|r| Vector3::from(r.ee)).collect();
    let path_length = ee.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let max_contact_force = rows.iter().map(|r| r.max_contact_force).fold(0.0, f64::max);
    let joints: Vec<JointVector> = rows.iter().map(|r| JointVector::from(r.q)).collect();
    let fk_mismatch =
        joints.iter().zip(&ee).map(|(q, p)| (forward_kinematics(&model, q).translation - p).norm()).fold(0.0, f64::max);

    let goal = env.map(|e| {
        let a = ee[0];
        let b = e.goal.translation;
        let chord = b - a;
        let len2 = chord.norm_squared();
        let deviation = |p: &Vector3<f64>| {
            let t = if len2 > 0.0 { ((p - a).dot(&chord) / len2).clamp(0.0, 1.0) } else { 0.0 };
            (p - (a + chord * t)).norm()
        };
        GoalReport {
            final_distance: (ee[ee.len() - 1] - b).norm(),
            max_chord_deviation: ee.iter().map(deviation).fold(0.0, f64::max),
            min_clearance: joints.iter().map(|q| e.scene.min_clearance(&e.world0, q)).fold(f64::INFINITY, f64::min),
        }
    });

    Ok(Summary {
        rows: rows.len(),
        duration: rows[rows.len() - 1].time - rows[0].time,
        path_length,
        max_contact_force,
        final_ee: ee[ee.len() - 1],
        fk_mismatch,
        goal,
    })
}

impl Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows: {}", self.rows)?;
        writeln!(f, "duration_s: {}", fmt_num(self.duration))?;
        writeln!(f, "ee_path_length_m: {}", fmt_num(self.path_length))?;
        writeln!(f, "max_contact_force_N: {}", fmt_num(self.max_contact_force))?;
        let p = &self.final_ee;
        writeln!(f, "final_ee_m: {} {} {}", fmt_num(p.x), fmt_num(p.y), fmt_num(p.z))?;
        writeln!(f, "fk_mismatch_m: {}", fmt_num(self.fk_mismatch))?;
        if let Some(g) = &self.goal {
            writeln!(f, "final_distance_m: {}", fmt_num(g.final_distance))?;
            writeln!(f, "max_chord_deviation_m: {}", fmt_num(g.max_chord_deviation))?;
            writeln!(f, "min_clearance_m: {}", fmt_num(g.min_clearance))?;
        }
        Ok(())
    }
}
