use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde_json::json;

use crate::environments::EnvKind;
use crate::experiment::{EpisodeRecord, MeanStd, ResultsTable, SolverComparison};
use crate::sim::write_trajectory_csv;

/// Formats with six significant digits, `%g`-style, so output is stable across runs.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

/// `fmt_num` rounding kept as a JSON number.
fn rounded(x: f64) -> f64 {
    fmt_num(x).parse().unwrap_or(x)
}

fn cell_text(v: Option<MeanStd>) -> String {
    match v {
        Some(m) => format!("{} ± {}", fmt_num(m.mean), fmt_num(m.std)),
        None => "Fail".into(),
    }
}

/// Markdown comparison table: one row per method, time and force per environment.
pub fn render_table(table: &ResultsTable) -> String {
    let mut envs: Vec<EnvKind> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for c in &table.cells {
        if !envs.contains(&c.env) {
            envs.push(c.env);
        }
        if !methods.contains(&c.method.as_str()) {
            methods.push(&c.method);
        }
    }
    let mut out = String::from("| method |");
    for e in &envs {
        out.push_str(&format!(" {0} time (s) | {0} force (N) | {0} success |", e.name()));
    }
    out.push('\n');
    out.push_str(&"|---".repeat(1 + 3 * envs.len()));
    out.push_str("|\n");
    for m in methods {
        out.push_str(&format!("| {m} |"));
        for &e in &envs {
            match table.cell(e, m) {
                Some(c) => out.push_str(&format!(
                    " {} | {} | {}/{} |",
                    cell_text(c.completion_time),
                    cell_text(c.max_contact_force),
                    c.successes,
                    c.episodes
                )),
                None => out.push_str(" - | - | - |"),
            }
        }
        out.push('\n');
    }
    out
}

pub const RESULTS_HEADER: [&str; 9] = [
    "env",
    "method",
    "seed",
    "success",
    "completion_time_s",
    "max_contact_force_N",
    "final_distance_m",
    "plan_steps",
    "failure",
];

pub fn write_results_csv<W: Write>(out: W, table: &ResultsTable) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for r in &table.records {
        let m = &r.metrics;
        w.write_record([
            r.env.name().to_string(),
            r.method.clone(),
            r.seed.to_string(),
            m.success.to_string(),
            fmt_num(m.completion_time),
            fmt_num(m.max_contact_force),
            fmt_num(m.final_distance),
            m.cost_histories.len().to_string(),
            m.failure.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_force_profile_csv<W: Write>(out: W, table: &ResultsTable) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time_s", "contact_force_N", "method"])?;
    let sel = &table.profile;
    for r in table.records.iter().filter(|r| r.env == sel.env && r.seed == sel.seed) {
        for &(t, f) in &r.metrics.force_profile {
            w.write_record([fmt_num(t), fmt_num(f), r.method.clone()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn summary_json(table: &ResultsTable) -> serde_json::Value {
    let stat = |v: Option<MeanStd>| match v {
        Some(m) => json!({ "mean": rounded(m.mean), "std": rounded(m.std) }),
        None => json!("Fail"),
    };
    let cells: Vec<_> = table
        .cells
        .iter()
        .map(|c| {
            json!({
                "env": c.env.name(),
                "method": c.method,
                "episodes": c.episodes,
                "successes": c.successes,
                "success_rate": rounded(c.success_rate),
                "completion_time_s": stat(c.completion_time),
                "max_contact_force_N": stat(c.max_contact_force),
            })
        })
        .collect();
    json!({ "cells": cells })
}

pub fn trajectory_file_name(r: &EpisodeRecord) -> String {
    format!("{}_{}_seed{}.csv", r.env.name(), r.method, r.seed)
}

/// Writes `results.csv`, `summary.json`, `table.md`, `force_profile.csv` and
/// one trajectory CSV per episode under `dir`. Output depends only on `table`.
pub fn emit_report(table: &ResultsTable, dir: &Path) -> crate::Result<()> {
    let traj_dir = dir.join("trajectories");
    fs::create_dir_all(&traj_dir)?;
    write_results_csv(File::create(dir.join("results.csv"))?, table)?;
    let mut summary = serde_json::to_string_pretty(&summary_json(table))?;
    summary.push('\n');
    fs::write(dir.join("summary.json"), summary)?;
    fs::write(dir.join("table.md"), render_table(table))?;
    write_force_profile_csv(File::create(dir.join("force_profile.csv"))?, table)?;
    for r in &table.records {
        write_trajectory_csv(File::create(traj_dir.join(trajectory_file_name(r)))?, &r.metrics.trajectory)?;
    }
    Ok(())
}

/// Writes the per-trial and per-variant outcome of a solver comparison.
pub fn emit_solver_comparison(cmp: &SolverComparison, dir: &Path) -> crate::Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_writer(File::create(dir.join("solver_comparison.csv"))?);
    w.write_record(["seed", "variant", "initial_cost", "final_cost", "decrease"])?;
    for t in &cmp.trials {
        w.write_record([
            t.seed.to_string(),
            t.variant.name().into(),
            fmt_num(t.initial_cost),
            fmt_num(t.final_cost),
            fmt_num(t.decrease),
        ])?;
    }
    w.flush()?;
    let variants: Vec<_> = cmp
        .summary
        .iter()
        .map(|s| json!({ "variant": s.variant.name(), "mean_decrease": rounded(s.mean_decrease), "std_decrease": rounded(s.std_decrease) }))
        .collect();
    let mut text = serde_json::to_string_pretty(&json!({ "variants": variants }))?;
    text.push('\n');
    fs::write(dir.join("solver_comparison.json"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{summarize, ProfileSelection};
    use crate::planner::EpisodeMetrics;
    use crate::sim::TrajectoryRow;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(12.8), "12.8");
        assert_eq!(fmt_num(8.599999999999945), "8.6");
        assert_eq!(fmt_num(1.234567891), "1.23457");
        assert_eq!(fmt_num(-0.000123456789), "-0.000123457");
        assert_eq!(fmt_num(123456.7), "123457");
        assert_eq!(fmt_num(1234567.0), "1.23457e6");
        assert_eq!(fmt_num(1e-7), "1.00000e-7");
    }

    fn table() -> ResultsTable {
        let ep = |success: bool, t: f64| EpisodeMetrics {
            success,
            completion_time: t,
            max_contact_force: t / 10.0,
            final_distance: 0.005,
            trajectory: vec![TrajectoryRow { time: 0.0, q: [0.1; 7], ee: [0.5, 0.0, 0.6], max_contact_force: 0.0 }],
            force_profile: vec![(0.005, 0.0), (0.01, 1.5)],
            cost_histories: vec![vec![1.0, 0.9]],
            failure: (!success).then(|| "timeout".into()),
            wall_time: t * 3.0,
        };
        let mut records = Vec::new();
        for (env, method, seed, success, t) in [
            (EnvKind::Ball, "ours", 0, true, 12.0),
            (EnvKind::Ball, "ours", 1, true, 13.0),
            (EnvKind::Ball, "collision_free", 0, false, 60.0),
            (EnvKind::Ball, "collision_free", 1, false, 60.0),
        ] {
            records.push(EpisodeRecord { env, method: method.into(), seed, metrics: ep(success, t) });
        }
        let cells = ["ours", "collision_free"]
            .iter()
            .map(|m| {
                let eps: Vec<_> = records.iter().filter(|r| r.method == *m).map(|r| &r.metrics).collect();
                summarize(EnvKind::Ball, m, &eps)
            })
            .collect();
        ResultsTable { records, cells, profile: ProfileSelection { env: EnvKind::Ball, seed: 0 } }
    }

    #[test]
    fn results_have_one_row_per_episode_and_fail_cells() {
        let t = table();
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4);
        assert!(text.lines().nth(1).unwrap().starts_with("ball,ours,0,true,12,1.2,0.005,1,"));
        let rendered = render_table(&t);
        assert!(rendered.contains("| collision_free | Fail | Fail | 0/2 |"), "{rendered}");
        assert_eq!(summary_json(&t)["cells"][1]["completion_time_s"], "Fail");
    }

    #[test]
    fn force_profile_schema_and_selection() {
        let mut buf = Vec::new();
        write_force_profile_csv(&mut buf, &table()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "time_s,contact_force_N,method");
        // seed 0 of both methods, two samples each
        assert_eq!(lines.len(), 1 + 4);
        assert_eq!(lines[2], "0.01,1.5,ours");
    }

    #[test]
    fn emitting_twice_is_byte_identical() {
        let t = table();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        emit_report(&t, a.path()).unwrap();
        emit_report(&t, b.path()).unwrap();
        for f in ["results.csv", "summary.json", "table.md", "force_profile.csv", "trajectories/ball_ours_seed1.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }
}
