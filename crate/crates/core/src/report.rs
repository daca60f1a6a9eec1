//! CSV report emission. The JSON artifacts written by the runner keep full
//! precision; these tables are the human-facing views and round only here,
//! at serialization: three decimals for effect-scale numbers, two for t
//! statistics, four for p-values. Missing values serialize as empty fields.
//! Column orders are fixed so repeated runs diff cleanly.

use std::path::PathBuf;

use crate::error::Result;
use crate::runner::Runner;

fn f3(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

fn f2(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

fn f4(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn f1(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.1}")).unwrap_or_default()
}

fn b(v: Option<bool>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes every report table whose stage ran, returning the paths written.
/// Tables for stages that never produced output are skipped, except the
/// stability table, which is emitted header-only when cell search ran but
/// aggregated nothing.
pub fn emit_reports(r: &Runner) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |name: &str, body: Vec<Vec<String>>| -> Result<()> {
        let path = r.out.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        for row in body {
            w.write_record(&row)?;
        }
        w.flush()?;
        written.push(path);
        Ok(())
    };

    if let Some(rank) = &r.rank {
        let mut header = vec!["estimator".to_string()];
        for p in &rank.perturbations {
            header.push(format!("tbar:{p}"));
            header.push(format!("rank:{p}"));
            header.push(format!("skipped:{p}"));
        }
        header.push("worst_rank".to_string());
        header.push("screened".to_string());
        let mut body = vec![header];
        for row in &rank.rows {
            let mut rec = vec![row.estimator.clone()];
            for i in 0..rank.perturbations.len() {
                rec.push(f2(row.t_bar[i]));
                rec.push(row.rank[i].to_string());
                rec.push(row.skipped[i].to_string());
            }
            rec.push(row.worst_rank.to_string());
            rec.push(row.screened.to_string());
            body.push(rec);
        }
        emit("report_rank.csv", body)?;
    }

    if let Some(stats) = &r.ensemble_stats {
        let mut body = vec![vec![
            "q".to_string(),
            "mean_t".to_string(),
            "std_t".to_string(),
            "used".to_string(),
            "skipped".to_string(),
            "overlap_pct".to_string(),
        ]];
        for s in stats {
            body.push(vec![
                s.q.to_string(),
                f2(s.mean_t),
                f2(s.std_t),
                s.used.to_string(),
                s.skipped.to_string(),
                f1(s.overlap_pct),
            ]);
        }
        emit("report_ensemble.csv", body)?;
    }

    if let Some(cal) = &r.calibration {
        let mut body = vec![vec![
            "estimator".to_string(),
            "fold".to_string(),
            "collapsed".to_string(),
            "r2c_train".to_string(),
            "r2c_val".to_string(),
            "restricted_val".to_string(),
            "adjacent_pass".to_string(),
            "adjacent_total".to_string(),
            "extreme_ok".to_string(),
        ]];
        for row in &cal.rows {
            body.push(vec![
                row.estimator.clone(),
                row.fold.to_string(),
                row.collapsed.to_string(),
                f3(row.r2c_train),
                f3(row.r2c_val),
                f3(row.restricted_val),
                row.adjacent_pass.to_string(),
                row.adjacent_total.to_string(),
                b(row.extreme_ok),
            ]);
        }
        emit("report_calibration.csv", body)?;

        let mut body = vec![vec![
            "estimator".to_string(),
            "fold".to_string(),
            "q".to_string(),
            "top_beats_complement".to_string(),
        ]];
        for row in &cal.rows {
            for check in &row.bq {
                body.push(vec![
                    row.estimator.clone(),
                    row.fold.to_string(),
                    check.q.to_string(),
                    b(check.pass),
                ]);
            }
        }
        emit("report_bq.csv", body)?;

        let mut body = vec![vec![
            "estimator".to_string(),
            "fold".to_string(),
            "split".to_string(),
            "bin".to_string(),
            "size".to_string(),
            "model_mean".to_string(),
            "neyman_effect".to_string(),
            "neyman_std".to_string(),
        ]];
        for p in &cal.bins {
            body.push(vec![
                p.estimator.clone(),
                p.fold.to_string(),
                p.split.clone(),
                p.bin.to_string(),
                p.size.to_string(),
                f3(p.model_mean),
                f3(p.neyman_point),
                f3(p.neyman_std),
            ]);
        }
        emit("report_bins.csv", body)?;
    }

    if let Some(stab) = &r.stab {
        let mut body = vec![vec![
            "cell".to_string(),
            "stab".to_string(),
            "run_frequency".to_string(),
            "mean_rank".to_string(),
            "size".to_string(),
            "kept".to_string(),
        ]];
        for row in &stab.rows {
            body.push(vec![
                row.cell.to_string(),
                f3(Some(row.stab)),
                f3(Some(row.run_frequency)),
                f2(row.mean_rank),
                row.size.to_string(),
                (row.stab >= stab.threshold).to_string(),
            ]);
        }
        emit("report_stab.csv", body)?;
    } else if r.covers.is_some() {
        // Cell search ran but aggregated nothing; keep the table's shape.
        emit(
            "report_stab.csv",
            vec![vec![
                "cell".to_string(),
                "stab".to_string(),
                "run_frequency".to_string(),
                "mean_rank".to_string(),
                "size".to_string(),
                "kept".to_string(),
            ]],
        )?;
    }

    if let Some(eval) = &r.evaluation {
        let mut body = vec![vec![
            "cell".to_string(),
            "stab".to_string(),
            "train_events".to_string(),
            "train_size".to_string(),
            "train_effect".to_string(),
            "train_std".to_string(),
            "train_t".to_string(),
            "test_events".to_string(),
            "test_size".to_string(),
            "test_effect".to_string(),
            "test_std".to_string(),
            "test_t".to_string(),
            "val_mean_t".to_string(),
            "val_std_t".to_string(),
            "val_contexts".to_string(),
        ]];
        for row in &eval.rows {
            let split = |s: &Option<crate::runner::SubgroupStats>| -> [String; 5] {
                match s {
                    Some(s) => [
                        s.events.to_string(),
                        s.size.to_string(),
                        f3(Some(s.effect)),
                        f3(Some(s.std)),
                        f2(s.t),
                    ],
                    None => Default::default(),
                }
            };
            let train = split(&row.train);
            let test = split(&row.test);
            let mut rec = vec![row.label.clone(), f3(row.stab)];
            rec.extend(train);
            rec.extend(test);
            rec.push(f2(row.val_mean_t));
            rec.push(f2(row.val_std_t));
            rec.push(row.val_contexts.to_string());
            body.push(rec);
        }
        emit("report_cells.csv", body)?;

        if !eval.overlap.is_empty() {
            let cells: Vec<String> = eval
                .rows
                .iter()
                .filter(|r| r.cell.is_some())
                .map(|r| r.label.clone())
                .collect();
            let mut header = vec!["cell".to_string()];
            header.extend(cells.iter().cloned());
            let mut body = vec![header];
            for (i, name) in cells.iter().enumerate() {
                let mut rec = vec![name.clone()];
                rec.extend(eval.overlap[i].iter().map(|c| c.to_string()));
                body.push(rec);
            }
            emit("report_overlap.csv", body)?;
        }

        if let Some(holm) = &eval.holm {
            let mut body = vec![vec![
                "order".to_string(),
                "cell".to_string(),
                "t".to_string(),
                "p".to_string(),
                "cutoff".to_string(),
                "reject".to_string(),
            ]];
            for (i, row) in holm.rows.iter().enumerate() {
                body.push(vec![
                    (i + 1).to_string(),
                    row.label.clone(),
                    f2(Some(row.t)),
                    f4(Some(row.p)),
                    f4(Some(row.cutoff)),
                    row.reject.to_string(),
                ]);
            }
            emit("report_holm.csv", body)?;
        }
    }

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::{demo_config, Runner, Stage};
    use tempfile::TempDir;

    #[test]
    fn rounding_helpers_blank_out_missing() {
        assert_eq!(f3(Some(-0.0164999)), "-0.016");
        assert_eq!(f2(Some(-1.648)), "-1.65");
        assert_eq!(f4(Some(0.0167)), "0.0167");
        assert_eq!(f3(None), "");
        assert_eq!(b(None), "");
        assert_eq!(b(Some(true)), "true");
    }

    #[test]
    fn full_run_emits_fixed_header_tables() -> anyhow::Result<()> {
        let dir = TempDir::new()?;
        let mut cfg = demo_config();
        cfg.report_pvalues = true;
        let mut runner = Runner::new(cfg, dir.path().to_path_buf())?;
        runner.run_to(Stage::Evaluate)?;
        let written = emit_reports(&runner)?;
        let names: Vec<&str> = written
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap())
            .collect();
        for expected in [
            "report_rank.csv",
            "report_ensemble.csv",
            "report_calibration.csv",
            "report_bq.csv",
            "report_bins.csv",
            "report_stab.csv",
            "report_cells.csv",
        ] {
            assert!(names.contains(&expected), "missing {expected}");
        }
        let cells = std::fs::read_to_string(dir.path().join("report_cells.csv"))?;
        let mut lines = cells.lines();
        assert!(lines.next().unwrap().starts_with("cell,stab,train_events"));
        let all = lines.next().expect("population row");
        assert!(all.starts_with("All,,"), "population row first: {all}");
        // Effects carry three decimals, t two; spot-check the All row.
        let fields: Vec<&str> = all.split(',').collect();
        assert_eq!(fields[4].split('.').nth(1).map(str::len), Some(3));
        Ok(())
    }

    #[test]
    fn partial_run_emits_only_available_tables() -> anyhow::Result<()> {
        let dir = TempDir::new()?;
        let mut runner = Runner::new(demo_config(), dir.path().to_path_buf())?;
        runner.run_to(Stage::Rank)?;
        let written = emit_reports(&runner)?;
        let names: Vec<&str> = written
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap())
            .collect();
        assert!(names.contains(&"report_rank.csv"));
        assert!(!names.iter().any(|n| n.contains("cells")));
        assert!(!names.iter().any(|n| n.contains("stab")));
        Ok(())
    }
}
