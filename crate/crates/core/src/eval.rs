//! Session metrics and result files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::protocol::{Benchmark, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class_id: usize,
    pub correct: usize,
    pub total: usize,
}

/// Top-1 accuracy over all classes seen up to one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub session: usize,
    pub num_classes: usize,
    pub per_class: Vec<ClassCount>,
    /// Percent.
    pub acc: f64,
}

fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

impl SessionResult {
    /// Tallies predictions; every label must be in `allowed`.
    pub fn from_predictions(
        session: usize,
        labels: &[usize],
        preds: &[usize],
        allowed: &[usize],
    ) -> Result<Self> {
        if labels.len() != preds.len() {
            return Err(Error::Dimension(format!(
                "{} labels, {} predictions",
                labels.len(),
                preds.len()
            )));
        }
        let mut counts: BTreeMap<usize, (usize, usize)> =
            allowed.iter().map(|&c| (c, (0, 0))).collect();
        for (&y, &p) in labels.iter().zip(preds) {
            let e = counts.get_mut(&y).ok_or_else(|| {
                Error::Data(format!("test label {y} not seen by session {session}"))
            })?;
            e.1 += 1;
            if p == y {
                e.0 += 1;
            }
        }
        Ok(Self::from_counts(
            session,
            counts
                .into_iter()
                .map(|(class_id, (correct, total))| ClassCount {
                    class_id,
                    correct,
                    total,
                })
                .collect(),
        ))
    }

    pub fn from_counts(session: usize, per_class: Vec<ClassCount>) -> Self {
        let correct = per_class.iter().map(|c| c.correct).sum();
        let total = per_class.iter().map(|c| c.total).sum();
        Self {
            session,
            num_classes: per_class.len(),
            acc: percent(correct, total),
            per_class,
        }
    }

    /// Accuracy restricted to `classes`, with its tallies.
    pub fn subset(&self, classes: &BTreeSet<usize>) -> (f64, usize, usize) {
        let (c, t) = self
            .per_class
            .iter()
            .filter(|x| classes.contains(&x.class_id))
            .fold((0, 0), |(c, t), x| (c + x.correct, t + x.total));
        (percent(c, t), c, t)
    }
}

/// Evaluates the state over the test samples of every class up to `s`.
pub fn evaluate_session(state: &TrainState, bench: &Benchmark, s: usize) -> Result<SessionResult> {
    if state.session.is_none_or(|x| x < s) {
        return Err(Error::State(format!("session {s} has not been trained")));
    }
    let allowed = bench.classes_upto(s);
    let set: BTreeSet<usize> = allowed.iter().copied().collect();
    let test: Vec<_> = bench
        .dataset
        .test
        .iter()
        .filter(|x| set.contains(&x.class_id))
        .collect();
    let images: Vec<_> = test.iter().map(|x| &x.image).collect();
    let labels: Vec<usize> = test.iter().map(|x| x.class_id).collect();
    let preds = state.predict(bench, &images)?;
    SessionResult::from_predictions(s, &labels, &preds, &allowed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub sessions: Vec<SessionResult>,
    pub base_classes: Vec<usize>,
    /// Mean session accuracy.
    pub aa: f64,
    /// Final-session accuracy.
    pub acc: f64,
    /// Final-session accuracy on base classes.
    pub base: f64,
    /// Final-session accuracy on incremental classes; absent with one session.
    pub inc: Option<f64>,
    /// Final accuracy minus a baseline's final accuracy.
    pub fi: Option<f64>,
}

/// Final accuracy improvement over a baseline.
pub fn final_improvement(ours: f64, baseline: f64) -> f64 {
    ours - baseline
}

pub fn summarize(
    run_id: &str,
    seed: u64,
    results: Vec<SessionResult>,
    base_classes: &[usize],
    baseline_final: Option<f64>,
) -> Result<RunSummary> {
    let last = results
        .last()
        .ok_or_else(|| Error::Data("no session results".into()))?;
    let base_set: BTreeSet<usize> = base_classes.iter().copied().collect();
    let inc_set: BTreeSet<usize> = last
        .per_class
        .iter()
        .map(|c| c.class_id)
        .filter(|c| !base_set.contains(c))
        .collect();
    let acc = last.acc;
    let (base, _, _) = last.subset(&base_set);
    let inc = (!inc_set.is_empty()).then(|| last.subset(&inc_set).0);
    let aa = results.iter().map(|r| r.acc).sum::<f64>() / results.len() as f64;
    Ok(RunSummary {
        run_id: run_id.to_string(),
        seed,
        base_classes: base_classes.to_vec(),
        aa,
        acc,
        base,
        inc,
        fi: baseline_final.map(|b| final_improvement(acc, b)),
        sessions: results,
    })
}

fn fmt1(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.1}")).unwrap_or_default()
}

/// One JSON record per session.
pub fn results_jsonl(summary: &RunSummary) -> String {
    let mut out = String::new();
    for r in &summary.sessions {
        let rec = json!({
            "run_id": summary.run_id,
            "seed": summary.seed,
            "session": r.session,
            "num_classes": r.num_classes,
            "acc": r.acc,
            "per_class": r.per_class,
        });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out
}

pub const CSV_HEADER: &str = "run_id,session,acc,aa,base,inc,fi";

/// Header plus one row for the final session of the run.
pub fn summary_csv(summary: &RunSummary) -> String {
    let last = summary.sessions.last().map_or(0, |r| r.session);
    format!(
        "{CSV_HEADER}\n{},{},{},{},{},{},{}\n",
        summary.run_id,
        last,
        fmt1(Some(summary.acc)),
        fmt1(Some(summary.aa)),
        fmt1(Some(summary.base)),
        fmt1(summary.inc),
        fmt1(summary.fi),
    )
}

/// Session-accuracy line chart.
pub fn curve_svg(summary: &RunSummary) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let n = summary.sessions.len();
    let x = |i: usize| {
        if n <= 1 {
            w / 2.0
        } else {
            pad + (w - 2.0 * pad) * i as f64 / (n - 1) as f64
        }
    };
    let y = |acc: f64| h - pad - (h - 2.0 * pad) * acc / 100.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad
    );
    for tick in [0, 25, 50, 75, 100] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{tick}</text>"#,
            pad - 4.0,
            y(tick as f64) + 3.0
        );
    }
    let points: Vec<String> = summary
        .sessions
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{:.2},{:.2}", x(i), y(r.acc)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" stroke="steelblue" stroke-width="2" fill="none"/>"#,
        points.join(" ")
    );
    for (i, r) in summary.sessions.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
            x(i),
            y(r.acc)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" font-size="10" text-anchor="middle">{}</text>"#,
            x(i),
            h - pad + 14.0,
            r.session
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-size="12" text-anchor="middle">{} (AA {:.1})</text>"#,
        w / 2.0,
        summary.run_id,
        summary.aa
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `results.jsonl`, `summary.csv`, `summary.json` and `curve.svg`.
pub fn emit(summary: &RunSummary, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("results.jsonl"), results_jsonl(summary))?;
    std::fs::write(out_dir.join("summary.csv"), summary_csv(summary))?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(summary)? + "\n",
    )?;
    std::fs::write(out_dir.join("curve.svg"), curve_svg(summary))?;
    Ok(())
}

pub fn load_summary(out_dir: &Path) -> Result<RunSummary> {
    Ok(serde_json::from_str(&std::fs::read_to_string(
        out_dir.join("summary.json"),
    )?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(session: usize, counts: &[(usize, usize, usize)]) -> SessionResult {
        SessionResult::from_counts(
            session,
            counts
                .iter()
                .map(|&(class_id, correct, total)| ClassCount {
                    class_id,
                    correct,
                    total,
                })
                .collect(),
        )
    }

    #[test]
    fn accuracy_from_counts() {
        assert_eq!(result(0, &[(0, 7, 10)]).acc, 70.0);
        let r = SessionResult::from_predictions(0, &[0, 1, 1], &[0, 1, 1], &[0, 1]).unwrap();
        assert_eq!(r.acc, 100.0);
        assert!(SessionResult::from_predictions(0, &[2], &[2], &[0, 1]).is_err());
    }

    #[test]
    fn summary_metrics() {
        let rs = vec![
            result(0, &[(0, 8, 10)]),
            result(1, &[(0, 7, 10), (1, 7, 10)]),
            result(2, &[(0, 6, 10), (1, 5, 10), (2, 7, 10)]),
        ];
        let s = summarize("r", 0, rs, &[0], Some(50.0)).unwrap();
        assert!((s.aa - (80.0 + 70.0 + 60.0) / 3.0).abs() < 1e-12);
        assert_eq!(s.acc, 60.0);
        assert_eq!(s.base, 60.0);
        assert_eq!(s.inc, Some(60.0));
        assert_eq!(s.fi, Some(10.0));
        assert!((final_improvement(70.3, 63.6) - 6.7).abs() < 1e-9);
    }

    #[test]
    fn csv_format() {
        let s = summarize("run", 3, vec![result(0, &[(0, 2, 3)])], &[0], None).unwrap();
        assert_eq!(
            summary_csv(&s),
            "run_id,session,acc,aa,base,inc,fi\nrun,0,66.7,66.7,66.7,,\n"
        );
    }
}
