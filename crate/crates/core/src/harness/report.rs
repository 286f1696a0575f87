use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use super::config::Method;
use super::run::{read_predictions, read_run, RunRecord};
use crate::batching::RelationIndex;
use crate::metrics::{inconsistent_scenes, MetricsReport, PredictionRow};
use crate::synth::ANSWERS;

/// Mean and sample standard deviation of the defined values.
pub fn mean_std(values: &[Option<f64>]) -> Option<(f64, f64, usize)> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std, v.len()))
}

const COLUMNS: [(&str, fn(&MetricsReport) -> Option<f64>); 7] = [
    ("overall", |m| m.accuracy_overall),
    ("grade", |m| m.accuracy_grade),
    ("whole", |m| m.accuracy_whole),
    ("macula", |m| m.accuracy_macula),
    ("region", |m| m.accuracy_region),
    ("C1", |m| m.c1),
    ("C2", |m| m.c2),
];

/// Row label grouping runs that differ only in seed.
pub fn method_label(run: &RunRecord) -> String {
    let c = &run.config;
    let mut label = match c.method {
        Method::Baseline => "baseline".to_string(),
        Method::Consistency => format!("consistency lambda={} gamma={}", c.lambda, c.gamma),
        Method::Squint => format!("squint squint_lambda={}", c.squint_lambda),
    };
    if c.stop_grad_main && c.method == Method::Consistency {
        label.push_str(" stop_grad_main");
    }
    label
}

fn cell(values: &[Option<f64>]) -> String {
    match mean_std(values) {
        Some((m, s, _)) => format!("{m:6.2} ± {s:5.2}"),
        None => format!("{:>14}", "n/a"),
    }
}

/// Rows = methods, columns = per-type accuracy and C1/C2, mean ± std over seeds.
pub fn method_table(runs: &[RunRecord]) -> String {
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        groups.entry(method_label(r)).or_default().push(r);
    }
    let width = groups.keys().map(String::len).max().unwrap_or(6).max(6);
    let mut out = String::new();
    write!(out, "{:<width$}  runs", "method").unwrap();
    for (name, _) in COLUMNS {
        write!(out, "  {name:>14}").unwrap();
    }
    out.push('\n');
    for (label, members) in &groups {
        write!(out, "{label:<width$}  {:>4}", members.len()).unwrap();
        for (_, get) in COLUMNS {
            let values: Vec<Option<f64>> = members.iter().map(|r| get(&r.metrics)).collect();
            write!(out, "  {}", cell(&values)).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Grid over lambda (rows) and gamma (columns) of the consistency runs, each
/// cell "overall accuracy / C1" averaged over seeds. Baseline runs fill the
/// lambda = 0 row.
pub fn sweep_table(runs: &[RunRecord]) -> String {
    let mut cells: BTreeMap<(u64, u64), Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        let lambda = match r.config.method {
            Method::Baseline => 0.0,
            Method::Consistency => r.config.lambda,
            Method::Squint => continue,
        };
        cells.entry((lambda.to_bits(), r.config.gamma.to_bits())).or_default().push(r);
    }
    let mut lambdas: Vec<f64> = cells.keys().map(|k| f64::from_bits(k.0)).collect();
    let mut gammas: Vec<f64> = cells.keys().map(|k| f64::from_bits(k.1)).collect();
    for v in [&mut lambdas, &mut gammas] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let mut out = String::from("lambda \\ gamma");
    for g in &gammas {
        write!(out, "  {:>17}", format!("gamma={g}")).unwrap();
    }
    out.push('\n');
    for l in &lambdas {
        write!(out, "{:<14}", format!("lambda={l}")).unwrap();
        for g in &gammas {
            let text = match cells.get(&(l.to_bits(), g.to_bits())) {
                Some(members) => {
                    let acc: Vec<_> = members.iter().map(|r| r.metrics.accuracy_overall).collect();
                    let c1: Vec<_> = members.iter().map(|r| r.metrics.c1).collect();
                    let show = |v: &[Option<f64>]| mean_std(v).map_or("n/a".into(), |(m, _, _)| format!("{m:.2}"));
                    format!("{} / {}", show(&acc), show(&c1))
                }
                None => "-".into(),
            };
            write!(out, "  {text:>17}").unwrap();
        }
        out.push('\n');
    }
    out.push_str("(cells: overall accuracy / C1, mean over seeds)\n");
    out
}

fn relations_from_rows(rows: &[PredictionRow]) -> RelationIndex {
    let mut r = RelationIndex::default();
    for row in rows {
        if let Some(m) = row.related_main {
            r.main_to_subs.entry(m).or_default().push(row.qa_id);
            r.sub_to_main.insert(row.qa_id, m);
        }
    }
    r
}

fn answer_name(i: usize) -> &'static str {
    ANSWERS.get(i).copied().unwrap_or("?")
}

/// Scenes where the main question is right but a related sub-question is
/// wrong, at most `limit` per run.
pub fn inconsistency_listing(runs: &[RunRecord], limit: usize) -> String {
    let mut out = String::new();
    for run in runs {
        let rows = match read_predictions(&run.dir) {
            Ok(rows) => rows,
            Err(e) => {
                log::warn!("no predictions for {}: {e}", run.dir.display());
                continue;
            }
        };
        let rel = relations_from_rows(&rows);
        let listing = inconsistent_scenes(&rows, &rel);
        writeln!(out, "{} ({}): {} inconsistent scenes", run.dir.display(), method_label(run), listing.len()).unwrap();
        for (main, wrong) in listing.iter().take(limit) {
            let subs: Vec<String> = wrong
                .iter()
                .map(|s| {
                    format!(
                        "qa {} {} predicted {} expected {}",
                        s.qa_id,
                        s.qtype.as_str(),
                        answer_name(s.predicted),
                        answer_name(s.answer)
                    )
                })
                .collect();
            writeln!(
                out,
                "  scene {} main qa {} = {} (correct); {}",
                main.scene_id,
                main.qa_id,
                answer_name(main.answer),
                subs.join("; ")
            )
            .unwrap();
        }
    }
    out
}

/// Full report over run directories; unreadable runs are skipped.
pub fn report(dirs: &[PathBuf], sweep: bool, listing_limit: usize) -> (String, Vec<RunRecord>) {
    let runs: Vec<RunRecord> = dirs.iter().filter_map(|d| read_run(d)).collect();
    let mut out = method_table(&runs);
    if sweep {
        out.push('\n');
        out.push_str(&sweep_table(&runs));
    }
    out.push('\n');
    out.push_str(&inconsistency_listing(&runs, listing_limit));
    (out, runs)
}
