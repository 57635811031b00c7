//! Markdown report rendering and shared CSV plumbing.
//!
//! The renderer is a pure function of the stage summaries, so identical runs
//! produce byte-identical reports. Setting rows appear in canonical order and
//! cells without data hold an explicit placeholder.

use std::fmt::Write as _;
use std::path::Path;

use crate::metrics::fmt_pct;
use crate::pipeline::{AnalysisSummary, MetricsSummary, SettingSummary};
use crate::prompting::{PromptSetting, ALL_SETTINGS};

/// Placeholder for table cells with no defined value.
pub const EMPTY_CELL: &str = "\u{2014}";

/// Quotes a CSV field when it contains a delimiter, quote, or line break.
pub fn csv_field(raw: &str) -> String {
    if raw.contains(',') || raw.contains('"') || raw.contains('\n') || raw.contains('\r') {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

/// Writes a CSV file with a fixed header; fields are quoted as needed.
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut out = String::with_capacity(header.len() + rows.len() * 32);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        let line: Vec<String> = row.iter().map(|f| csv_field(f)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

fn pct_cell(v: Option<f64>) -> String {
    v.map(fmt_pct).unwrap_or_else(|| EMPTY_CELL.to_string())
}

fn push_table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}|", header.iter().map(|_| " --- ").collect::<Vec<_>>().join("|"));
    for row in rows {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out.push('\n');
}

fn accuracy_rows(metrics: &MetricsSummary) -> Vec<Vec<String>> {
    let by_key: std::collections::BTreeMap<&str, &SettingSummary> =
        metrics.settings.iter().map(|s| (s.setting.as_str(), s)).collect();
    // highest accuracy among this model's prompt settings gets bolded
    let best = metrics
        .settings
        .iter()
        .filter(|s| s.setting != PromptSetting::RandomBaseline.key())
        .map(|s| s.accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut rows = Vec::new();
    for setting in ALL_SETTINGS {
        let label = setting.label().to_string();
        match by_key.get(setting.key()) {
            Some(s) => {
                let accuracy = if setting != PromptSetting::RandomBaseline && s.accuracy == best {
                    format!("**{}**", fmt_pct(s.accuracy))
                } else {
                    fmt_pct(s.accuracy)
                };
                rows.push(vec![
                    label,
                    s.n_scored.to_string(),
                    s.n_excluded.to_string(),
                    s.n_unparsed.to_string(),
                    accuracy,
                    fmt_pct(s.incorrect_share),
                    pct_cell(s.window_1),
                    pct_cell(s.window_2),
                ]);
            }
            None => {
                let mut row = vec![label];
                row.extend(std::iter::repeat(EMPTY_CELL.to_string()).take(7));
                rows.push(row);
            }
        }
    }
    rows
}

/// Renders the full Markdown report from the metrics summary and, when the
/// analysis stage ran, the analysis summary.
pub fn render_markdown(metrics: &MetricsSummary, analysis: Option<&AnalysisSummary>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# First-Error Localization Report\n");
    let _ = writeln!(out, "- Model: {}", metrics.model_id);
    let _ = writeln!(out, "- Dataset: {}", metrics.dataset);
    let _ = writeln!(out, "- Problems: {}", metrics.n_problems);
    let _ = writeln!(out, "- Attempts: {}", metrics.n_attempts);
    let _ = writeln!(out, "- Random baseline runs: {}", metrics.n_random_runs);
    let _ = writeln!(out, "- Config hash: `{}`", metrics.config_hash);
    out.push('\n');

    let _ = writeln!(out, "## Corpus statistics\n");
    let _ = writeln!(out, "Spread is the population standard deviation.\n");
    let stat_rows: Vec<Vec<String>> = metrics
        .corpus_stats
        .dimensions
        .iter()
        .map(|d| {
            vec![
                d.dimension.clone(),
                fmt4(d.min),
                fmt4(d.max),
                fmt4(d.median),
                fmt4(d.mean),
                fmt4(d.std),
            ]
        })
        .collect();
    push_table(&mut out, &["Dimension", "Min", "Max", "Median", "Mean", "Std"], &stat_rows);

    if let Some(solve) = &metrics.solve {
        let _ = writeln!(out, "## Reference solving\n");
        let _ = writeln!(
            out,
            "The model solved {} of {} problems from scratch (final answer matched gold).\n",
            solve.n_solved, solve.n_problems
        );
    }

    let _ = writeln!(out, "## Exact localization accuracy\n");
    let _ = writeln!(
        out,
        "Unparsed replies count as incorrect. The best accuracy across the \
         model's prompt settings is bolded; the window columns score only \
         incorrect predictions, within k steps of the annotated first error.\n"
    );
    push_table(
        &mut out,
        &[
            "Setting",
            "Scored",
            "Excluded",
            "Unparsed",
            "Accuracy (%)",
            "Incorrect (%)",
            "Within 1 (%)",
            "Within 2 (%)",
        ],
        &accuracy_rows(metrics),
    );
    let excluded_total: usize = metrics.settings.iter().map(|s| s.n_excluded).sum();
    if excluded_total > 0 {
        let _ = writeln!(
            out,
            "{excluded_total} attempt(s) were excluded from scoring because their \
             corrected solution failed the answer gate (invalid correction).\n"
        );
    }

    if let Some(corrections) = &metrics.corrections {
        let _ = writeln!(out, "## Corrected solutions\n");
        let _ = writeln!(
            out,
            "{} corrections generated: {} valid (final answer matches gold), {} invalid.",
            corrections.total, corrections.valid, corrections.invalid
        );
        let _ = writeln!(
            out,
            "Step-level audit: {} valid correction(s) left the annotated error step \
             textually unchanged.\n",
            corrections.uncorrected_error_step
        );
    }

    if !metrics.recall.is_empty() {
        let _ = writeln!(out, "## Semantic recall of the pre-error prefix\n");
        let _ = writeln!(
            out,
            "Mean over attempts of token-level recall of the student's steps before \
             the first error against the reference solution. Attempts whose error is \
             at step 1 have no prefix and score 0.\n"
        );
        let recall_rows: Vec<Vec<String>> = metrics
            .recall
            .iter()
            .map(|r| {
                vec![
                    r.reference.clone(),
                    r.n.to_string(),
                    r.n_empty_prefix.to_string(),
                    fmt4(r.mean),
                ]
            })
            .collect();
        push_table(
            &mut out,
            &["Reference", "Attempts", "Empty prefixes", "Mean recall"],
            &recall_rows,
        );
    }

    if !metrics.distances.is_empty() {
        let _ = writeln!(out, "## Normalized distance histogram\n");
        let _ = writeln!(
            out,
            "Signed (predicted - actual) / step count for every parsed \
             prediction (exact hits sit in the zero bin), bucketed per \
             setting and annotated error type.\n"
        );
        let mut centers: Vec<f64> = metrics.distances.iter().map(|d| d.bin_center).collect();
        centers.sort_by(f64::total_cmp);
        centers.dedup();
        let mut header: Vec<String> = vec!["Setting".into(), "Error type".into()];
        header.extend(centers.iter().map(|c| fmt4(*c)));
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut groups: Vec<(String, String)> = metrics
            .distances
            .iter()
            .map(|d| (d.setting.clone(), d.error_type.clone()))
            .collect();
        groups.dedup();
        let rows: Vec<Vec<String>> = groups
            .iter()
            .map(|(setting, error_type)| {
                let mut row = vec![setting.clone(), error_type.clone()];
                for center in &centers {
                    let count = metrics
                        .distances
                        .iter()
                        .find(|d| {
                            d.setting == *setting
                                && d.error_type == *error_type
                                && d.bin_center == *center
                        })
                        .map(|d| d.count)
                        .unwrap_or(0);
                    row.push(count.to_string());
                }
                row
            })
            .collect();
        push_table(&mut out, &header_refs, &rows);
    }

    if let Some(analysis) = analysis {
        if !analysis.chi2.is_empty() {
            let _ = writeln!(out, "## Solving ability vs localization\n");
            let _ = writeln!(
                out,
                "Counts: a = solved and localized, b = solved only, c = localized \
                 only, d = neither. Chi-square with 1 degree of freedom; phi is the \
                 signed association.\n"
            );
            let chi2_rows: Vec<Vec<String>> = analysis
                .chi2
                .iter()
                .map(|r| {
                    vec![
                        r.label.clone(),
                        r.a.to_string(),
                        r.b.to_string(),
                        r.c.to_string(),
                        r.d.to_string(),
                        r.chi2.map(fmt4).unwrap_or_else(|| EMPTY_CELL.into()),
                        r.p.map(fmt4).unwrap_or_else(|| EMPTY_CELL.into()),
                        r.phi.map(fmt4).unwrap_or_else(|| EMPTY_CELL.into()),
                        r.verdict.clone(),
                    ]
                })
                .collect();
            push_table(
                &mut out,
                &["Setting", "a", "b", "c", "d", "Chi2", "p", "Phi", "Verdict"],
                &chi2_rows,
            );
        }

        if !analysis.pruned_features.is_empty() {
            let _ = writeln!(out, "## Feature importance\n");
            let _ = writeln!(
                out,
                "Features retained after rank-correlation pruning: {}.\n",
                analysis.pruned_features.join(", ")
            );
            if !analysis.importance.is_empty() {
                let _ = writeln!(
                    out,
                    "Gini importance aggregated across per-setting forests, weighted \
                     by each forest's training accuracy; values sum to 100.\n"
                );
                let importance_rows: Vec<Vec<String>> = analysis
                    .importance
                    .iter()
                    .map(|r| vec![r.feature.clone(), fmt4(r.importance_pct)])
                    .collect();
                push_table(&mut out, &["Feature", "Importance (%)"], &importance_rows);
            }
        }

        if !analysis.fit.is_empty() {
            let _ = writeln!(out, "## Forest fit quality\n");
            let _ = writeln!(
                out,
                "Training-set scores (no held-out split); the depth-1 stump is the \
                 single-feature baseline.\n"
            );
            let fit_rows: Vec<Vec<String>> = analysis
                .fit
                .iter()
                .map(|r| {
                    vec![
                        r.setting.clone(),
                        fmt4(r.forest_f1_mean),
                        fmt4(r.forest_accuracy_mean),
                        fmt4(r.stump_f1),
                    ]
                })
                .collect();
            push_table(
                &mut out,
                &["Setting", "Forest F1", "Forest accuracy", "Stump F1"],
                &fit_rows,
            );
        }

        if !analysis.kappa.is_empty() {
            let _ = writeln!(out, "## Annotation agreement\n");
            let kappa_rows: Vec<Vec<String>> = analysis
                .kappa
                .iter()
                .map(|r| vec![r.metric.clone(), fmt4(r.kappa), r.n.to_string()])
                .collect();
            push_table(&mut out, &["Metric", "Cohen's kappa", "Pairs"], &kappa_rows);
        }

        if !analysis.notes.is_empty() {
            let _ = writeln!(out, "## Notes\n");
            for note in &analysis.notes {
                let _ = writeln!(out, "- {note}");
            }
            out.push('\n');
        }
    }
    out
}
