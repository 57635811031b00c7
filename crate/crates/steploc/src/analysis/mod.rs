//! Statistical analyses over scored runs: rank correlation and greedy feature
//! pruning, accuracy-weighted importance aggregation, 2x2 contingency tests
//! with effect size, and inter-rater agreement.

pub mod forest;

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("vectors must share a length of at least {min}, got {a} and {b}")]
    BadLength { min: usize, a: usize, b: usize },
    #[error("zero variance makes rank correlation undefined")]
    ZeroVariance,
    #[error("pruning needs at least two feature columns")]
    TooFewFeatures,
    #[error("aggregation weights must lie in [0,1] and not all be zero")]
    BadWeights,
    #[error("importance vectors must share one nonzero length")]
    MismatchedImportances,
    #[error("contingency table is empty")]
    EmptyTable,
    #[error("a contingency marginal is zero, so the test is undefined")]
    ZeroMarginal,
    #[error("training needs at least {min} rows, got {got}")]
    TooFewRows { min: usize, got: usize },
    #[error("training labels contain a single class")]
    SingleClassLabels,
    #[error("feature matrix is malformed: {0}")]
    BadMatrix(String),
    #[error("annotation file is malformed: {0}")]
    AnnotationFormat(String),
    #[error("annotation io: {0}")]
    Io(#[from] std::io::Error),
}

/// 1-based ranks with ties replaced by the mean rank of the tied block.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = shared;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(AnalysisError::BadLength { min: 3, a: x.len(), b: y.len() });
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

fn has_variance(column: &[f64]) -> bool {
    column.windows(2).any(|w| w[0] != w[1])
}

/// Greedy decorrelation: walk columns in their given (canonical) order and
/// retain one iff its |rank correlation| with every already-retained column is
/// below the threshold. Zero-variance columns are dropped up front because
/// their correlation is undefined.
pub fn prune_features(
    names: &[String],
    columns: &[Vec<f64>],
    threshold: f64,
) -> Result<Vec<String>, AnalysisError> {
    if names.len() != columns.len() {
        return Err(AnalysisError::BadMatrix(format!(
            "{} names for {} columns",
            names.len(),
            columns.len()
        )));
    }
    if names.len() < 2 {
        return Err(AnalysisError::TooFewFeatures);
    }
    let mut retained: Vec<usize> = Vec::new();
    for i in 0..columns.len() {
        if !has_variance(&columns[i]) {
            continue;
        }
        let mut keep = true;
        for &j in &retained {
            if spearman(&columns[i], &columns[j])?.abs() >= threshold {
                keep = false;
                break;
            }
        }
        if keep {
            retained.push(i);
        }
    }
    Ok(retained.into_iter().map(|i| names[i].clone()).collect())
}

/// Accuracy-weighted mean of importance vectors, expressed as percentages:
/// out_i = 100 * sum_j(a_j * v_j[i]) / sum_j(a_j). With inputs that each sum
/// to one, the output sums to 100.
pub fn aggregate_importance(per_model: &[(f64, Vec<f64>)]) -> Result<Vec<f64>, AnalysisError> {
    if per_model.is_empty() {
        return Err(AnalysisError::BadWeights);
    }
    let dim = per_model[0].1.len();
    if dim == 0 || per_model.iter().any(|(_, v)| v.len() != dim) {
        return Err(AnalysisError::MismatchedImportances);
    }
    if per_model.iter().any(|(a, _)| !(0.0..=1.0).contains(a) || !a.is_finite()) {
        return Err(AnalysisError::BadWeights);
    }
    let total: f64 = per_model.iter().map(|(a, _)| a).sum();
    if total <= 0.0 {
        return Err(AnalysisError::BadWeights);
    }
    Ok((0..dim)
        .map(|i| 100.0 * per_model.iter().map(|(a, v)| a * v[i]).sum::<f64>() / total)
        .collect())
}

/// Solved-by-localized contingency counts: a = yes/yes, b = yes/no,
/// c = no/yes, d = no/no.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ContingencyTable2x2 {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable2x2 {
    /// Tallies paired boolean outcomes into the four cells.
    pub fn from_outcomes(solved: &[bool], localized: &[bool]) -> Result<Self, AnalysisError> {
        if solved.len() != localized.len() || solved.is_empty() {
            return Err(AnalysisError::BadLength { min: 1, a: solved.len(), b: localized.len() });
        }
        let mut t = Self { a: 0, b: 0, c: 0, d: 0 };
        for (&s, &l) in solved.iter().zip(localized) {
            match (s, l) {
                (true, true) => t.a += 1,
                (true, false) => t.b += 1,
                (false, true) => t.c += 1,
                (false, false) => t.d += 1,
            }
        }
        Ok(t)
    }

    /// Total count.
    pub fn n(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    fn marginals(&self) -> [u64; 4] {
        [self.a + self.b, self.c + self.d, self.a + self.c, self.b + self.d]
    }
}

/// Test statistic, tail probability, and signed effect size for one table.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Chi2Outcome {
    pub chi2: f64,
    pub p: f64,
    pub phi: f64,
}

/// Pearson chi-square test of independence on a 2x2 table, with signed phi.
/// The continuity correction shrinks |ad - bc| by n/2 when requested; phi is
/// always uncorrected. Errors when any marginal is zero.
pub fn chi_square_2x2(
    table: &ContingencyTable2x2,
    continuity_correction: bool,
) -> Result<Chi2Outcome, AnalysisError> {
    let n = table.n();
    if n == 0 {
        return Err(AnalysisError::EmptyTable);
    }
    let [r1, r2, c1, c2] = table.marginals();
    if r1 == 0 || r2 == 0 || c1 == 0 || c2 == 0 {
        return Err(AnalysisError::ZeroMarginal);
    }
    let nf = n as f64;
    let det = table.a as f64 * table.d as f64 - table.b as f64 * table.c as f64;
    let denom = r1 as f64 * r2 as f64 * c1 as f64 * c2 as f64;
    let magnitude =
        if continuity_correction { (det.abs() - nf / 2.0).max(0.0) } else { det.abs() };
    let chi2 = nf * magnitude * magnitude / denom;
    Ok(Chi2Outcome { chi2, p: chi_square_p_df1(chi2), phi: det / denom.sqrt() })
}

/// Survival function of the chi-square distribution with one degree of
/// freedom: p = erfc(sqrt(x/2)). Non-positive statistics map to exactly 1.
pub fn chi_square_p_df1(chi2: f64) -> f64 {
    if chi2 <= 0.0 {
        return 1.0;
    }
    erfc((chi2 / 2.0).sqrt())
}

/// Complementary error function via a rational polynomial approximation with
/// absolute error below 1.5e-7, extended to negative input by symmetry.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736
                + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    poly * (-x * x).exp()
}

/// Classifies one test outcome: "weak" when the association is both
/// insignificant (p > 0.01) and small (|phi| < 0.2), "associated" when it is
/// both significant and non-small, otherwise "mixed".
pub fn association_verdict(p: f64, phi: f64) -> &'static str {
    match (p > 0.01, phi.abs() < 0.2) {
        (true, true) => "weak",
        (false, false) => "associated",
        _ => "mixed",
    }
}

/// Cohen's kappa for two binary raters: (p_o - p_e) / (1 - p_e) with
/// marginal-product chance agreement; degenerate p_e = 1 yields 1.
pub fn cohens_kappa(labels_a: &[bool], labels_b: &[bool]) -> Result<f64, AnalysisError> {
    if labels_a.len() != labels_b.len() || labels_a.len() < 2 {
        return Err(AnalysisError::BadLength { min: 2, a: labels_a.len(), b: labels_b.len() });
    }
    let n = labels_a.len() as f64;
    let observed =
        labels_a.iter().zip(labels_b).filter(|(a, b)| a == b).count() as f64 / n;
    let a_yes = labels_a.iter().filter(|&&v| v).count() as f64 / n;
    let b_yes = labels_b.iter().filter(|&&v| v).count() as f64 / n;
    let expected = a_yes * b_yes + (1.0 - a_yes) * (1.0 - b_yes);
    if (1.0 - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((observed - expected) / (1.0 - expected))
}

/// One double-annotated judgment: a sample id, the judged metric, and the two
/// raters' yes/no labels.
#[derive(Debug, Clone, Serialize)]
pub struct AnnotationRow {
    pub id: String,
    pub metric: String,
    pub rater_a: bool,
    pub rater_b: bool,
}

fn parse_judgment(raw: &str) -> Result<bool, AnalysisError> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "yes" | "y" | "1" | "true" => Ok(true),
        "no" | "n" | "0" | "false" => Ok(false),
        other => Err(AnalysisError::AnnotationFormat(format!("bad judgment '{other}'"))),
    }
}

/// Loads annotation pairs from a CSV with header id,metric,rater_a,rater_b.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRow>, AnalysisError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").trim();
    if header != "id,metric,rater_a,rater_b" {
        return Err(AnalysisError::AnnotationFormat(format!("unexpected header '{header}'")));
    }
    let mut rows = Vec::new();
    for (line_no, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(AnalysisError::AnnotationFormat(format!(
                "line {}: expected 4 fields, got {}",
                line_no + 2,
                parts.len()
            )));
        }
        rows.push(AnnotationRow {
            id: parts[0].to_string(),
            metric: parts[1].to_string(),
            rater_a: parse_judgment(parts[2])?,
            rater_b: parse_judgment(parts[3])?,
        });
    }
    Ok(rows)
}

/// Kappa per judged metric, in metric name order.
pub fn kappa_by_metric(rows: &[AnnotationRow]) -> Result<BTreeMap<String, f64>, AnalysisError> {
    let mut grouped: BTreeMap<String, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    for row in rows {
        let entry = grouped.entry(row.metric.clone()).or_default();
        entry.0.push(row.rater_a);
        entry.1.push(row.rater_b);
    }
    grouped
        .into_iter()
        .map(|(metric, (a, b))| cohens_kappa(&a, &b).map(|k| (metric, k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_map_gives_perfect_rank_correlation() {
        let x: Vec<f64> = (1..=6).map(|v| v as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((spearman(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn tied_values_share_an_average_rank() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        let rho = spearman(&[1.0, 2.0, 2.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert!((rho - 0.948_683_298_050_513_8).abs() < 1e-9, "got {rho}");
    }

    #[test]
    fn rank_correlation_rejects_degenerate_input() {
        assert!(matches!(
            spearman(&[1.0, 2.0], &[1.0, 2.0]),
            Err(AnalysisError::BadLength { .. })
        ));
        assert!(matches!(
            spearman(&[3.0, 3.0, 3.0], &[1.0, 2.0, 3.0]),
            Err(AnalysisError::ZeroVariance)
        ));
    }

    #[test]
    fn pruning_keeps_one_of_two_identical_columns() {
        let names: Vec<String> = ["first", "second"].iter().map(|s| s.to_string()).collect();
        let col = vec![1.0, 2.0, 3.0, 4.0];
        let retained = prune_features(&names, &[col.clone(), col], 0.4).unwrap();
        assert_eq!(retained, vec!["first".to_string()]);
    }

    #[test]
    fn pruning_matches_hand_application_on_five_columns() {
        let names: Vec<String> =
            ["alpha", "beta", "gamma", "delta", "epsilon"].iter().map(|s| s.to_string()).collect();
        let alpha = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let beta: Vec<f64> = alpha.iter().map(|v| v * 2.0).collect(); // rho 1 vs alpha
        let gamma: Vec<f64> = alpha.iter().map(|v| 7.0 - v).collect(); // rho -1 vs alpha
        let delta = vec![3.0, 6.0, 1.0, 5.0, 2.0, 4.0]; // |rho| = 0.086 vs alpha
        let epsilon = vec![7.0; 6]; // zero variance, dropped first
        let retained =
            prune_features(&names, &[alpha, beta, gamma, delta, epsilon], 0.4).unwrap();
        assert_eq!(retained, vec!["alpha".to_string(), "delta".to_string()]);
    }

    #[test]
    fn uncorrelated_columns_all_survive_pruning() {
        let names: Vec<String> = ["x", "y"].iter().map(|s| s.to_string()).collect();
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y = vec![3.0, 1.0, 4.0, 2.0]; // rank correlation 0
        let retained = prune_features(&names, &[x, y], 0.4).unwrap();
        assert_eq!(retained.len(), 2);
    }

    #[test]
    fn equal_weights_reduce_aggregation_to_the_plain_mean() {
        let per_model = vec![(0.7, vec![0.6, 0.4]), (0.7, vec![0.2, 0.8])];
        let out = aggregate_importance(&per_model).unwrap();
        assert!((out[0] - 40.0).abs() < 1e-9);
        assert!((out[1] - 60.0).abs() < 1e-9);
        assert!((out.iter().sum::<f64>() - 100.0).abs() < 1e-6);
    }

    #[test]
    fn aggregation_reproduces_the_worked_ratio() {
        // (0.5*0.2 + 1.0*0.4) / 1.5 = 1/3 of the mass
        let per_model = vec![(0.5, vec![0.2, 0.8]), (1.0, vec![0.4, 0.6])];
        let out = aggregate_importance(&per_model).unwrap();
        assert!((out[0] - 33.33).abs() < 0.005, "got {}", out[0]);
    }

    #[test]
    fn aggregation_is_permutation_equivariant_and_guards_weights() {
        let forward = vec![(0.3, vec![0.5, 0.5]), (0.9, vec![0.1, 0.9])];
        let backward: Vec<_> = forward.iter().rev().cloned().collect();
        assert_eq!(
            aggregate_importance(&forward).unwrap(),
            aggregate_importance(&backward).unwrap()
        );
        assert!(matches!(
            aggregate_importance(&[(0.0, vec![1.0])]),
            Err(AnalysisError::BadWeights)
        ));
        assert!(matches!(
            aggregate_importance(&[(1.5, vec![1.0])]),
            Err(AnalysisError::BadWeights)
        ));
        assert!(matches!(
            aggregate_importance(&[(0.5, vec![1.0]), (0.5, vec![0.5, 0.5])]),
            Err(AnalysisError::MismatchedImportances)
        ));
    }

    #[test]
    fn balanced_table_shows_no_association() {
        let table = ContingencyTable2x2 { a: 25, b: 25, c: 25, d: 25 };
        let out = chi_square_2x2(&table, false).unwrap();
        assert_eq!(out.chi2, 0.0);
        assert_eq!(out.p, 1.0, "zero statistic maps to exactly one");
        assert_eq!(out.phi, 0.0);
    }

    #[test]
    fn chi_square_matches_hand_evaluated_closed_form() {
        let table = ContingencyTable2x2 { a: 10, b: 20, c: 30, d: 40 };
        let out = chi_square_2x2(&table, false).unwrap();
        assert!((out.chi2 - 0.793_650_793_650_793_7).abs() < 1e-9, "got {}", out.chi2);
        assert!((out.phi + 0.089_087_080_637_474_27).abs() < 1e-9, "got {}", out.phi);
        let n = table.n() as f64;
        assert!((out.chi2 - n * out.phi * out.phi).abs() < 1e-9, "identity chi2 = n phi^2");
    }

    #[test]
    fn tail_probability_hits_published_anchors() {
        let p = chi_square_p_df1(4.30);
        assert!((p - 0.038).abs() < 0.001, "got {p}");
        let p384 = chi_square_p_df1(3.84);
        assert!((0.049..=0.051).contains(&p384), "got {p384}");
    }

    #[test]
    fn tail_probability_decreases_strictly_in_the_statistic() {
        let mut last = chi_square_p_df1(0.0);
        assert_eq!(last, 1.0);
        for i in 1..=100 {
            let p = chi_square_p_df1(i as f64 * 0.1);
            assert!(p < last, "p must fall as chi2 grows");
            last = p;
        }
    }

    #[test]
    fn continuity_correction_only_shrinks_the_statistic() {
        let table = ContingencyTable2x2 { a: 10, b: 20, c: 30, d: 40 };
        let plain = chi_square_2x2(&table, false).unwrap();
        let corrected = chi_square_2x2(&table, true).unwrap();
        assert!(corrected.chi2 < plain.chi2);
        assert_eq!(corrected.phi, plain.phi, "phi ignores the correction");
    }

    #[test]
    fn zero_marginals_are_rejected() {
        let table = ContingencyTable2x2 { a: 0, b: 0, c: 5, d: 5 };
        assert!(matches!(chi_square_2x2(&table, false), Err(AnalysisError::ZeroMarginal)));
        let empty = ContingencyTable2x2 { a: 0, b: 0, c: 0, d: 0 };
        assert!(matches!(chi_square_2x2(&empty, false), Err(AnalysisError::EmptyTable)));
    }

    #[test]
    fn outcome_tallies_fill_the_expected_cells() {
        let solved = [true, true, false, false, true];
        let localized = [true, false, true, false, true];
        let t = ContingencyTable2x2::from_outcomes(&solved, &localized).unwrap();
        assert_eq!((t.a, t.b, t.c, t.d), (2, 1, 1, 1));
        assert_eq!(t.n(), 5);
    }

    #[test]
    fn erfc_is_anchored_at_zero_and_symmetric() {
        assert!((erfc(0.0) - 1.0).abs() < 1e-6);
        let x = 0.73;
        assert!((erfc(-x) + erfc(x) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn verdict_labels_follow_the_two_threshold_rule() {
        assert_eq!(association_verdict(0.5, 0.05), "weak");
        assert_eq!(association_verdict(0.001, 0.5), "associated");
        assert_eq!(association_verdict(0.001, 0.05), "mixed");
        assert_eq!(association_verdict(0.5, -0.5), "mixed");
        assert_eq!(association_verdict(0.5, -0.05), "weak", "phi is judged by magnitude");
    }

    #[test]
    fn kappa_reproduces_the_hand_example() {
        let a = [true, true, false, false];
        let b = [true, false, false, false];
        let kappa = cohens_kappa(&a, &b).unwrap();
        assert!((kappa - 0.5).abs() < 1e-12, "p_o 0.75, p_e 0.5");
    }

    #[test]
    fn perfect_agreement_gives_kappa_one_even_when_degenerate() {
        let mixed = [true, false, true, false];
        assert_eq!(cohens_kappa(&mixed, &mixed).unwrap(), 1.0);
        let constant = [true, true, true];
        assert_eq!(cohens_kappa(&constant, &constant).unwrap(), 1.0, "p_e = 1 convention");
    }

    #[test]
    fn chance_level_structure_gives_nonpositive_kappa() {
        let constant = [true, true, true, true];
        let mixed = [true, true, false, false];
        assert!(cohens_kappa(&constant, &mixed).unwrap() <= 0.0);
    }

    #[test]
    fn annotations_load_and_group_by_metric() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("annotations.csv");
        std::fs::write(
            &path,
            "id,metric,rater_a,rater_b\n\
             s1,correctness,yes,yes\n\
             s2,correctness,yes,no\n\
             s3,correctness,no,no\n\
             s4,correctness,no,no\n\
             s1,style,yes,yes\n\
             s2,style,no,no\n",
        )
        .expect("write");
        let rows = load_annotations(&path).expect("load");
        assert_eq!(rows.len(), 6);
        let kappas = kappa_by_metric(&rows).expect("kappa");
        assert!((kappas["correctness"] - 0.5).abs() < 1e-12);
        assert_eq!(kappas["style"], 1.0);
    }

    #[test]
    fn annotation_loader_rejects_malformed_files() {
        let dir = tempfile::tempdir().expect("tempdir");
        let bad_header = dir.path().join("bad.csv");
        std::fs::write(&bad_header, "id,metric,a,b\ns1,m,yes,yes\n").expect("write");
        assert!(matches!(
            load_annotations(&bad_header),
            Err(AnalysisError::AnnotationFormat(_))
        ));
        let bad_value = dir.path().join("bad2.csv");
        std::fs::write(&bad_value, "id,metric,rater_a,rater_b\ns1,m,maybe,yes\n")
            .expect("write");
        assert!(matches!(load_annotations(&bad_value), Err(AnalysisError::AnnotationFormat(_))));
    }
}
