//! Distribution of logged rotation angles per task across training
//! snapshots: counts, mean, population standard deviation and a histogram
//! over `[-π, π]`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::ThetaRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaSummary {
    pub step: usize,
    pub task_id: usize,
    pub count: usize,
    pub mean: f64,
    /// Population convention: divides by `count`.
    pub std: f64,
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SummaryReport {
    pub summaries: Vec<ThetaSummary>,
    /// One entry per requested snapshot that had no records.
    pub warnings: Vec<String>,
}

/// Uniform bins over `[-π, π]`, left-closed; the last bin also takes `π`.
pub fn bin_index(theta: f64, n_bins: usize) -> usize {
    let width = 2.0 * PI / n_bins as f64;
    let idx = ((theta + PI) / width).floor();
    if idx < 0.0 {
        0
    } else {
        (idx as usize).min(n_bins - 1)
    }
}

/// Mean and population standard deviation, two-pass.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn by_task(records: &[ThetaRecord], step: usize) -> BTreeMap<usize, Vec<f64>> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.step == step) {
        groups.entry(r.task_id).or_default().push(r.theta);
    }
    groups
}

/// One summary per (snapshot, task), in snapshot order then task order.
pub fn summarize(records: &[ThetaRecord], snapshot_steps: &[usize], n_bins: usize) -> Result<SummaryReport> {
    if n_bins < 2 {
        return Err(Error::Analysis(format!("need at least 2 bins, got {n_bins}")));
    }
    let mut report = SummaryReport::default();
    for &step in snapshot_steps {
        let groups = by_task(records, step);
        if groups.is_empty() {
            report.warnings.push(format!("no records at step {step}"));
            continue;
        }
        for (task_id, values) in groups {
            let (mean, std) = mean_std(&values);
            let mut histogram = vec![0; n_bins];
            for &v in &values {
                histogram[bin_index(v, n_bins)] += 1;
            }
            report.summaries.push(ThetaSummary { step, task_id, count: values.len(), mean, std, histogram });
        }
    }
    Ok(report)
}

/// Smallest gap between per-task mean angles at `step`.
pub fn separation(records: &[ThetaRecord], step: usize) -> Result<f64> {
    let means: Vec<f64> = by_task(records, step).values().map(|v| mean_std(v).0).collect();
    if means.len() < 2 {
        return Err(Error::Analysis(format!("separation needs two tasks at step {step}, found {}", means.len())));
    }
    let mut best = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            best = best.min((means[i] - means[j]).abs());
        }
    }
    Ok(best)
}

/// Standard deviation of all angles at `step`, pooled across tasks.
pub fn pooled_std(records: &[ThetaRecord], step: usize) -> Option<f64> {
    let values: Vec<f64> = records.iter().filter(|r| r.step == step).map(|r| r.theta).collect();
    (!values.is_empty()).then(|| mean_std(&values).1)
}

/// Sorted distinct steps present in `records`.
pub fn snapshot_steps(records: &[ThetaRecord]) -> Vec<usize> {
    let mut steps: Vec<usize> = records.iter().map(|r| r.step).collect();
    steps.sort_unstable();
    steps.dedup();
    steps
}

/// `x` rounded to 9 significant digits, printed without exponent.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{}", if x == 0.0 { 0.0 } else { x });
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if decimals > 0 && s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// CSV: `step,task_id,count,mean,std,bin_0,...,bin_{n-1}`.
pub fn write_csv<W: Write>(summaries: &[ThetaSummary], n_bins: usize, mut out: W) -> Result<()> {
    let mut header = String::from("step,task_id,count,mean,std");
    for b in 0..n_bins {
        header.push_str(&format!(",bin_{b}"));
    }
    writeln!(out, "{header}")?;
    for s in summaries {
        let bins: Vec<String> = s.histogram.iter().map(|c| c.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.step,
            s.task_id,
            s.count,
            format_sig9(s.mean),
            format_sig9(s.std),
            bins.join(",")
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(step: usize, task_id: usize, theta: f64) -> ThetaRecord {
        ThetaRecord { step, task_id, expert_index: 0, theta }
    }

    #[test]
    fn all_zero_angles() {
        let records: Vec<_> = (0..10).map(|i| rec(0, i % 2, 0.0)).collect();
        let rep = summarize(&records, &[0], 8).unwrap();
        assert_eq!(rep.summaries.len(), 2);
        for s in &rep.summaries {
            assert_eq!((s.mean, s.std, s.count), (0.0, 0.0, 5));
            assert_eq!(s.histogram[bin_index(0.0, 8)], 5);
            assert_eq!(s.histogram.iter().sum::<usize>(), 5);
        }
    }

    #[test]
    fn two_point_population_std() {
        let rep = summarize(&[rec(3, 0, -1.0), rec(3, 0, 1.0)], &[3], 4).unwrap();
        assert_eq!(rep.summaries[0].mean, 0.0);
        assert_eq!(rep.summaries[0].std, 1.0);
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(-PI, 4), 0);
        assert_eq!(bin_index(PI, 4), 3);
        assert_eq!(bin_index(0.0, 4), 2);
        assert_eq!(bin_index(-1e-12, 4), 1);
    }

    #[test]
    fn missing_snapshot_warns() {
        let rep = summarize(&[rec(0, 0, 0.1)], &[0, 5], 4).unwrap();
        assert_eq!(rep.summaries.len(), 1);
        assert_eq!(rep.warnings.len(), 1);
        assert!(summarize(&[rec(0, 0, 0.1)], &[0], 1).is_err());
    }

    #[test]
    fn separation_examples() {
        let same = [rec(1, 0, 0.3), rec(1, 1, 0.3), rec(1, 0, -0.2), rec(1, 1, -0.2)];
        assert_eq!(separation(&same, 1).unwrap(), 0.0);
        let three = [rec(2, 0, -1.0), rec(2, 1, 0.0), rec(2, 2, 2.0)];
        assert_eq!(separation(&three, 2).unwrap(), 1.0);
        assert!(separation(&[rec(2, 0, 1.0)], 2).is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(std::f64::consts::PI), "3.14159265");
        assert_eq!(format_sig9(-0.001234567891), "-0.00123456789");
    }

    #[test]
    fn csv_layout() {
        let rep = summarize(&[rec(0, 0, 0.5), rec(0, 1, -0.5)], &[0], 3).unwrap();
        let mut buf = Vec::new();
        write_csv(&rep.summaries, 3, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,task_id,count,mean,std,bin_0,bin_1,bin_2");
        assert_eq!(lines[1], "0,0,1,0.5,0,0,1,0");
    }

    proptest! {
        #[test]
        fn histogram_permutation_invariant(mut thetas in prop::collection::vec(-PI..=PI, 1..60), seed in any::<u64>()) {
            let a: Vec<_> = thetas.iter().map(|&t| rec(0, 0, t)).collect();
            let mut rng = crate::numkit::Rng::new(seed);
            for i in (1..thetas.len()).rev() {
                let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                thetas.swap(i, j);
            }
            let b: Vec<_> = thetas.iter().map(|&t| rec(0, 0, t)).collect();
            let sa = &summarize(&a, &[0], 7).unwrap().summaries[0];
            let sb = &summarize(&b, &[0], 7).unwrap().summaries[0];
            prop_assert_eq!(&sa.histogram, &sb.histogram);
            prop_assert_eq!(sa.histogram.iter().sum::<usize>(), thetas.len());
            prop_assert!((sa.mean - sb.mean).abs() < 1e-12);
        }

        #[test]
        fn stats_match_direct_computation(thetas in prop::collection::vec(-3.0f64..3.0, 1..50)) {
            let recs: Vec<_> = thetas.iter().map(|&t| rec(4, 1, t)).collect();
            let s = &summarize(&recs, &[4], 5).unwrap().summaries[0];
            let n = thetas.len() as f64;
            let mean = thetas.iter().sum::<f64>() / n;
            let std = (thetas.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!((s.mean - mean).abs() < 1e-12);
            prop_assert!((s.std - std).abs() < 1e-12);
        }
    }
}
