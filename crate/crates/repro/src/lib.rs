//! Verdict bookkeeping for the end-to-end acceptance checks.

use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {:>2} {}: {}", self.id, self.name, self.detail)
    }
}

#[derive(Debug, Default)]
pub struct Report {
    verdicts: Vec<Verdict>,
}

impl Report {
    /// Records a verdict and prints its line immediately, so a long run shows
    /// progress.
    pub fn record(
        &mut self,
        id: usize,
        name: &'static str,
        passed: bool,
        detail: impl Into<String>,
    ) {
        let v = Verdict {
            id,
            name,
            passed,
            detail: detail.into(),
        };
        println!("{v}");
        self.verdicts.push(v);
    }

    pub fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    pub fn failed(&self) -> Vec<usize> {
        self.verdicts
            .iter()
            .filter(|v| !v.passed)
            .map(|v| v.id)
            .collect()
    }
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_samples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn verdict_lines_and_failures() {
        let mut r = Report::default();
        r.record(1, "first", true, "ok");
        r.record(2, "second", false, "ratio 1.5");
        assert_eq!(r.verdicts()[1].to_string(), "[FAIL]  2 second: ratio 1.5");
        assert_eq!(r.failed(), vec![2]);
    }
}
