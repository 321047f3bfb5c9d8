//! Pooled rank-based normal-scores transform.

use crate::error::{Error, Result};
use crate::normal;
use crate::panel::SeriesPanel;

/// Replace every value by `Phi^{-1}((rank - 0.5) / n)`, ranking all
/// observations of the panel jointly. Ties share their average rank.
pub fn cdf_standardize(panel: &SeriesPanel) -> Result<SeriesPanel> {
    let n = panel.total_observations();
    if n == 0 {
        return Err(Error::invalid("cannot standardize an empty panel"));
    }
    let pooled: Vec<f64> = panel
        .series()
        .iter()
        .flat_map(|s| s.values().iter().copied())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));

    let mut scores = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && pooled[order[end]] == pooled[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end share their average.
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let z = normal::quantile((avg_rank - 0.5) / n as f64);
        for &idx in &order[start..end] {
            scores[idx] = z;
        }
        start = end;
    }

    let mut offset = 0;
    let mut out = Vec::with_capacity(panel.len());
    for s in panel.series() {
        let vals = scores[offset..offset + s.len()].to_vec();
        offset += s.len();
        out.push(s.with_values(vals)?);
    }
    SeriesPanel::new(out, panel.min_length())
}
