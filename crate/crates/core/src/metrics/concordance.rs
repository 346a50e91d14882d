//! Harrell's concordance index.

use crate::domain::SurvivalLabel;
use crate::error::{Error, Result};

/// Binary indexed tree over compressed risk ranks.
struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks strictly below `rank`.
    fn count_below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Fraction of comparable pairs ordered correctly by risk.
///
/// A pair `(i, j)` is comparable when `T_i < T_j` and `E_i = 1`; it is
/// concordant when `r_i > r_j`, and a tie in risk earns half credit.
pub fn concordance(risks: &[f64], labels: &[SurvivalLabel]) -> Result<f64> {
    if risks.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: risks.len(),
        });
    }
    if risks.iter().any(|r| !r.is_finite()) || labels.iter().any(|l| !l.time.is_finite()) {
        return Err(Error::NonFinite("concordance input".into()));
    }

    let mut distinct = risks.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let rank = |r: f64| distinct.partition_point(|&x| x < r);

    let mut order: Vec<usize> = (0..risks.len()).collect();
    order.sort_by(|&a, &b| labels[b].time.total_cmp(&labels[a].time));

    // Walk times from largest to smallest; the tree holds every sample with a
    // strictly later time than the current group.
    let mut tree = Fenwick::new(distinct.len());
    let mut inserted: u64 = 0;
    let mut twice_concordant: u64 = 0;
    let mut comparable: u64 = 0;
    let mut g = 0;
    while g < order.len() {
        let t = labels[order[g]].time;
        let mut end = g;
        while end < order.len() && labels[order[end]].time == t {
            end += 1;
        }
        for &i in &order[g..end] {
            if labels[i].event && inserted > 0 {
                let k = rank(risks[i]);
                let lower = tree.count_below(k);
                let tied = tree.count_below(k + 1) - lower;
                twice_concordant += 2 * lower + tied;
                comparable += inserted;
            }
        }
        for &i in &order[g..end] {
            tree.add(rank(risks[i]));
            inserted += 1;
        }
        g = end;
    }

    if comparable == 0 {
        return Err(Error::UndefinedMetric("no comparable pairs".into()));
    }
    Ok((twice_concordant as f64 * 0.5) / comparable as f64)
}
