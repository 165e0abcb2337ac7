use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,iter,l_gc,l_rec_p,l_rec_f,l_total,n_sel,lr,rank_corr";

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub epoch: usize,
    /// Global iteration counter across epochs.
    pub iter: u64,
    pub l_gc: f64,
    pub l_rec_p: f64,
    pub l_rec_f: f64,
    pub l_total: f64,
    pub n_sel: usize,
    pub lr: f64,
    /// Mean Spearman correlation between teacher scores and per-patch loss
    /// over the batch's masked patches.
    pub rank_corr: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{},{:e},{:e}",
            self.epoch,
            self.iter,
            self.l_gc,
            self.l_rec_p,
            self.l_rec_f,
            self.l_total,
            self.n_sel,
            self.lr,
            self.rank_corr
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::InvalidArgument(format!("malformed metrics row `{line}`"));
        if f.len() != 9 {
            return Err(bad());
        }
        let fl = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(StepMetrics {
            epoch: f[0].parse().map_err(|_| bad())?,
            iter: f[1].parse().map_err(|_| bad())?,
            l_gc: fl(2)?,
            l_rec_p: fl(3)?,
            l_rec_f: fl(4)?,
            l_total: fl(5)?,
            n_sel: f[6].parse().map_err(|_| bad())?,
            lr: fl(7)?,
            rank_corr: fl(8)?,
        })
    }
}

pub fn to_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

pub fn write_csv(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    std::fs::write(path, to_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::InvalidArgument(format!("{}: missing metrics header", path.display())));
    }
    lines.filter(|l| !l.trim().is_empty()).map(StepMetrics::parse_row).collect()
}

/// Per-epoch means of `f` in epoch order.
pub fn epoch_means(rows: &[StepMetrics], f: impl Fn(&StepMetrics) -> f64) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((e, s, n)) if *e == r.epoch => {
                *s += f(r);
                *n += 1;
            }
            _ => out.push((r.epoch, f(r), 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

/// Ranks starting at 1, ties receiving the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho as the Pearson correlation of average ranks. `None` when
/// fewer than two values or either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Mean of the defined values, 0 when none are.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.into_iter().flatten() {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(spearman(&[1.0], &[1.0]), None);
        // classic no-tie formula 1 - 6 sum d^2 / (n (n^2 - 1))
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 1.0, 4.0, 3.0, 5.0];
        let want = 1.0 - 6.0 * 4.0 / (5.0 * 24.0);
        assert!((spearman(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_and_epoch_means() {
        let rows: Vec<StepMetrics> = (0..4)
            .map(|i| StepMetrics {
                epoch: i / 2,
                iter: i as u64,
                l_gc: 0.1 * i as f64,
                l_rec_p: 1.0 / (i + 1) as f64,
                l_rec_f: 0.0,
                l_total: 3.25,
                n_sel: i,
                lr: 1e-3,
                rank_corr: -0.5,
            })
            .collect();
        let text = to_csv(&rows);
        assert!(text.starts_with(CSV_HEADER));
        let parsed: Vec<StepMetrics> = text.lines().skip(1).map(|l| StepMetrics::parse_row(l).unwrap()).collect();
        assert_eq!(parsed, rows);
        let means = epoch_means(&rows, |r| r.l_rec_p);
        assert_eq!(means, vec![(0, 0.75), (1, (1.0 / 3.0 + 0.25) / 2.0)]);
        assert!(StepMetrics::parse_row("1,2,3").is_err());
    }

    proptest! {
        #[test]
        fn spearman_bounded_and_monotone_invariant(v in prop::collection::vec(-100.0f64..100.0, 2..30)) {
            let w: Vec<f64> = v.iter().map(|x| x.powi(3) + 7.0).collect();
            if let Some(r) = spearman(&v, &w) {
                prop_assert!((r - 1.0).abs() < 1e-12);
            }
            let rev: Vec<f64> = v.iter().rev().cloned().collect();
            if let Some(r) = spearman(&v, &rev) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            }
        }
    }
}
