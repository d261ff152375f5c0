//! Accuracy metrics and PCA projection of embeddings.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::shiftgen::Split;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricReport {
    pub split: String,
    pub overall: f64,
    pub per_group: BTreeMap<usize, f64>,
    /// Minimum of `per_group`; `NaN` when no group has samples.
    pub worst_group: f64,
    pub per_domain: BTreeMap<usize, f64>,
    /// Expected groups with no samples, excluded from `worst_group`.
    pub empty_groups: Vec<usize>,
}

fn ratios(correct: &BTreeMap<usize, (usize, usize)>) -> BTreeMap<usize, f64> {
    correct
        .iter()
        .map(|(&k, &(c, n))| (k, c as f64 / n as f64))
        .collect()
}

/// Overall, per-group, worst-group and per-domain accuracy.
pub fn accuracies(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    domains: &[usize],
) -> Result<MetricReport> {
    accuracies_expecting(predictions, labels, groups, domains, 0)
}

/// As [`accuracies`], also listing groups below `num_groups` with no samples.
pub fn accuracies_expecting(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    domains: &[usize],
    num_groups: usize,
) -> Result<MetricReport> {
    let n = predictions.len();
    if n == 0 {
        return Err(Error::Shape("accuracy of zero predictions".into()));
    }
    if labels.len() != n || groups.len() != n || domains.len() != n {
        return Err(Error::Shape(format!(
            "{n} predictions with {} labels, {} groups, {} domains",
            labels.len(),
            groups.len(),
            domains.len()
        )));
    }
    let mut by_group: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut by_domain: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut hits = 0;
    for i in 0..n {
        let ok = usize::from(predictions[i] == labels[i]);
        hits += ok;
        let g = by_group.entry(groups[i]).or_default();
        g.0 += ok;
        g.1 += 1;
        let d = by_domain.entry(domains[i]).or_default();
        d.0 += ok;
        d.1 += 1;
    }
    let per_group = ratios(&by_group);
    let worst_group = per_group.values().copied().fold(f64::NAN, f64::min);
    Ok(MetricReport {
        split: String::new(),
        overall: hits as f64 / n as f64,
        worst_group,
        per_domain: ratios(&by_domain),
        empty_groups: (0..num_groups).filter(|g| !per_group.contains_key(g)).collect(),
        per_group,
    })
}

/// Index of the largest logit per row, lowest index on ties.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    logits
        .iter_rows()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Coordinates of the leading principal components.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub coords: Matrix,
    pub explained_variance_ratio: Vec<f64>,
    /// `k x m`, rows are unit principal directions.
    pub components: Matrix,
    pub mean: Vec<f64>,
}

/// Projects mean-centred rows onto the top `k` principal directions.
///
/// Directions are ordered by decreasing variance and signed so that each
/// one's largest-magnitude loading is positive.
pub fn pca_project(data: &Matrix, k: usize) -> Result<PcaProjection> {
    let (n, m) = (data.rows(), data.cols());
    if n < 2 {
        return Err(Error::Domain(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > m {
        return Err(Error::Domain(format!("cannot take {k} components of {m}-d data")));
    }
    let mut mean = vec![0.0; m];
    for r in data.iter_rows() {
        for (mu, v) in mean.iter_mut().zip(r) {
            *mu += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(m, m);
    for r in data.iter_rows() {
        for a in 0..m {
            let da = r[a] - mean[a];
            for b in a..m {
                cov[(a, b)] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..m {
        for b in a..m {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();

    let mut components = Matrix::zeros(k, m);
    let mut explained = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let mut pivot = 0;
        for j in 0..m {
            if col[j].abs() > col[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..m {
            components.set(c, j, sign * col[j]);
        }
        let lambda = eig.eigenvalues[idx].max(0.0);
        explained.push(if total > 0.0 { lambda / total } else { 0.0 });
    }

    let mut coords = Matrix::zeros(n, k);
    for i in 0..n {
        let r = data.row(i);
        for c in 0..k {
            let mut s = 0.0;
            for j in 0..m {
                s += (r[j] - mean[j]) * components.get(c, j);
            }
            coords.set(i, c, s);
        }
    }
    Ok(PcaProjection {
        coords,
        explained_variance_ratio: explained,
        components,
        mean,
    })
}

/// One row of an embedding dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DumpMeta {
    pub split: Split,
    pub domain: usize,
    pub group: usize,
    pub label: usize,
}

/// Writes `split,domain,group,label,pc1,pc2` rows.
pub fn write_pca_dump<W: Write>(mut out: W, meta: &[DumpMeta], coords: &Matrix) -> Result<()> {
    if meta.len() != coords.rows() || coords.cols() < 2 {
        return Err(Error::Shape(format!(
            "{} metadata rows for a {}x{} projection",
            meta.len(),
            coords.rows(),
            coords.cols()
        )));
    }
    writeln!(out, "split,domain,group,label,pc1,pc2")?;
    for (m, r) in meta.iter().zip(coords.iter_rows()) {
        writeln!(out, "{},{},{},{},{},{}", m.split, m.domain, m.group, m.label, r[0], r[1])?;
    }
    Ok(())
}
