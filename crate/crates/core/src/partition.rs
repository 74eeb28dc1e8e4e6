//! Decomposition of a semantic field into `K` contiguous local fields along
//! the first principal component of the standardized `[position; feature]`
//! vectors.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::semlift::{sorted_eigen, SemanticField};

/// Default number of part-level clusters.
pub const DEFAULT_PARTS: usize = 8;

/// `K` disjoint sub-fields covering a parent field.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFieldSet {
    parts: Vec<SemanticField>,
    parent_indices: Vec<Vec<usize>>,
    parent_len: usize,
}

impl LocalFieldSet {
    /// Builds parts of `field` from explicit index groups.
    pub fn from_groups(field: &SemanticField, groups: Vec<Vec<usize>>) -> Result<Self> {
        let n = field.len();
        if groups.is_empty() {
            return Err(Error::invalid("a partition needs at least one part"));
        }
        let mut seen = vec![false; n];
        for g in &groups {
            for &i in g {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!(
                        "index {i} is out of range or assigned twice"
                    )));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("partition does not cover every point"));
        }
        let parts = groups.iter().map(|g| field.select(g)).collect();
        Ok(Self {
            parts,
            parent_indices: groups,
            parent_len: n,
        })
    }

    /// Rebuilds the parts on another field over the same index space, e.g.
    /// the parent field propagated to a later timestep.
    pub fn carry(&self, field: &SemanticField) -> Result<Self> {
        if field.len() != self.parent_len {
            return Err(Error::invalid(format!(
                "field has {} points, partition covers {}",
                field.len(),
                self.parent_len
            )));
        }
        Ok(Self {
            parts: self.parent_indices.iter().map(|g| field.select(g)).collect(),
            parent_indices: self.parent_indices.clone(),
            parent_len: self.parent_len,
        })
    }

    pub fn from_assignments(field: &SemanticField, k: usize, assignments: &[usize]) -> Result<Self> {
        if assignments.len() != field.len() {
            return Err(Error::invalid("assignment count does not match field size"));
        }
        let mut groups = vec![Vec::new(); k];
        for (i, &a) in assignments.iter().enumerate() {
            groups
                .get_mut(a)
                .ok_or_else(|| Error::invalid(format!("assignment {a} exceeds k = {k}")))?
                .push(i);
        }
        Self::from_groups(field, groups)
    }

    pub fn k(&self) -> usize {
        self.parts.len()
    }

    pub fn parts(&self) -> &[SemanticField] {
        &self.parts
    }

    pub fn parent_indices(&self) -> &[Vec<usize>] {
        &self.parent_indices
    }

    pub fn parent_len(&self) -> usize {
        self.parent_len
    }

    /// Part id of each parent point.
    pub fn assignments(&self) -> Vec<usize> {
        let mut out = vec![0; self.parent_len];
        for (k, g) in self.parent_indices.iter().enumerate() {
            for &i in g {
                out[i] = k;
            }
        }
        out
    }

    /// Reorders parts so that new part `j` is old part `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            parts: order.iter().map(|&i| self.parts[i].clone()).collect(),
            parent_indices: order.iter().map(|&i| self.parent_indices[i].clone()).collect(),
            parent_len: self.parent_len,
        }
    }

    pub fn to_json(&self) -> PartitionFile {
        PartitionFile {
            k: self.k(),
            assignments: self.assignments(),
        }
    }
}

/// On-disk form of a partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub k: usize,
    pub assignments: Vec<usize>,
}

impl PartitionFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("partition serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Centers each column and scales the position block (first 3 columns) and
/// the feature block (rest) to unit average variance. Zero-variance blocks
/// are only centered.
pub fn standardize_blocks(augmented: &Matrix) -> Matrix {
    let (n, cols) = augmented.shape();
    let mean = augmented.col_means();
    let mut out = augmented.clone();
    for i in 0..n {
        for (x, m) in out.row_mut(i).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    for (start, end) in [(0, cols.min(3)), (cols.min(3), cols)] {
        if start == end {
            continue;
        }
        let total: f64 = (0..n)
            .map(|i| out.row(i)[start..end].iter().map(|x| x * x).sum::<f64>())
            .sum();
        let avg_var = total / (n as f64 * (end - start) as f64);
        if avg_var > 1e-300 {
            let s = avg_var.sqrt();
            for i in 0..n {
                out.row_mut(i)[start..end].iter_mut().for_each(|x| *x /= s);
            }
        }
    }
    out
}

/// Leading principal direction of `rows`, largest-magnitude entry positive.
pub fn first_principal_component(rows: &Matrix) -> Vec<f64> {
    let (n, c) = rows.shape();
    let mean = rows.col_means();
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for r in rows.iter_rows() {
        for i in 0..c {
            for j in 0..c {
                cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    cov /= n as f64;
    let (_, vectors) = sorted_eigen(cov);
    vectors.into_iter().next().expect("at least one column")
}

/// Splits `order` into `k` contiguous groups; the first `N mod k` get one
/// extra element.
pub fn even_split(order: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = order.len();
    let (base, extra) = (n / k, n % k);
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for g in 0..k {
        let size = base + usize::from(g < extra);
        groups.push(order[start..start + size].to_vec());
        start += size;
    }
    groups
}

pub fn partition_pca(field: &SemanticField, k: usize) -> Result<LocalFieldSet> {
    let n = field.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "cannot split {n} points into {k} parts"
        )));
    }
    let x = standardize_blocks(&field.augmented());
    let pc = first_principal_component(&x);
    let proj: Vec<f64> = x.iter_rows().map(|r| crate::linalg::dot(r, &pc)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
    LocalFieldSet::from_groups(field, even_split(&order, k))
}

/// Mean Jaccard overlap under the best one-to-one matching of parts.
///
/// Unmatched parts (when the sets have different `K`) count as zero overlap.
pub fn partition_consistency_check(a: &LocalFieldSet, b: &LocalFieldSet) -> Result<f64> {
    if a.parent_len() != b.parent_len() {
        return Err(Error::invalid(format!(
            "partitions cover {} and {} points",
            a.parent_len(),
            b.parent_len()
        )));
    }
    let (ka, kb) = (a.k(), b.k());
    if ka.max(kb) > 20 {
        return Err(Error::invalid("consistency check supports at most 20 parts"));
    }
    let n = a.parent_len();
    let sets_b: Vec<Vec<bool>> = b
        .parent_indices()
        .iter()
        .map(|g| {
            let mut m = vec![false; n];
            g.iter().for_each(|&i| m[i] = true);
            m
        })
        .collect();
    let jac: Vec<Vec<f64>> = a
        .parent_indices()
        .iter()
        .map(|ga| {
            sets_b
                .iter()
                .zip(b.parent_indices())
                .map(|(mb, gb)| {
                    let inter = ga.iter().filter(|&&i| mb[i]).count();
                    let union = ga.len() + gb.len() - inter;
                    if union == 0 {
                        1.0
                    } else {
                        inter as f64 / union as f64
                    }
                })
                .collect()
        })
        .collect();

    // exact assignment by DP over subsets of b's parts; a part may stay unmatched
    let full = 1usize << kb;
    let mut best = vec![f64::NEG_INFINITY; full];
    best[0] = 0.0;
    for row in &jac {
        let mut next = best.clone();
        for mask in 0..full {
            if best[mask] == f64::NEG_INFINITY {
                continue;
            }
            for (j, &v) in row.iter().enumerate() {
                if mask & (1 << j) == 0 {
                    let m2 = mask | (1 << j);
                    next[m2] = next[m2].max(best[mask] + v);
                }
            }
        }
        best = next;
    }
    let total = best.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(total / ka.max(kb) as f64)
}
