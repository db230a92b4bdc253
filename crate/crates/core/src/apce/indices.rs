use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest basis any constructor will enumerate unless told otherwise.
pub const DEFAULT_BASIS_CAP: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Truncation {
    TotalDegree { m: usize },
    /// At most `s` variables interact in any term.
    Reduced { s: usize, m: usize },
}

impl Truncation {
    /// Total degree 2 for up to eight inputs, univariate degree 2 beyond.
    pub fn default_for(n: usize) -> Self {
        if n > 8 {
            Truncation::Reduced { s: 1, m: 2 }
        } else {
            Truncation::TotalDegree { m: 2 }
        }
    }

    pub fn indices(self, n: usize) -> Result<MultiIndexSet> {
        match self {
            Truncation::TotalDegree { m } => total_degree_indices(n, m),
            Truncation::Reduced { s, m } => reduced_indices(n, s, m),
        }
    }
}

/// Ordered exponent vectors of a polynomial basis. The first element is
/// always the zero vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiIndexSet {
    pub dimension: usize,
    pub indices: Vec<Vec<u32>>,
    pub truncation: Truncation,
}

impl MultiIndexSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn max_degree(&self) -> u32 {
        self.indices.iter().map(|j| j.iter().sum()).max().unwrap_or(0)
    }
}

/// Graded order; ties are broken by the last differing component, the
/// smaller one first. Gives `(2,0) < (1,1) < (0,2)`.
pub fn grevlex(u: &[u32], w: &[u32]) -> Ordering {
    let du: u32 = u.iter().sum();
    let dw: u32 = w.iter().sum();
    du.cmp(&dw).then_with(|| {
        u.iter()
            .rev()
            .zip(w.iter().rev())
            .find(|(a, b)| a != b)
            .map_or(Ordering::Equal, |(a, b)| a.cmp(b))
    })
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i + 1) as u128;
    }
    acc
}

/// `C(n + m, m)`.
pub fn total_degree_count(n: usize, m: usize) -> u128 {
    binomial(n + m, m)
}

/// `1 + Σ_{k=1}^{s} C(n, k)·C(m, k)`.
pub fn reduced_count(n: usize, s: usize, m: usize) -> u128 {
    1 + (1..=s).map(|k| binomial(n, k).saturating_mul(binomial(m, k))).sum::<u128>()
}

pub fn total_degree_indices(n: usize, m: usize) -> Result<MultiIndexSet> {
    total_degree_indices_capped(n, m, DEFAULT_BASIS_CAP)
}

pub fn total_degree_indices_capped(n: usize, m: usize, cap: usize) -> Result<MultiIndexSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("multi-index dimension must be at least 1".into()));
    }
    check_cap(total_degree_count(n, m), cap)?;
    Ok(MultiIndexSet {
        dimension: n,
        indices: enumerate(n, m, n),
        truncation: Truncation::TotalDegree { m },
    })
}

pub fn reduced_indices(n: usize, s: usize, m: usize) -> Result<MultiIndexSet> {
    reduced_indices_capped(n, s, m, DEFAULT_BASIS_CAP)
}

pub fn reduced_indices_capped(n: usize, s: usize, m: usize, cap: usize) -> Result<MultiIndexSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("multi-index dimension must be at least 1".into()));
    }
    if s > n {
        return Err(Error::InvalidArgument(format!(
            "interaction order {s} exceeds dimension {n}"
        )));
    }
    check_cap(reduced_count(n, s, m), cap)?;
    Ok(MultiIndexSet {
        dimension: n,
        indices: enumerate(n, m, s),
        truncation: Truncation::Reduced { s, m },
    })
}

fn check_cap(size: u128, cap: usize) -> Result<()> {
    if size > cap as u128 {
        Err(Error::BasisTooLarge { size, cap })
    } else {
        Ok(())
    }
}

/// All vectors of length `n` with degree ≤ `m` and at most `s` nonzeros,
/// grevlex-sorted.
fn enumerate(n: usize, m: usize, s: usize) -> Vec<Vec<u32>> {
    fn fill(pos: usize, left: u32, nnz_left: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos == cur.len() {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        let top = if nnz_left == 0 { 0 } else { left };
        for e in 0..=top {
            cur[pos] = e;
            fill(pos + 1, left - e, nnz_left - usize::from(e > 0), cur, out);
        }
        cur[pos] = 0;
    }

    let mut out = Vec::new();
    let mut cur = vec![0; n];
    for d in 0..=m as u32 {
        let start = out.len();
        fill(0, d, s, &mut cur, &mut out);
        out[start..].sort_by(|a, b| grevlex(a, b));
    }
    out
}
