//! Multivariate polynomial dictionaries.
//!
//! Terms are multi-indices `α` with `|α| ≤ degree`, in graded lexicographic
//! order: by total degree, then by descending exponent vector. In two
//! variables of degree two that is `1, x, y, x², xy, y²`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Monomial,
    /// Products of probabilists' Hermite polynomials `He_n`.
    Hermite,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisDictionary {
    pub dim: usize,
    pub degree: u32,
    pub kind: BasisKind,
    pub terms: Vec<Vec<u32>>,
}

/// Coefficients of `He_n` in the monomial basis, `out[k]` multiplying `x^k`.
pub fn hermite_monomial_coeffs(n: u32) -> Vec<f64> {
    let n = n as usize;
    let mut prev = vec![1.0];
    if n == 0 {
        return prev;
    }
    let mut cur = vec![0.0, 1.0];
    for k in 1..n {
        // He_{k+1} = x He_k − k He_{k−1}
        let mut next = vec![0.0; k + 2];
        for (i, c) in cur.iter().enumerate() {
            next[i + 1] += c;
        }
        for (i, c) in prev.iter().enumerate() {
            next[i] -= k as f64 * c;
        }
        prev = cur;
        cur = next;
    }
    cur
}

/// Values `He_0(x) ..= He_max(x)` by the three-term recurrence.
fn hermite_values(x: f64, max: usize, out: &mut [f64]) {
    out[0] = 1.0;
    if max >= 1 {
        out[1] = x;
    }
    for k in 1..max {
        out[k + 1] = x * out[k] - k as f64 * out[k - 1];
    }
}

fn power_values(x: f64, max: usize, out: &mut [f64]) {
    out[0] = 1.0;
    for k in 1..=max {
        out[k] = out[k - 1] * x;
    }
}

fn graded_lex_terms(dim: usize, degree: u32) -> Vec<Vec<u32>> {
    fn fill(dim: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == dim - 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for a in (0..=remaining).rev() {
            prefix.push(a);
            fill(dim, remaining - a, prefix, out);
            prefix.pop();
        }
    }
    let mut terms = Vec::new();
    for total in 0..=degree {
        fill(dim, total, &mut Vec::with_capacity(dim), &mut terms);
    }
    terms
}

impl BasisDictionary {
    pub fn new(dim: usize, degree: u32, kind: BasisKind) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("dictionary dimension must be at least 1"));
        }
        Ok(Self {
            dim,
            degree,
            kind,
            terms: graded_lex_terms(dim, degree),
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Evaluates every term at `point`, writing into `out`.
    pub fn evaluate_into(&self, point: &[f64], out: &mut [f64]) -> Result<()> {
        if point.len() != self.dim {
            return Err(Error::dims(self.dim, point.len(), "basis evaluation point"));
        }
        if out.len() != self.len() {
            return Err(Error::dims(self.len(), out.len(), "basis output buffer"));
        }
        let d = self.degree as usize;
        let mut table = vec![0.0; self.dim * (d + 1)];
        for (j, &x) in point.iter().enumerate() {
            let row = &mut table[j * (d + 1)..(j + 1) * (d + 1)];
            match self.kind {
                BasisKind::Monomial => power_values(x, d, row),
                BasisKind::Hermite => hermite_values(x, d, row),
            }
        }
        for (o, alpha) in out.iter_mut().zip(&self.terms) {
            *o = alpha
                .iter()
                .enumerate()
                .map(|(j, &a)| table[j * (d + 1) + a as usize])
                .product();
        }
        Ok(())
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        self.evaluate_into(point, &mut out)?;
        Ok(out)
    }

    /// Human-readable term names, e.g. `x1^2` or `He2(x1)·He1(y)`.
    pub fn term_names(&self, var_names: &[String]) -> Vec<String> {
        self.terms
            .iter()
            .map(|alpha| {
                let factors: Vec<String> = alpha
                    .iter()
                    .zip(var_names)
                    .filter(|(a, _)| **a > 0)
                    .map(|(&a, v)| match (self.kind, a) {
                        (BasisKind::Monomial, 1) => v.clone(),
                        (BasisKind::Monomial, a) => format!("{v}^{a}"),
                        (BasisKind::Hermite, a) => format!("He{a}({v})"),
                    })
                    .collect();
                if factors.is_empty() {
                    "1".to_string()
                } else {
                    factors.join(match self.kind {
                        BasisKind::Monomial => "",
                        BasisKind::Hermite => "*",
                    })
                }
            })
            .collect()
    }

    /// Matrix whose column `j` holds the monomial coefficients of Hermite
    /// term `j`, both indexed in this dictionary's term order.
    fn hermite_to_monomial_matrix(&self) -> DMatrix<f64> {
        let index: std::collections::HashMap<&[u32], usize> =
            self.terms.iter().enumerate().map(|(i, t)| (t.as_slice(), i)).collect();
        let uni: Vec<Vec<f64>> = (0..=self.degree).map(hermite_monomial_coeffs).collect();
        let mut t = DMatrix::zeros(self.len(), self.len());
        for (j, alpha) in self.terms.iter().enumerate() {
            // expand Π_i He_{α_i}(z_i) into monomials
            let mut acc: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 1.0)];
            for &a in alpha {
                let mut next = Vec::new();
                for (beta, c) in &acc {
                    for (k, &h) in uni[a as usize].iter().enumerate() {
                        if h != 0.0 {
                            let mut b = beta.clone();
                            b.push(k as u32);
                            next.push((b, c * h));
                        }
                    }
                }
                acc = next;
            }
            for (beta, c) in acc {
                t[(index[beta.as_slice()], j)] += c;
            }
        }
        t
    }
}

/// Re-expresses `coeffs` (over `from`) in the basis of `to`.
pub fn convert_coefficients(
    from: &BasisDictionary,
    to: &BasisDictionary,
    coeffs: &[f64],
) -> Result<Vec<f64>> {
    if from.dim != to.dim || from.degree != to.degree {
        return Err(Error::arg(format!(
            "incompatible dictionaries: dim/degree {}/{} vs {}/{}",
            from.dim, from.degree, to.dim, to.degree
        )));
    }
    if coeffs.len() != from.len() {
        return Err(Error::dims(from.len(), coeffs.len(), "coefficient vector"));
    }
    let c = DVector::from_column_slice(coeffs);
    let out = match (from.kind, to.kind) {
        (a, b) if a == b => c,
        (BasisKind::Hermite, BasisKind::Monomial) => from.hermite_to_monomial_matrix() * c,
        (BasisKind::Monomial, BasisKind::Hermite) => to
            .hermite_to_monomial_matrix()
            .lu()
            .solve(&c)
            .ok_or_else(|| Error::arg("basis change matrix is singular"))?,
        _ => unreachable!(),
    };
    Ok(out.iter().copied().collect())
}
