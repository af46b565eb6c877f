//! Sparse multivariate polynomials over `f64`.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Product of variables, stored as a sorted list of indices with repetition
/// (`x0² x3` is `[0, 0, 3]`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Monomial(pub Vec<u32>);

impl Monomial {
    pub fn one() -> Self {
        Monomial(Vec::new())
    }

    pub fn var(i: usize) -> Self {
        Monomial(vec![i as u32])
    }

    pub fn from_vars(mut v: Vec<u32>) -> Self {
        v.sort_unstable();
        Monomial(v)
    }

    pub fn degree(&self) -> usize {
        self.0.len()
    }

    pub fn is_one(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut out = Vec::with_capacity(self.0.len() + other.0.len());
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            if self.0[i] <= other.0[j] {
                out.push(self.0[i]);
                i += 1;
            } else {
                out.push(other.0[j]);
                j += 1;
            }
        }
        out.extend_from_slice(&self.0[i..]);
        out.extend_from_slice(&other.0[j..]);
        Monomial(out)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0.iter().map(|&v| x[v as usize]).product()
    }

    /// Graded lexicographic comparison (degree first, then variable lists).
    pub fn grlex_cmp(&self, other: &Monomial) -> std::cmp::Ordering {
        self.degree().cmp(&other.degree()).then_with(|| self.0.cmp(&other.0))
    }
}

/// All monomials in `nvars` variables of degree `≤ max_deg`, graded-lex ordered.
pub fn monomials_up_to(nvars: usize, max_deg: usize) -> Vec<Monomial> {
    let mut out = vec![Monomial::one()];
    let mut layer = vec![Monomial::one()];
    for _ in 0..max_deg {
        let mut next = Vec::new();
        for m in &layer {
            let start = m.0.last().map_or(0, |&v| v as usize);
            for v in start..nvars {
                let mut vars = m.0.clone();
                vars.push(v as u32);
                next.push(Monomial(vars));
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

/// Serialized form of one polynomial term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coef: f64,
    pub vars: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(into = "Vec<Term>", from = "Vec<Term>")]
pub struct Polynomial {
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero() -> Self {
        Polynomial::default()
    }

    pub fn constant(c: f64) -> Self {
        let mut p = Polynomial::zero();
        p.add_term(Monomial::one(), c);
        p
    }

    pub fn var(i: usize) -> Self {
        let mut p = Polynomial::zero();
        p.add_term(Monomial::var(i), 1.0);
        p
    }

    pub fn from_terms(terms: impl IntoIterator<Item = (Monomial, f64)>) -> Self {
        let mut p = Polynomial::zero();
        for (m, c) in terms {
            p.add_term(m, c);
        }
        p
    }

    pub fn add_term(&mut self, m: Monomial, c: f64) {
        if c == 0.0 {
            return;
        }
        match self.terms.entry(m) {
            Entry::Vacant(v) => {
                v.insert(c);
            }
            Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if *o.get() == 0.0 {
                    o.remove();
                }
            }
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn constant_term(&self) -> f64 {
        self.terms.get(&Monomial::one()).copied().unwrap_or(0.0)
    }

    pub fn coefficient(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn max_abs_coef(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        Polynomial::from_terms(self.terms.iter().map(|(m, c)| (m.clone(), c * s)))
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        for (m, c) in other.terms() {
            out.add_term(m.clone(), c);
        }
        out
    }

    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut out = Polynomial::zero();
        for (a, ca) in self.terms() {
            for (b, cb) in other.terms() {
                out.add_term(a.mul(b), ca * cb);
            }
        }
        out
    }

    pub fn mul_monomial(&self, m: &Monomial, c: f64) -> Polynomial {
        Polynomial::from_terms(self.terms.iter().map(|(a, ca)| (a.mul(m), ca * c)))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(m, c)| c * m.eval(x)).sum()
    }

    /// Replaces each variable `v` by `subs[v]`.
    pub fn substitute(&self, subs: &[Polynomial]) -> Polynomial {
        let mut out = Polynomial::zero();
        for (m, c) in self.terms() {
            let mut acc = Polynomial::constant(c);
            for &v in &m.0 {
                acc = acc.mul(&subs[v as usize]);
            }
            out = out.add(&acc);
        }
        out
    }

    /// Drops coefficients below `eps` in absolute value.
    pub fn prune(&self, eps: f64) -> Polynomial {
        Polynomial::from_terms(self.terms.iter().filter(|(_, c)| c.abs() > eps).map(|(m, c)| (m.clone(), *c)))
    }
}

impl From<Polynomial> for Vec<Term> {
    fn from(p: Polynomial) -> Self {
        p.terms.into_iter().map(|(m, coef)| Term { coef, vars: m.0 }).collect()
    }
}

impl From<Vec<Term>> for Polynomial {
    fn from(terms: Vec<Term>) -> Self {
        Polynomial::from_terms(terms.into_iter().map(|t| (Monomial::from_vars(t.vars), t.coef)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_product_sorted() {
        let a = Monomial::from_vars(vec![3, 0]);
        let b = Monomial::from_vars(vec![1, 0]);
        assert_eq!(a.mul(&b).0, vec![0, 0, 1, 3]);
    }

    #[test]
    fn monomial_table_counts() {
        // C(n + d, d)
        assert_eq!(monomials_up_to(3, 2).len(), 10);
        assert_eq!(monomials_up_to(4, 4).len(), 70);
        let t = monomials_up_to(2, 3);
        assert!(t.windows(2).all(|w| w[0].grlex_cmp(&w[1]) == std::cmp::Ordering::Less));
    }

    #[test]
    fn arithmetic_and_eval() {
        let x = Polynomial::var(0);
        let y = Polynomial::var(1);
        let p = x.add(&y).mul(&x.sub(&y)); // x² − y²
        assert_eq!(p.len(), 2);
        assert_eq!(p.eval(&[3.0, 2.0]), 5.0);
        let q = p.substitute(&[Polynomial::constant(1.0).sub(&y), y.clone()]); // (1−y)² − y² = 1 − 2y
        assert_eq!(q.eval(&[0.0, 0.25]), 0.5);
        assert_eq!(q.degree(), 1);
    }

    #[test]
    fn json_round_trip() {
        let p = Polynomial::var(2).mul(&Polynomial::var(0)).add(&Polynomial::constant(-0.5));
        let s = serde_json::to_string(&p).unwrap();
        let back: Polynomial = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
    }
}
