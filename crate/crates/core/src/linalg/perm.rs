//! Permutation and small-combinatorics helpers.

/// All permutations of `0..n` in lexicographic order.
pub struct Permutations {
    current: Option<Vec<usize>>,
}

impl Permutations {
    pub fn new(n: usize) -> Self {
        Permutations { current: Some((0..n).collect()) }
    }
}

impl Iterator for Permutations {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.take()?;
        let mut nxt = out.clone();
        if next_permutation(&mut nxt) {
            self.current = Some(nxt);
        }
        Some(out)
    }
}

/// Advance to the next lexicographic arrangement; `false` when wrapping past the last one.
/// Works on multisets (repeated values are not duplicated).
pub fn next_permutation<T: Ord>(v: &mut [T]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

pub fn factorial(n: usize) -> usize {
    (1..=n).product()
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Number of ordered equipartitions of `n` items into `k` labelled groups, or
/// `None` on overflow.
pub fn equipartition_count(n: usize, k: usize) -> Option<u128> {
    if k == 0 || n % k != 0 {
        return Some(0);
    }
    let s = n / k;
    let mut total: u128 = 1;
    let mut remaining = n;
    for _ in 0..k {
        total = total.checked_mul(binomial(remaining, s)?)?;
        remaining -= s;
    }
    Some(total)
}

pub fn binomial(n: usize, r: usize) -> Option<u128> {
    if r > n {
        return Some(0);
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(Permutations::new(4).count(), 24);
        assert_eq!(Permutations::new(0).count(), 1);
        let mut v = vec![0, 0, 1, 1];
        let mut c = 1;
        while next_permutation(&mut v) {
            c += 1;
        }
        assert_eq!(c, 6);
        assert_eq!(equipartition_count(6, 3), Some(90));
        assert_eq!(lcm(2, 3), 6);
    }
}
