//! Monomial observable dictionaries.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// All monomials in `n` variables of total degree at most `degree`,
/// constant first, then degree by degree in lexicographic order
/// (`x1` before `x2`, higher powers of earlier variables first).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dictionary {
    n: usize,
    degree: u32,
    exponents: Vec<Vec<u32>>,
}

impl Dictionary {
    pub fn new(n: usize, degree: u32) -> Result<Self> {
        if n == 0 || degree == 0 {
            return Err(Error::InvalidArgument(format!(
                "dictionary needs n >= 1 and degree >= 1 (got n={n}, degree={degree})"
            )));
        }
        let mut exponents = Vec::with_capacity(monomial_count(n, degree));
        for d in 0..=degree {
            let mut alpha = vec![0u32; n];
            push_compositions(d, 0, &mut alpha, &mut exponents);
        }
        Ok(Self {
            n,
            degree,
            exponents,
        })
    }

    /// Rebuild from an explicit exponent list (as stored in model files).
    pub fn from_exponents(n: usize, degree: u32, exponents: Vec<Vec<u32>>) -> Result<Self> {
        if n == 0 || exponents.is_empty() {
            return Err(Error::InvalidArgument("empty dictionary".into()));
        }
        for alpha in &exponents {
            if alpha.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "dictionary exponent",
                    expected: n,
                    found: alpha.len(),
                });
            }
            if alpha.iter().sum::<u32>() > degree {
                return Err(Error::InvalidArgument(format!(
                    "monomial {alpha:?} exceeds degree {degree}"
                )));
            }
        }
        Ok(Self {
            n,
            degree,
            exponents,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    /// Index of the constant monomial, if present.
    pub fn constant_index(&self) -> Option<usize> {
        self.exponents.iter().position(|a| a.iter().all(|&e| e == 0))
    }

    pub fn evaluate(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        self.evaluate_into(x, out.as_mut_slice());
        out
    }

    /// Evaluate into a caller-provided buffer of length `self.len()`.
    pub fn evaluate_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.n, "state dimension");
        assert_eq!(out.len(), self.len(), "output length");
        let d = self.degree as usize;
        // powers[i * (d+1) + p] = x_i^p
        let mut powers = vec![1.0; self.n * (d + 1)];
        for (i, &xi) in x.iter().enumerate() {
            for p in 1..=d {
                powers[i * (d + 1) + p] = powers[i * (d + 1) + p - 1] * xi;
            }
        }
        for (o, alpha) in out.iter_mut().zip(&self.exponents) {
            *o = alpha
                .iter()
                .enumerate()
                .map(|(i, &e)| powers[i * (d + 1) + e as usize])
                .product();
        }
    }
}

/// Number of monomials of total degree ≤ `degree` in `n` variables, C(n+D, D).
pub fn monomial_count(n: usize, degree: u32) -> usize {
    let d = degree as usize;
    let mut c: u128 = 1;
    for k in 1..=d {
        c = c * (n + k) as u128 / k as u128;
    }
    c as usize
}

fn push_compositions(remaining: u32, pos: usize, alpha: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    let n = alpha.len();
    if pos == n - 1 {
        alpha[pos] = remaining;
        out.push(alpha.clone());
        return;
    }
    for e in (0..=remaining).rev() {
        alpha[pos] = e;
        push_compositions(remaining - e, pos + 1, alpha, out);
    }
    alpha[pos] = 0;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_from_the_benchmarks() {
        assert_eq!(Dictionary::new(2, 5).unwrap().len(), 21);
        assert_eq!(Dictionary::new(3, 3).unwrap().len(), 20);
        assert_eq!(Dictionary::new(6, 3).unwrap().len(), 84);
    }

    #[test]
    fn graded_lex_order_two_variables() {
        let d = Dictionary::new(2, 2).unwrap();
        let expected: Vec<Vec<u32>> = vec![
            vec![0, 0],
            vec![1, 0],
            vec![0, 1],
            vec![2, 0],
            vec![1, 1],
            vec![0, 2],
        ];
        assert_eq!(d.exponents(), expected.as_slice());
        assert_eq!(d.constant_index(), Some(0));
    }

    #[test]
    fn evaluate_examples() {
        let d = Dictionary::new(2, 2).unwrap();
        assert_eq!(d.evaluate(&[0.0, 0.0]).as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(d.evaluate(&[1.0, 2.0]).as_slice(), &[1.0, 1.0, 2.0, 1.0, 2.0, 4.0]);
        let d1 = Dictionary::new(1, 3).unwrap();
        assert_eq!(d1.evaluate(&[-2.0]).as_slice(), &[1.0, -2.0, 4.0, -8.0]);
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(Dictionary::new(0, 2).is_err());
        assert!(Dictionary::new(2, 0).is_err());
    }

    #[test]
    fn from_exponents_validates() {
        assert!(Dictionary::from_exponents(2, 1, vec![vec![0, 0], vec![1, 1]]).is_err());
        assert!(Dictionary::from_exponents(2, 2, vec![vec![0]]).is_err());
        let d = Dictionary::new(3, 2).unwrap();
        let back = Dictionary::from_exponents(3, 2, d.exponents().to_vec()).unwrap();
        assert_eq!(d, back);
    }

    proptest! {
        #[test]
        fn count_matches_binomial(n in 1usize..=6, deg in 1u32..=6) {
            let d = Dictionary::new(n, deg).unwrap();
            prop_assert_eq!(d.len(), monomial_count(n, deg));
            // brute-force count over the exponent box
            let mut brute = 0usize;
            let total = (deg as usize + 1).pow(n as u32);
            for code in 0..total {
                let mut c = code;
                let mut s = 0;
                for _ in 0..n { s += c % (deg as usize + 1); c /= deg as usize + 1; }
                if s <= deg as usize { brute += 1; }
            }
            prop_assert_eq!(d.len(), brute);
        }

        #[test]
        fn origin_maps_to_first_basis_vector(n in 1usize..=5, deg in 1u32..=4) {
            let d = Dictionary::new(n, deg).unwrap();
            let v = d.evaluate(&vec![0.0; n]);
            prop_assert_eq!(v[0], 1.0);
            prop_assert!(v.iter().skip(1).all(|&e| e == 0.0));
        }

        #[test]
        fn monomials_are_multiplicative(x in prop::collection::vec(-2.0f64..2.0, 3),
                                        y in prop::collection::vec(-2.0f64..2.0, 3)) {
            let d = Dictionary::new(3, 3).unwrap();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
            let (px, py, pxy) = (d.evaluate(&x), d.evaluate(&y), d.evaluate(&xy));
            for j in 0..d.len() {
                prop_assert!((pxy[j] - px[j] * py[j]).abs() <= 1e-12 * (1.0 + pxy[j].abs()));
            }
        }
    }
}
