//! Monomial dictionaries `Ψ = (ψ₁, …, ψ_N)` and their Jacobians.
//!
//! Observables are stored as exponent tuples so a dictionary can be
//! serialized and rebuilt exactly. [`Dictionary::monomial`] enumerates all
//! monomials up to a total degree in graded-lexicographic order: the constant
//! first, then the coordinates in order, then `x², x·v, v²`, and so on.

use serde::{Deserialize, Serialize};

use crate::dynamics::Domain;
use crate::error::check_dim;
use crate::{Error, Matrix, Result, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    dim: usize,
    exponents: Vec<Vec<u32>>,
    labels: Vec<String>,
    coordinate_indices: Option<Vec<usize>>,
}

/// Exponent tuples of total degree exactly `degree`, lexicographically descending.
fn tuples_of_degree(dim: usize, degree: u32) -> Vec<Vec<u32>> {
    if dim == 1 {
        return vec![vec![degree]];
    }
    let mut out = Vec::new();
    for first in (0..=degree).rev() {
        for mut rest in tuples_of_degree(dim - 1, degree - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Variable names: `x, v` in the plane, `x, y, z` in space, `x1, …, xd` otherwise.
pub fn variable_names(dim: usize) -> Vec<String> {
    match dim {
        1 => vec!["x".into()],
        2 => vec!["x".into(), "v".into()],
        3 => vec!["x".into(), "y".into(), "z".into()],
        _ => (1..=dim).map(|i| format!("x{i}")).collect(),
    }
}

fn label(exps: &[u32], names: &[String]) -> String {
    let factors: Vec<String> = exps
        .iter()
        .zip(names)
        .filter(|(e, _)| **e > 0)
        .map(|(e, n)| if *e == 1 { n.clone() } else { format!("{n}^{e}") })
        .collect();
    if factors.is_empty() {
        "1".into()
    } else {
        factors.join("*")
    }
}

impl Dictionary {
    /// Dictionary with the given monomials, in the given order.
    pub fn from_exponents(dim: usize, exponents: Vec<Vec<u32>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("state dimension must be positive".into()));
        }
        if exponents.is_empty() {
            return Err(Error::InvalidArgument("dictionary must contain at least one observable".into()));
        }
        for (i, e) in exponents.iter().enumerate() {
            check_dim(dim, e.len())?;
            if exponents[..i].contains(e) {
                return Err(Error::InvalidArgument(format!("duplicate monomial {e:?}")));
            }
        }
        let names = variable_names(dim);
        let labels = exponents.iter().map(|e| label(e, &names)).collect();
        let coordinate_indices: Option<Vec<usize>> = (0..dim)
            .map(|j| {
                exponents
                    .iter()
                    .position(|e| e.iter().enumerate().all(|(k, &p)| p == u32::from(k == j)))
            })
            .collect();
        Ok(Self { dim, exponents, labels, coordinate_indices })
    }

    /// All monomials of total degree `<= degree` minus `exclude`.
    pub fn monomial(degree: u32, dim: usize, exclude: &[Vec<u32>]) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidArgument("monomial degree must be at least 1".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("state dimension must be positive".into()));
        }
        let all: Vec<Vec<u32>> = (0..=degree).flat_map(|k| tuples_of_degree(dim, k)).collect();
        let names = variable_names(dim);
        for e in exclude {
            if !all.contains(e) {
                let shown = if e.len() == dim { label(e, &names) } else { format!("{e:?}") };
                return Err(Error::UnknownExclusion(shown));
            }
        }
        let kept = all.into_iter().filter(|e| !exclude.contains(e)).collect();
        Self::from_exponents(dim, kept)
    }

    /// Like [`Dictionary::monomial`] with exclusions named by label (e.g. `"x"`, `"x^2*v"`).
    pub fn monomial_excluding_labels(degree: u32, dim: usize, exclude: &[String]) -> Result<Self> {
        let full = Self::monomial(degree, dim, &[])?;
        let exps = exclude
            .iter()
            .map(|name| {
                let wanted = name.replace(' ', "");
                full.labels
                    .iter()
                    .position(|l| *l == wanted)
                    .map(|i| full.exponents[i].clone())
                    .ok_or_else(|| Error::UnknownExclusion(name.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::monomial(degree, dim, &exps)
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn index_of_exponent(&self, exps: &[u32]) -> Option<usize> {
        self.exponents.iter().position(|e| e == exps)
    }

    /// Position of `ψ_j(x) = x_j` for each coordinate, when all are present.
    pub fn coordinate_indices(&self) -> Option<&[usize]> {
        self.coordinate_indices.as_deref()
    }

    pub fn max_degree(&self) -> u32 {
        self.exponents.iter().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    fn power_table(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let top = self.max_degree() as usize;
        x.iter()
            .map(|&xi| {
                let mut row = Vec::with_capacity(top + 1);
                let mut acc = 1.0;
                for _ in 0..=top {
                    row.push(acc);
                    acc *= xi;
                }
                row
            })
            .collect()
    }

    /// `Ψ(x)`.
    pub fn evaluate(&self, x: &[f64]) -> Vector {
        assert_eq!(x.len(), self.dim, "state has wrong dimension");
        let pw = self.power_table(x);
        Vector::from_iterator(
            self.len(),
            self.exponents.iter().map(|e| e.iter().enumerate().map(|(k, &p)| pw[k][p as usize]).product()),
        )
    }

    /// `DΨ(x)`, an `N × d` matrix whose row `i` is `∇ψᵢ(x)`.
    pub fn jacobian(&self, x: &[f64]) -> Matrix {
        assert_eq!(x.len(), self.dim, "state has wrong dimension");
        let pw = self.power_table(x);
        let mut jac = Matrix::zeros(self.len(), self.dim);
        for (i, e) in self.exponents.iter().enumerate() {
            for j in 0..self.dim {
                if e[j] == 0 {
                    continue;
                }
                let mut v = f64::from(e[j]) * pw[j][e[j] as usize - 1];
                for (k, &p) in e.iter().enumerate() {
                    if k != j {
                        v *= pw[k][p as usize];
                    }
                }
                jac[(i, j)] = v;
            }
        }
        jac
    }

    /// `Σᵢ vᵢ ∇²ψᵢ(x)`, a `d × d` matrix.
    pub fn hessian_contract(&self, x: &[f64], v: &[f64]) -> Matrix {
        assert_eq!(x.len(), self.dim, "state has wrong dimension");
        assert_eq!(v.len(), self.len(), "weights have wrong length");
        let pw = self.power_table(x);
        let mut h = Matrix::zeros(self.dim, self.dim);
        let mut d = vec![0u32; self.dim];
        for (e, &vi) in self.exponents.iter().zip(v) {
            if vi == 0.0 {
                continue;
            }
            for a in 0..self.dim {
                for b in a..self.dim {
                    d.copy_from_slice(e);
                    let mut coef = vi;
                    for k in [a, b] {
                        if d[k] == 0 {
                            coef = 0.0;
                            break;
                        }
                        coef *= f64::from(d[k]);
                        d[k] -= 1;
                    }
                    if coef == 0.0 {
                        continue;
                    }
                    let term = coef * d.iter().enumerate().map(|(k, &p)| pw[k][p as usize]).product::<f64>();
                    h[(a, b)] += term;
                    if a != b {
                        h[(b, a)] += term;
                    }
                }
            }
        }
        h
    }

    /// `max |ψᵢ|` over the box, attained at a corner for monomials.
    pub fn max_abs_over(&self, domain: &Domain) -> Vector {
        Vector::from_iterator(
            self.len(),
            self.exponents
                .iter()
                .map(|e| e.iter().enumerate().map(|(k, &p)| domain.max_abs(k).powi(p as i32)).product()),
        )
    }

    /// Reads the coordinate components out of a lifted point.
    pub fn read_coordinates(&self, z: &[f64]) -> Result<Vector> {
        let idx = self
            .coordinate_indices()
            .ok_or(Error::MissingCoordinates("state readout needs every coordinate observable"))?;
        Ok(Vector::from_iterator(self.dim, idx.iter().map(|&i| z[i])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hessian_matches_differenced_jacobian() {
        let d = Dictionary::monomial(4, 3, &[]).unwrap();
        let x = [0.7, -1.3, 0.4];
        let v: Vec<f64> = (0..d.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let h = d.hessian_contract(&x, &v);
        let vv = Vector::from_vec(v.clone());
        let step = 1e-6;
        for b in 0..3 {
            let (mut p, mut m) = (x, x);
            p[b] += step;
            m[b] -= step;
            let col = (d.jacobian(&p) - d.jacobian(&m)).transpose() * &vv / (2.0 * step);
            for a in 0..3 {
                assert!((h[(a, b)] - col[a]).abs() < 1e-6 * (1.0 + col[a].abs()), "{a} {b}");
            }
        }
    }

    fn binomial(n: u64, k: u64) -> u64 {
        (1..=k).fold(1, |acc, i| acc * (n - k + i) / i)
    }

    #[test]
    fn second_order_plane_ordering() {
        let d = Dictionary::monomial(2, 2, &[]).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d.labels(), &["1", "x", "v", "x^2", "x*v", "v^2"]);
        assert_eq!(d.coordinate_indices(), Some(&[1usize, 2][..]));
    }

    #[test]
    fn first_order_evaluation() {
        let d = Dictionary::monomial(1, 2, &[]).unwrap();
        assert_eq!(d.evaluate(&[2.0, 3.0]).as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn lorenz_dictionary_without_x() {
        let d = Dictionary::monomial(4, 3, &[vec![1, 0, 0]]).unwrap();
        assert_eq!(d.len(), 34);
        assert!(d.coordinate_indices().is_none());
        let z = d.evaluate(&[2.0, 1.0, 10.0]);
        assert_eq!(z[d.index_of("x*z").unwrap()], 20.0);
        let by_label = Dictionary::monomial_excluding_labels(4, 3, &["x".into()]).unwrap();
        assert_eq!(by_label, d);
    }

    #[test]
    fn evaluation_examples() {
        let d = Dictionary::monomial(2, 2, &[]).unwrap();
        assert_eq!(d.evaluate(&[0.0, 0.0]).as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(d.evaluate(&[1.0, 2.0]).as_slice(), &[1.0, 1.0, 2.0, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn jacobian_examples() {
        let d1 = Dictionary::monomial(1, 2, &[]).unwrap();
        let j = d1.jacobian(&[0.3, -7.0]);
        assert_eq!(j, Matrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        let d2 = Dictionary::monomial(2, 2, &[]).unwrap();
        let j = d2.jacobian(&[1.0, 2.0]);
        let sq = d2.index_of("x^2").unwrap();
        let xv = d2.index_of("x*v").unwrap();
        assert_eq!((j[(sq, 0)], j[(sq, 1)]), (2.0, 0.0));
        assert_eq!((j[(xv, 0)], j[(xv, 1)]), (2.0, 1.0));
    }

    #[test]
    fn exclusion_errors() {
        assert!(matches!(Dictionary::monomial(2, 2, &[vec![3, 0]]), Err(Error::UnknownExclusion(_))));
        assert!(matches!(
            Dictionary::monomial_excluding_labels(2, 2, &["y".into()]),
            Err(Error::UnknownExclusion(_))
        ));
        assert!(Dictionary::monomial(0, 2, &[]).is_err());
        assert!(Dictionary::from_exponents(2, vec![vec![1, 0], vec![1, 0]]).is_err());
    }

    #[test]
    fn removing_a_coordinate_drops_coordinate_indices() {
        let d = Dictionary::monomial(2, 2, &[vec![0, 1]]).unwrap();
        assert!(d.coordinate_indices().is_none());
        assert!(d.read_coordinates(d.evaluate(&[1.0, 1.0]).as_slice()).is_err());
    }

    #[test]
    fn counts_match_binomial() {
        for n in 1..=5u32 {
            for dim in 1..=4usize {
                let d = Dictionary::monomial(n, dim, &[]).unwrap();
                assert_eq!(d.len() as u64, binomial(u64::from(n) + dim as u64, dim as u64));
            }
        }
    }

    #[test]
    fn max_abs_is_attained_at_corner() {
        let d = Dictionary::monomial(3, 2, &[]).unwrap();
        let dom = Domain::new(vec![-1.0, 0.5], vec![2.0, 3.0]).unwrap();
        let s = d.max_abs_over(&dom);
        assert_eq!(s[d.index_of("x^2*v").unwrap()], 12.0);
        assert_eq!(s[0], 1.0);
    }

    fn dictionaries() -> Vec<Dictionary> {
        vec![
            Dictionary::monomial(1, 2, &[]).unwrap(),
            Dictionary::monomial(2, 2, &[]).unwrap(),
            Dictionary::monomial(3, 2, &[]).unwrap(),
            Dictionary::monomial(5, 2, &[]).unwrap(),
            Dictionary::monomial(4, 3, &[vec![1, 0, 0]]).unwrap(),
            Dictionary::from_exponents(2, vec![vec![1, 0], vec![0, 1], vec![2, 0]]).unwrap(),
        ]
    }

    fn finite_difference(d: &Dictionary, x: &[f64], h: f64) -> Matrix {
        let mut fd = Matrix::zeros(d.len(), d.dim());
        for j in 0..d.dim() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let col = (d.evaluate(&xp) - d.evaluate(&xm)) / (2.0 * h);
            fd.set_column(j, &col);
        }
        fd
    }

    #[test]
    fn jacobian_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for d in dictionaries() {
            for _ in 0..100 {
                let x: Vec<f64> = (0..d.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
                let exact = d.jacobian(&x);
                let fd = finite_difference(&d, &x, 1e-6);
                let rel = (&fd - &exact).norm() / exact.norm().max(1.0);
                assert!(rel <= 1e-6, "{:?} at {x:?}: {rel:e}", d.labels());
            }
        }
    }

    proptest! {
        #[test]
        fn first_order_consistency(
            x in proptest::collection::vec(-2.0f64..2.0, 3),
            dir in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(norm > 1e-3);
            for d in dictionaries() {
                let x = &x[..d.dim()];
                let dir = &dir[..d.dim()];
                let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assume!(dn > 1e-3);
                let delta: Vec<f64> = dir.iter().map(|v| 1e-5 * v / dn).collect();
                let moved: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
                let lin = d.jacobian(x) * Vector::from_column_slice(&delta);
                let gap = (d.evaluate(&moved) - d.evaluate(x) - lin).norm();
                prop_assert!(gap <= 1e-8 * d.len() as f64, "gap {gap:e}");
            }
        }

        #[test]
        fn coordinate_components_round_trip(x in proptest::collection::vec(-5.0f64..5.0, 2), n in 1u32..6) {
            let d = Dictionary::monomial(n, 2, &[]).unwrap();
            let z = d.evaluate(&x);
            let back = d.read_coordinates(z.as_slice()).unwrap();
            prop_assert_eq!(back.as_slice(), &x[..]);
        }
    }
}
