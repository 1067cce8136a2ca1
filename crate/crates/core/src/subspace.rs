//! PCA over a window of checkpoints and the gradient projection `U^T U g`.
//!
//! The fit eigendecomposes the small `n x n` Gram matrix of the centered
//! window instead of the `p x p` covariance, then maps eigenvectors back with
//! `u = X^T a / |X^T a|`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{axpy, canonicalize_sign, dot, eig_sym, norm, orthonormalize, DenseMatrix};
use crate::textio;
use crate::trajectory::Trajectory;

pub const MAGIC: &str = "SUBPT-SUB";

/// Total variance below which a window is treated as constant.
const MIN_TOTAL_VARIANCE: f64 = 1e-20;

/// Eigenvalues smaller than this fraction of the largest are numerically null.
pub const NULL_EIGEN_RATIO: f64 = 1e-14;

const ORTHONORMAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: DenseMatrix,
    eigenvalues: Vec<f64>,
    variance_ratios: Vec<f64>,
    mean: Vec<f64>,
    window: (usize, usize),
}

impl Subspace {
    /// Subspace from caller-supplied orthonormal rows; spectrum fields are
    /// zero and the mean is the origin.
    pub fn from_basis(basis: DenseMatrix) -> Result<Self> {
        check_orthonormal(&basis)?;
        let r = basis.rows();
        let p = basis.cols();
        Ok(Self {
            basis,
            eigenvalues: vec![0.0; r],
            variance_ratios: vec![0.0; r],
            mean: vec![0.0; p],
            window: (0, 0),
        })
    }

    /// The whole parameter space (identity projection).
    pub fn full(param_dim: usize) -> Result<Self> {
        if param_dim == 0 {
            return Err(Error::ZeroDimension("subspace dimension"));
        }
        Self::from_basis(DenseMatrix::identity(param_dim))
    }

    pub fn rank(&self) -> usize {
        self.basis.rows()
    }

    pub fn param_dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn basis(&self) -> &DenseMatrix {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn variance_ratios(&self) -> &[f64] {
        &self.variance_ratios
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn window(&self) -> (usize, usize) {
        self.window
    }

    /// Number of kept eigenvalues that are not numerically null.
    pub fn effective_rank(&self) -> usize {
        let top = self.eigenvalues.first().copied().unwrap_or(0.0);
        self.eigenvalues.iter().filter(|&&l| l > NULL_EIGEN_RATIO * top).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MAGIC} 1 {} {}\n({} {})\n",
            self.rank(),
            self.param_dim(),
            self.window.0,
            self.window.1
        );
        s.push_str(&textio::fmt_row(&self.mean));
        s.push('\n');
        for row in self.basis.iter_rows() {
            s.push_str(&textio::fmt_row(row));
            s.push('\n');
        }
        s.push_str(&textio::fmt_row(&self.eigenvalues));
        s.push('\n');
        s.push_str(&textio::fmt_row(&self.variance_ratios));
        s.push('\n');
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = textio::check_header(lines.next(), MAGIC, origin)?;
        if head.len() != 2 {
            return Err(Error::bad_format(origin, "dimension line must be <r> <param_dim>"));
        }
        let r = textio::parse_usize(Some(head[0]), origin, "rank")?;
        let p = textio::parse_usize(Some(head[1]), origin, "param_dim")?;
        if r == 0 || p == 0 || r > p {
            return Err(Error::bad_format(origin, "need 1 <= r <= param_dim"));
        }
        let window = lines
            .next()
            .and_then(|l| l.trim().strip_prefix('(')?.strip_suffix(')').map(str::to_owned))
            .ok_or_else(|| Error::bad_format(origin, "line 2 must be '(t1 t2)'"))?;
        let mut w = window.split_whitespace();
        let t1 = textio::parse_usize(w.next(), origin, "window start")?;
        let t2 = textio::parse_usize(w.next(), origin, "window end")?;
        if w.next().is_some() {
            return Err(Error::bad_format(origin, "window has extra fields"));
        }
        let mut next = |what: &str, n: usize| {
            let line = lines
                .next()
                .ok_or_else(|| Error::bad_format(origin, format!("missing {what}")))?;
            textio::parse_row(line, n, origin, what)
        };
        let mean = next("mean row", p)?;
        let mut data = Vec::with_capacity(r * p);
        for _ in 0..r {
            data.extend(next("basis row", p)?);
        }
        let eigenvalues = next("eigenvalues", r)?;
        let variance_ratios = next("variance ratios", r)?;
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::bad_format(origin, "trailing data"));
        }
        let basis = DenseMatrix::new(r, p, data)?;
        check_orthonormal(&basis)?;
        Ok(Self {
            basis,
            eigenvalues,
            variance_ratios,
            mean,
            window: (t1, t2),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        textio::write(path.as_ref(), &self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&textio::read(path)?, &path.display().to_string())
    }
}

fn check_orthonormal(basis: &DenseMatrix) -> Result<()> {
    if basis.rows() == 0 || basis.cols() == 0 {
        return Err(Error::ZeroDimension("subspace basis"));
    }
    for i in 0..basis.rows() {
        for j in i..basis.rows() {
            let want = if i == j { 1.0 } else { 0.0 };
            let got = dot(basis.row(i), basis.row(j));
            if (got - want).abs() > ORTHONORMAL_TOL {
                return Err(Error::ConfigInvalid(format!(
                    "basis rows {i} and {j} are not orthonormal (dot {got:e})"
                )));
            }
        }
    }
    Ok(())
}

/// Fits the top-`r` principal directions of checkpoints `t1..=t2`.
///
/// The centered window of `n = t2 - t1 + 1` rows has rank at most `n - 1`,
/// so `r` may not exceed `t2 - t1`. Eigenvalues are those of the sample
/// covariance (divisor `n - 1`); variance ratios divide by the full spectrum.
pub fn pca_fit(traj: &Trajectory, window: (usize, usize), r: usize) -> Result<Subspace> {
    let (t1, t2) = window;
    let last = traj.last_epoch().unwrap_or(0);
    if t1 < 1 || t1 > t2 || t2 > last || traj.is_empty() {
        return Err(Error::WindowOutOfRange { t1, t2, last });
    }
    if r == 0 {
        return Err(Error::ConfigInvalid("PCA rank r must be at least 1".into()));
    }
    let max_rank = (t2 - t1).min(traj.param_dim());
    if r > max_rank {
        return Err(Error::RankTooLarge { r, max: max_rank });
    }
    let rows: Vec<&[f64]> = (t1..=t2).map(|t| traj.row(t).expect("window checked")).collect();
    fit_rows(&rows, r, window)
}

pub(crate) fn fit_rows(rows: &[&[f64]], r: usize, window: (usize, usize)) -> Result<Subspace> {
    let n = rows.len();
    let p = rows[0].len();
    let mut mean = vec![0.0; p];
    for row in rows {
        axpy(1.0, row, &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let mut gram = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let g = dot(&centered[i], &centered[j]);
            gram.set(i, j, g);
            gram.set(j, i, g);
        }
    }
    let denom = (n - 1) as f64;
    let total: f64 = (0..n).map(|i| gram.get(i, i)).sum::<f64>() / denom;
    if !(total >= MIN_TOTAL_VARIANCE) {
        return Err(Error::InsufficientVariance(total));
    }
    let eig = eig_sym(&gram)?;
    let spectrum: Vec<f64> = eig.eigenvalues.iter().map(|l| (l / denom).max(0.0)).collect();
    let spectrum_sum: f64 = spectrum.iter().sum();

    let mut basis = DenseMatrix::zeros(r, p);
    for k in 0..r {
        let a = eig.eigenvectors.row(k);
        let out = basis.row_mut(k);
        for (coef, row) in a.iter().zip(&centered) {
            axpy(*coef, row, out);
        }
        let len = norm(out);
        if len == 0.0 {
            return Err(Error::InsufficientVariance(spectrum[k]));
        }
        out.iter_mut().for_each(|x| *x /= len);
    }
    // Directions with tiny eigenvalues lose orthogonality when mapped back.
    let mut basis = orthonormalize(&basis).map_err(|_| Error::InsufficientVariance(spectrum[r - 1]))?;
    for k in 0..r {
        canonicalize_sign(basis.row_mut(k));
    }
    let eigenvalues = spectrum[..r].to_vec();
    let variance_ratios = eigenvalues.iter().map(|l| l / spectrum_sum).collect();
    Ok(Subspace {
        basis,
        eigenvalues,
        variance_ratios,
        mean,
        window,
    })
}

/// `U^T U g`. The stored mean plays no part.
pub fn project(sub: &Subspace, g: &[f64]) -> Result<Vec<f64>> {
    if g.len() != sub.param_dim() {
        return Err(Error::DimensionMismatch {
            what: "gradient length",
            expected: sub.param_dim(),
            got: g.len(),
        });
    }
    let mut out = vec![0.0; g.len()];
    for u in sub.basis.iter_rows() {
        axpy(dot(u, g), u, &mut out);
    }
    Ok(out)
}

/// Signed inner product of the two leading eigenvectors.
pub fn leading_alignment(a: &Subspace, b: &Subspace) -> Result<f64> {
    if a.param_dim() != b.param_dim() {
        return Err(Error::DimensionMismatch {
            what: "subspace ambient dimension",
            expected: a.param_dim(),
            got: b.param_dim(),
        });
    }
    Ok(dot(a.basis.row(0), b.basis.row(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj(rows: Vec<Vec<f64>>) -> Trajectory {
        let p = rows[0].len();
        Trajectory::from_rows(p, "test", rows).unwrap()
    }

    fn random_traj(seed: u64, n: usize, p: usize) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        traj(
            (0..n)
                .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        )
    }

    #[test]
    fn identical_checkpoints_have_no_variance() {
        let t = traj(vec![vec![0.0, 0.0]; 5]);
        assert!(matches!(pca_fit(&t, (1, 4), 1), Err(Error::InsufficientVariance(_))));
    }

    #[test]
    fn two_checkpoints_give_their_difference() {
        let t = traj(vec![vec![9.0, 9.0, 9.0], vec![1.0, 2.0, 3.0], vec![1.0, 0.0, 4.0]]);
        let s = pca_fit(&t, (1, 2), 1).unwrap();
        let diff = [0.0, -2.0, 1.0];
        let n = norm(&diff);
        // Canonical sign: first component above 1e-12 positive => -2 flips.
        let want = [0.0, 2.0 / n, -1.0 / n];
        for (a, b) in s.basis().row(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(s.variance_ratios(), &[1.0]);
        assert_eq!(s.window(), (1, 2));
    }

    #[test]
    fn window_and_rank_validation() {
        let t = random_traj(0, 11, 4);
        assert!(matches!(pca_fit(&t, (0, 5), 1), Err(Error::WindowOutOfRange { .. })));
        assert!(matches!(pca_fit(&t, (3, 11), 1), Err(Error::WindowOutOfRange { .. })));
        assert!(matches!(pca_fit(&t, (5, 4), 1), Err(Error::WindowOutOfRange { .. })));
        assert!(matches!(
            pca_fit(&t, (1, 3), 3),
            Err(Error::RankTooLarge { r: 3, max: 2 })
        ));
        assert!(pca_fit(&t, (1, 3), 2).is_ok());
    }

    #[test]
    fn projection_fixed_points() {
        let t = random_traj(3, 8, 6);
        let s = pca_fit(&t, (1, 7), 2).unwrap();
        let u = s.basis().row(0).to_vec();
        let pu = project(&s, &u).unwrap();
        for (a, b) in pu.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
        // Remove the span from a vector to get something orthogonal to it.
        let g: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
        let pg = project(&s, &g).unwrap();
        let off: Vec<f64> = g.iter().zip(&pg).map(|(a, b)| a - b).collect();
        let zero = project(&s, &off).unwrap();
        assert!(norm(&zero) < 1e-12 * norm(&off).max(1.0));
        assert!(matches!(project(&s, &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn alignment_self_and_orthogonal_blocks() {
        let t = random_traj(4, 6, 5);
        let s = pca_fit(&t, (1, 5), 2).unwrap();
        assert!((leading_alignment(&s, &s).unwrap().abs() - 1.0).abs() < 1e-12);
        let a = Subspace::from_basis(DenseMatrix::from_rows(&[[1.0, 0.0, 0.0, 0.0]]).unwrap()).unwrap();
        let b = Subspace::from_basis(DenseMatrix::from_rows(&[[0.0, 0.0, 0.6, 0.8]]).unwrap()).unwrap();
        assert!(leading_alignment(&a, &b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn file_round_trip_and_guards() {
        let t = random_traj(5, 9, 7);
        let s = pca_fit(&t, (2, 8), 3).unwrap();
        let text = s.to_text();
        let back = Subspace::from_text(&text, "s").unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_text(), text);
        let bad = text.replacen("SUBPT-SUB 1", "SUBPT-SUB 2", 1);
        assert!(matches!(Subspace::from_text(&bad, "s"), Err(Error::BadFormat { .. })));
    }

    #[test]
    fn full_rank_variance_sums_to_one() {
        let t = random_traj(6, 6, 10);
        let s = pca_fit(&t, (1, 5), 4).unwrap();
        let sum: f64 = s.variance_ratios().iter().sum();
        assert!((sum - 1.0).abs() < 1e-10);
        assert!(s.variance_ratios().windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(s.effective_rank(), 4);
    }

    proptest! {
        #[test]
        fn fit_ignores_row_order(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..7).map(|_| (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let mut shuffled = rows.clone();
            shuffled.reverse();
            shuffled.swap(1, 4);
            let a = pca_fit(&traj(std::iter::once(vec![0.0; 9]).chain(rows).collect()), (1, 7), 3).unwrap();
            let b = pca_fit(&traj(std::iter::once(vec![0.0; 9]).chain(shuffled).collect()), (1, 7), 3).unwrap();
            for (x, y) in a.eigenvalues().iter().zip(b.eigenvalues()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            for k in 0..3 {
                for (x, y) in a.basis().row(k).iter().zip(b.basis().row(k)) {
                    prop_assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }
}
