use nalgebra::DMatrix;

use super::{SolverError, Tolerances};

#[derive(Debug, Clone, PartialEq)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    /// Feedback gain with `u = Kx`.
    pub k: DMatrix<f64>,
    pub iterations: usize,
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .fold(0.0, |r, e| r.max(e.norm()))
}

fn gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>, SolverError> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let rhs = &bt_p * a;
    let k = s
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| s.clone().lu().solve(&rhs))
        .ok_or(SolverError::Singular("R + BᵀPB"))?;
    Ok(-k)
}

/// Riccati residual `Q + AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA − P` in Frobenius norm.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    match gain(a, b, r, p) {
        Ok(k) => {
            let at_p = a.transpose() * p;
            (q + &at_p * a + &at_p * b * k - p).norm()
        }
        Err(_) => f64::INFINITY,
    }
}

/// Discrete algebraic Riccati equation by fixed-point iteration of the
/// Riccati recursion started at `P = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DareSolution, SolverError> {
    solve_dare_with(a, b, q, r, &Tolerances::default())
}

pub fn solve_dare_with(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: &Tolerances,
) -> Result<DareSolution, SolverError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(SolverError::Dimension("DARE"));
    }
    let mut p = q.clone();
    for it in 1..=tol.dare_max_iter {
        let k = gain(a, b, r, &p)?;
        let at_p = a.transpose() * &p;
        let mut next = q + &at_p * a + &at_p * b * &k;
        next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &p).norm();
        p = next;
        if delta <= tol.dare_tol * (1.0 + p.norm()) {
            let k = gain(a, b, r, &p)?;
            let rho = spectral_radius(&(a + b * &k));
            if rho >= 1.0 {
                return Err(SolverError::Unstable(rho));
            }
            return Ok(DareSolution { p, k, iterations: it });
        }
    }
    Err(SolverError::NoConvergence(tol.dare_max_iter))
}

/// Solves `P − ΦᵀPΦ = M`.
pub fn solve_discrete_lyapunov(phi: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>, SolverError> {
    solve_discrete_lyapunov_with(phi, m, &Tolerances::default())
}

pub fn solve_discrete_lyapunov_with(
    phi: &DMatrix<f64>,
    m: &DMatrix<f64>,
    tol: &Tolerances,
) -> Result<DMatrix<f64>, SolverError> {
    let n = phi.nrows();
    if phi.ncols() != n || m.shape() != (n, n) {
        return Err(SolverError::Dimension("Lyapunov"));
    }
    let rho = spectral_radius(phi);
    if rho >= 1.0 {
        return Err(SolverError::Unstable(rho));
    }
    let p = if n <= tol.lyapunov_direct_max_n {
        // (I − Φᵀ⊗Φᵀ) vec(P) = vec(M), column-major vec.
        let phit = phi.transpose();
        let kron = phit.kronecker(&phit);
        let lhs = DMatrix::identity(n * n, n * n) - kron;
        let rhs = nalgebra::DVector::from_column_slice(m.as_slice());
        let v = lhs.lu().solve(&rhs).ok_or(SolverError::Singular("Lyapunov"))?;
        DMatrix::from_column_slice(n, n, v.as_slice())
    } else {
        // Doubling: P ← P + AᵀPA, A ← A².
        let mut p = m.clone();
        let mut a = phi.clone();
        let mut k = 0;
        loop {
            let add = a.transpose() * &p * &a;
            p += &add;
            a = &a * &a;
            k += 1;
            if add.norm() <= tol.lyapunov_series_tol * (1.0 + p.norm()) {
                break;
            }
            if k > 200 {
                return Err(SolverError::NoConvergence(k));
            }
        }
        p
    };
    Ok((&p + p.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stable(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let r = spectral_radius(&a);
        a * (0.9 / r)
    }

    #[test]
    fn dare_trivial_one_step() {
        let i = DMatrix::identity(2, 2);
        let sol = solve_dare(&DMatrix::zeros(2, 2), &i, &i, &i).unwrap();
        assert!((&sol.p - &i).norm() < 1e-12);
        assert!(sol.k.norm() < 1e-12);
    }

    #[test]
    fn dare_scalar_matches_golden_ratio() {
        // p² − p − 1 = 0 for a=b=q=r=1.
        let one = dmatrix![1.0];
        let sol = solve_dare(&one, &one, &one, &one).unwrap();
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((sol.p[(0, 0)] - golden).abs() < 1e-10);
        assert!((sol.k[(0, 0)] + golden / (1.0 + golden)).abs() < 1e-10);
    }

    #[test]
    fn dare_double_integrator_stabilizes() {
        let a = dmatrix![1.0, 0.1; 0.0, 1.0];
        let b = dmatrix![0.005; 0.1];
        let q = DMatrix::from_diagonal(&nalgebra::dvector![100.0, 100.0]);
        let r = dmatrix![0.1];
        let sol = solve_dare(&a, &b, &q, &r).unwrap();
        assert!(spectral_radius(&(&a + &b * &sol.k)) < 1.0 - 1e-6);
        assert!(dare_residual(&a, &b, &q, &r, &sol.p) < 1e-8);
    }

    #[test]
    fn dare_nonconvergence_is_reported() {
        // Unstabilizable mode makes the recursion diverge.
        let a = dmatrix![2.0, 0.0; 0.0, 0.5];
        let b = dmatrix![0.0; 1.0];
        let tol = Tolerances { dare_max_iter: 200, ..Tolerances::default() };
        let err = solve_dare_with(&a, &b, &DMatrix::identity(2, 2), &dmatrix![1.0], &tol).unwrap_err();
        assert_eq!(err, SolverError::NoConvergence(200));
    }

    #[test]
    fn lyapunov_trivial_cases() {
        let m = dmatrix![2.0, 0.5; 0.5, 1.0];
        let p = solve_discrete_lyapunov(&DMatrix::zeros(2, 2), &m).unwrap();
        assert!((&p - &m).norm() < 1e-14);
        let p = solve_discrete_lyapunov(&dmatrix![0.5], &dmatrix![1.0]).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn lyapunov_matches_series_oracle() {
        let phi = random_stable(4, 3);
        let m = DMatrix::identity(4, 4);
        let p = solve_discrete_lyapunov(&phi, &m).unwrap();
        let mut series = DMatrix::zeros(4, 4);
        let mut pk = DMatrix::identity(4, 4);
        for _ in 0..2000 {
            series += pk.transpose() * &m * &pk;
            pk = &pk * &phi;
        }
        assert!((&p - &series).amax() < 1e-10);
        assert!((&p - phi.transpose() * &p * &phi - &m).norm() < 1e-9);
    }

    #[test]
    fn lyapunov_large_uses_series_and_agrees() {
        let phi = random_stable(6, 5);
        let m = DMatrix::identity(6, 6);
        let direct = solve_discrete_lyapunov(&phi, &m).unwrap();
        let tol = Tolerances { lyapunov_direct_max_n: 2, ..Tolerances::default() };
        let series = solve_discrete_lyapunov_with(&phi, &m, &tol).unwrap();
        assert!((&direct - &series).amax() < 1e-9);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        assert!(matches!(
            solve_discrete_lyapunov(&dmatrix![1.5], &dmatrix![1.0]),
            Err(SolverError::Unstable(_))
        ));
    }
}
