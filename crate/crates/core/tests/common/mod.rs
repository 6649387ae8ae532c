//! Shared oracles for the integration and acceptance suites. Everything
//! here is deliberately independent of the solver code paths it checks.

use nalgebra::{Matrix3, Vector3};

/// Finite-horizon discrete Riccati recursion for the affine tracking
/// problem `min Σ ½((s−s_f)ᵀ W_p (s−s_f) + ρu²) + ½(s_N−s_f)ᵀ W_f (s_N−s_f)`
/// under `s' = A s + B u`. Returns per-step `(K_k, kff_k)` of the optimal
/// law `u_k = K_k s_k + kff_k`.
pub struct RiccatiOracle {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    pub w_p: Matrix3<f64>,
    pub w_f: Matrix3<f64>,
    pub rho: f64,
    pub goal: Vector3<f64>,
}

impl RiccatiOracle {
    pub fn gains(&self, horizon: usize) -> Vec<(Vector3<f64>, f64)> {
        // value function V_k(s) = ½ sᵀ P s + pᵀ s (+ const)
        let mut big_p = self.w_f;
        let mut small_p = -self.w_f * self.goal;
        let mut gains = vec![(Vector3::zeros(), 0.0); horizon];
        for k in (0..horizon).rev() {
            let quu = self.rho + (self.b.transpose() * big_p * self.b)[(0, 0)];
            let k_row: Vector3<f64> = -(self.b.transpose() * big_p * self.a).transpose() / quu;
            let kff = -self.b.dot(&small_p) / quu;
            gains[k] = (k_row, kff);
            big_p = self.w_p + self.a.transpose() * big_p * self.a - quu * k_row * k_row.transpose();
            small_p = -self.w_p * self.goal + self.a.transpose() * small_p - quu * kff * k_row;
        }
        gains
    }

    /// Optimal control sequence and states from `s0`.
    pub fn rollout(&self, s0: Vector3<f64>, horizon: usize) -> (Vec<Vector3<f64>>, Vec<f64>) {
        let gains = self.gains(horizon);
        let mut states = vec![s0];
        let mut controls = Vec::with_capacity(horizon);
        for (k_row, kff) in gains {
            let s = *states.last().unwrap();
            let u = k_row.dot(&s) + kff;
            states.push(self.a * s + self.b * u);
            controls.push(u);
        }
        (states, controls)
    }
}

/// Brute-force check of the same LQ problem: states are affine in the
/// controls, so the optimum solves one dense symmetric linear system. Used
/// to validate the Riccati oracle itself on small horizons.
pub fn lq_optimum_by_least_squares(
    a: &Matrix3<f64>,
    b: &Vector3<f64>,
    w_p: &Matrix3<f64>,
    w_f: &Matrix3<f64>,
    rho: f64,
    goal: &Vector3<f64>,
    s0: &Vector3<f64>,
    horizon: usize,
) -> Vec<f64> {
    let n = horizon;
    // s_k = A^k s0 + Σ_{j<k} A^(k-1-j) B u_j  =: base_k + Σ_j G[k][j] u_j
    let mut base = vec![*s0];
    for k in 0..n {
        base.push(a * base[k]);
    }
    let mut g = vec![vec![Vector3::zeros(); n]; n + 1];
    for k in 1..=n {
        for j in 0..k {
            // A^(k-1-j) B
            let mut v = *b;
            for _ in 0..(k - 1 - j) {
                v = a * v;
            }
            g[k][j] = v;
        }
    }
    // J(u) = Σ_k ½ e_kᵀ W_k e_k + ½ρ Σ u², e_k = base_k − goal + Σ G[k][j] u_j
    // normal equations: H u = -grad at u = 0
    let weight = |k: usize| if k == n { *w_f } else { *w_p };
    let mut h = ndarray::Array2::<f64>::zeros((n, n));
    let mut rhs = ndarray::Array1::<f64>::zeros(n);
    for k in 1..=n {
        let wk = weight(k);
        let e0 = base[k] - goal;
        for i in 0..n {
            let gi = g[k][i];
            if gi == Vector3::zeros() {
                continue;
            }
            rhs[i] -= (wk * e0).dot(&gi);
            for j in 0..n {
                let gj = g[k][j];
                h[[i, j]] += (wk * gj).dot(&gi);
            }
        }
    }
    for i in 0..n {
        h[[i, i]] += rho;
    }
    // also the k = 0 running term, constant in u: no gradient contribution
    solve_dense(h, rhs)
}

fn solve_dense(mut a: ndarray::Array2<f64>, mut b: ndarray::Array1<f64>) -> Vec<f64> {
    let n = b.len();
    // Gaussian elimination with partial pivoting
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[[r, col]].abs() > a[[piv, col]].abs() {
                piv = r;
            }
        }
        if piv != col {
            for c in 0..n {
                let tmp = a[[col, c]];
                a[[col, c]] = a[[piv, c]];
                a[[piv, c]] = tmp;
            }
            b.swap(col, piv);
        }
        let d = a[[col, col]];
        for r in col + 1..n {
            let f = a[[r, col]] / d;
            for c in col..n {
                a[[r, c]] -= f * a[[col, c]];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in r + 1..n {
            acc -= a[[r, c]] * x[c];
        }
        x[r] = acc / a[[r, r]];
    }
    x
}
