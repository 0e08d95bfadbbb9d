//! Closed-form moment oracle for the two-regime relaxation model.
//!
//! Between jumps `dY = −α_i(Y − c_i)dt`; at rate `λ` the regime moves by the
//! routing matrix and `Y ↦ κY + ξ` with `Eξ = 0`, `Eξ² = β²/3`. The first and
//! second regime-restricted moments then solve linear ODEs, which give the
//! stationary moments, the corrector (affine in `y` inside the invariant band)
//! and `σ² = 2E_{μ*}[χ(Y,ξ)(Y − ȳ)]` for the observable `g(y) = y`.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

pub struct OuParams {
    pub alpha: [f64; 2],
    pub center: [f64; 2],
    pub kappa: f64,
    pub beta: f64,
    pub lambda: f64,
    pub p: f64,
    pub q: f64,
}

impl Default for OuParams {
    fn default() -> Self {
        Self {
            alpha: [1.0, 2.0],
            center: [0.0, 1.0],
            kappa: 0.5,
            beta: 1.0,
            lambda: 1.0,
            p: 0.5,
            q: 0.5,
        }
    }
}

pub struct OuOracle {
    pub p_star: Vector2<f64>,
    pub m_star: Vector2<f64>,
    pub s_star: Vector2<f64>,
    pub y_bar: f64,
    /// `χ(y, i) = slope[i]·y + intercept[i]`.
    pub slope: [f64; 2],
    pub intercept: [f64; 2],
    pub sigma2: f64,
}

impl OuOracle {
    pub fn new(pr: &OuParams) -> Self {
        let lam = pr.lambda;
        let pi = Matrix2::new(1.0 - pr.p, pr.p, pr.q, 1.0 - pr.q);
        let pit = pi.transpose();
        let q = (pit - Matrix2::identity()) * lam;
        let a = Matrix2::from_diagonal(&Vector2::new(pr.alpha[0], pr.alpha[1]));
        let ac = Matrix2::from_diagonal(&Vector2::new(pr.alpha[0] * pr.center[0], pr.alpha[1] * pr.center[1]));
        // stationary regime law: Q p = 0, 1ᵀp = 1
        let mut aug = DMatrix::zeros(3, 2);
        let mut rhs = DVector::zeros(3);
        for r in 0..2 {
            for c in 0..2 {
                aug[(r, c)] = q[(r, c)];
            }
        }
        aug[(2, 0)] = 1.0;
        aug[(2, 1)] = 1.0;
        rhs[2] = 1.0;
        let p_star = lstsq(&aug, &rhs);
        let p_star = Vector2::new(p_star[0], p_star[1]);
        // dm/dt = B m + AC p
        let b1 = -a - Matrix2::identity() * lam + pit * (lam * pr.kappa);
        let m_star = -b1.try_inverse().unwrap() * (ac * p_star);
        // ds/dt = B2 s + 2 AC m + λ β²/3 Πᵀ p
        let b2 = -a * 2.0 - Matrix2::identity() * lam + pit * (lam * pr.kappa * pr.kappa);
        let s_star = -b2.try_inverse().unwrap() * (ac * m_star * 2.0 + pit * p_star * (lam * pr.beta * pr.beta / 3.0));
        let y_bar = m_star.sum();

        let chi = |y: f64, i: usize| -> f64 {
            let mut p0 = Vector2::zeros();
            p0[i] = 1.0;
            let dp = p0 - p_star;
            // ∫(p(t) − p*) dt = u with Q u = −dp, 1ᵀu = 0
            let mut rhs = DVector::zeros(3);
            rhs[0] = -dp[0];
            rhs[1] = -dp[1];
            let u = lstsq(&aug, &rhs);
            let u = Vector2::new(u[0], u[1]);
            let dm = p0 * y - m_star;
            let int_m = b1.try_inverse().unwrap() * (-dm - ac * u);
            int_m.sum()
        };
        let intercept = [chi(0.0, 0), chi(0.0, 1)];
        let slope = [chi(1.0, 0) - intercept[0], chi(1.0, 1) - intercept[1]];
        let sigma2 = (0..2)
            .map(|i| {
                2.0 * (slope[i] * s_star[i] + intercept[i] * m_star[i]
                    - y_bar * (slope[i] * m_star[i] + intercept[i] * p_star[i]))
            })
            .sum();
        Self {
            p_star,
            m_star,
            s_star,
            y_bar,
            slope,
            intercept,
            sigma2,
        }
    }

    pub fn chi(&self, y: f64, i: usize) -> f64 {
        self.slope[i] * y + self.intercept[i]
    }
}

fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    a.clone().svd(true, true).solve(b, 1e-14).unwrap()
}
