//! SMO-style coordinate ascent on the epsilon-SVR dual.
//!
//! The 2l-variable box QP (alpha, alpha*) is solved with maximal-violating-
//! pair working-set selection. Feasibility of the equality constraint is
//! maintained exactly by construction; the stopping criterion is the KKT
//! violation gap dropping below `tol`.

/// Solver knobs. `tol` is the documented KKT gap; `tau` guards degenerate
/// curvature.
pub struct SmoConfig {
    pub c: f64,
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SmoConfig {
    fn default() -> Self {
        SmoConfig { c: 1.0, epsilon: 0.1, tol: 1e-3, max_iter: 500_000 }
    }
}

const TAU: f64 = 1e-12;

pub struct SmoSolution {
    /// beta_i = alpha_i - alpha*_i per sample.
    pub beta: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    /// Final KKT violation gap.
    pub gap: f64,
}

/// `kernel` is the dense l x l Gram matrix, row-major.
pub fn solve(kernel: &[f64], y: &[f64], cfg: &SmoConfig) -> SmoSolution {
    let l = y.len();
    assert_eq!(kernel.len(), l * l);
    let n = 2 * l;
    let sign = |t: usize| if t < l { 1.0 } else { -1.0 };
    let base = |t: usize| if t < l { t } else { t - l };
    let q = |t: usize, u: usize| sign(t) * sign(u) * kernel[base(t) * l + base(u)];

    let mut z = vec![0.0f64; n];
    // gradient of the dual objective at z = 0 is the linear term
    let mut grad: Vec<f64> = (0..n)
        .map(|t| if t < l { cfg.epsilon - y[t] } else { cfg.epsilon + y[t - l] })
        .collect();

    let in_up = |t: usize, z: &[f64]| {
        if sign(t) > 0.0 {
            z[t] < cfg.c - 1e-15
        } else {
            z[t] > 1e-15
        }
    };
    let in_low = |t: usize, z: &[f64]| {
        if sign(t) > 0.0 {
            z[t] > 1e-15
        } else {
            z[t] < cfg.c - 1e-15
        }
    };

    let mut iterations = 0;
    let mut gap = f64::INFINITY;
    while iterations < cfg.max_iter {
        // maximal violating pair
        let mut i = usize::MAX;
        let mut m_up = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut m_low = f64::INFINITY;
        for t in 0..n {
            let v = -sign(t) * grad[t];
            if in_up(t, &z) && v > m_up {
                m_up = v;
                i = t;
            }
            if in_low(t, &z) && v < m_low {
                m_low = v;
                j = t;
            }
        }
        gap = m_up - m_low;
        if gap <= cfg.tol || i == usize::MAX || j == usize::MAX {
            break;
        }
        iterations += 1;

        let (ui, uj) = (sign(i), sign(j));
        let qii = q(i, i);
        let qjj = q(j, j);
        let qij = q(i, j);
        let (old_i, old_j) = (z[i], z[j]);
        if ui != uj {
            let mut a = qii + qjj + 2.0 * qij;
            if a <= 0.0 {
                a = TAU;
            }
            let delta = (-grad[i] - grad[j]) / a;
            let diff = z[i] - z[j];
            z[i] += delta;
            z[j] += delta;
            if diff > 0.0 && z[j] < 0.0 {
                z[j] = 0.0;
                z[i] = diff;
            } else if diff <= 0.0 && z[i] < 0.0 {
                z[i] = 0.0;
                z[j] = -diff;
            }
            if z[i] > cfg.c {
                z[j] -= z[i] - cfg.c;
                z[i] = cfg.c;
            }
            if z[j] > cfg.c {
                z[i] -= z[j] - cfg.c;
                z[j] = cfg.c;
            }
        } else {
            let mut a = qii + qjj - 2.0 * qij;
            if a <= 0.0 {
                a = TAU;
            }
            let delta = (grad[i] - grad[j]) / a;
            let sum = z[i] + z[j];
            z[i] -= delta;
            z[j] += delta;
            if z[i] < 0.0 {
                z[i] = 0.0;
                z[j] = sum;
            }
            if z[j] < 0.0 {
                z[j] = 0.0;
                z[i] = sum;
            }
            if z[i] > cfg.c {
                z[i] = cfg.c;
                z[j] = sum - cfg.c;
            }
            if z[j] > cfg.c {
                z[j] = cfg.c;
                z[i] = sum - cfg.c;
            }
        }
        z[i] = z[i].clamp(0.0, cfg.c);
        z[j] = z[j].clamp(0.0, cfg.c);

        let (di, dj) = (z[i] - old_i, z[j] - old_j);
        if di != 0.0 || dj != 0.0 {
            for t in 0..n {
                grad[t] += q(t, i) * di + q(t, j) * dj;
            }
        }
    }

    // bias from the free variables, else the midpoint of the violation gap
    let mut free_sum = 0.0;
    let mut free_n = 0usize;
    let mut m_up = f64::NEG_INFINITY;
    let mut m_low = f64::INFINITY;
    for t in 0..n {
        let v = -sign(t) * grad[t];
        if z[t] > 1e-12 && z[t] < cfg.c - 1e-12 {
            free_sum += v;
            free_n += 1;
        }
        if in_up(t, &z) {
            m_up = m_up.max(v);
        }
        if in_low(t, &z) {
            m_low = m_low.min(v);
        }
    }
    let bias = if free_n > 0 {
        free_sum / free_n as f64
    } else if m_up.is_finite() && m_low.is_finite() {
        (m_up + m_low) / 2.0
    } else {
        0.0
    };

    let beta: Vec<f64> = (0..l).map(|t| z[t] - z[t + l]).collect();
    SmoSolution { beta, bias, iterations, gap }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram(xs: &[Vec<f64>], gamma: f64) -> Vec<f64> {
        let l = xs.len();
        let mut k = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..l {
                let d2: f64 =
                    xs[i].iter().zip(&xs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                k[i * l + j] = (-gamma * d2).exp();
            }
        }
        k
    }

    #[test]
    fn constant_targets_solved_at_zero_iterations() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y = vec![3.5; 10];
        let k = gram(&xs, 0.5);
        let cfg = SmoConfig { c: 10.0, epsilon: 0.1, ..Default::default() };
        let sol = solve(&k, &y, &cfg);
        assert_eq!(sol.iterations, 0);
        assert!((sol.bias - 3.5).abs() < 1e-9);
        assert!(sol.beta.iter().all(|b| b.abs() < 1e-12));
    }

    #[test]
    fn dual_feasibility_on_random_sets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let l = rng.gen_range(5..40);
            let xs: Vec<Vec<f64>> =
                (0..l).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let y: Vec<f64> = xs
                .iter()
                .map(|x| x[0] * 2.0 - x[1] + rng.gen_range(-0.1..0.1))
                .collect();
            let k = gram(&xs, 0.7);
            let cfg = SmoConfig { c: 5.0, epsilon: 0.05, ..Default::default() };
            let sol = solve(&k, &y, &cfg);
            let sum: f64 = sol.beta.iter().sum();
            assert!(sum.abs() <= 1e-6, "trial {trial}: sum(beta) = {sum}");
            assert!(sol.beta.iter().all(|b| b.abs() <= cfg.c + 1e-9));
            assert!(sol.gap <= cfg.tol, "trial {trial}: gap {}", sol.gap);
        }
    }
}
