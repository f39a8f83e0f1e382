//! Derivative-free downhill simplex minimization.

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadConfig {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Stop when `max f - min f` over the simplex falls below this.
    pub f_tolerance: f64,
    pub max_evaluations: usize,
}

impl Default for NelderMeadConfig {
    fn default() -> Self {
        NelderMeadConfig {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            f_tolerance: 1e-5,
            max_evaluations: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0` with an axis-aligned initial simplex of the given
/// per-coordinate steps. The result is never worse than `f(x0)`. Non-finite
/// values are treated as `+inf`.
pub fn minimize(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    steps: &[f64],
    cfg: &NelderMeadConfig,
) -> Minimum {
    assert_eq!(x0.len(), steps.len());
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        if evals >= cfg.max_evaluations {
            break;
        }
        let mut x = x0.to_vec();
        x[i] += steps[i];
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }
    let by_value = |a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)| a.1.total_cmp(&b.1);
    let mut converged = false;
    while simplex.len() == n + 1 {
        simplex.sort_by(by_value);
        let spread = simplex[n].1 - simplex[0].1;
        if spread < cfg.f_tolerance {
            converged = true;
            break;
        }
        if evals >= cfg.max_evaluations {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v.0[j]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            (0..n)
                .map(|j| centroid[j] + t * (worst.0[j] - centroid[j]))
                .collect()
        };

        let xr = along(-cfg.reflection);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            if evals >= cfg.max_evaluations {
                simplex[n] = (xr, fr);
                continue;
            }
            let xe = along(-cfg.reflection * cfg.expansion);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        if evals >= cfg.max_evaluations {
            if fr < worst.1 {
                simplex[n] = (xr, fr);
            }
            continue;
        }
        let (xc, fc, bound) = if fr < worst.1 {
            let xc = along(-cfg.reflection * cfg.contraction);
            let fc = eval(&xc, &mut evals);
            (xc, fc, fr)
        } else {
            let xc = along(cfg.contraction);
            let fc = eval(&xc, &mut evals);
            (xc, fc, worst.1)
        };
        if fc < bound {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            if evals >= cfg.max_evaluations {
                break;
            }
            let x: Vec<f64> = (0..n)
                .map(|j| best[j] + cfg.shrink * (v.0[j] - best[j]))
                .collect();
            let fx = eval(&x, &mut evals);
            *v = (x, fx);
        }
    }
    let (x, fx) = simplex
        .into_iter()
        .min_by(by_value)
        .expect("simplex holds x0");
    Minimum {
        x,
        fx,
        evaluations: evals,
        converged,
    }
}
