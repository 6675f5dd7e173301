//! Derivative-free minimisation (Nelder–Mead with restarts).

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Relative spread of simplex values at convergence.
    pub f_tol: f64,
    /// Max coordinate distance from the best vertex at convergence.
    pub x_tol: f64,
    pub initial_step: f64,
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_evals: 20_000, f_tol: 1e-11, x_tol: 1e-7, initial_step: 0.25, restarts: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimises `f` from `x0`. Non-finite objective values are treated as `+∞`.
///
/// After each convergence the simplex is rebuilt around the best point;
/// the search stops once a restart no longer improves the value.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut best_x = x0.to_vec();
    let mut best_f = eval(x0);
    let mut evals = 1;
    let mut converged = false;
    for round in 0..=opts.restarts {
        let budget = opts.max_evals.saturating_sub(evals);
        if budget == 0 {
            break;
        }
        let step = opts.initial_step / (1 << round.min(4)) as f64;
        let (x, fx, used, ok) = run(&mut eval, &best_x, best_f, step, budget, opts);
        evals += used;
        let improved = fx < best_f - 1e-12 * (1.0 + best_f.abs());
        if fx <= best_f {
            best_x = x;
            best_f = fx;
        }
        converged = ok;
        if !ok || (round > 0 && !improved) {
            break;
        }
    }
    Minimum { x: best_x, f: best_f, evals, converged }
}

fn run<F>(
    eval: &mut F,
    x0: &[f64],
    f0: f64,
    step: f64,
    budget: usize,
    opts: &NelderMeadOptions,
) -> (Vec<f64>, f64, usize, bool)
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return (Vec::new(), f0, 0, true);
    }
    let mut used = 0;
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += if x[i].abs() > 1.0 { step * x[i].abs() } else { step };
        let v = eval(&x);
        used += 1;
        simplex.push((x, v));
    }

    let point = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(ai, bi)| ai + t * (bi - ai)).collect()
    };

    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let fb = simplex[0].1;
        let fw = simplex[n].1;
        let spread = (fw - fb).abs();
        let size = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if fb.is_finite() && spread <= opts.f_tol * (fb.abs() + 1e-10) && size <= opts.x_tol {
            return (simplex[0].0.clone(), fb, used, true);
        }
        if used >= budget {
            return (simplex[0].0.clone(), fb, used, false);
        }

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / n as f64;
            }
        }
        let worst = simplex[n].0.clone();
        let xr = point(&centroid, &worst, -1.0);
        let fr = eval(&xr);
        used += 1;
        if fr < simplex[0].1 {
            let xe = point(&centroid, &worst, -2.0);
            let fe = eval(&xe);
            used += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < fw {
            let xc = point(&centroid, &xr, 0.5);
            let fc = eval(&xc);
            (xc, fc)
        } else {
            let xc = point(&centroid, &worst, 0.5);
            let fc = eval(&xc);
            (xc, fc)
        };
        used += 1;
        if fc < fw.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            v.0 = point(&best, &v.0, 0.5);
            v.1 = eval(&v.0);
            used += 1;
        }
    }
}
