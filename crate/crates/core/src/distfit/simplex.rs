//! Nelder–Mead simplex minimizer.

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    /// Converged once every vertex lies within this max-norm distance of the best one.
    pub diameter_tol: f64,
    pub max_iterations: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            diameter_tol: 1e-10,
            max_iterations: 20_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexOutcome {
    pub point: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Minimizes `f` starting from the simplex `start + steps[i] * e_i`.
///
/// Non-finite objective values are treated as `+inf`, which keeps the search
/// away from invalid parameter regions.
pub fn minimize<F>(f: F, start: &[f64], steps: &[f64], opts: SimplexOptions) -> SimplexOutcome
where
    F: Fn(&[f64]) -> f64,
{
    let n = start.len();
    assert_eq!(steps.len(), n, "one initial step per coordinate");
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut verts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    verts.push(start.to_vec());
    for i in 0..n {
        let mut v = start.to_vec();
        v[i] += steps[i];
        verts.push(v);
    }
    let mut vals: Vec<f64> = verts.iter().map(|v| eval(v)).collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        verts = order.iter().map(|&i| verts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let diameter = verts[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&verts[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if diameter < opts.diameter_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|j| verts[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let towards = |coef: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&verts[n])
                .map(|(c, w)| c + coef * (c - w))
                .collect()
        };

        let reflected = towards(REFLECT);
        let fr = eval(&reflected);
        if fr < vals[0] {
            let expanded = towards(REFLECT * EXPAND);
            let fe = eval(&expanded);
            if fe < fr {
                verts[n] = expanded;
                vals[n] = fe;
            } else {
                verts[n] = reflected;
                vals[n] = fr;
            }
            continue;
        }
        if fr < vals[n - 1] {
            verts[n] = reflected;
            vals[n] = fr;
            continue;
        }
        let (contracted, fc) = if fr < vals[n] {
            let c = towards(REFLECT * CONTRACT);
            let fc = eval(&c);
            (c, fc)
        } else {
            let c = towards(-CONTRACT);
            let fc = eval(&c);
            (c, fc)
        };
        if fc < vals[n].min(fr) {
            verts[n] = contracted;
            vals[n] = fc;
            continue;
        }
        for i in 1..=n {
            let shrunk: Vec<f64> = verts[i]
                .iter()
                .zip(&verts[0])
                .map(|(x, b)| b + SHRINK * (x - b))
                .collect();
            vals[i] = eval(&shrunk);
            verts[i] = shrunk;
        }
    }

    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    SimplexOutcome {
        point: verts[best].clone(),
        value: vals[best],
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let out = minimize(f, &[-1.2, 1.0], &[0.5, 0.5], SimplexOptions::default());
        assert!(out.converged);
        assert!((out.point[0] - 1.0).abs() < 1e-8, "{:?}", out.point);
        assert!((out.point[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn reports_non_convergence() {
        let f = |x: &[f64]| x[0] * x[0];
        let out = minimize(
            f,
            &[5.0],
            &[1.0],
            SimplexOptions {
                diameter_tol: 1e-10,
                max_iterations: 3,
            },
        );
        assert!(!out.converged);
    }

    #[test]
    fn avoids_infinite_region() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 0.5).powi(2) };
        let out = minimize(f, &[2.0], &[1.0], SimplexOptions::default());
        assert!((out.point[0] - 0.5).abs() < 1e-9);
    }
}
