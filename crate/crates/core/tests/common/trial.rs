//! Trial fixtures and a brute-force program simulator written independently
//! of the library.

use elicit::pos::{Endpoints, ExacerbationEndpoint, Fev1Endpoint, SuccessRule, TrialDesign};
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};

use super::{bisect, simpson_normal_cdf};

pub fn design(arm_size: u32) -> TrialDesign {
    TrialDesign::two_doses(
        arm_size,
        ExacerbationEndpoint {
            follow_up_years: 1.0,
            placebo_rate: 0.9,
            dispersion: 0.5,
        },
        Fev1Endpoint { residual_sd: 400.0 },
    )
}

/// Brute-force program simulation written independently of the library:
/// per-arm negative-binomial totals, Wald and z tests, same success rule.
pub fn oracle(reduction: f64, fev1: f64, d: &TrialDesign, rule: &SuccessRule, n_sims: u64, seed: u64) -> (f64, f64) {
    let mut rng = StdRng::seed_from_u64(seed);
    let n = d.arm_size as f64;
    let e = &d.exacerbation;
    let z_crit = bisect(simpson_normal_cdf, 1.0 - rule.alpha, 0.0, 6.0);
    let se = d.fev1.residual_sd / n.sqrt();
    let noise = Normal::new(0.0, se).unwrap();
    let events = |rate: f64, rng: &mut StdRng| -> f64 {
        let lambda = Gamma::new(n / e.dispersion, rate * e.dispersion).unwrap().sample(rng) * e.follow_up_years;
        let y = if lambda > 0.0 { Poisson::new(lambda).unwrap().sample(rng) } else { 0.0 };
        if y == 0.0 {
            0.5
        } else {
            y
        }
    };
    let (mut sig_count, mut joint_count) = (0u64, 0u64);
    for _ in 0..n_sims {
        let mut program_sig = true;
        let mut program_tpp = true;
        for _trial in 0..d.n_trials {
            let yp = events(e.placebo_rate, &mut rng);
            let mp = noise.sample(&mut rng);
            let mut best: Option<(f64, f64)> = None;
            for dose in &d.doses {
                let yd = events(e.placebo_rate * (1.0 - reduction * dose.effect_ratio), &mut rng);
                let md = fev1 * dose.effect_ratio + noise.sample(&mut rng);
                let rr = yd / yp;
                let z1 = -rr.ln() / (1.0 / yd + 1.0 / yp + 2.0 * e.dispersion / n).sqrt();
                let diff = md - mp;
                let z2 = diff / (se * 2f64.sqrt());
                let significant = match rule.endpoints {
                    Endpoints::Both => z1 > z_crit && z2 > z_crit,
                    Endpoints::ExacerbationOnly => z1 > z_crit,
                    Endpoints::Fev1Only => z2 > z_crit,
                };
                if significant && best.is_none_or(|b| 1.0 - rr > b.0) {
                    best = Some((1.0 - rr, diff));
                }
            }
            match best {
                None => {
                    program_sig = false;
                    program_tpp = false;
                }
                Some((red, diff)) => {
                    let ok_ex = rule.endpoints == Endpoints::Fev1Only || rule.tpp.exacerbation.is_none_or(|t| red >= t);
                    let ok_fev = rule.endpoints == Endpoints::ExacerbationOnly || rule.tpp.fev1.is_none_or(|t| diff >= t);
                    program_tpp &= ok_ex && ok_fev;
                }
            }
        }
        sig_count += u64::from(program_sig);
        joint_count += u64::from(program_sig && program_tpp);
    }
    (sig_count as f64 / n_sims as f64, joint_count as f64 / n_sims as f64)
}

pub fn within_3se(a: f64, b: f64, n1: u64, n2: u64) -> bool {
    let var = |p: f64, n: u64| p * (1.0 - p) / n as f64;
    let pooled = 0.5 * (a + b);
    let se = (var(pooled, n1) + var(pooled, n2)).sqrt();
    (a - b).abs() <= 3.0 * se.max(1.0 / n1.min(n2) as f64)
}
