//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layer::LayerParams;
use crate::tensor::Scalar;

/// Parameter containers that can be viewed as named flat `f64` tensors.
/// Gradients share the container type, so both views line up by position.
pub trait FlatParams {
    fn flat_tensors(&self) -> Vec<(String, &[f64])>;
    fn flat_tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;
}

impl FlatParams for Vec<f64> {
    fn flat_tensors(&self) -> Vec<(String, &[f64])> {
        vec![("p".to_string(), self.as_slice())]
    }

    fn flat_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("p".to_string(), self.as_mut_slice())]
    }
}

impl FlatParams for LayerParams<f64> {
    fn flat_tensors(&self) -> Vec<(String, &[f64])> {
        self.tensors().into_iter().map(|(n, _, d)| (n.to_string(), d)).collect()
    }

    fn flat_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.tensors_mut()
            .into_iter()
            .map(|(n, d)| (n.to_string(), d))
            .collect()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub step: f64,
    /// Coordinates sampled per tensor; tensors at or below this size are checked in full.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: 64,
            seed: 0,
        }
    }
}

/// One loss evaluation, in whatever precision the caller evaluates it.
/// `route` fingerprints any discrete choice the loss makes (top-k support);
/// a probe whose fingerprint differs from the unperturbed one straddles a
/// kink and the coordinate is skipped.
#[derive(Debug, Clone, Copy)]
pub struct Probe<L = f64> {
    pub loss: L,
    pub route: u64,
}

impl<L: Scalar> From<L> for Probe<L> {
    fn from(loss: L) -> Self {
        Probe { loss, route: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    /// `(index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked() > 0 && self.max_rel() < tol
    }
}

/// Compares `analytic` against `(L(p + h e_i) - L(p - h e_i)) / 2h` on a
/// sample of coordinates of every tensor. The denominator is the step
/// actually representable in `f64`. `params` is restored bitwise.
pub fn finite_diff_check<P, F, R, L>(
    params: &mut P,
    analytic: &P,
    mut loss: F,
    opts: &FdOptions,
) -> Result<GradCheckReport>
where
    P: FlatParams,
    F: FnMut(&P) -> Result<R>,
    R: Into<Probe<L>>,
    L: Scalar,
{
    let base_route = loss(params)?.into().route;
    let grads: Vec<(String, Vec<f64>)> = analytic
        .flat_tensors()
        .into_iter()
        .map(|(n, d)| (n, d.to_vec()))
        .collect();
    let sizes: Vec<usize> = params.flat_tensors().iter().map(|(_, d)| d.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tensors = Vec::with_capacity(sizes.len());

    for (ti, &len) in sizes.iter().enumerate() {
        let (name, g) = &grads[ti];
        let coords: Vec<usize> = if len <= opts.coords_per_tensor {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, opts.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut report = TensorCheck {
            name: name.clone(),
            checked: 0,
            skipped: 0,
            max_rel: 0.0,
            mean_rel: 0.0,
            worst: None,
        };
        let mut sum = 0.0;
        for i in coords {
            let orig = params.flat_tensors()[ti].1[i];
            let (up, down) = (orig + opts.step, orig - opts.step);
            params.flat_tensors_mut()[ti].1[i] = up;
            let plus = loss(params)?.into();
            params.flat_tensors_mut()[ti].1[i] = down;
            let minus = loss(params)?.into();
            params.flat_tensors_mut()[ti].1[i] = orig;
            if plus.route != base_route || minus.route != base_route {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss).as_f64() / (up - down);
            let e = rel_err(g[i], numeric);
            report.checked += 1;
            sum += e;
            if report.worst.is_none() || e > report.max_rel {
                report.max_rel = e;
                report.worst = Some((i, g[i], numeric));
            }
        }
        if report.checked > 0 {
            report.mean_rel = sum / report.checked as f64;
        }
        tensors.push(report);
    }
    Ok(GradCheckReport { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::grad::dd::Dd;

    #[test]
    fn norm_squared_toy_in_double_double() {
        // L = |p|² / 2, gradient p
        let mut p = vec![0.3, -0.7, 1e-3, 2.5];
        let g = p.clone();
        let loss = |p: &Vec<f64>| Ok(p.iter().map(|&v| Dd::lift(v) * Dd::lift(v)).sum::<Dd>() * Dd::lift(0.5));
        let r = finite_diff_check(&mut p, &g, loss, &FdOptions::default()).unwrap();
        assert!(r.max_rel() < 1e-9, "{r:?}");
    }

    fn quadratic(p: &[f64]) -> f64 {
        // 0.5 pᵀ A p + bᵀ p with A = [[2, 1], [1, 3]], b = (1, -1)
        0.5 * (2.0 * p[0] * p[0] + 2.0 * p[0] * p[1] + 3.0 * p[1] * p[1]) + p[0] - p[1]
    }

    #[test]
    fn quadratic_toy_passes() {
        let mut p = vec![0.3, -0.7];
        let g = vec![2.0 * 0.3 - 0.7 + 1.0, 0.3 + 3.0 * -0.7 - 1.0];
        let r = finite_diff_check(&mut p, &g, |p: &Vec<f64>| Ok(quadratic(p)), &FdOptions::default()).unwrap();
        assert!(r.passes(1e-6), "{r:?}");
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn sign_flip_is_caught() {
        let mut p = vec![0.3, -0.7];
        let g = vec![-(2.0 * 0.3 - 0.7 + 1.0), -(0.3 + 3.0 * -0.7 - 1.0)];
        let r = finite_diff_check(&mut p, &g, |p: &Vec<f64>| Ok(quadratic(p)), &FdOptions::default()).unwrap();
        assert!((r.max_rel() - 2.0).abs() < 1e-6);
        assert!(!r.passes(1e-6));
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn kinked_probes_are_skipped() {
        let mut p = vec![0.0];
        let g = vec![123.0];
        let r = finite_diff_check(
            &mut p,
            &g,
            |p: &Vec<f64>| {
                Ok(Probe {
                    loss: p[0].abs(),
                    route: (p[0] > 0.0) as u64 + 2 * (p[0] < 0.0) as u64,
                })
            },
            &FdOptions::default(),
        )
        .unwrap();
        assert_eq!(r.tensors[0].skipped, 1);
        assert!(!r.passes(1e-6));
    }
}
