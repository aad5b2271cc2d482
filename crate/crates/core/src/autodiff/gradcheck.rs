use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max over components of `|a - d| / max(|a|, |d|, floor)`, where the
    /// floor is [`GRAD_FLOOR`] times the largest analytic component.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Components left out because a probe crossed a ReLU or max-pool kink.
    pub skipped: usize,
}

/// Components far below the gradient's own scale are dominated by the
/// round-off of the differenced loss; their error is measured against this
/// fraction of the largest component instead of their own magnitude.
pub const GRAD_FLOOR: f64 = 1e-6;

/// A central difference whose estimated round-off exceeds this fraction of
/// the value it measures is re-estimated with the wide stencil.
const RESOLVE: f64 = 1e-5;

/// Step of the wide five-point stencil, in units of the caller's step.
const WIDE_FACTOR: f64 = 100.0;

fn rel_error(a: f64, d: f64, floor: f64) -> f64 {
    (a - d).abs() / a.abs().max(d.abs()).max(floor).max(1e-12)
}

fn evaluate<F>(f: &F, points: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item()?, tape.kink_signature()))
}

/// Fourth-order central difference `(−f(2h) + 8f(h) − 8f(−h) + f(−2h))/12h`.
/// Returns `None` when a probe changes the piecewise branch.
fn wide_difference<F>(f: &F, probe: &mut [Tensor], t: usize, j: usize, h: f64, sig: u64) -> Result<Option<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let x0 = probe[t].data()[j];
    let mut vals = [0.0; 4];
    let mut same = true;
    for (v, k) in vals.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
        probe[t].data_mut()[j] = x0 + k * h;
        let (fv, sv) = evaluate(f, probe)?;
        *v = fv;
        same &= sv == sig;
    }
    probe[t].data_mut()[j] = x0;
    Ok(same.then(|| (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * h)))
}

fn check<F>(f: F, points: &[Tensor], eps: f64, guarded: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let base_sig = tape.kink_signature();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let scale = analytic.iter().flat_map(|g| g.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = GRAD_FLOOR * scale;
    let mut probe = points.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for (t, grad) in analytic.iter().enumerate() {
        for j in 0..points[t].len() {
            let x0 = points[t].data()[j];
            let (hi, lo) = (x0 + eps, x0 - eps);
            probe[t].data_mut()[j] = hi;
            let (fp, sp) = evaluate(&f, &probe)?;
            probe[t].data_mut()[j] = lo;
            let (fm, sm) = evaluate(&f, &probe)?;
            probe[t].data_mut()[j] = x0;
            if guarded && (sp != base_sig || sm != base_sig) {
                report.skipped += 1;
                continue;
            }
            // divide by the representable step, not 2ε
            let mut fd = (fp - fm) / (hi - lo);
            // rounding of the two loss values limits what the narrow stencil resolves
            let noise = f64::EPSILON * fp.abs().max(fm.abs()) / (hi - lo);
            if noise > RESOLVE * fd.abs().max(grad.data()[j].abs()) {
                if let Some(w) = wide_difference(&f, &mut probe, t, j, WIDE_FACTOR * eps, base_sig)? {
                    fd = w;
                }
            }
            report.max_rel_error = report.max_rel_error.max(rel_error(grad.data()[j], fd, floor));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Compares the tape gradient of a scalar function of one tensor against
/// central differences and returns the worst relative error.
pub fn gradient_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Ok(check(|t: &mut Tape, v: &[Var]| f(t, v[0]), std::slice::from_ref(point), eps, false)?.max_rel_error)
}

/// Like [`gradient_check`] over several input tensors at once.
pub fn gradient_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, points, eps, false)
}

/// Like [`gradient_check_many`], but components whose probes change the
/// piecewise branch (see [`Tape::kink_signature`]) are skipped and counted.
pub fn gradient_check_guarded<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, points, eps, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::from_fn([1, 2, 5], |i| 1.0 + 0.5 * (i as f64 * 0.7).sin());
        let x = Tensor::from_fn([1, 2, 5], |i| i as f64 - 3.0);
        let err = gradient_check(
            |t, x| {
                let c = t.constant(w.clone());
                let y = t.mul(x, c)?;
                let y = t.scale(y, 3.0);
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn relu_away_from_zero() {
        let x = Tensor::new([1, 1, 4], vec![-1.3, 0.7, 2.0, -0.2]).unwrap();
        let err = gradient_check(
            |t, x| {
                let r = t.relu(x);
                let s = t.square(r);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn guard_skips_kink_crossings() {
        let x = Tensor::new([1, 1, 2], vec![1e-7, 1.0]).unwrap();
        let f = |t: &mut Tape, v: &[Var]| {
            let r = t.relu(v[0]);
            Ok(t.sum(r))
        };
        let plain = gradient_check_many(f, std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(plain.max_rel_error > 0.1);
        let guarded = gradient_check_guarded(f, std::slice::from_ref(&x), 1e-5).unwrap();
        assert_eq!((guarded.checked, guarded.skipped), (1, 1));
        assert!(guarded.max_rel_error <= 1e-9);
    }
}
