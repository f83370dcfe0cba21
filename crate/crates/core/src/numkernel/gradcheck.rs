use std::collections::BTreeMap;

use super::tape::{NodeId, Tape};
use super::{Binding, KernelError, ParamSet, SplitMix64};

/// Coordinates whose ReLU inputs sit this close to zero are not compared.
pub const KINK_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    /// Max relative error per checked parameter.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// The coordinate behind `max_rel_error`: parameter, flat index,
    /// analytic and numeric derivative.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Denominator floor of [`relative_error`]. Central differences at
/// `eps = 1e-5` resolve a derivative only to roughly `1e-10` in absolute
/// terms (roundoff `~ 2e-16 |f| / eps` plus `O(eps^2)` truncation), so
/// derivatives below this magnitude are compared by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &ParamSet) -> Result<(f64, Vec<f64>), KernelError>
where
    F: for<'a> Fn(&mut Tape<'a>, &Binding) -> Result<NodeId, KernelError>,
{
    let mut tape = Tape::new();
    let bind = Binding::bind(&mut tape, params);
    let out = f(&mut tape, &bind)?;
    tape.check_finite()?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(KernelError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok((v.item(), tape.kink_inputs()))
}

fn crosses_kink(plus: &[f64], minus: &[f64]) -> bool {
    plus.iter().zip(minus).any(|(&p, &m)| {
        p != m && (p.signum() != m.signum() || p.abs() < KINK_TOL || m.abs() < KINK_TOL)
    })
}

/// Compares reverse-mode gradients with central differences for every
/// coordinate of every trainable parameter.
pub fn finite_difference_check<F>(f: F, params: &ParamSet, eps: f64) -> Result<FdReport, KernelError>
where
    F: for<'a> Fn(&mut Tape<'a>, &Binding) -> Result<NodeId, KernelError>,
{
    check_impl(&f, params, eps, None)
}

/// Same as [`finite_difference_check`] but probes at most `max_coords`
/// randomly chosen coordinates per parameter.
pub fn finite_difference_check_sampled<F>(
    f: F,
    params: &ParamSet,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<FdReport, KernelError>
where
    F: for<'a> Fn(&mut Tape<'a>, &Binding) -> Result<NodeId, KernelError>,
{
    check_impl(&f, params, eps, Some((max_coords, seed)))
}

fn check_impl<F>(
    f: &F,
    params: &ParamSet,
    eps: f64,
    sample: Option<(usize, u64)>,
) -> Result<FdReport, KernelError>
where
    F: for<'a> Fn(&mut Tape<'a>, &Binding) -> Result<NodeId, KernelError>,
{
    let (v1, _) = evaluate(f, params)?;
    let (v2, _) = evaluate(f, params)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(KernelError::NonDeterministic(v1, v2));
    }

    let analytic = {
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, params);
        let out = f(&mut tape, &bind)?;
        let grads = tape.backward(out)?;
        bind.collect(&grads, params)
    };

    let mut rng = SplitMix64::new(sample.map_or(0, |s| s.1));
    let mut report = FdReport::default();
    let mut probe = params.clone();
    for (name, g_ad) in &analytic {
        let n = g_ad.len();
        let coords: Vec<usize> = match sample {
            Some((k, _)) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for i in coords {
            let orig = params.tensor(name)?.data()[i];
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig + eps;
            let (fp, kp) = evaluate(f, &probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig - eps;
            let (fm, km) = evaluate(f, &probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig;
            if crosses_kink(&kp, &km) {
                report.skipped_kinks += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * eps);
            let err = relative_error(g_ad.data()[i], fd);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i, g_ad.data()[i], fd));
            }
            worst = worst.max(err);
            report.checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.insert(name.clone(), worst);
    }
    Ok(report)
}
