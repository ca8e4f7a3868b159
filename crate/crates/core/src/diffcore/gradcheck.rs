use super::{DiffError, ParamId, ParamSet, Tape, Var};

/// Compare analytic gradients against central differences over every parameter entry.
///
/// Returns `max |analytic − fd| / max(1, |fd|)`; zero when there are no parameters.
pub fn grad_check<F, E>(f: F, params: &ParamSet, h: f64) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, &ParamSet) -> Result<Var<'t>, E>,
    E: From<DiffError>,
{
    let entries: Vec<(ParamId, usize)> = params
        .ids()
        .flat_map(|id| (0..params.value(id).numel()).map(move |i| (id, i)))
        .collect();
    grad_check_entries(f, params, h, &entries)
}

/// [`grad_check`] restricted to the listed `(parameter, flat index)` entries.
pub fn grad_check_entries<F, E>(f: F, params: &ParamSet, h: f64, entries: &[(ParamId, usize)]) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, &ParamSet) -> Result<Var<'t>, E>,
    E: From<DiffError>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(DiffError::InvalidStep { h }.into());
    }
    if entries.is_empty() {
        return Ok(0.0);
    }
    let mut work = params.clone();
    work.zero_grad();
    {
        let tape = Tape::new();
        let loss = f(&tape, &work)?;
        let mut grads = work.clone();
        tape.backward(loss, &mut grads)?;
        work = grads;
    }
    let eval = |p: &ParamSet| -> Result<f64, E> {
        let tape = Tape::new();
        let out = f(&tape, p)?;
        if out.shape().iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarLoss { shape: out.shape() }.into());
        }
        Ok(out.item())
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for &(id, i) in entries {
        let x0 = params.value(id).data()[i];
        probe.value_mut(id).data_mut()[i] = x0 + h;
        let up = eval(&probe)?;
        probe.value_mut(id).data_mut()[i] = x0 - h;
        let down = eval(&probe)?;
        probe.value_mut(id).data_mut()[i] = x0;
        let fd = (up - down) / (2.0 * h);
        let analytic = work.grad(id)[i];
        worst = worst.max((analytic - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}
