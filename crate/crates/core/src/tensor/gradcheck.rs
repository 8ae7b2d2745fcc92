use super::gates;
use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Elements whose perturbed passes crossed a relu or abs kink; those
    /// passes were evaluated on the base point's linear piece.
    pub kinks_crossed: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

pub(crate) fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients with central differences `(f(θ+h) - f(θ-h)) / 2h`
/// for every element of every listed parameter.
///
/// The gate patterns of `relu` and `abs` at θ are held fixed for the
/// perturbed passes, so the differences measure the slope of the linear
/// piece backward differentiates even when θ sits within `h` of a kink.
///
/// `loss_fn` must rebuild the forward pass from the store on each call and
/// return the tape with its scalar root. Dropout must be off.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    mut loss_fn: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Tape, Var)>,
{
    let (tape, root) = loss_fn(store)?;
    if tape.dropout_used() {
        return Err(Error::DropoutActive);
    }
    let base = tape.value(root).item().ok_or_else(|| Error::NonScalarRoot(tape.shape(root).to_vec()))?;
    let (tape2, root2) = loss_fn(store)?;
    if tape2.dropout_used() {
        return Err(Error::DropoutActive);
    }
    if tape2.value(root2).item().map(f64::to_bits) != Some(base.to_bits()) {
        return Err(Error::NonDeterministic);
    }
    drop(tape2);

    let saved_grads: Vec<_> = params.iter().map(|&id| store.get(id).grad.clone()).collect();
    for &id in params {
        store.get_mut(id).grad = None;
    }
    tape.backward(root, store)?;
    drop(tape);

    let gates = gates::Session::record();
    let (t, r) = loss_fn(store)?;
    if t.value(r).item().map(f64::to_bits) != Some(base.to_bits()) {
        return Err(Error::NonDeterministic);
    }
    drop(t);
    gates.start_replay();
    let mut eval = |store: &ParamStore| -> Result<(f64, usize)> {
        let (t, r) = loss_fn(store)?;
        let (crossed, same) = gates.rewind();
        if !same {
            return Err(Error::NonDeterministic);
        }
        Ok((t.value(r).data()[0], crossed))
    };

    let mut entries = Vec::with_capacity(params.len());
    for (&id, saved) in params.iter().zip(saved_grads) {
        let analytic = store
            .get_mut(id)
            .grad
            .take()
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; store.value(id).numel()]);
        let mut worst = (0.0, 0, 0.0, 0.0);
        let mut kinks_crossed = 0;
        for i in 0..analytic.len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let ((plus, c1), (minus, c2)) = (plus?, minus?);
            if c1 + c2 > 0 {
                kinks_crossed += 1;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            if err > worst.0 || i == 0 {
                worst = (err, i, analytic[i], numeric);
            }
        }
        store.get_mut(id).grad = saved;
        entries.push(GradCheckEntry {
            name: store.get(id).name.clone(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            analytic: worst.2,
            numeric: worst.3,
            kinks_crossed,
            passed: worst.0 <= tol,
        });
    }
    Ok(GradCheckReport {
        entries,
        tol,
        step: h,
    })
}
