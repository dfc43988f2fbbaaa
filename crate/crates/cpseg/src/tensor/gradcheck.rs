//! Central finite-difference verification of analytic gradients.

use super::params::{Binding, ParamStore};
use super::{Tape, TensorId};
use crate::error::{CpSegError, Result};

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name of the parameter where the worst coordinate lives.
    pub worst_param: String,
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences over every trainable coordinate in `store`.
///
/// Returns max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
/// The step `h` must lie in `[1e-6, 1e-4]`.
pub fn gradient_check<F>(store: &mut ParamStore, h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Binding) -> Result<TensorId>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(CpSegError::Config(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let binding = store.bind_all(&mut tape)?;
        let loss = build(&mut tape, &binding)?;
        if tape.data(loss).len() != 1 {
            return Err(CpSegError::Contract("gradient_check needs a scalar objective".into()));
        }
        let v = tape.value(loss);
        if !v.is_finite() {
            return Err(CpSegError::Numeric(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let binding = store.bind_all(&mut tape)?;
    let loss = build(&mut tape, &binding)?;
    let base = tape.value(loss);
    if !base.is_finite() {
        return Err(CpSegError::Numeric(format!("objective evaluated to {base}")));
    }
    tape.backward(loss)?;

    let param_ids: Vec<_> = store
        .entries()
        .filter(|(_, e)| e.trainable)
        .map(|(id, _)| id)
        .collect();
    let analytic: Vec<Vec<f64>> = param_ids
        .iter()
        .map(|&pid| {
            let numel = store.entry(pid).data.len();
            tape.grad(binding.get(pid))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; numel])
        })
        .collect();

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (slot, &pid) in param_ids.iter().enumerate() {
        for coord in 0..store.entry(pid).data.len() {
            let original = store.data(pid)[coord];
            store.data_mut(pid)[coord] = original + h;
            let plus = eval(store)?;
            store.data_mut(pid)[coord] = original - h;
            let minus = eval(store)?;
            store.data_mut(pid)[coord] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic[slot][coord] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}]", store.entry(pid).name, coord);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_param: worst,
    })
}
