//! Central finite-difference comparison against analytic parameter gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn summary(&self) -> String {
        match self.worst() {
            Some(e) => format!(
                "{} entries, worst {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                self.entries.len(),
                e.param,
                e.index,
                e.analytic,
                e.numeric,
                e.rel_error
            ),
            None => "no entries".into(),
        }
    }
}

/// Relative error with an absolute floor so that two near-zero values compare as equal.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `analytic[i]` to `(loss(θ+h) - loss(θ-h)) / 2h` at up to
/// `per_param` evenly spaced entries of every parameter tensor.
pub fn check_store(
    store: &mut ParamStore<f64>,
    analytic: &[Tensor<f64>],
    h: f64,
    per_param: usize,
    floor: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let len = store.get(id).len();
        let picks = per_param.min(len).max(1);
        let name = store.iter().nth(pi).map(|p| p.name.clone()).unwrap_or_default();
        for k in 0..picks {
            let idx = k * len / picks + (len / picks) / 2;
            let idx = idx.min(len - 1);
            let orig = store.get(id).data()[idx];
            store.get_mut(id).data_mut()[idx] = orig + h;
            let up = loss(store);
            store.get_mut(id).data_mut()[idx] = orig - h;
            let down = loss(store);
            store.get_mut(id).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[idx];
            report.entries.push(GradCheckEntry {
                param: name.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, floor),
            });
        }
    }
    report
}
