use crate::error::{Error, Result};
use crate::nn::ParamVector;

/// Clamps every weight and bias to `[-w_max, w_max]`; batch-norm entries are
/// clipped only if `include_batchnorm` is set.
pub fn clip_weights(params: &ParamVector, w_max: f64, include_batchnorm: bool) -> ParamVector {
    let mut out = params.clone();
    for e in out.entries_mut() {
        if include_batchnorm || !e.role.is_batchnorm() {
            e.value.data_mut().iter_mut().for_each(|v| *v = v.clamp(-w_max, w_max));
        }
    }
    out
}

/// `tau * avg + (1 - tau) * current`, elementwise over every entry.
pub fn update_weight_average(avg: &ParamVector, current: &ParamVector, tau: f64) -> Result<ParamVector> {
    if !avg.same_layout(current) {
        return Err(Error::Partition("weight average and current parameters differ in layout".into()));
    }
    let mut out = avg.clone();
    for (o, c) in out.entries_mut().iter_mut().zip(current.entries()) {
        for (a, &x) in o.value.data_mut().iter_mut().zip(c.value.data()) {
            *a = tau * *a + (1.0 - tau) * x;
        }
    }
    Ok(out)
}
