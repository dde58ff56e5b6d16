use super::kernels;
use super::tape::LOG_EPS;
use crate::error::{Error, Result};

/// Numerically stable softmax of a finite vector.
pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("softmax input contains {bad}")));
    }
    let mut out = v.to_vec();
    if !out.is_empty() {
        kernels::softmax_in_place(&mut out);
    }
    Ok(out)
}

/// `KL(p ‖ q)` with `0·log 0 = 0` and `q` floored at `1e-9`.
pub fn kl_divergence(p: &[f32], q: &[f32]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "kl_divergence: {} vs {} entries",
            p.len(),
            q.len()
        )));
    }
    let floor = LOG_EPS as f64;
    Ok(p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| {
            let (pv, qv) = (pv as f64, (qv as f64).max(floor));
            pv * (pv.ln() - qv.ln())
        })
        .sum())
}
