//! Dense tensors, a parameter store, reverse-mode differentiation and a
//! central-difference gradient checker.

mod compose;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck};
pub use params::{sha256_hex, ParamId, ParamStore, Parameter};
pub use tape::{Factor, Gradients, Primitive, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Row-wise softmax of an `n × m` matrix outside of any tape.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (n, m) = x.dims2()?;
    let mut out = x.clone();
    for r in 0..n {
        let row = &mut out.data_mut()[r * m..(r + 1) * m];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("softmax_rows: row {r} has a non-finite entry")));
        }
        tape::softmax_in_place(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
