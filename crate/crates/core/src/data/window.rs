use serde::{Deserialize, Serialize};

use super::{DataError, Result, Sample, Target};
use crate::tensor::{Shape, Tensor3};

/// Sliding-window layout: `history` input steps predict the following
/// `horizon` steps; consecutive windows start `stride` apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { history: 48, horizon: 1, stride: 1 }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(DataError::Schema("window history, horizon and stride must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Start index of every window; `floor((len - history - horizon) / stride) + 1` of them.
pub fn window_starts(
    len: usize,
    history: usize,
    horizon: usize,
    stride: usize,
) -> Result<impl Iterator<Item = usize>> {
    if history == 0 || stride == 0 {
        return Err(DataError::Schema("window history and stride must be ≥ 1".into()));
    }
    let needed = history + horizon;
    if len < needed {
        return Err(DataError::TooShort { len, needed });
    }
    Ok((0..=(len - needed) / stride).map(move |k| k * stride))
}

/// Windows over equal-length `columns`, each paired with the next
/// `spec.horizon` values of `target`.
pub fn make_windows(columns: &[Vec<f64>], target: &[f64], spec: &WindowSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    if columns.is_empty() {
        return Err(DataError::Schema("at least one feature column is required".into()));
    }
    let len = target.len();
    if let Some(c) = columns.iter().find(|c| c.len() != len) {
        return Err(DataError::Invalid(format!("column length {} differs from target length {len}", c.len())));
    }
    let h = spec.history;
    window_starts(len, h, spec.horizon, spec.stride)?
        .map(|s| {
            let mut data = Vec::with_capacity(columns.len() * h);
            for col in columns {
                data.extend_from_slice(&col[s..s + h]);
            }
            let x = Tensor3::new(Shape::new(1, columns.len(), h), data).map_err(|e| DataError::Invalid(e.to_string()))?;
            Ok(Sample { x, target: Target::Values(target[s + h..s + h + spec.horizon].to_vec()) })
        })
        .collect()
}
