//! Condition masks for the four user-constraint modes and the masking identity
//! `M(x_t) = x_t * mask + x0 * (1 - mask)`.
//!
//! A mask entry of 1 marks a free (generated) value; 0 marks a value pinned to
//! the user's ground truth.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::{PlanTensor, COL_CX, COL_CY, COL_IS_ROOM, COL_TYPE, MAX_ROOMS, PLAN_COLS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// No user input.
    #[serde(rename = "auto")]
    Auto,
    /// Room types given.
    #[serde(rename = "t")]
    Types,
    /// Room types and centers given.
    #[serde(rename = "t_and_l")]
    TypesLocations,
    /// Whole rooms pinned.
    #[serde(rename = "part")]
    Partial,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Auto, Mode::Types, Mode::TypesLocations, Mode::Partial];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Auto => "auto",
            Mode::Types => "t",
            Mode::TypesLocations => "t_and_l",
            Mode::Partial => "part",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidMask(format!("unknown mode {s:?}")))
    }
}

/// Columns pinned by the column-wise modes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskColumns {
    pub types: Vec<usize>,
    pub types_locations: Vec<usize>,
}

impl Default for MaskColumns {
    fn default() -> Self {
        Self {
            types: vec![COL_IS_ROOM, COL_TYPE],
            types_locations: vec![COL_IS_ROOM, COL_TYPE, COL_CX, COL_CY],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMask {
    pub mode: Mode,
    pub mask: [[f64; PLAN_COLS]; MAX_ROOMS],
    pub fixed_rows: BTreeSet<usize>,
}

impl ConditionMask {
    pub fn as_tensor(&self) -> PlanTensor {
        PlanTensor(self.mask)
    }

    pub fn is_free(&self, row: usize, col: usize) -> bool {
        self.mask[row][col] != 0.0
    }

    pub fn free_count(&self) -> usize {
        self.mask.iter().flatten().filter(|&&v| v != 0.0).count()
    }
}

pub fn build_mask(mode: Mode, fixed_rows: Option<&[usize]>) -> Result<ConditionMask> {
    build_mask_with(mode, fixed_rows, &MaskColumns::default())
}

pub fn build_mask_with(
    mode: Mode,
    fixed_rows: Option<&[usize]>,
    columns: &MaskColumns,
) -> Result<ConditionMask> {
    let mut mask = [[1.0; PLAN_COLS]; MAX_ROOMS];
    let mut fixed = BTreeSet::new();
    let pin_columns = |mask: &mut [[f64; PLAN_COLS]; MAX_ROOMS], cols: &[usize]| -> Result<()> {
        for &c in cols {
            if c >= PLAN_COLS {
                return Err(Error::InvalidMask(format!("column {c} out of range")));
            }
            for row in mask.iter_mut() {
                row[c] = 0.0;
            }
        }
        Ok(())
    };
    match (mode, fixed_rows) {
        (Mode::Partial, None) => {
            return Err(Error::InvalidMask("mode part needs fixed rows".into()));
        }
        (Mode::Partial, Some(rows)) => {
            for &r in rows {
                if r >= MAX_ROOMS {
                    return Err(Error::InvalidMask(format!("fixed row {r} out of range")));
                }
                mask[r] = [0.0; PLAN_COLS];
                fixed.insert(r);
            }
        }
        (_, Some(_)) => {
            return Err(Error::InvalidMask(format!(
                "fixed rows are only valid for mode part, not {mode}"
            )));
        }
        (Mode::Auto, None) => {}
        (Mode::Types, None) => pin_columns(&mut mask, &columns.types)?,
        (Mode::TypesLocations, None) => pin_columns(&mut mask, &columns.types_locations)?,
    }
    Ok(ConditionMask {
        mode,
        mask,
        fixed_rows: fixed,
    })
}

/// Entrywise `xt * mask + x0 * (1 - mask)`; pinned entries are copied from `x0`
/// bit for bit.
pub fn apply_mask(xt: &PlanTensor, x0: &PlanTensor, mask: &ConditionMask) -> PlanTensor {
    let mut out = *xt;
    for r in 0..MAX_ROOMS {
        for c in 0..PLAN_COLS {
            let m = mask.mask[r][c];
            out.0[r][c] = if m == 1.0 {
                xt.0[r][c]
            } else if m == 0.0 {
                x0.0[r][c]
            } else {
                xt.0[r][c] * m + x0.0[r][c] * (1.0 - m)
            };
        }
    }
    out
}

/// Squared error averaged over the free entries only; zero when nothing is free.
pub fn masked_mse(pred: &PlanTensor, target: &PlanTensor, mask: &ConditionMask) -> f64 {
    let mut sum = 0.0;
    let mut count = 0.0;
    for r in 0..MAX_ROOMS {
        for c in 0..PLAN_COLS {
            let m = mask.mask[r][c];
            let d = pred.0[r][c] - target.0[r][c];
            sum += d * d * m;
            count += m;
        }
    }
    if count == 0.0 {
        0.0
    } else {
        sum / count
    }
}

/// The masked noise-prediction loss.
pub fn masked_noise_loss(eps_hat: &PlanTensor, eps: &PlanTensor, mask: &ConditionMask) -> f64 {
    masked_mse(eps_hat, eps, mask)
}
