//! Patch-descriptor distillation objective.
//!
//! `L = mean over cells of (1 - |cos(teacher, student)|)`. The absolute value
//! means a sign-flipped student scores zero loss. Cells where either vector
//! is zero count as cosine 0, i.e. loss 1.

use crate::error::{Error, Result};
use crate::matcher::cosine_with_norms;
use crate::types::{l2_norm, FeatureMap};

pub fn distillation_loss(teacher: &FeatureMap, student: &FeatureMap) -> Result<f64> {
    if !teacher.same_shape(student) {
        return Err(Error::ShapeMismatch(format!(
            "teacher {}x{}x{} vs student {}x{}x{}",
            teacher.height(),
            teacher.width(),
            teacher.channels(),
            student.height(),
            student.width(),
            student.channels()
        )));
    }
    // sequential sum in cell order keeps the result bit-stable
    let total: f64 = (0..teacher.num_cells())
        .map(|i| {
            let (t, s) = (teacher.cell_at(i), student.cell_at(i));
            1.0 - cosine_with_norms(t, s, l2_norm(t), l2_norm(s)).abs()
        })
        .sum();
    Ok(total / teacher.num_cells() as f64)
}
