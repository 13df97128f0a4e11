//! Pinned reference values from long runs.

/// Solved-level evaluation return on the point mass: the final-10 mean of a
/// 150 000-step TD3 run (seed 0) with `configs/desk_point_mass.toml`:
///
/// ```text
/// mocco train --config configs/desk_point_mass.toml --total-steps 150000
/// ```
///
/// A hand-tuned PD controller scores about 240 on the same start states.
pub const POINT_MASS_SOLVED_RETURN: f64 = 240.84;
