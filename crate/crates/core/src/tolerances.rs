//! Numerical tolerances with their default values.

/// Zero-mean slack for `omega_dvphi_inverse`, relative to the L2 norm of the input.
pub const TOL_MEAN_REL: f64 = 1e-12;
/// Dropped-mode energy ratio allowed in the x-collocation of the nonlinearity.
pub const TOL_ALIAS: f64 = 1e-10;
pub const NEWTON_TOL: f64 = 1e-12;
pub const MAX_NEWTON: usize = 50;
/// Isotropy residual scale, multiplied by 1 + |iota|.
pub const TOL_ISO: f64 = 1e-9;
pub const TOL_STRUCT: f64 = 1e-9;
pub const COND_CAP_CHART: f64 = 1e6;
pub const EXP_ORDER_CAP: usize = 30;
pub const TOL_EXP: f64 = 1e-13;
pub const TOL_HOM: f64 = 1e-10;
pub const TARGET_REM_REL: f64 = 1e-10;
pub const SLACK_KAM: f64 = 4.0;
pub const COND_CAP_MBAR: f64 = 1e8;
pub const TOL_TRI: f64 = 1e-9;
pub const TOL_NM: f64 = 1e-10;
/// Relative Frobenius threshold under which an operator block counts as rounding noise.
pub const PRUNE_REL: f64 = 1e-15;
/// Step for finite-difference directional derivatives of the residual.
pub const FD_STEP: f64 = 1e-3;

/// Sobolev index in phi and weight exponent in the sites for reported norms.
pub const S0: f64 = 2.0;
pub const SIGMA: f64 = 2.0;
