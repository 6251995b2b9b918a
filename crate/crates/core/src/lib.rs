//! Workbench for Bell tests under measurement dependence.
//!
//! Quantum predictions ([`qstate`]), Bell functionals ([`ineq`]), exact
//! classical bounds when settings may depend on the hidden variable
//! ([`mdlopt`]), trial-level simulation ([`session`]), bitstream diagnostics
//! ([`rngstat`]) and the count-to-estimate analysis ([`pipeline`]).

pub mod exact;
pub mod ineq;
pub mod mdlopt;
pub mod pipeline;
pub mod qstate;
pub mod rngstat;
pub mod session;
pub mod simplex;
