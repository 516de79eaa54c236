//! Closed-loop analysis: identification, pole-zero classification, flapping
//! spectra, phase portraits and robustness sweeps.

mod closed_loop;
mod poles;
mod portrait;
mod spectrum;
mod sweep;
mod sysid;

pub use closed_loop::{collect_io_pairs, DiscardedSegment, ExcitationSpec, IoCollection};
pub use poles::{classify, poles_zeros_classify, poly_from_roots, poly_roots, PoleZeroReport, Root, C64};
pub use portrait::{phase_portrait, rollout_phase_portrait, OrbitStats, MIN_CYCLES, PERIODIC_CLOSURE};
pub use spectrum::{spectral_analysis, SpectrumReport, DOMINANT_MODE_FRACTION, FUNDAMENTAL_BAND_HZ};
pub use sweep::{success_sweep, write_sweep_csv, SweepPoint, SweepRow, SweepSpec};
pub use sysid::{
    discretize, fit_lti, reference_model, simulate_continuous, synthesize_io, to_continuous, AxisTransferFunction, DiscreteAxis,
    FitOptions, IoData, IoSegment, TransferFunctionFit, ARX_ORDER, MIN_IDENT_DURATION_S, POOR_FIT_NMSE, REFERENCE_DENOMINATOR,
    REFERENCE_NUMERATORS,
};
