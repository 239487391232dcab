//! Chaos-aware spatio-temporal forecasting toolkit.
//!
//! The crate combines three layers that are useful separately:
//!
//! * [`nlts`]: nonlinear time-series analysis (delay embeddings, Lyapunov
//!   exponents, fractal dimensions, entropy, recurrence structure) distilled
//!   into a fixed 20-slot chaos profile per series.
//! * [`tensor`]: a small dense f64 tensor type with tape-based reverse-mode
//!   differentiation, sized for desk-scale models rather than GPUs.
//! * the model stack: [`temporal`] multi-scale encoders, [`attention`]
//!   chaos-conditioned attention, [`graph`] adaptive adjacency learning,
//!   [`forecast`] multi-horizon heads with variance estimates, and [`train`]
//!   with a cache-accelerated, noise-regularised training loop plus a
//!   first-order meta-learning step for cross-city transfer.
//!
//! [`data`] holds the sensor-table plumbing: robust scaling, distance-kernel
//! adjacency, physics features, windowing, and synthetic generators.
//!
//! Heavy per-node and pairwise loops run on rayon when the default
//! `parallel` feature is enabled; disabling it yields a dependency-light
//! sequential build that produces bit-identical results.

pub mod attention;
pub mod data;
pub mod forecast;
pub mod graph;
pub mod model;
pub mod nlts;
pub mod par;
pub mod temporal;
pub mod tensor;
pub mod train;
