//! Basin-stability landscapes for networks of second-order Kuramoto oscillators.

pub mod dynamics;
pub mod fixed_point;
pub mod graph;
pub mod integrator;
pub mod io;
pub mod landscape;
pub mod metrics;
pub mod pipeline;
pub mod screening;
pub mod seed;
