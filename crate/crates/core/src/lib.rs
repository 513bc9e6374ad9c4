//! Essential ranges, Filippov convexification and sliding-mode integration
//! for piecewise-continuous maps.

pub mod essrange;
pub mod filippov;
pub mod expr;
pub mod hull;
pub mod interval;
pub mod piecewise;
pub mod region;
pub mod solver;
