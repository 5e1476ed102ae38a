//! Branching random walks on free products of finite groups.

pub mod group;
pub mod rng;
pub mod stats;
pub mod walk;
pub mod io;
pub mod ldp;
pub mod brw;
pub mod multitype;
pub mod experiment;
