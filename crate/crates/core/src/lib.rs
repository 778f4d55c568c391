pub mod checkpoint;
pub mod classify;
pub mod encoder;
pub mod mcfn;
pub mod metrics;
pub mod mst;
pub mod ndsl;
pub mod optim;
pub mod overlay;
pub mod pyramid;
