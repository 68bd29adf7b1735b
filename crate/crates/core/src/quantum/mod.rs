pub mod channel;
pub mod mps;
pub mod states;
pub mod target;

pub use channel::{NoiseChannel, NoiseKind};
pub use mps::{Mps, MpsSampler};
pub use states::{apply_channel_dense, ghz_dense, tfic_ground_state, w_dense, DenseState};
pub use target::{StateFamily, Target, TargetSpec};
