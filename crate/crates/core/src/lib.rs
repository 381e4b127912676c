//! Building blocks of a camera-driven home access controller: change gating,
//! landmark geometry, LBP face recognition, visual summaries, the door state
//! machine and the profile/event store.

pub mod change_gate;
pub mod door;
pub mod exec;
pub mod face_geometry;
pub mod frame;
pub mod lbp;
pub mod store;
pub mod summary;

pub use exec::ExecMode;
pub use frame::{GrayFrame, Rect};
