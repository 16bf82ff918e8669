//! Confidence-weighted intention assimilation control for bimanual
//! teleoperated suturing.

pub mod confidence;
pub mod control;
pub mod error;
pub mod experiment;
pub mod gesture;
pub mod intent;
pub mod kinematics;
pub mod metrics;
pub mod operator;
pub mod session;
pub mod sim;
pub mod stream;
pub mod teleop;
pub mod world;

pub use error::{Error, Result};
