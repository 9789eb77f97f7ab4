//! Sensorless grasp-force control for a dual-motor tendon-driven jaw.
//!
//! * [`plant`]: coupled electromechanical DAE model.
//! * [`sim`]: fixed-step integration, references and the 1 kHz environment.
//! * [`oracle`]: receding-horizon CMA-ES controller.
//! * [`dataset`]: episode files, scalers and the replay buffer.
//! * [`nn`]: fully-connected networks and Adam.
//! * [`rl`]: offline IQL and online TD3 fine-tuning.

pub mod control;
pub mod dataset;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod plant;
pub mod rl;
pub mod sim;

pub use error::{Error, Result};
