pub mod adjoint;
pub mod bench;
pub mod cp;
pub mod error;
pub mod gen;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod mlp;
pub mod oracle;
pub mod precond;
pub mod problem;
pub mod projection;
pub mod soc;
pub mod solve;
pub mod trainer;

pub use error::{Error, Result};
