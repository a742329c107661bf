pub mod autodiff;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Shape, Tensor};
pub mod landmarks;
pub mod losses;
pub mod warpblend;
pub mod networks;
pub mod synthdata;
pub mod io;
pub mod training;
pub mod eval;
pub mod verify;
