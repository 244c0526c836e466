//! Minimal reverse-mode differentiation over `ndarray`, just wide enough for
//! the extraction/detection network.

mod adam;
mod conv;
mod lstm;
pub(crate) mod ops;
mod param;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use lstm::LstmParams;
pub use param::{BnStat, Grads, Init, Param, ParamId, ParamStore};
pub use tape::{Backward, Ctx, Sink, Tape, Var};
