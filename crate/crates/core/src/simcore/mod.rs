//! Deterministic discrete-event core: time, event queue, registered memory,
//! in-order transport and trace output.

mod engine;
mod memory;
mod time;
pub mod trace;
mod transport;

pub use engine::{Engine, EngineStatus, EventId, Handler};
pub use memory::{Addr, Memory, MemoryRegion, Space};
pub use time::SimTime;
pub use trace::{Origin, Trace, TraceKind, TraceLevel, TraceRecord};
pub use transport::{
    Completion, CompletionToken, Connection, Fabric, FabricParams, Link, RdmaWrite, WriteTag,
};
