use std::fmt;

use serde::{Deserialize, Serialize};

/// Rank index in `0..P`.
pub type Rank = usize;

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident, $inner:ty, $prefix:literal) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(/// Registered memory region.
    RegionId, u32, "mr");
id_type!(/// NIC index; ranks map onto NICs `ranks_per_nic` at a time.
    NicId, u32, "nic");
id_type!(/// Trigger counter index within one NIC.
    CounterId, u32, "c");
id_type!(/// Deferred work entry index within one NIC.
    EntryId, u32, "e");
id_type!(/// In-flight RDMA write.
    WriteId, u64, "w");
id_type!(/// Coordination stream index within one rank.
    StreamId, u16, "s");
