//! File formats: packet streams, diagnostics tables, checkpoints, and
//! precomputed-ensemble stores for offline runs.

pub mod checkpoint;
pub mod diagnostics;
pub mod packets;
pub mod store;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use diagnostics::{
    read_diagnostics, write_diagnostics, DiagnosticsRow, DiagnosticsWriter,
};
pub use packets::{read_packets, write_packets, PacketReader};
pub use store::{write_store, EnsembleStore, OfflineSimulator, WindowColumns};
