//! Engine checkpoints: everything needed to resume a packet stream
//! bit-identically (ensemble, sampling density, RNG state, last window).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequential::EngineSnapshot;

pub const CHECKPOINT_VERSION: &str = "dcseq.checkpoint.v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: String,
    snapshot: EngineSnapshot,
}

pub fn save_checkpoint(path: &Path, snapshot: &EngineSnapshot) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION.to_string(),
        snapshot: snapshot.clone(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &file)
        .map_err(|e| Error::InvalidArgument(format!("checkpoint serialization: {e}")))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EngineSnapshot> {
    let reader = BufReader::new(File::open(path)?);
    let file: CheckpointFile =
        serde_json::from_reader(reader).map_err(|e| Error::IncompatibleCheckpoint {
            reason: format!("unreadable checkpoint: {e}"),
        })?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint {
            reason: format!(
                "version {} (this build reads {CHECKPOINT_VERSION})",
                file.version
            ),
        });
    }
    Ok(file.snapshot)
}
