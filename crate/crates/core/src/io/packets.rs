//! Newline-delimited JSON packet streams.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sequential::DataPacket;

pub fn write_packets(path: &Path, packets: &[DataPacket]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for p in packets {
        p.validate()?;
        serde_json::to_writer(&mut out, p)
            .map_err(|e| Error::InvalidArgument(format!("packet serialization: {e}")))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Streaming reader; yields packets in window order and rejects schema
/// violations with the offending line number.
pub struct PacketReader {
    lines: Lines<BufReader<File>>,
    line_no: usize,
    last_window: Option<usize>,
}

pub fn read_packets(path: &Path) -> Result<PacketReader> {
    Ok(PacketReader {
        lines: BufReader::new(File::open(path)?).lines(),
        line_no: 0,
        last_window: None,
    })
}

impl PacketReader {
    fn parse_line(&mut self, line: &str) -> Result<DataPacket> {
        let packet: DataPacket =
            serde_json::from_str(line).map_err(|e| Error::ParseError {
                line: self.line_no,
                message: e.to_string(),
            })?;
        packet.validate().map_err(|e| Error::ParseError {
            line: self.line_no,
            message: e.to_string(),
        })?;
        if let Some(last) = self.last_window {
            if packet.window_index <= last {
                return Err(Error::ProtocolViolation {
                    details: format!(
                        "line {}: window {} after window {last}",
                        self.line_no, packet.window_index
                    ),
                });
            }
        }
        self.last_window = Some(packet.window_index);
        Ok(packet)
    }
}

impl Iterator for PacketReader {
    type Item = Result<DataPacket>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line_no += 1;
            match self.lines.next()? {
                Err(e) => return Some(Err(e.into())),
                Ok(line) if line.trim().is_empty() => continue,
                Ok(line) => return Some(self.parse_line(&line)),
            }
        }
    }
}
