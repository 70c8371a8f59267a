//! Parameter container: an ASCII manifest of `name shape...` lines followed
//! by the little-endian `f32` payloads in manifest order.
//!
//! ```text
//! VCK1
//! tensors 2
//! enc1a.conv.weight 4 1 3 3 3
//! enc1a.conv.bias 4
//!
//! <payload bytes>
//! ```

use std::fs;
use std::path::Path;

use super::layers::Module;
use super::tensor::Scalar;
use super::NetError;

const MAGIC: &str = "VCK1";

struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Serialize every parameter and buffer of `module`.
pub fn encode_checkpoint<T: Scalar>(module: &impl Module<T>) -> Vec<u8> {
    let mut header = format!("{MAGIC}\n");
    let mut payload = Vec::new();
    let mut count = 0;
    let mut lines = String::new();
    module.visit(&mut |p| {
        count += 1;
        lines.push_str(&p.name);
        for d in &p.shape {
            lines.push_str(&format!(" {d}"));
        }
        lines.push('\n');
        for v in &p.value {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    });
    header.push_str(&format!("tensors {count}\n"));
    header.push_str(&lines);
    header.push('\n');
    let mut out = header.into_bytes();
    out.extend(payload);
    out
}

fn malformed(reason: impl Into<String>) -> NetError {
    NetError::Checkpoint(reason.into())
}

fn parse_manifest(bytes: &[u8]) -> Result<(Vec<Entry>, &[u8]), NetError> {
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| malformed("manifest is not terminated by a blank line"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| malformed("manifest is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(malformed("bad magic"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("tensors "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| malformed("missing tensor count"))?;
    let entries = lines
        .map(|l| {
            let mut tok = l.split(' ');
            let name = tok.next().unwrap_or_default().to_string();
            let shape = tok
                .map(|t| t.parse::<usize>().map_err(|_| malformed(format!("bad shape in {l:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Entry { name, shape })
        })
        .collect::<Result<Vec<_>, NetError>>()?;
    if entries.len() != count {
        return Err(malformed(format!("manifest lists {} tensors, header says {count}", entries.len())));
    }
    Ok((entries, &bytes[end + 2..]))
}

/// Load values into a module with the same parameter layout.
pub fn decode_checkpoint_into<T: Scalar>(bytes: &[u8], module: &mut impl Module<T>) -> Result<(), NetError> {
    let (entries, payload) = parse_manifest(bytes)?;
    let expected: usize = entries.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
    if payload.len() != expected {
        return Err(malformed(format!("payload holds {} bytes, manifest requires {expected}", payload.len())));
    }
    let mut layout = Vec::new();
    module.visit(&mut |p| layout.push((p.name.clone(), p.shape.clone())));
    if layout.len() != entries.len()
        || layout.iter().zip(&entries).any(|((n, s), e)| *n != e.name || *s != e.shape)
    {
        return Err(malformed("checkpoint layout does not match the network"));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    module.visit_mut(&mut |p| {
        for v in p.value.iter_mut() {
            *v = T::of(floats.next().expect("payload length checked") as f64);
        }
    });
    Ok(())
}

pub fn write_checkpoint<T: Scalar>(path: &Path, module: &impl Module<T>) -> Result<(), NetError> {
    fs::write(path, encode_checkpoint(module)).map_err(|e| NetError::Io(path.to_path_buf(), e))
}

pub fn read_checkpoint_into<T: Scalar>(path: &Path, module: &mut impl Module<T>) -> Result<(), NetError> {
    let bytes = fs::read(path).map_err(|e| NetError::Io(path.to_path_buf(), e))?;
    decode_checkpoint_into(&bytes, module)
}
