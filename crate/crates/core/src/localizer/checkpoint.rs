//! Versioned text checkpoints of head parameters.
//!
//! ```text
//! spil-head-checkpoint 1
//! channels = 11
//! context = 1
//! anchor_types = 9
//! score.weight = 0.0 0.0 ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SpilError};

use super::head::{HeadDims, HeadParams, PARAM_BLOCKS};

pub const CHECKPOINT_MAGIC: &str = "spil-head-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_text(params: &HeadParams) -> String {
    let dims = params.dims();
    let mut s = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
    let _ = writeln!(s, "channels = {}", dims.channels);
    let _ = writeln!(s, "context = {}", dims.context);
    let _ = writeln!(s, "anchor_types = {}", dims.anchor_types);
    for (name, block) in PARAM_BLOCKS.iter().zip(params.blocks()) {
        s.push_str(name);
        s.push_str(" =");
        for v in block {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
    }
    s
}

pub fn from_text(text: &str, path: &Path) -> Result<HeadParams> {
    let parse_err = |m: String| SpilError::parse(path, m);
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let mut parts = header.split_whitespace();
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(parse_err(format!("missing '{CHECKPOINT_MAGIC}' header")));
    }
    let found = parts.next().unwrap_or("").to_string();
    if found.parse::<u32>().ok() != Some(CHECKPOINT_VERSION) {
        return Err(SpilError::Version {
            path: path.to_path_buf(),
            found,
            expected: CHECKPOINT_VERSION,
        });
    }

    let mut fields: Vec<(String, String)> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("line {}: expected 'key = values'", n + 2)))?;
        fields.push((k.trim().to_string(), v.trim().to_string()));
    }
    let get = |key: &str| {
        fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| parse_err(format!("missing key '{key}'")))
    };
    let int = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| parse_err(format!("key '{key}' is not an integer")))
    };
    let dims = HeadDims {
        channels: int("channels")?,
        context: int("context")?,
        anchor_types: int("anchor_types")?,
    };
    let mut values = Vec::new();
    for name in PARAM_BLOCKS {
        for tok in get(name)?.split_whitespace() {
            values.push(
                tok.parse::<f64>()
                    .map_err(|_| parse_err(format!("key '{name}': bad number '{tok}'")))?,
            );
        }
    }
    let params = HeadParams::from_values(dims, values).map_err(|e| parse_err(e.to_string()))?;
    let expected = HeadParams::zeros(dims);
    for (i, (a, b)) in params.blocks().iter().zip(expected.blocks()).enumerate() {
        if a.len() != b.len() {
            return Err(parse_err(format!("block '{}' has wrong length", PARAM_BLOCKS[i])));
        }
    }
    Ok(params)
}

pub fn save(params: &HeadParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(params)).map_err(|e| SpilError::io(path, e))
}

pub fn load(path: &Path) -> Result<HeadParams> {
    let text = std::fs::read_to_string(path).map_err(|e| SpilError::io(path, e))?;
    from_text(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> HeadDims {
        HeadDims {
            channels: 3,
            context: 1,
            anchor_types: 2,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut p = HeadParams::init(dims());
        for (i, v) in p.values_mut().iter_mut().enumerate() {
            *v += (i as f64 * 0.37).sin() * 1e-7 + 1.0 / 3.0;
        }
        let back = from_text(&to_text(&p), Path::new("x")).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn version_mismatch() {
        let text = to_text(&HeadParams::init(dims())).replacen(" 1\n", " 2\n", 1);
        assert!(matches!(from_text(&text, Path::new("x")), Err(SpilError::Version { .. })));
    }
}
