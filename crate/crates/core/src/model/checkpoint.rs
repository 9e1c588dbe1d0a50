//! Text checkpoint format.
//!
//! ```text
//! mona-checkpoint 1
//! config {"encoder":{...},...}
//! config-sha256 <hex>
//! tensor emg.in.w 16 8
//! 3fb999999999999a bfc3333333333333 ...
//! ...
//! end
//! ```
//!
//! Values are the raw IEEE-754 bit patterns in hex, so loading is bit-exact.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &str = "mona-checkpoint 1";

pub fn config_hash(config: &ModelConfig) -> Result<String> {
    let json = serde_json::to_string(config)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "config {}", serde_json::to_string(&params.config)?)?;
    writeln!(out, "config-sha256 {}", config_hash(&params.config)?)?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        writeln!(out, "tensor {name} {} {}", t.rows(), t.cols())?;
        let line: Vec<String> = t.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    writeln!(out, "end")?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<ModelParams> {
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, l)) => Ok((n, l?)),
            None => Err(Error::Parse {
                line: 0,
                msg: format!("unexpected end of file, expected {what}"),
            }),
        }
    };
    let perr = |line: usize, msg: String| Error::Parse { line, msg };

    let (n, magic) = next("header")?;
    if magic.trim_end() != MAGIC {
        return Err(perr(n, format!("bad header {magic:?}")));
    }
    let (n, cfg_line) = next("config")?;
    let cfg_json = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| perr(n, "expected config line".into()))?;
    let config: ModelConfig = serde_json::from_str(cfg_json).map_err(|e| perr(n, e.to_string()))?;
    let (n, hash_line) = next("config hash")?;
    let hash = hash_line
        .strip_prefix("config-sha256 ")
        .ok_or_else(|| perr(n, "expected config-sha256 line".into()))?;
    if hash != config_hash(&config)? {
        return Err(perr(n, "config hash mismatch".into()));
    }
    let mut named = Vec::new();
    loop {
        let (n, head) = next("tensor or end")?;
        if head.trim_end() == "end" {
            break;
        }
        let parts: Vec<&str> = head.split_whitespace().collect();
        let (name, rows, cols) = match parts.as_slice() {
            ["tensor", name, r, c] => (
                name.to_string(),
                r.parse::<usize>().map_err(|e| perr(n, e.to_string()))?,
                c.parse::<usize>().map_err(|e| perr(n, e.to_string()))?,
            ),
            _ => return Err(perr(n, format!("expected tensor header, got {head:?}"))),
        };
        let (n, body) = next("tensor values")?;
        let data: Vec<f64> = body
            .split_whitespace()
            .map(|h| u64::from_str_radix(h, 16).map(f64::from_bits))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| perr(n, e.to_string()))?;
        if data.len() != rows * cols {
            return Err(perr(n, format!("{name}: expected {} values, got {}", rows * cols, data.len())));
        }
        named.push((name, Tensor::matrix(rows, cols, data)?));
    }
    ModelParams::from_tensors(&config, named)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = ModelParams::init(&ModelConfig::default()).unwrap();
        // awkward values survive too
        p.tensors_mut()[0].data_mut()[0] = -0.0;
        p.tensors_mut()[0].data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        p.tensors_mut()[0].data_mut()[2] = 0.1 + 0.2;
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let q = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p.checksum(), q.checksum());
        assert_eq!(p, q);
        assert!(q.tensors()[0].data()[0].is_sign_negative());
    }

    #[test]
    fn corrupted_files_are_rejected_with_line_numbers() {
        let p = ModelParams::init(&ModelConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();

        let bad_hash = text.replacen("config-sha256 ", "config-sha256 00", 1);
        assert!(matches!(read_checkpoint(bad_hash.as_bytes()), Err(Error::Parse { line: 3, .. })));

        let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(read_checkpoint(truncated.as_bytes()).is_err());

        let mut lines: Vec<&str> = text.lines().collect();
        lines[4] = "zz";
        let bad_value = lines.join("\n");
        assert!(matches!(read_checkpoint(bad_value.as_bytes()), Err(Error::Parse { line: 5, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = ModelParams::init(&ModelConfig::default()).unwrap();
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }
}
