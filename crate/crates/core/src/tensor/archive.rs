//! Named-tensor archive: a text manifest followed by a little-endian payload.
//!
//! ```text
//! SEBENCH-TENSORS 1
//! count 2
//! blocks.0.w f32 256,1024 0 1048576
//! blocks.0.b f32 1024 1048576 4096
//! END
//! <raw bytes>
//! ```
//!
//! Each manifest line is `name dtype shape byte_offset byte_length`, with
//! offsets relative to the first payload byte and payloads concatenated in
//! manifest order.

use std::fs;
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "SEBENCH-TENSORS 1";

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn encode<T: Real>(entries: &[(&str, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut manifest = format!("{MAGIC}\ncount {}\n", entries.len());
    let mut payload = Vec::new();
    for (name, t) in entries {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(fmt_err(format!("tensor name `{name}` is empty or contains whitespace")));
        }
        let offset = payload.len();
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!(
            "{name} {} {} {offset} {}\n",
            T::DTYPE,
            shape.join(","),
            payload.len() - offset
        ));
    }
    manifest.push_str("END\n");
    let mut out = manifest.into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

fn decode_values<T: Real>(dtype: &str, bytes: &[u8]) -> Result<Vec<T>> {
    match dtype {
        "f32" => Ok(bytes.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect()),
        "f64" => Ok(bytes.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect()),
        other => Err(fmt_err(format!("unsupported dtype `{other}`"))),
    }
}

/// Decodes an archive, converting stored values to `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nEND\n")
        .ok_or_else(|| fmt_err("archive manifest has no END line"))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| fmt_err("archive manifest is not UTF-8"))?;
    let payload = &bytes[end + 5..];
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(fmt_err("not a tensor archive (bad magic line)"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("count "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| fmt_err("missing or malformed `count` line"))?;
    let mut out = Vec::with_capacity(count);
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, dtype, shape, offset, length] = fields[..] else {
            return Err(fmt_err(format!("malformed manifest line `{line}`")));
        };
        let shape: Vec<usize> = shape
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| fmt_err(format!("bad shape in `{line}`")))?;
        let (offset, length): (usize, usize) = match (offset.parse(), length.parse()) {
            (Ok(o), Ok(l)) => (o, l),
            _ => return Err(fmt_err(format!("bad offset/length in `{line}`"))),
        };
        let width = match dtype {
            "f32" => 4,
            "f64" => 8,
            other => return Err(fmt_err(format!("unsupported dtype `{other}`"))),
        };
        let numel: usize = shape.iter().product();
        if numel * width != length || offset.checked_add(length).is_none_or(|e| e > payload.len()) {
            return Err(fmt_err(format!("entry `{name}` does not fit the payload")));
        }
        let values = decode_values(dtype, &payload[offset..offset + length])?;
        out.push((name.to_string(), Tensor::new(shape, values)?));
    }
    if out.len() != count {
        return Err(fmt_err(format!("manifest lists {} entries, count says {count}", out.len())));
    }
    Ok(out)
}

pub fn save<T: Real>(path: impl AsRef<Path>, entries: &[(&str, &Tensor<T>)]) -> Result<()> {
    fs::write(path, encode(entries)?)?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<T>)>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_cast() {
        let a = Tensor::<f32>::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, -1e7]).unwrap();
        let b = Tensor::<f32>::new(vec![1], vec![42.0]).unwrap();
        let bytes = encode(&[("a", &a), ("layer.b", &b)]).unwrap();
        let back: Vec<(String, Tensor<f32>)> = decode(&bytes).unwrap();
        assert_eq!(back[0], ("a".to_string(), a.clone()));
        assert_eq!(back[1].0, "layer.b");
        let wide: Vec<(String, Tensor<f64>)> = decode(&bytes).unwrap();
        assert_eq!(wide[0].1.data()[2], 3.25);
        let text = String::from_utf8_lossy(&bytes[..bytes.len() - 28]).to_string();
        assert!(text.contains("a f32 2,3 0 24\n"));
        assert!(text.contains("layer.b f32 1 24 4\n"));
    }

    #[test]
    fn rejects_corruption() {
        let a = Tensor::<f64>::ones(vec![4]);
        let bytes = encode(&[("a", &a)]).unwrap();
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f64>(b"garbage\nEND\n").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
        assert!(encode(&[("has space", &a)]).is_err());
    }
}
