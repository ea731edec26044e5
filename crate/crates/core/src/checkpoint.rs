//! Self-describing checkpoint directories.
//!
//! A checkpoint is a directory holding `manifest.txt` and `tensors.bin`. The
//! manifest is plain `key = value` text: free-form metadata keys first, then
//! one `tensor <name> = <dims> <offset> <count>` line per tensor. The blob
//! stores every tensor as little-endian `f64`, concatenated in manifest
//! order; offsets are in bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "tensors.bin";
const FORMAT: &str = "dynslim-checkpoint";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    /// Metadata value parsed as `T`, with an error naming the key.
    pub fn parse<T: std::str::FromStr>(&self, dir: &Path, key: &str) -> Result<T> {
        let raw = self.meta(key).ok_or_else(|| bad(dir, format!("missing key `{key}`")))?;
        raw.parse()
            .map_err(|_| bad(dir, format!("bad value `{raw}` for `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        manifest.push_str(&format!("format = {FORMAT}\nversion = 1\ndtype = f64le\n"));
        for (k, v) in &self.meta {
            if k.contains('=') || k.starts_with("tensor ") || v.contains('\n') {
                return Err(bad(dir, format!("metadata key `{k}` cannot be stored")));
            }
            manifest.push_str(&format!("{k} = {v}\n"));
        }
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(bad(dir, format!("tensor name `{name}` contains whitespace")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
            manifest.push_str(&format!("tensor {name} = {dims} {} {}\n", blob.len(), t.len()));
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_atomic(&dir.join(BLOB), &blob)?;
        write_atomic(&dir.join(MANIFEST), manifest.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let file = fs::File::open(&mpath).map_err(|e| bad(dir, format!("cannot open manifest: {e}")))?;
        let mut blob = Vec::new();
        fs::File::open(dir.join(BLOB))
            .map_err(|e| bad(dir, format!("cannot open tensor blob: {e}")))?
            .read_to_end(&mut blob)?;
        let mut meta = BTreeMap::new();
        let mut tensors = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| bad(dir, format!("malformed line `{line}`")))?;
            if let Some(name) = key.strip_prefix("tensor ") {
                tensors.push((name.to_string(), parse_tensor(dir, value, &blob)?));
            } else {
                meta.insert(key.to_string(), value.to_string());
            }
        }
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(bad(dir, "not a dynslim checkpoint"));
        }
        if meta.get("dtype").map(String::as_str) != Some("f64le") {
            return Err(bad(dir, "unsupported dtype"));
        }
        for k in ["format", "version", "dtype"] {
            meta.remove(k);
        }
        Ok(Checkpoint { meta, tensors })
    }
}

fn parse_tensor(dir: &Path, spec: &str, blob: &[u8]) -> Result<Tensor> {
    let parts: Vec<&str> = spec.split_whitespace().collect();
    let [dims, offset, count] = parts[..] else {
        return Err(bad(dir, format!("malformed tensor spec `{spec}`")));
    };
    let shape: Vec<usize> = if dims == "scalar" {
        vec![]
    } else {
        dims.split('x')
            .map(|d| d.parse().map_err(|_| bad(dir, format!("bad dims `{dims}`"))))
            .collect::<Result<_>>()?
    };
    let offset: usize = offset.parse().map_err(|_| bad(dir, "bad offset"))?;
    let count: usize = count.parse().map_err(|_| bad(dir, "bad count"))?;
    let end = offset + 8 * count;
    if end > blob.len() {
        return Err(bad(dir, "tensor blob is truncated"));
    }
    let data = blob[offset..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data).map_err(|_| bad(dir, format!("shape {dims} does not match count {count}")))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
