//! On-disk snapshot format.
//!
//! A snapshot is a directory containing a text `manifest` plus one raw
//! little-endian f32 blob per parameter block, named by layer path
//! (`stage1.block0.conv1.weight.bin`). The manifest records the
//! architecture, shapes, and a sha256 per blob; loads verify all of it,
//! so a save/load round trip is bit-exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelMeta};

const MAGIC: &str = "grond-snapshot";
const VERSION: u32 = 1;

pub fn save_snapshot(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    manifest.push_str(&format!("magic = {MAGIC}\n"));
    manifest.push_str(&format!("version = {VERSION}\n"));
    let m = &model.meta;
    manifest.push_str(&format!("arch_id = {}\n", m.arch_id));
    manifest.push_str(&format!("class_count = {}\n", m.class_count));
    manifest.push_str(&format!(
        "input_shape = {}x{}x{}\n",
        m.input_shape[0], m.input_shape[1], m.input_shape[2]
    ));
    manifest.push_str(&format!("channel_scale = 1/{}\n", m.width_div));
    manifest.push_str(&format!("seed = {}\n", m.seed));
    manifest.push_str(&format!("epoch = {}\n", m.epoch));
    for entry in model.params.iter() {
        let blob = f32_bytes(entry.tensor.data());
        let digest = hex(&Sha256::digest(&blob));
        let shape = entry
            .tensor
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!("param.{}.shape = {shape}\n", entry.name));
        manifest.push_str(&format!("param.{}.sha256 = {digest}\n", entry.name));
        let path = dir.join(format!("{}.bin", entry.name));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&blob).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("manifest");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_snapshot(dir: &Path) -> Result<Model> {
    let manifest_path = dir.join("manifest");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut lines = KvLines::parse(&manifest_path, &text)?;

    let magic = lines.take("magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            path: manifest_path,
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version: u32 = lines.take_parsed("version")?;
    if version != VERSION {
        return Err(Error::Format {
            path: manifest_path,
            offset: lines.offset_of("version"),
            detail: format!("unsupported snapshot version {version}, expected {VERSION}"),
        });
    }
    let arch_id = lines.take("arch_id")?;
    let class_count: usize = lines.take_parsed("class_count")?;
    let input_shape = parse_shape(&lines.take("input_shape")?, &manifest_path)?;
    if input_shape.len() != 3 {
        return Err(Error::Format {
            path: manifest_path,
            offset: lines.offset_of("input_shape"),
            detail: "input_shape must have three dimensions".into(),
        });
    }
    let scale = lines.take("channel_scale")?;
    let width_div: u32 = scale
        .strip_prefix("1/")
        .unwrap_or(if scale == "1" { "1" } else { "" })
        .parse()
        .map_err(|_| Error::Format {
            path: manifest_path.clone(),
            offset: lines.offset_of("channel_scale"),
            detail: format!("bad channel_scale {scale:?}"),
        })?;
    let seed: u64 = lines.take_parsed("seed")?;
    let epoch: u32 = lines.take_parsed("epoch")?;

    let meta = ModelMeta {
        arch_id,
        class_count,
        input_shape: [input_shape[0], input_shape[1], input_shape[2]],
        width_div,
        seed,
        epoch,
    };
    let mut model = Model::from_meta(meta).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        offset: 0,
        detail: format!("cannot rebuild architecture: {e}"),
    })?;

    for idx in 0..model.params.len() {
        let (name, expect_shape) = {
            let e = model.params.entry(idx);
            (e.name.clone(), e.tensor.shape().to_vec())
        };
        let shape = parse_shape(&lines.take(&format!("param.{name}.shape"))?, &manifest_path)?;
        if shape != expect_shape {
            return Err(Error::Format {
                path: manifest_path.clone(),
                offset: lines.offset_of(&format!("param.{name}.shape")),
                detail: format!(
                    "parameter {name} has shape {shape:?}, architecture expects {expect_shape:?}"
                ),
            });
        }
        let expected_digest = lines.take(&format!("param.{name}.sha256"))?;
        let blob_path = dir.join(format!("{name}.bin"));
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let want = shape.iter().product::<usize>() * 4;
        if blob.len() != want {
            return Err(Error::Format {
                path: blob_path,
                offset: blob.len() as u64,
                detail: format!("truncated blob: {} bytes, expected {want}", blob.len()),
            });
        }
        let digest = hex(&Sha256::digest(&blob));
        if digest != expected_digest {
            return Err(Error::Checksum {
                path: blob_path,
                name,
                expected: expected_digest,
                actual: digest,
            });
        }
        let values: Vec<f32> = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                path: blob_path,
                offset: (pos * 4) as u64,
                detail: format!("non-finite value in parameter {name}"),
            });
        }
        *model.params.get_mut(idx) = crate::tensor::Tensor::from_vec(&shape, values)
            .expect("shape/product verified above");
    }
    Ok(model)
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_shape(s: &str, path: &Path) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| {
            d.parse::<usize>().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                detail: format!("bad shape component {d:?}"),
            })
        })
        .collect()
}

/// `key = value` lines with byte offsets for error reporting.
struct KvLines {
    path: PathBuf,
    entries: Vec<(String, String, u64)>,
}

impl KvLines {
    fn parse(path: &Path, text: &str) -> Result<KvLines> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let len = line.len() as u64 + 1;
            let line_t = line.trim();
            if !line_t.is_empty() {
                let (k, v) = line_t.split_once('=').ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    offset,
                    detail: format!("expected `key = value`, got {line_t:?}"),
                })?;
                entries.push((k.trim().to_string(), v.trim().to_string(), offset));
            }
            offset += len;
        }
        Ok(KvLines {
            path: path.to_path_buf(),
            entries,
        })
    }

    fn take(&mut self, key: &str) -> Result<String> {
        match self.entries.iter().position(|(k, _, _)| k == key) {
            Some(i) => Ok(self.entries.remove(i).1),
            None => Err(Error::Format {
                path: self.path.clone(),
                offset: 0,
                detail: format!("missing manifest key {key:?}"),
            }),
        }
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let offset = self.offset_of(key);
        let v = self.take(key)?;
        v.parse().map_err(|_| Error::Format {
            path: self.path.clone(),
            offset,
            detail: format!("cannot parse {key} value {v:?}"),
        })
    }

    fn offset_of(&self, key: &str) -> u64 {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|&(_, _, o)| o)
            .unwrap_or(0)
    }
}
