//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "FILMSEG1"
//! config_len, config text (key=value lines)
//! param_count
//! per parameter: name_len, name, rank, dims[rank], f64 LE data
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{FilmUNet, ModelConfig, Parameter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FILMSEG1";

fn config_text(cfg: &ModelConfig) -> String {
    format!(
        "depth={}\nin_channels={}\nbase_filters={}\nn_metadata_classes={}\nfilm_enabled={}\ngenerator_hidden={},{}\n",
        cfg.depth,
        cfg.in_channels,
        cfg.base_filters,
        cfg.n_metadata_classes,
        cfg.film_enabled,
        cfg.generator_hidden.0,
        cfg.generator_hidden.1
    )
}

fn parse_config(text: &str) -> std::result::Result<ModelConfig, String> {
    let mut cfg = ModelConfig::default();
    let mut seen = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("malformed config line `{line}`"))?;
        let int = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| format!("config `{key}`: {e}"))
        };
        match key.trim() {
            "depth" => cfg.depth = int(value)?,
            "in_channels" => cfg.in_channels = int(value)?,
            "base_filters" => cfg.base_filters = int(value)?,
            "n_metadata_classes" => cfg.n_metadata_classes = int(value)?,
            "film_enabled" => {
                cfg.film_enabled = value
                    .trim()
                    .parse()
                    .map_err(|e| format!("config `film_enabled`: {e}"))?
            }
            "generator_hidden" => {
                let (a, b) = value
                    .split_once(',')
                    .ok_or_else(|| "config `generator_hidden` needs two values".to_string())?;
                cfg.generator_hidden = (int(a)?, int(b)?);
            }
            other => return Err(format!("unknown config key `{other}`")),
        }
        seen += 1;
    }
    if seen != 6 {
        return Err(format!("config block has {seen} keys, expected 6"));
    }
    Ok(cfg)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn write_checkpoint<W: Write>(model: &FilmUNet, mut out: W) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let text = config_text(model.config());
    put_u32(&mut buf, text.len());
    buf.extend_from_slice(text.as_bytes());
    put_u32(&mut buf, model.params().len());
    for p in model.params() {
        put_u32(&mut buf, p.name.len());
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.value.rank());
        for &d in p.value.shape() {
            put_u32(&mut buf, d);
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated while reading {what} at byte {}", self.pos))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<usize, String> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<FilmUNet, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != MAGIC {
        return Err("bad magic, not a FILMSEG1 checkpoint".into());
    }
    let len = cur.u32("config length")?;
    let text = std::str::from_utf8(cur.take(len, "config")?).map_err(|e| e.to_string())?;
    let config = parse_config(text)?;
    let count = cur.u32("parameter count")?;
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = cur.u32("name length")?;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| format!("parameter {i}: {e}"))?
            .to_string();
        let rank = cur.u32("rank")?;
        let shape = (0..rank)
            .map(|_| cur.u32("dims"))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8, &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| format!("`{name}`: {e}"))?;
        params.push(Parameter {
            name,
            value,
            init_bound: None,
        });
    }
    if cur.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
    }
    FilmUNet::from_parameters(config, params).map_err(|e| e.to_string())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<FilmUNet> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    decode(&bytes).map_err(|m| Error::format("<checkpoint>", m))
}

pub fn save_checkpoint(model: &FilmUNet, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<FilmUNet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}
