//! Flat `key = value` configuration with `#` comments.
//!
//! Files are parsed into a [`KvConfig`]; command-line overrides are applied
//! on top, and every typed config can be written back out in full.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", lineno + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.render()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Merges `other` over `self`.
    pub fn overlay(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    /// Fails on keys outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown config key {k:?}"))),
            None => Ok(()),
        }
    }
}

/// Shape of the model. Defaults are the desk-scale configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_side: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub text_len: usize,
    pub redux_tokens: usize,
    pub text_heads: usize,
    pub dem_heads: usize,
    pub dem_mlp_ratio: usize,
    pub time_dim: usize,
    pub rope_theta: f64,
    /// Column shift of reference positions; 0 means "grid width".
    pub ref_offset: usize,
    pub normalize_redux: bool,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            blocks: 2,
            heads: 4,
            patch: 4,
            image_side: 16,
            mlp_ratio: 4,
            lora_rank: 16,
            text_len: crate::promptkit::DEFAULT_MAX_LEN,
            redux_tokens: 16,
            text_heads: 4,
            dem_heads: 4,
            dem_mlp_ratio: 4,
            time_dim: 32,
            rope_theta: 100.0,
            ref_offset: 0,
            normalize_redux: false,
            vocab_size: crate::promptkit::Vocab::builtin().len(),
        }
    }
}

macro_rules! kv_fields {
    ($self:ident, $kv:ident, $($field:ident),* $(,)?) => {
        $( $self.$field = $kv.get_or(concat!("model.", stringify!($field)), $self.$field)?; )*
    };
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "model.d",
        "model.blocks",
        "model.heads",
        "model.patch",
        "model.image_side",
        "model.mlp_ratio",
        "model.lora_rank",
        "model.text_len",
        "model.redux_tokens",
        "model.text_heads",
        "model.dem_heads",
        "model.dem_mlp_ratio",
        "model.time_dim",
        "model.rope_theta",
        "model.ref_offset",
        "model.normalize_redux",
        "model.vocab_size",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = Self::default();
        kv_fields!(
            c, kv, d, blocks, heads, patch, image_side, mlp_ratio, lora_rank, text_len, redux_tokens, text_heads,
            dem_heads, dem_mlp_ratio, time_dim, rope_theta, ref_offset, normalize_redux, vocab_size
        );
        c.validate()?;
        Ok(c)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("model.d", self.d);
        kv.set("model.blocks", self.blocks);
        kv.set("model.heads", self.heads);
        kv.set("model.patch", self.patch);
        kv.set("model.image_side", self.image_side);
        kv.set("model.mlp_ratio", self.mlp_ratio);
        kv.set("model.lora_rank", self.lora_rank);
        kv.set("model.text_len", self.text_len);
        kv.set("model.redux_tokens", self.redux_tokens);
        kv.set("model.text_heads", self.text_heads);
        kv.set("model.dem_heads", self.dem_heads);
        kv.set("model.dem_mlp_ratio", self.dem_mlp_ratio);
        kv.set("model.time_dim", self.time_dim);
        kv.set("model.rope_theta", self.rope_theta);
        kv.set("model.ref_offset", self.ref_offset);
        kv.set("model.normalize_redux", self.normalize_redux);
        kv.set("model.vocab_size", self.vocab_size);
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.blocks == 0 || self.patch == 0 || self.lora_rank == 0 {
            return fail("d, blocks, patch and lora_rank must be positive".into());
        }
        for (name, h) in [("heads", self.heads), ("text_heads", self.text_heads), ("dem_heads", self.dem_heads)] {
            if h == 0 || !self.d.is_multiple_of(h) {
                return fail(format!("d = {} is not divisible by {name} = {h}", self.d));
            }
        }
        if !(self.d / self.heads).is_multiple_of(4) {
            return fail(format!("head dim {} must be divisible by 4 for 2D rotary embedding", self.d / self.heads));
        }
        if !self.image_side.is_multiple_of(self.patch) {
            return fail(format!("image side {} not divisible by patch {}", self.image_side, self.patch));
        }
        let r = (self.redux_tokens as f64).sqrt() as usize;
        if r * r != self.redux_tokens || r == 0 || r > self.grid() {
            return fail(format!("redux_tokens {} must be a square no larger than the patch grid", self.redux_tokens));
        }
        if self.redux_tokens > self.text_len {
            return fail("redux_tokens may not exceed text_len".into());
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return fail("time_dim must be even".into());
        }
        Ok(())
    }

    /// Patch grid side `H′ = W′`.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch
    }

    /// Image tokens per image `N`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn ref_col_offset(&self) -> usize {
        if self.ref_offset == 0 {
            self.grid()
        } else {
            self.ref_offset
        }
    }
}
