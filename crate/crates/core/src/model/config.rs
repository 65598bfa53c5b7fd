use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::LocalContextConfig;
use crate::error::{Error, Result};

/// Cumulative spatial stride of stem plus four stages.
pub const TOTAL_STRIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantName {
    B1,
    B2,
    B3,
    Custom,
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VariantName::B1 => "b1",
            VariantName::B2 => "b2",
            VariantName::B3 => "b3",
            VariantName::Custom => "custom",
        })
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "b1" => Ok(VariantName::B1),
            "b2" => Ok(VariantName::B2),
            "b3" => Ok(VariantName::B3),
            "custom" => Ok(VariantName::Custom),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected b1, b2, b3 or custom)"))),
        }
    }
}

/// Architecture hyperparameters of a model variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: VariantName,
    /// Stem width followed by the width of each of the four stages.
    pub stage_channels: [usize; 5],
    /// Blocks per stage after its downsampling block.
    pub stage_depths: [usize; 4],
    /// 1-based indices of stages built from MBConv + ReduceFormer pairs.
    pub attn_stages: BTreeSet<usize>,
    pub scales: usize,
    pub dw_kernels: Vec<usize>,
    pub mbconv_expansion: usize,
    pub num_classes: usize,
    pub input_resolution: usize,
    /// Classifier head widths: a pointwise conv to `head_widths[0]` before
    /// pooling, then one hidden linear layer per further entry. Empty means
    /// pooling followed directly by the classifier.
    pub head_widths: Vec<usize>,
    pub attn_eps: f64,
}

impl VariantConfig {
    fn preset(name: VariantName, channels: [usize; 5], depths: [usize; 4], head: [usize; 2]) -> Self {
        Self {
            name,
            stage_channels: channels,
            stage_depths: depths,
            attn_stages: [3, 4].into_iter().collect(),
            scales: 2,
            dw_kernels: vec![5],
            mbconv_expansion: 4,
            num_classes: 1000,
            input_resolution: 224,
            head_widths: head.to_vec(),
            attn_eps: crate::attention::DEFAULT_EPS,
        }
    }

    pub fn b1() -> Self {
        Self::preset(VariantName::B1, [16, 32, 64, 128, 256], [2, 3, 3, 4], [1536, 1600])
    }

    pub fn b2() -> Self {
        Self::preset(VariantName::B2, [24, 48, 96, 192, 384], [3, 3, 5, 7], [2304, 2560])
    }

    pub fn b3() -> Self {
        Self::preset(VariantName::B3, [32, 64, 128, 256, 512], [4, 6, 6, 9], [2304, 2560])
    }

    pub fn named(name: VariantName) -> Self {
        match name {
            VariantName::B1 | VariantName::Custom => Self {
                name,
                ..Self::b1()
            },
            VariantName::B2 => Self::b2(),
            VariantName::B3 => Self::b3(),
        }
    }

    /// Reduced-width model for desk-scale training at 32×32 input.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            name: VariantName::Custom,
            stage_channels: [8, 8, 16, 16, 32],
            stage_depths: [1, 1, 1, 1],
            attn_stages: [3, 4].into_iter().collect(),
            scales: 2,
            dw_kernels: vec![5],
            mbconv_expansion: 2,
            num_classes,
            input_resolution: 32,
            head_widths: vec![],
            attn_eps: crate::attention::DEFAULT_EPS,
        }
    }

    pub fn local_context(&self, channels: usize) -> LocalContextConfig {
        LocalContextConfig {
            base_channels: channels,
            scales: self.scales,
            dw_kernels: self.dw_kernels.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.stage_channels.contains(&0) {
            return fail(format!("stage channels must be positive: {:?}", self.stage_channels));
        }
        if let Some(s) = self.attn_stages.iter().find(|s| !(1..=4).contains(*s)) {
            return fail(format!("attention stage {s} outside 1..=4"));
        }
        self.local_context(1).validate()?;
        if self.mbconv_expansion == 0 {
            return fail("mbconv_expansion must be positive".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.head_widths.contains(&0) {
            return fail(format!("head widths must be positive: {:?}", self.head_widths));
        }
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(TOTAL_STRIDE) {
            return fail(format!(
                "input_resolution {} is not a positive multiple of {TOTAL_STRIDE}",
                self.input_resolution
            ));
        }
        if !(self.attn_eps >= 0.0 && self.attn_eps.is_finite()) {
            return fail(format!("attn_eps must be finite and >= 0, got {}", self.attn_eps));
        }
        Ok(())
    }

    /// `key=value` lines in a fixed key order.
    pub fn to_kv_string(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = usize>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        line("name", self.name.to_string());
        line("stage_channels", join(&mut self.stage_channels.iter().copied()));
        line("stage_depths", join(&mut self.stage_depths.iter().copied()));
        line("attn_stages", join(&mut self.attn_stages.iter().copied()));
        line("scales", self.scales.to_string());
        line("dw_kernels", join(&mut self.dw_kernels.iter().copied()));
        line("mbconv_expansion", self.mbconv_expansion.to_string());
        line("num_classes", self.num_classes.to_string());
        line("input_resolution", self.input_resolution.to_string());
        line("head_widths", join(&mut self.head_widths.iter().copied()));
        line("attn_eps", format!("{:e}", self.attn_eps));
        out
    }

    /// Parses `key=value` lines. `#` starts a comment. Keys not given keep
    /// the values of the named preset (B1 for custom configs).
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{raw}`", lineno + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let name = match pairs.iter().find(|(k, _)| k == "name") {
            Some((_, v)) => v.parse()?,
            None => VariantName::Custom,
        };
        let mut cfg = Self::named(name);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            if v.trim().is_empty() {
                return Ok(vec![]);
            }
            v.split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("{key}: `{x}` is not a non-negative integer")))
                })
                .collect()
        }
        fn fixed<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
            list(key, v)?
                .try_into()
                .map_err(|v: Vec<usize>| Error::Config(format!("{key}: expected {N} values, got {}", v.len())))
        }
        fn int(key: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: `{v}` is not a non-negative integer")))
        }
        match key {
            "name" => self.name = value.parse()?,
            "stage_channels" => self.stage_channels = fixed(key, value)?,
            "stage_depths" => self.stage_depths = fixed(key, value)?,
            "attn_stages" => self.attn_stages = list(key, value)?.into_iter().collect(),
            "scales" => self.scales = int(key, value)?,
            "dw_kernels" => self.dw_kernels = list(key, value)?,
            "mbconv_expansion" => self.mbconv_expansion = int(key, value)?,
            "num_classes" => self.num_classes = int(key, value)?,
            "input_resolution" => self.input_resolution = int(key, value)?,
            "head_widths" => self.head_widths = list(key, value)?,
            "attn_eps" => {
                self.attn_eps = value
                    .parse()
                    .map_err(|_| Error::Config(format!("attn_eps: `{value}` is not a number")))?
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}
