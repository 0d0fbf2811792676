//! Model configuration: normalization placement, kernel schedule, channel
//! widths, fusion-module switches. One value of [`ModelConfig`] describes one
//! network variant; every ablation row is expressible as a config.
//!
//! Configs serialize to a flat `key = value` file:
//!
//! ```text
//! init_norm = in            # in | bn | none
//! body_norm = gn            # gn | bn | none
//! gn_groups_body = 8
//! init_kernel = 15
//! kernel_schedule = 15,7,5,5
//! channel_widths = 32,64,128,256
//! use_mpafm = true
//! use_lkdc = true
//! dropout_p = 0
//! ```
//!
//! Blank lines and `#` comments are ignored; unknown or duplicate keys are
//! format errors; omitted keys keep their defaults.

use crate::error::{Error, Result};
use std::fmt;
use std::str::FromStr;

/// Normalization applied inside the initial block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InitNorm {
    Instance,
    Batch,
    None,
}

/// Normalization applied inside the body blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BodyNorm {
    Group,
    Batch,
    None,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub init_norm: InitNorm,
    pub body_norm: BodyNorm,
    /// Group count for GN in body blocks, capped at the channel width.
    /// The depthwise companion block always uses exactly 1 group.
    pub gn_groups_body: usize,
    /// Kernel size of the initial block (odd).
    pub init_kernel: usize,
    /// Per-stage kernel sizes for the four encoder/decoder stages (odd).
    pub kernel_schedule: [usize; 4],
    /// Per-stage channel widths.
    pub channel_widths: [usize; 4],
    /// Recalibrate skip connections with the multipath adaptive fusion module;
    /// plain concatenation otherwise.
    pub use_mpafm: bool,
    /// Append the depthwise large-kernel block to each encoder stage.
    pub use_lkdc: bool,
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            init_norm: InitNorm::Instance,
            body_norm: BodyNorm::Group,
            gn_groups_body: 8,
            init_kernel: 15,
            kernel_schedule: [15, 7, 5, 5],
            channel_widths: [32, 64, 128, 256],
            use_mpafm: true,
            use_lkdc: true,
            dropout_p: 0.0,
        }
    }
}

/// Channel widths of the desk-scale preset.
pub const DESK_CHANNEL_WIDTHS: [usize; 4] = [8, 16, 32, 64];

impl ModelConfig {
    /// Same architecture at desk-scale widths (CI-friendly).
    pub fn with_desk_widths(mut self) -> Self {
        self.channel_widths = DESK_CHANNEL_WIDTHS;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let odd = |k: usize, what: &str| {
            if k % 2 == 1 && k >= 1 {
                Ok(())
            } else {
                Err(Error::ContractViolation(format!(
                    "{what} must be odd and positive, got {k}"
                )))
            }
        };
        odd(self.init_kernel, "init_kernel")?;
        for (s, &k) in self.kernel_schedule.iter().enumerate() {
            odd(k, &format!("kernel_schedule[{s}]"))?;
        }
        if self.gn_groups_body == 0 {
            return Err(Error::ContractViolation("gn_groups_body must be positive".into()));
        }
        for (s, &w) in self.channel_widths.iter().enumerate() {
            if w == 0 {
                return Err(Error::ContractViolation(format!(
                    "channel_widths[{s}] must be positive"
                )));
            }
            if self.body_norm == BodyNorm::Group {
                let g = self.gn_groups_body.min(w);
                if w % g != 0 {
                    return Err(Error::ContractViolation(format!(
                        "channel_widths[{s}] = {w} not divisible into {g} groups"
                    )));
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::ContractViolation(format!(
                "dropout_p must lie in [0,1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Smallest valid square input size: every stage kernel must fit at its
    /// resolution, rounded up to a multiple of 16.
    pub fn min_input_dim(&self) -> usize {
        let mut need = self.init_kernel;
        for (s, &k) in self.kernel_schedule.iter().enumerate() {
            need = need.max(k << s);
        }
        need.div_ceil(16) * 16
    }

    /// Canonical flat key=value form (stable key order).
    pub fn to_kv_string(&self) -> String {
        let norm_i = match self.init_norm {
            InitNorm::Instance => "in",
            InitNorm::Batch => "bn",
            InitNorm::None => "none",
        };
        let norm_b = match self.body_norm {
            BodyNorm::Group => "gn",
            BodyNorm::Batch => "bn",
            BodyNorm::None => "none",
        };
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "init_norm = {norm_i}\nbody_norm = {norm_b}\ngn_groups_body = {}\n\
             init_kernel = {}\nkernel_schedule = {}\nchannel_widths = {}\n\
             use_mpafm = {}\nuse_lkdc = {}\ndropout_p = {}\n",
            self.gn_groups_body,
            self.init_kernel,
            join(&self.kernel_schedule),
            join(&self.channel_widths),
            self.use_mpafm,
            self.use_lkdc,
            self.dropout_p,
        )
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Format(format!("duplicate key {key}")));
            }
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad integer for {key}: {v}")))
            };
            let parse_list4 = |v: &str| -> Result<[usize; 4]> {
                let items: Vec<usize> = v
                    .split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad list for {key}: {v}")))
                    })
                    .collect::<Result<_>>()?;
                items
                    .try_into()
                    .map_err(|_| Error::Format(format!("{key} needs exactly 4 entries")))
            };
            let parse_bool = |v: &str| match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Format(format!("bad bool for {key}: {v}"))),
            };
            match key {
                "init_norm" => {
                    cfg.init_norm = match value {
                        "in" => InitNorm::Instance,
                        "bn" => InitNorm::Batch,
                        "none" => InitNorm::None,
                        _ => return Err(Error::Format(format!("bad init_norm: {value}"))),
                    }
                }
                "body_norm" => {
                    cfg.body_norm = match value {
                        "gn" => BodyNorm::Group,
                        "bn" => BodyNorm::Batch,
                        "none" => BodyNorm::None,
                        _ => return Err(Error::Format(format!("bad body_norm: {value}"))),
                    }
                }
                "gn_groups_body" => cfg.gn_groups_body = parse_usize(value)?,
                "init_kernel" => cfg.init_kernel = parse_usize(value)?,
                "kernel_schedule" => cfg.kernel_schedule = parse_list4(value)?,
                "channel_widths" => cfg.channel_widths = parse_list4(value)?,
                "use_mpafm" => cfg.use_mpafm = parse_bool(value)?,
                "use_lkdc" => cfg.use_lkdc = parse_bool(value)?,
                "dropout_p" => {
                    cfg.dropout_p = value
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad dropout_p: {value}")))?
                }
                _ => return Err(Error::Format(format!("unknown key {key}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable 64-bit FNV-1a fingerprint of the canonical form.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_kv_string().as_bytes())
    }

    pub fn fingerprint_hex(&self) -> String {
        format!("{:016x}", self.fingerprint())
    }

    /// Human-readable field diffs against another config (for fingerprint
    /// mismatch errors).
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let mut diffs = Vec::new();
        let mut field = |name: &str, a: String, b: String| {
            if a != b {
                diffs.push(format!("{name}: {a} vs {b}"));
            }
        };
        field("init_norm", format!("{:?}", self.init_norm), format!("{:?}", other.init_norm));
        field("body_norm", format!("{:?}", self.body_norm), format!("{:?}", other.body_norm));
        field(
            "gn_groups_body",
            self.gn_groups_body.to_string(),
            other.gn_groups_body.to_string(),
        );
        field("init_kernel", self.init_kernel.to_string(), other.init_kernel.to_string());
        field(
            "kernel_schedule",
            format!("{:?}", self.kernel_schedule),
            format!("{:?}", other.kernel_schedule),
        );
        field(
            "channel_widths",
            format!("{:?}", self.channel_widths),
            format!("{:?}", other.channel_widths),
        );
        field("use_mpafm", self.use_mpafm.to_string(), other.use_mpafm.to_string());
        field("use_lkdc", self.use_lkdc.to_string(), other.use_lkdc.to_string());
        field("dropout_p", self.dropout_p.to_string(), other.dropout_p.to_string());
        diffs
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Ablation-table rows; each maps to a full [`ModelConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum AblationRow {
    /// All-BN normalization with plain 3x3 kernels.
    I,
    /// All-BN normalization with the large-kernel schedule.
    II,
    /// BN initial block, GN body, large kernels.
    III,
    /// IN initial block, GN body, plain 3x3 kernels.
    IV,
    /// No normalization anywhere, large kernels.
    V,
    /// Full default except the fusion module is replaced by concatenation.
    VI,
    /// The full default configuration.
    Ours,
}

impl AblationRow {
    pub const ALL: [AblationRow; 7] = [
        AblationRow::I,
        AblationRow::II,
        AblationRow::III,
        AblationRow::IV,
        AblationRow::V,
        AblationRow::VI,
        AblationRow::Ours,
    ];
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AblationRow::I => "I",
            AblationRow::II => "II",
            AblationRow::III => "III",
            AblationRow::IV => "IV",
            AblationRow::V => "V",
            AblationRow::VI => "VI",
            AblationRow::Ours => "Ours",
        };
        f.write_str(s)
    }
}

impl FromStr for AblationRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "i" | "1" => Ok(AblationRow::I),
            "II" | "ii" | "2" => Ok(AblationRow::II),
            "III" | "iii" | "3" => Ok(AblationRow::III),
            "IV" | "iv" | "4" => Ok(AblationRow::IV),
            "V" | "v" | "5" => Ok(AblationRow::V),
            "VI" | "vi" | "6" => Ok(AblationRow::VI),
            "Ours" | "ours" | "OURS" => Ok(AblationRow::Ours),
            other => Err(Error::ContractViolation(format!(
                "unknown ablation row tag: {other}"
            ))),
        }
    }
}

/// The configuration of one ablation row.
pub fn ablation_config(row: AblationRow) -> ModelConfig {
    let base = ModelConfig::default();
    let small_kernels = ModelConfig {
        init_kernel: 3,
        kernel_schedule: [3, 3, 3, 3],
        ..base.clone()
    };
    match row {
        AblationRow::I => ModelConfig {
            init_norm: InitNorm::Batch,
            body_norm: BodyNorm::Batch,
            ..small_kernels
        },
        AblationRow::II => ModelConfig {
            init_norm: InitNorm::Batch,
            body_norm: BodyNorm::Batch,
            ..base
        },
        AblationRow::III => ModelConfig {
            init_norm: InitNorm::Batch,
            body_norm: BodyNorm::Group,
            ..base
        },
        AblationRow::IV => ModelConfig {
            init_norm: InitNorm::Instance,
            body_norm: BodyNorm::Group,
            ..small_kernels
        },
        AblationRow::V => ModelConfig {
            init_norm: InitNorm::None,
            body_norm: BodyNorm::None,
            ..base
        },
        AblationRow::VI => ModelConfig {
            use_mpafm: false,
            ..base
        },
        AblationRow::Ours => base,
    }
}
