//! Mixed-precision mode selection.
//!
//! A [`ModeConfig`] picks INT8 or FP for each of the six operator slots. The
//! [`Dataflow`] derived from it fixes the storage of every activation in a
//! layer; the forward pass and the traffic model both read it, so they can
//! never disagree about which tensor is quantized.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::Symbol;
use crate::error::{Error, Result};
use crate::probe::{GemmPrecision, Slot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotPrecision {
    #[serde(rename = "int8")]
    Int8,
    #[serde(rename = "fp")]
    Fp,
}

impl SlotPrecision {
    pub fn is_int8(self) -> bool {
        self == SlotPrecision::Int8
    }

    fn from_flag(int8: bool) -> Self {
        if int8 {
            SlotPrecision::Int8
        } else {
            SlotPrecision::Fp
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub embedding: SlotPrecision,
    pub qkv_gemm: SlotPrecision,
    pub attn: SlotPrecision,
    pub attn_output: SlotPrecision,
    pub fc1: SlotPrecision,
    pub fc2: SlotPrecision,
}

impl ModeConfig {
    /// Flags in table order: embedding, QKV GeMM, attention, attention output, FC1, FC2.
    pub const fn from_flags(flags: [bool; 6]) -> Self {
        const fn p(b: bool) -> SlotPrecision {
            if b {
                SlotPrecision::Int8
            } else {
                SlotPrecision::Fp
            }
        }
        Self {
            embedding: p(flags[0]),
            qkv_gemm: p(flags[1]),
            attn: p(flags[2]),
            attn_output: p(flags[3]),
            fc1: p(flags[4]),
            fc2: p(flags[5]),
        }
    }

    pub const FP32: ModeConfig = ModeConfig::from_flags([false; 6]);
    pub const M1: ModeConfig = ModeConfig::from_flags([true, true, false, false, true, false]);
    pub const M2: ModeConfig = ModeConfig::from_flags([true, true, true, true, true, false]);
    pub const M3: ModeConfig = ModeConfig::from_flags([true; 6]);

    pub fn flags(&self) -> [bool; 6] {
        [
            self.embedding.is_int8(),
            self.qkv_gemm.is_int8(),
            self.attn.is_int8(),
            self.attn_output.is_int8(),
            self.fc1.is_int8(),
            self.fc2.is_int8(),
        ]
    }

    pub fn with_flag(mut self, index: usize, int8: bool) -> Self {
        let p = SlotPrecision::from_flag(int8);
        match index {
            0 => self.embedding = p,
            1 => self.qkv_gemm = p,
            2 => self.attn = p,
            3 => self.attn_output = p,
            4 => self.fc1 = p,
            5 => self.fc2 = p,
            _ => panic!("slot index {index} out of range"),
        }
        self
    }

    pub fn slot(&self, slot: Slot) -> SlotPrecision {
        match slot {
            Slot::Qkv => self.qkv_gemm,
            Slot::Attn => self.attn,
            Slot::AttnOutput => self.attn_output,
            Slot::Fc1 => self.fc1,
            Slot::Fc2 => self.fc2,
        }
    }

    pub fn gemm_precision(&self, slot: Slot) -> GemmPrecision {
        if self.slot(slot).is_int8() {
            GemmPrecision::Int8
        } else {
            GemmPrecision::Fp
        }
    }

    pub fn is_fp32(&self) -> bool {
        *self == Self::FP32
    }

    /// Calibrated sites this mode reads, per layer.
    pub fn required_symbols(&self) -> Vec<Symbol> {
        let mut out = Vec::new();
        if self.attn.is_int8() {
            out.extend([Symbol::Q, Symbol::K, Symbol::V, Symbol::P]);
        }
        if self.attn_output.is_int8() {
            out.extend([Symbol::Attn, Symbol::O]);
        }
        if self.fc2.is_int8() {
            out.extend([Symbol::A, Symbol::X2]);
        }
        out
    }

    pub fn preset_name(&self) -> Option<&'static str> {
        [("FP32", Self::FP32), ("M1", Self::M1), ("M2", Self::M2), ("M3", Self::M3)]
            .into_iter()
            .find(|(_, m)| m == self)
            .map(|(n, _)| n)
    }

    /// A preset name, or a path to a JSON mode file.
    pub fn resolve(arg: &str) -> Result<Self> {
        match mode_from_name(arg) {
            Ok(m) => Ok(m),
            Err(_) if Path::new(arg).is_file() => {
                Ok(serde_json::from_str(&std::fs::read_to_string(arg)?)?)
            }
            Err(e) => Err(e),
        }
    }
}

impl fmt::Display for ModeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.preset_name() {
            Some(n) => f.write_str(n),
            None => {
                let bits: String =
                    self.flags().iter().map(|&b| if b { '8' } else { 'f' }).collect();
                write!(f, "custom[{bits}]")
            }
        }
    }
}

pub fn mode_from_name(name: &str) -> Result<ModeConfig> {
    match name.to_ascii_uppercase().as_str() {
        "FP32" => Ok(ModeConfig::FP32),
        "M1" => Ok(ModeConfig::M1),
        "M2" => Ok(ModeConfig::M2),
        "M3" => Ok(ModeConfig::M3),
        _ => Err(Error::UnknownMode(name.to_string())),
    }
}

impl FromStr for ModeConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        mode_from_name(s)
    }
}

/// Storage of one activation tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActPrecision {
    Fp,
    /// Per-token symmetric int8.
    Twq,
    /// Per-feature symmetric int8.
    Fwq,
    /// Per-tensor symmetric int8.
    Sq,
    /// Unsigned 8-bit, zero point 0.
    AsymU8,
}

impl ActPrecision {
    pub fn is_quantized(self) -> bool {
        self != ActPrecision::Fp
    }
}

/// Storage of every activation of one layer.
///
/// An LN output is quantized exactly when the GeMM consuming it is INT8; the
/// same consumer-driven rule decides every other intermediate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dataflow {
    pub x_in: ActPrecision,
    pub qkv: ActPrecision,
    pub scores: ActPrecision,
    pub probs: ActPrecision,
    pub x_attn: ActPrecision,
    pub x_o: ActPrecision,
    pub x_mid: ActPrecision,
    pub x_1: ActPrecision,
    pub a: ActPrecision,
    pub x_2: ActPrecision,
    pub x_out: ActPrecision,
}

fn pick(int8: SlotPrecision, q: ActPrecision) -> ActPrecision {
    if int8.is_int8() {
        q
    } else {
        ActPrecision::Fp
    }
}

impl Dataflow {
    pub fn for_layer(mode: &ModeConfig, is_last: bool) -> Self {
        use ActPrecision::*;
        Self {
            x_in: pick(mode.qkv_gemm, Twq),
            qkv: pick(mode.attn, Sq),
            scores: Fp,
            probs: pick(mode.attn, AsymU8),
            x_attn: pick(mode.attn_output, Fwq),
            x_o: pick(mode.attn_output, Fwq),
            x_mid: pick(mode.fc1, Twq),
            x_1: Fp,
            a: pick(mode.fc2, Fwq),
            x_2: pick(mode.fc2, Fwq),
            x_out: if is_last { Fp } else { pick(mode.qkv_gemm, Twq) },
        }
    }

    /// Storage of the embedding LN output (the first layer's input).
    pub fn embedding_output(mode: &ModeConfig) -> ActPrecision {
        pick(mode.qkv_gemm, ActPrecision::Twq)
    }

    /// Storage of the token-embedding table.
    pub fn token_table(mode: &ModeConfig) -> ActPrecision {
        pick(mode.embedding, ActPrecision::Twq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_mode_table() {
        assert_eq!(mode_from_name("M1").unwrap().flags(), [true, true, false, false, true, false]);
        assert_eq!(mode_from_name("m2").unwrap().flags(), [true, true, true, true, true, false]);
        assert_eq!(mode_from_name("M3").unwrap().flags(), [true; 6]);
        assert_eq!(mode_from_name("fp32").unwrap().flags(), [false; 6]);
        assert!(matches!(mode_from_name("M4"), Err(Error::UnknownMode(_))));
    }

    #[test]
    fn json_form() {
        let json = r#"{"embedding": "int8", "qkv_gemm": "int8", "attn": "fp",
                       "attn_output": "fp", "fc1": "int8", "fc2": "fp"}"#;
        let m: ModeConfig = serde_json::from_str(json).unwrap();
        assert_eq!(m, ModeConfig::M1);
        let back: ModeConfig = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<ModeConfig>(r#"{"embedding": "int4"}"#).is_err());
    }

    #[test]
    fn display_names() {
        assert_eq!(ModeConfig::M2.to_string(), "M2");
        assert_eq!(ModeConfig::FP32.with_flag(5, true).to_string(), "custom[fffff8]");
    }

    #[test]
    fn required_sites() {
        assert!(ModeConfig::M1.required_symbols().is_empty());
        assert_eq!(ModeConfig::M2.required_symbols().len(), 6);
        assert_eq!(ModeConfig::M3.required_symbols().len(), 8);
    }

    #[test]
    fn dataflow_is_consumer_driven() {
        let m1 = Dataflow::for_layer(&ModeConfig::M1, false);
        assert_eq!(m1.x_in, ActPrecision::Twq);
        assert_eq!(m1.qkv, ActPrecision::Fp);
        assert_eq!(m1.x_mid, ActPrecision::Twq);
        assert_eq!(m1.a, ActPrecision::Fp);
        assert_eq!(m1.x_out, ActPrecision::Twq);
        let last = Dataflow::for_layer(&ModeConfig::M3, true);
        assert_eq!(last.x_out, ActPrecision::Fp);
        assert_eq!(last.probs, ActPrecision::AsymU8);
    }
}
