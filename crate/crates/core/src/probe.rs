//! Execution hooks.
//!
//! The forward pass reports every GeMM it launches and, on FP paths, every
//! activation that sits at a quantization site. Calibration observers and the
//! operator census are both [`Probe`]s.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::calibration::Symbol;
use crate::tensor::Tensor;

/// The GeMM slots of a layer, in Table order minus the embedding (which has no GeMM).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    Qkv,
    Attn,
    AttnOutput,
    Fc1,
    Fc2,
}

impl Slot {
    pub const ALL: [Slot; 5] = [Slot::Qkv, Slot::Attn, Slot::AttnOutput, Slot::Fc1, Slot::Fc2];
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Slot::Qkv => "qkv_gemm",
            Slot::Attn => "attn",
            Slot::AttnOutput => "attn_output",
            Slot::Fc1 => "fc1",
            Slot::Fc2 => "fc2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GemmPrecision {
    Int8,
    Fp,
}

pub trait Probe: Sync {
    fn on_gemm(&self, _layer: usize, _slot: Slot, _precision: GemmPrecision) {}

    /// An FP activation at a calibration site.
    fn on_site(&self, _layer: usize, _symbol: Symbol, _x: &Tensor<f32>) {}

    /// Whether [`Probe::on_slot_output`] should be fed; dequantizing slot
    /// outputs costs a copy, so it is opt-in.
    fn wants_slot_outputs(&self) -> bool {
        false
    }

    /// Output of a slot's operator, dequantized to FP.
    fn on_slot_output(&self, _layer: usize, _slot: Slot, _x: &Tensor<f32>) {}
}

pub struct NoProbe;

impl Probe for NoProbe {}

/// Counts GeMM launches per `(layer, slot, precision)`.
#[derive(Default)]
pub struct Census {
    counts: Mutex<BTreeMap<(usize, Slot, GemmPrecision), u64>>,
}

impl Census {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counts(&self) -> BTreeMap<(usize, Slot, GemmPrecision), u64> {
        self.counts.lock().unwrap().clone()
    }

    pub fn total(&self, precision: GemmPrecision) -> u64 {
        self.counts.lock().unwrap().iter().filter(|(k, _)| k.2 == precision).map(|(_, v)| v).sum()
    }

    /// Precisions seen for one slot of one layer.
    pub fn precisions(&self, layer: usize, slot: Slot) -> Vec<GemmPrecision> {
        self.counts
            .lock()
            .unwrap()
            .keys()
            .filter(|k| k.0 == layer && k.1 == slot)
            .map(|k| k.2)
            .collect()
    }
}

impl Probe for Census {
    fn on_gemm(&self, layer: usize, slot: Slot, precision: GemmPrecision) {
        *self.counts.lock().unwrap().entry((layer, slot, precision)).or_default() += 1;
    }
}

pub type SlotOutputs = BTreeMap<(usize, Slot), Vec<Tensor<f32>>>;

/// Records every slot output, keyed by `(layer, slot)`.
#[derive(Default)]
pub struct SlotRecorder {
    outputs: Mutex<SlotOutputs>,
}

impl SlotRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn outputs(&self) -> SlotOutputs {
        self.outputs.lock().unwrap().clone()
    }
}

impl Probe for SlotRecorder {
    fn wants_slot_outputs(&self) -> bool {
        true
    }

    fn on_slot_output(&self, layer: usize, slot: Slot, x: &Tensor<f32>) {
        self.outputs.lock().unwrap().entry((layer, slot)).or_default().push(x.clone());
    }
}
