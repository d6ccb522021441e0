//! Activation range calibration.
//!
//! FP32 forward passes feed running abs-max observers at each quantization
//! site; [`finalize`] resolves them into the pre-determined scales the
//! quantized layers fold into their weights.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mode::ModeConfig;
use crate::probe::Probe;
use crate::quant::{compute_scale, QMAX_I8, QMAX_U8};
use crate::tensor::Tensor;

/// Calibrated scale symbols of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Symbol {
    Q,
    K,
    V,
    P,
    Attn,
    O,
    A,
    X2,
}

impl Symbol {
    pub const ALL: [Symbol; 8] =
        [Symbol::Q, Symbol::K, Symbol::V, Symbol::P, Symbol::Attn, Symbol::O, Symbol::A, Symbol::X2];

    pub fn as_str(self) -> &'static str {
        match self {
            Symbol::Q => "S_q",
            Symbol::K => "S_k",
            Symbol::V => "S_v",
            Symbol::P => "S_p",
            Symbol::Attn => "S_attn",
            Symbol::O => "S_o",
            Symbol::A => "S_a",
            Symbol::X2 => "S_x2",
        }
    }

    /// Single-scalar (static) sites; the rest are per-feature.
    pub fn is_scalar(self) -> bool {
        matches!(self, Symbol::Q | Symbol::K | Symbol::V | Symbol::P)
    }

    fn qmax(self) -> i32 {
        if self == Symbol::P {
            QMAX_U8
        } else {
            QMAX_I8
        }
    }
}

impl FromStr for Symbol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Symbol::ALL
            .into_iter()
            .find(|sym| sym.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown site symbol `{s}`")))
    }
}

/// `layer<k>.<symbol>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId {
    pub layer: usize,
    pub symbol: Symbol,
}

impl SiteId {
    pub fn new(layer: usize, symbol: Symbol) -> Self {
        Self { layer, symbol }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.symbol.as_str())
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::input(format!("malformed site id `{s}`"));
        let (layer, sym) = s.split_once('.').ok_or_else(bad)?;
        let layer = layer.strip_prefix("layer").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        Ok(Self { layer, symbol: sym.parse()? })
    }
}

/// Running abs-max, scalar or one per feature.
#[derive(Clone, Debug, PartialEq)]
pub enum Amax {
    Scalar(f32),
    PerFeature(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObserverState {
    pub site: SiteId,
    pub amax: Amax,
    pub observations: u64,
}

impl ObserverState {
    pub fn scalar(site: SiteId) -> Self {
        Self { site, amax: Amax::Scalar(0.0), observations: 0 }
    }

    pub fn per_feature(site: SiteId, d: usize) -> Self {
        Self { site, amax: Amax::PerFeature(vec![0.0; d]), observations: 0 }
    }

    pub fn observe(&mut self, x: &Tensor<f32>) -> Result<()> {
        if !x.all_finite() {
            return Err(Error::input(format!("non-finite activation at {}", self.site)));
        }
        match &mut self.amax {
            Amax::Scalar(m) => *m = m.max(x.max_abs()),
            Amax::PerFeature(v) => {
                if x.cols() != v.len() {
                    return Err(Error::shape(format!(
                        "{} observes {} features, got {}",
                        self.site,
                        v.len(),
                        x.cols()
                    )));
                }
                for row in x.data().chunks(v.len()) {
                    for (m, &a) in v.iter_mut().zip(row) {
                        *m = m.max(a.abs());
                    }
                }
            }
        }
        self.observations += 1;
        Ok(())
    }

    /// Elementwise max of two states for the same site.
    pub fn merge(&mut self, other: &ObserverState) -> Result<()> {
        if self.site != other.site {
            return Err(Error::input(format!("cannot merge {} into {}", other.site, self.site)));
        }
        match (&mut self.amax, &other.amax) {
            (Amax::Scalar(a), Amax::Scalar(b)) => *a = a.max(*b),
            (Amax::PerFeature(a), Amax::PerFeature(b)) if a.len() == b.len() => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x = x.max(*y);
                }
            }
            _ => return Err(Error::shape(format!("observer kinds differ at {}", self.site))),
        }
        self.observations += other.observations;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SiteScale {
    Scalar(f32),
    Vector(Vec<f32>),
}

impl SiteScale {
    pub fn scalar(&self) -> Option<f32> {
        match self {
            SiteScale::Scalar(s) => Some(*s),
            SiteScale::Vector(_) => None,
        }
    }

    pub fn vector(&self) -> Option<&[f32]> {
        match self {
            SiteScale::Vector(v) => Some(v),
            SiteScale::Scalar(_) => None,
        }
    }

    fn all_positive(&self) -> bool {
        let ok = |s: &f32| *s > 0.0 && s.is_finite();
        match self {
            SiteScale::Scalar(s) => ok(s),
            SiteScale::Vector(v) => v.iter().all(ok),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibMeta {
    pub batches: usize,
    pub batch_size: usize,
    pub seq_len: usize,
}

/// Resolved scales keyed by site id string.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub meta: CalibMeta,
    pub sites: BTreeMap<String, SiteScale>,
}

impl CalibrationTable {
    pub fn get(&self, layer: usize, symbol: Symbol) -> Option<&SiteScale> {
        self.sites.get(&SiteId::new(layer, symbol).to_string())
    }

    pub fn insert(&mut self, layer: usize, symbol: Symbol, scale: SiteScale) {
        self.sites.insert(SiteId::new(layer, symbol).to_string(), scale);
    }

    pub fn scalar(&self, layer: usize, symbol: Symbol) -> Result<f32> {
        self.get(layer, symbol)
            .and_then(SiteScale::scalar)
            .ok_or_else(|| Error::MissingSites(vec![SiteId::new(layer, symbol).to_string()]))
    }

    pub fn vector(&self, layer: usize, symbol: Symbol, len: usize) -> Result<Vec<f32>> {
        let v = self
            .get(layer, symbol)
            .and_then(SiteScale::vector)
            .ok_or_else(|| Error::MissingSites(vec![SiteId::new(layer, symbol).to_string()]))?;
        if v.len() != len {
            return Err(Error::shape(format!(
                "{} has {} scales, expected {len}",
                SiteId::new(layer, symbol),
                v.len()
            )));
        }
        Ok(v.to_vec())
    }

    /// Checks every site the mode needs is present and positive.
    pub fn check_coverage(&self, mode: &ModeConfig, n_layers: usize) -> Result<()> {
        let mut missing = Vec::new();
        for layer in 0..n_layers {
            for symbol in mode.required_symbols() {
                match self.get(layer, symbol) {
                    Some(s) if s.all_positive() && s.scalar().is_some() == symbol.is_scalar() => {}
                    _ => missing.push(SiteId::new(layer, symbol).to_string()),
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingSites(missing))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(s)?;
        for (id, scale) in &table.sites {
            if id != "emb.S_emb_hint" {
                id.parse::<SiteId>()?;
            }
            if !scale.all_positive() {
                return Err(Error::input(format!("non-positive scale at {id}")));
            }
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Resolves observer states into scales. Every non-P site of every layer in
/// `0..n_layers` must have been observed; P falls back to an amax of 1.0.
pub fn finalize(states: &[ObserverState], n_layers: usize, meta: CalibMeta) -> Result<CalibrationTable> {
    let mut table = CalibrationTable { meta, sites: BTreeMap::new() };
    let seen: BTreeSet<SiteId> =
        states.iter().filter(|s| s.observations > 0).map(|s| s.site).collect();
    let mut missing = Vec::new();
    for layer in 0..n_layers {
        for symbol in Symbol::ALL {
            let site = SiteId::new(layer, symbol);
            if !seen.contains(&site) && symbol != Symbol::P {
                missing.push(site.to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingSites(missing));
    }
    for layer in 0..n_layers {
        table.insert(layer, Symbol::P, SiteScale::Scalar(compute_scale(1.0, QMAX_U8)));
    }
    for state in states.iter().filter(|s| s.observations > 0) {
        let symbol = state.site.symbol;
        let q = symbol.qmax();
        let scale = match &state.amax {
            // Softmax output is bounded by 1; an all-zero record keeps that range.
            Amax::Scalar(a) if symbol == Symbol::P && *a == 0.0 => {
                SiteScale::Scalar(compute_scale(1.0, q))
            }
            Amax::Scalar(a) => SiteScale::Scalar(compute_scale(*a, q)),
            Amax::PerFeature(v) => SiteScale::Vector(v.iter().map(|&a| compute_scale(a, q)).collect()),
        };
        table.sites.insert(state.site.to_string(), scale);
    }
    Ok(table)
}

/// Observer set for a whole model, usable as a [`Probe`] during FP32 forward
/// passes. Observations may arrive from several threads; abs-max is order
/// independent, so the result does not depend on interleaving.
pub struct Calibrator {
    n_layers: usize,
    states: Mutex<BTreeMap<SiteId, ObserverState>>,
    error: Mutex<Option<String>>,
}

impl Calibrator {
    /// `d_model` and `d_ff` size the per-feature observers.
    pub fn new(n_layers: usize, d_model: usize, d_ff: usize) -> Self {
        let mut states = BTreeMap::new();
        for layer in 0..n_layers {
            for symbol in Symbol::ALL {
                let site = SiteId::new(layer, symbol);
                let state = match symbol {
                    s if s.is_scalar() => ObserverState::scalar(site),
                    Symbol::A => ObserverState::per_feature(site, d_ff),
                    _ => ObserverState::per_feature(site, d_model),
                };
                states.insert(site, state);
            }
        }
        Self { n_layers, states: Mutex::new(states), error: Mutex::new(None) }
    }

    pub fn states(&self) -> Vec<ObserverState> {
        self.states.lock().unwrap().values().cloned().collect()
    }

    pub fn merge(&self, other: &Calibrator) -> Result<()> {
        let mut mine = self.states.lock().unwrap();
        for state in other.states() {
            match mine.get_mut(&state.site) {
                Some(s) => s.merge(&state)?,
                None => {
                    mine.insert(state.site, state);
                }
            }
        }
        Ok(())
    }

    pub fn finalize(&self, meta: CalibMeta) -> Result<CalibrationTable> {
        if let Some(e) = self.error.lock().unwrap().clone() {
            return Err(Error::Input(e));
        }
        finalize(&self.states(), self.n_layers, meta)
    }
}

impl Probe for Calibrator {
    fn on_site(&self, layer: usize, symbol: Symbol, x: &Tensor<f32>) {
        let mut states = self.states.lock().unwrap();
        let Some(state) = states.get_mut(&SiteId::new(layer, symbol)) else {
            return;
        };
        if let Err(e) = state.observe(x) {
            self.error.lock().unwrap().get_or_insert(e.to_string());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f32>]) -> Tensor<f32> {
        Tensor::from_rows(rows).unwrap()
    }

    fn site(s: Symbol) -> SiteId {
        SiteId::new(0, s)
    }

    #[test]
    fn observe_examples() {
        let mut s = ObserverState::scalar(site(Symbol::Q));
        s.observe(&t(&[vec![1.0, -0.5]])).unwrap();
        s.observe(&t(&[vec![-3.0, 2.0]])).unwrap();
        assert_eq!(s.amax, Amax::Scalar(3.0));
        s.observe(&t(&[vec![0.0, 0.0]])).unwrap();
        assert_eq!(s.amax, Amax::Scalar(3.0));

        let mut f = ObserverState::per_feature(site(Symbol::Attn), 2);
        f.observe(&t(&[vec![1.0, -5.0], vec![2.0, 3.0]])).unwrap();
        assert_eq!(f.amax, Amax::PerFeature(vec![2.0, 5.0]));
    }

    #[test]
    fn observe_errors() {
        let mut f = ObserverState::per_feature(site(Symbol::O), 3);
        assert!(matches!(f.observe(&t(&[vec![1.0, 2.0]])), Err(Error::Shape(_))));
        let mut s = ObserverState::scalar(site(Symbol::K));
        assert!(s.observe(&t(&[vec![f32::INFINITY]])).is_err());
    }

    fn full_states(layers: usize) -> Vec<ObserverState> {
        let mut out = Vec::new();
        for layer in 0..layers {
            for symbol in Symbol::ALL {
                let id = SiteId::new(layer, symbol);
                let mut st = if symbol.is_scalar() {
                    ObserverState::scalar(id)
                } else {
                    ObserverState::per_feature(id, 2)
                };
                if symbol != Symbol::P {
                    st.observe(&t(&[vec![1.27, -2.54]])).unwrap();
                }
                out.push(st);
            }
        }
        out
    }

    #[test]
    fn finalize_examples() {
        let mut states = full_states(1);
        let q = states.iter_mut().find(|s| s.site.symbol == Symbol::Q).unwrap();
        *q = ObserverState::scalar(site(Symbol::Q));
        q.observe(&t(&[vec![12.7]])).unwrap();

        let table = finalize(&states, 1, CalibMeta::default()).unwrap();
        assert_eq!(table.scalar(0, Symbol::Q).unwrap(), 12.7f32 / 127.0);
        assert!((table.scalar(0, Symbol::Q).unwrap() - 0.1).abs() < 1e-7);
        assert_eq!(table.scalar(0, Symbol::P).unwrap(), 1.0 / 255.0);
        let attn = table.vector(0, Symbol::Attn, 2).unwrap();
        assert!((attn[0] - 0.01).abs() < 1e-8 && (attn[1] - 0.02).abs() < 1e-8);
    }

    #[test]
    fn finalize_reports_missing_sites() {
        let states: Vec<_> =
            full_states(2).into_iter().filter(|s| s.site != SiteId::new(1, Symbol::O)).collect();
        match finalize(&states, 2, CalibMeta::default()) {
            Err(Error::MissingSites(ids)) => assert_eq!(ids, vec!["layer1.S_o".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn site_id_grammar() {
        let id: SiteId = "layer3.S_attn".parse().unwrap();
        assert_eq!(id, SiteId::new(3, Symbol::Attn));
        assert_eq!(id.to_string(), "layer3.S_attn");
        assert!("layer.S_q".parse::<SiteId>().is_err());
        assert!("layer1.S_z".parse::<SiteId>().is_err());
    }

    #[test]
    fn json_shape() {
        let table = finalize(&full_states(1), 1, CalibMeta { batches: 2, batch_size: 16, seq_len: 32 })
            .unwrap();
        let json = table.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["meta"]["batches"], 2);
        assert!(v["sites"]["layer0.S_q"].is_number());
        assert!(v["sites"]["layer0.S_attn"].is_array());
        assert_eq!(CalibrationTable::from_json(&json).unwrap(), table);
    }

    #[test]
    fn calibrator_merge_matches_single_pass() {
        let a = Calibrator::new(1, 2, 2);
        let b = Calibrator::new(1, 2, 2);
        let whole = Calibrator::new(1, 2, 2);
        let x1 = t(&[vec![1.0, -4.0]]);
        let x2 = t(&[vec![-2.0, 0.5]]);
        for sym in Symbol::ALL {
            a.on_site(0, sym, &x1);
            b.on_site(0, sym, &x2);
            whole.on_site(0, sym, &x2);
            whole.on_site(0, sym, &x1);
        }
        a.merge(&b).unwrap();
        let meta = CalibMeta::default();
        assert_eq!(a.finalize(meta).unwrap(), whole.finalize(meta).unwrap());
    }
}
