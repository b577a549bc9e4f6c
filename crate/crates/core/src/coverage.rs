//! Neuron-coverage criteria over activation traces.
//!
//! Five cumulative criteria are tracked:
//!
//! * **NC** (neuron coverage): a neuron counts as covered when its
//!   activation, min-max rescaled *within its layer for the current
//!   trace*, strictly exceeds a threshold.
//! * **KMNC** (k-multisection): the profiled `[low, high]` range of each
//!   neuron is divided into `k` equal sections; a trace covers the section
//!   its activation falls into. Activations outside the profiled range
//!   cover nothing.
//! * **NBC** (neuron boundary): activations strictly below the profiled
//!   low or strictly above the profiled high cover the corresponding
//!   corner; the denominator counts both corners per neuron.
//! * **SNAC** (strong activation): the upper-corner half of NBC.
//! * **TKNC** (top-k): the `k` highest-activation neurons of each layer
//!   are covered, ties resolving to the lower neuron index.
//!
//! All five are monotone (covered units never become uncovered) and range
//! over `[0, 1]`, and the final covered set is independent of the order in
//! which traces arrive.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::forward::{forward_trace, ActivationTrace};
use crate::manifest::{read_json, write_json};
use crate::model::Model;

/// Coverage hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverageConfig {
    /// NC threshold on the per-trace rescaled activation, in `[0, 1)`.
    pub nc_threshold: f64,
    /// Number of KMNC sections per neuron.
    pub kmnc_sections: usize,
    /// TKNC layer top-k.
    pub tknc_k: usize,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig { nc_threshold: 0.75, kmnc_sections: 1000, tknc_k: 10 }
    }
}

impl CoverageConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.nc_threshold.is_finite() || !(0.0..1.0).contains(&self.nc_threshold) {
            return Err(Error::InvalidArgument(format!(
                "nc_threshold {} must be in [0, 1)",
                self.nc_threshold
            )));
        }
        if self.kmnc_sections == 0 {
            return Err(Error::InvalidArgument("kmnc_sections must be positive".into()));
        }
        if self.tknc_k == 0 {
            return Err(Error::InvalidArgument("tknc_k must be positive".into()));
        }
        Ok(())
    }
}

/// Profiled activation range of one neuron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub low: f32,
    pub high: f32,
}

/// Per-neuron activation ranges observed on a profiling dataset. Layers are
/// indexed in trace order (dense/conv layers, in model order).
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronProfile {
    pub layers: Vec<Vec<Range>>,
}

/// Flat JSON row of the on-disk profile format.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileRow {
    layer: usize,
    neuron: usize,
    low: f32,
    high: f32,
}

impl NeuronProfile {
    pub fn neuron_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.len()).collect()
    }

    pub fn total_neurons(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    /// Serializes as a flat JSON list of `{layer, neuron, low, high}` rows,
    /// sorted by `(layer, neuron)`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut rows = Vec::with_capacity(self.total_neurons());
        for (layer, ranges) in self.layers.iter().enumerate() {
            for (neuron, r) in ranges.iter().enumerate() {
                rows.push(ProfileRow { layer, neuron, low: r.low, high: r.high });
            }
        }
        write_json(path, &rows)
    }

    /// Loads the flat row format; rows may arrive in any order but must
    /// tile every `(layer, neuron)` cell exactly once.
    pub fn load(path: &Path) -> Result<NeuronProfile> {
        let rows: Vec<ProfileRow> = read_json(path)?;
        if rows.is_empty() {
            return Err(Error::format(path, "profile has no rows".to_string()));
        }
        let layer_count = rows.iter().map(|r| r.layer).max().unwrap() + 1;
        let mut sizes = vec![0usize; layer_count];
        for r in &rows {
            sizes[r.layer] = sizes[r.layer].max(r.neuron + 1);
        }
        let mut layers: Vec<Vec<Option<Range>>> =
            sizes.iter().map(|&n| vec![None; n]).collect();
        for r in &rows {
            if !r.low.is_finite() || !r.high.is_finite() || r.low > r.high {
                return Err(Error::format(
                    path,
                    format!("invalid range [{}, {}] at layer {} neuron {}", r.low, r.high, r.layer, r.neuron),
                ));
            }
            let cell = &mut layers[r.layer][r.neuron];
            if cell.is_some() {
                return Err(Error::format(
                    path,
                    format!("duplicate row for layer {} neuron {}", r.layer, r.neuron),
                ));
            }
            *cell = Some(Range { low: r.low, high: r.high });
        }
        let mut out = Vec::with_capacity(layer_count);
        for (li, layer) in layers.into_iter().enumerate() {
            let mut ranges = Vec::with_capacity(layer.len());
            for (ni, cell) in layer.into_iter().enumerate() {
                ranges.push(cell.ok_or_else(|| {
                    Error::format(path, format!("missing row for layer {li} neuron {ni}"))
                })?);
            }
            if ranges.is_empty() {
                return Err(Error::format(path, format!("layer {li} has no neurons")));
            }
            out.push(ranges);
        }
        Ok(NeuronProfile { layers: out })
    }
}

/// Records per-neuron `[min, max]` activations of `model` over `data`.
pub fn profile(model: &Model, data: &LabeledDataset) -> Result<NeuronProfile> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("profiling dataset is empty".into()));
    }
    let mut layers: Option<Vec<Vec<Range>>> = None;
    for input in &data.inputs {
        let (_, trace) = forward_trace(model, input)?;
        match &mut layers {
            None => {
                layers = Some(
                    trace
                        .layers
                        .iter()
                        .map(|l| l.values.iter().map(|&v| Range { low: v, high: v }).collect())
                        .collect(),
                );
            }
            Some(layers) => {
                for (ranges, tl) in layers.iter_mut().zip(&trace.layers) {
                    for (r, &v) in ranges.iter_mut().zip(&tl.values) {
                        r.low = r.low.min(v);
                        r.high = r.high.max(v);
                    }
                }
            }
        }
    }
    Ok(NeuronProfile { layers: layers.expect("non-empty dataset") })
}

/// The five coverage criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Nc,
    Kmnc,
    Nbc,
    Snac,
    Tknc,
}

impl Criterion {
    pub const ALL: [Criterion; 5] =
        [Criterion::Nc, Criterion::Kmnc, Criterion::Nbc, Criterion::Snac, Criterion::Tknc];

    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Nc => "nc",
            Criterion::Kmnc => "kmnc",
            Criterion::Nbc => "nbc",
            Criterion::Snac => "snac",
            Criterion::Tknc => "tknc",
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nc" => Ok(Criterion::Nc),
            "kmnc" => Ok(Criterion::Kmnc),
            "nbc" => Ok(Criterion::Nbc),
            "snac" => Ok(Criterion::Snac),
            "tknc" => Ok(Criterion::Tknc),
            other => Err(Error::InvalidArgument(format!(
                "unknown coverage criterion '{other}' (expected nc|kmnc|nbc|snac|tknc)"
            ))),
        }
    }
}

/// Newly covered units per criterion after one trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CoverageGain {
    pub nc: usize,
    pub kmnc: usize,
    pub nbc: usize,
    pub snac: usize,
    pub tknc: usize,
    /// True when the campaign's objective criterion gained at least one unit.
    pub objective_gained: bool,
}

impl CoverageGain {
    pub fn of(&self, c: Criterion) -> usize {
        match c {
            Criterion::Nc => self.nc,
            Criterion::Kmnc => self.kmnc,
            Criterion::Nbc => self.nbc,
            Criterion::Snac => self.snac,
            Criterion::Tknc => self.tknc,
        }
    }
}

/// Coverage ratios in `[0, 1]`, one per criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageValues {
    pub nc: f64,
    pub kmnc: f64,
    pub nbc: f64,
    pub snac: f64,
    pub tknc: f64,
}

impl CoverageValues {
    pub fn of(&self, c: Criterion) -> f64 {
        match c {
            Criterion::Nc => self.nc,
            Criterion::Kmnc => self.kmnc,
            Criterion::Nbc => self.nbc,
            Criterion::Snac => self.snac,
            Criterion::Tknc => self.tknc,
        }
    }
}

/// Fixed-size bitset with a running popcount.
#[derive(Debug, Clone, PartialEq, Eq)]
struct BitGrid {
    words: Vec<u64>,
    len: usize,
    set_count: usize,
}

impl BitGrid {
    fn new(len: usize) -> Self {
        BitGrid { words: vec![0; len.div_ceil(64)], len, set_count: 0 }
    }

    /// Sets bit `i`; returns true when it was previously clear.
    fn set(&mut self, i: usize) -> bool {
        debug_assert!(i < self.len);
        let (w, b) = (i / 64, i % 64);
        let mask = 1u64 << b;
        if self.words[w] & mask == 0 {
            self.words[w] |= mask;
            self.set_count += 1;
            true
        } else {
            false
        }
    }

    fn count(&self) -> usize {
        self.set_count
    }
}

/// Cumulative coverage over all traces seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageState {
    config: CoverageConfig,
    ranges: Vec<Vec<Range>>,
    layer_sizes: Vec<usize>,
    /// Global-neuron-index offset of each layer.
    offsets: Vec<usize>,
    total_neurons: usize,
    nc: BitGrid,
    kmnc: BitGrid,
    nbc_low: BitGrid,
    nbc_high: BitGrid,
    snac: BitGrid,
    tknc: BitGrid,
}

impl CoverageState {
    /// Builds an empty state sized from a profile.
    pub fn new(profile: &NeuronProfile, config: CoverageConfig) -> Result<Self> {
        config.validate()?;
        if profile.layers.is_empty() || profile.layers.iter().any(|l| l.is_empty()) {
            return Err(Error::InvalidArgument("profile has an empty layer".into()));
        }
        let layer_sizes = profile.neuron_counts();
        let mut offsets = Vec::with_capacity(layer_sizes.len());
        let mut acc = 0;
        for &n in &layer_sizes {
            offsets.push(acc);
            acc += n;
        }
        let total = acc;
        Ok(CoverageState {
            config,
            ranges: profile.layers.clone(),
            layer_sizes,
            offsets,
            total_neurons: total,
            nc: BitGrid::new(total),
            kmnc: BitGrid::new(total * config.kmnc_sections),
            nbc_low: BitGrid::new(total),
            nbc_high: BitGrid::new(total),
            snac: BitGrid::new(total),
            tknc: BitGrid::new(total),
        })
    }

    pub fn config(&self) -> &CoverageConfig {
        &self.config
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    fn check_trace(&self, trace: &ActivationTrace) -> Result<()> {
        let counts = trace.neuron_counts();
        if counts != self.layer_sizes {
            return Err(Error::Shape(format!(
                "trace has layer sizes {counts:?}, profile has {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    /// NC: per-layer min-max rescale of the current trace; covered when the
    /// rescaled activation strictly exceeds the threshold. A constant layer
    /// covers nothing. Returns newly covered neurons.
    pub fn nc_update(&mut self, trace: &ActivationTrace) -> Result<usize> {
        self.check_trace(trace)?;
        let t = self.config.nc_threshold;
        let mut gained = 0;
        for (li, layer) in trace.layers.iter().enumerate() {
            let min = layer.values.iter().cloned().fold(f32::INFINITY, f32::min);
            let max = layer.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            if max == min {
                continue;
            }
            let span = (max - min) as f64;
            for (ni, &v) in layer.values.iter().enumerate() {
                let scaled = ((v - min) as f64) / span;
                if scaled > t && self.nc.set(self.offsets[li] + ni) {
                    gained += 1;
                }
            }
        }
        Ok(gained)
    }

    /// KMNC: covers the section of the profiled range the activation falls
    /// into; out-of-range activations cover nothing. A zero-width profiled
    /// range consists of section 0 alone, covered exactly at its value.
    pub fn kmnc_update(&mut self, trace: &ActivationTrace) -> Result<usize> {
        self.check_trace(trace)?;
        let k = self.config.kmnc_sections;
        let mut gained = 0;
        for (li, layer) in trace.layers.iter().enumerate() {
            for (ni, &v) in layer.values.iter().enumerate() {
                let r = self.ranges[li][ni];
                let section = if r.low == r.high {
                    if v == r.low {
                        Some(0)
                    } else {
                        None
                    }
                } else if v >= r.low && v <= r.high {
                    let frac = ((v - r.low) as f64) / ((r.high - r.low) as f64);
                    Some(((frac * k as f64).floor() as usize).min(k - 1))
                } else {
                    None
                };
                if let Some(s) = section {
                    if self.kmnc.set((self.offsets[li] + ni) * k + s) {
                        gained += 1;
                    }
                }
            }
        }
        Ok(gained)
    }

    /// NBC: strict excursions below the profiled low / above the profiled
    /// high cover the lower / upper corner of a neuron.
    pub fn nbc_update(&mut self, trace: &ActivationTrace) -> Result<usize> {
        self.check_trace(trace)?;
        let mut gained = 0;
        for (li, layer) in trace.layers.iter().enumerate() {
            for (ni, &v) in layer.values.iter().enumerate() {
                let r = self.ranges[li][ni];
                let g = self.offsets[li] + ni;
                if v < r.low && self.nbc_low.set(g) {
                    gained += 1;
                }
                if v > r.high && self.nbc_high.set(g) {
                    gained += 1;
                }
            }
        }
        Ok(gained)
    }

    /// SNAC: the upper-corner half of NBC.
    pub fn snac_update(&mut self, trace: &ActivationTrace) -> Result<usize> {
        self.check_trace(trace)?;
        let mut gained = 0;
        for (li, layer) in trace.layers.iter().enumerate() {
            for (ni, &v) in layer.values.iter().enumerate() {
                if v > self.ranges[li][ni].high && self.snac.set(self.offsets[li] + ni) {
                    gained += 1;
                }
            }
        }
        Ok(gained)
    }

    /// TKNC: covers each layer's top-k neurons by activation, ties
    /// resolving to the lower index.
    pub fn tknc_update(&mut self, trace: &ActivationTrace) -> Result<usize> {
        self.check_trace(trace)?;
        let k = self.config.tknc_k;
        let mut gained = 0;
        for (li, layer) in trace.layers.iter().enumerate() {
            let mut order: Vec<usize> = (0..layer.values.len()).collect();
            order.sort_by(|&a, &b| {
                layer.values[b]
                    .total_cmp(&layer.values[a])
                    .then_with(|| a.cmp(&b))
            });
            for &ni in order.iter().take(k) {
                if self.tknc.set(self.offsets[li] + ni) {
                    gained += 1;
                }
            }
        }
        Ok(gained)
    }

    /// Applies all five criteria to one trace; `objective_gained` reflects
    /// the given campaign objective.
    pub fn update_all(&mut self, trace: &ActivationTrace, objective: Criterion) -> Result<CoverageGain> {
        let mut gain = CoverageGain {
            nc: self.nc_update(trace)?,
            kmnc: self.kmnc_update(trace)?,
            nbc: self.nbc_update(trace)?,
            snac: self.snac_update(trace)?,
            tknc: self.tknc_update(trace)?,
            objective_gained: false,
        };
        gain.objective_gained = gain.of(objective) > 0;
        Ok(gain)
    }

    /// Covered units for one criterion.
    pub fn covered(&self, c: Criterion) -> usize {
        match c {
            Criterion::Nc => self.nc.count(),
            Criterion::Kmnc => self.kmnc.count(),
            Criterion::Nbc => self.nbc_low.count() + self.nbc_high.count(),
            Criterion::Snac => self.snac.count(),
            Criterion::Tknc => self.tknc.count(),
        }
    }

    /// Denominator for one criterion.
    pub fn total_units(&self, c: Criterion) -> usize {
        match c {
            Criterion::Nc | Criterion::Snac | Criterion::Tknc => self.total_neurons,
            Criterion::Kmnc => self.total_neurons * self.config.kmnc_sections,
            Criterion::Nbc => 2 * self.total_neurons,
        }
    }

    /// Coverage ratio for one criterion.
    pub fn value(&self, c: Criterion) -> f64 {
        self.covered(c) as f64 / self.total_units(c) as f64
    }

    /// All five ratios.
    pub fn values(&self) -> CoverageValues {
        CoverageValues {
            nc: self.value(Criterion::Nc),
            kmnc: self.value(Criterion::Kmnc),
            nbc: self.value(Criterion::Nbc),
            snac: self.value(Criterion::Snac),
            tknc: self.value(Criterion::Tknc),
        }
    }
}
