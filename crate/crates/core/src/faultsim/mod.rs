//! Monte-Carlo soft-error injection and accuracy estimation.
//!
//! Faults are transient single-bit flips: every stored/produced 8-bit value
//! (weights as read once per inference, activations as produced) has each
//! unprotected bit flip independently with probability `ber`, redrawn fresh
//! for every inference. Protection masks make the top bits of a value
//! immune: the top `IB_TH` bits of important neurons, the top `NB_TH` bits
//! of ordinary neurons and of weights (weights ride the ordinary datapath
//! protection).
//!
//! Trials are embarrassingly parallel; each trial owns a counter-based RNG
//! stream derived from `(seed, trial)`, so estimates are independent of
//! scheduling. Flip positions are drawn by geometric skip-ahead over the
//! value/bit stream, which costs O(flips) rather than O(bits); a flip that
//! lands on a protected bit is suppressed rather than redrawn, so the flip
//! stream itself is mask independent (common random numbers across masks).

use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::importance::{BitConfig, ImportanceMap};
use crate::qmodel::{argmax_i8, QuantizedModel, Scratch, ValueHook, ValueSite};
use crate::rng::{salt, trial_rng};
use crate::stats::wilson95;
use crate::Result;

/// Fault-injection configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FaultConfig {
    /// Probability that any single bit flips, per inference.
    pub ber: f64,
    pub seed: u64,
    /// Number of faulted passes over the dataset.
    pub trials: u32,
    pub inject_weights: bool,
    pub inject_activations: bool,
}

impl FaultConfig {
    pub fn new(ber: f64, seed: u64, trials: u32) -> Self {
        FaultConfig { ber, seed, trials, inject_weights: true, inject_activations: true }
    }
}

/// Which bits of each value are immune to flips.
#[derive(Debug, Clone)]
pub enum ProtectionMask {
    /// Nothing is protected.
    None,
    /// Every bit of every value is immune.
    Full,
    /// Per-neuron bit protection derived from an importance map: top
    /// `ib_th` bits for important neurons, top `nb_th` bits for ordinary
    /// neurons and weights.
    Bits { importance: ImportanceMap, config: BitConfig },
    /// Full protection of a set of layers (by layer index), everything
    /// else unprotected. Used for layer-sensitivity profiling.
    Layers { protected: Vec<usize> },
}

/// Immunity mask for the top `s` bits of an 8-bit value.
#[inline]
pub fn high_bits(s: u8) -> u8 {
    debug_assert!(s <= 8);
    if s == 0 {
        0
    } else {
        (0xFFu16 << (8 - s)) as u8
    }
}

impl ProtectionMask {
    /// Bit-immunity mask for one value site.
    #[inline]
    pub fn mask_for(&self, site: ValueSite) -> u8 {
        match self {
            ProtectionMask::None => 0,
            ProtectionMask::Full => 0xFF,
            ProtectionMask::Bits { importance, config } => match site {
                ValueSite::Weight { .. } => high_bits(config.nb_th),
                ValueSite::Activation { layer, index } => {
                    if importance.is_important(layer, index) {
                        high_bits(config.ib_th)
                    } else {
                        high_bits(config.nb_th)
                    }
                }
            },
            ProtectionMask::Layers { protected } => {
                if protected.contains(&site.layer()) {
                    0xFF
                } else {
                    0
                }
            }
        }
    }
}

/// Flip each unmasked bit of `value` independently with probability `ber`.
///
/// The masked bits never change. The RNG stream advances by exactly 8
/// draws regardless of the mask, so outcomes pair up across masks.
pub fn inject(value: i8, ber: f64, immune: u8, rng: &mut ChaCha8Rng) -> i8 {
    let threshold = ber_threshold(ber);
    let mut v = value as u8;
    for bit in 0..8 {
        let draw = rng.next_u32();
        if (draw as u64) < threshold && immune & (1 << bit) == 0 {
            v ^= 1 << bit;
        }
    }
    v as i8
}

/// Flip threshold on a u32 draw; exact at the ends.
#[inline]
fn ber_threshold(ber: f64) -> u64 {
    if ber <= 0.0 {
        0
    } else if ber >= 1.0 {
        1 << 32
    } else {
        (ber * 4_294_967_296.0).round() as u64
    }
}

/// Geometric skip-ahead flip stream over consecutive bit positions.
///
/// Equivalent to an independent Bernoulli(ber) draw per bit, but costs
/// O(flips). Positions are consumed in stream order by the forward hook.
pub struct FlipStream {
    rng: ChaCha8Rng,
    ber: f64,
    /// Next absolute bit index that flips, or u64::MAX when ber = 0.
    next_flip: u64,
    /// Current absolute bit position (8 per value visited).
    cursor: u64,
    pub flips_offered: u64,
    pub flips_applied: u64,
}

impl FlipStream {
    pub fn new(ber: f64, rng: ChaCha8Rng) -> Self {
        let mut s = FlipStream { rng, ber, next_flip: 0, cursor: 0, flips_offered: 0, flips_applied: 0 };
        s.next_flip = if ber > 0.0 { s.gap() } else { u64::MAX };
        s
    }

    /// Absolute position of the next flip: current cursor plus a
    /// geometric gap with success probability `ber`.
    fn gap(&mut self) -> u64 {
        if self.ber >= 1.0 {
            return self.cursor;
        }
        // inverse CDF: gap = floor(ln(u)/ln(1-ber)) + 1 with u in (0,1]
        let u = ((self.rng.next_u64() >> 11) as f64 + 1.0) / 9_007_199_254_740_992.0;
        let g = (u.ln() / (1.0 - self.ber).ln()).floor() as u64 + 1;
        self.cursor + g - 1
    }

    /// Fault one 8-bit value whose bits occupy the next 8 stream positions.
    #[inline]
    pub fn fault_value(&mut self, value: i8, immune: u8) -> i8 {
        let base = self.cursor;
        let end = base + 8;
        if self.next_flip >= end {
            self.cursor = end;
            return value;
        }
        let mut v = value as u8;
        while self.next_flip < end {
            let bit = (self.next_flip - base) as u8;
            self.flips_offered += 1;
            if immune & (1 << bit) == 0 {
                v ^= 1 << bit;
                self.flips_applied += 1;
            }
            self.cursor = self.next_flip + 1;
            self.next_flip = self.gap();
        }
        self.cursor = end;
        v as i8
    }
}

/// Forward hook wiring a flip stream and a protection mask into the
/// quantized model's injection points.
pub struct InjectionHook<'a> {
    pub stream: FlipStream,
    pub mask: &'a ProtectionMask,
    pub inject_weights: bool,
    pub inject_activations: bool,
}

impl ValueHook for InjectionHook<'_> {
    #[inline]
    fn mutate(&mut self, site: ValueSite, value: i8) -> i8 {
        let enabled = match site {
            ValueSite::Weight { .. } => self.inject_weights,
            ValueSite::Activation { .. } => self.inject_activations,
        };
        // disabled scopes still consume stream positions so that scopes
        // pair up under common random numbers
        let immune = if enabled { self.mask.mask_for(site) } else { 0xFF };
        self.stream.fault_value(value, immune)
    }
}

/// Accuracy estimate with a 95% Wilson interval over all
/// `trials × samples` Bernoulli outcomes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AccuracyEstimate {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub trials: u32,
    pub seed: u64,
}

impl AccuracyEstimate {
    pub fn half_width(&self) -> f64 {
        (self.ci_high - self.ci_low) / 2.0
    }

    pub fn overlaps(&self, other: &AccuracyEstimate) -> bool {
        self.ci_low <= other.ci_high && other.ci_low <= self.ci_high
    }
}

/// Outcome of one faulted trial over the dataset.
#[derive(Debug, Clone, Copy)]
pub struct TrialOutcome {
    pub trial: u32,
    pub correct: u32,
    pub flips_applied: u64,
    pub flips_offered: u64,
}

pub const FAULT_SALT: &str = "faultsim";

/// Run `cfg.trials` independent faulted passes over `data`.
pub fn run_trials(
    model: &QuantizedModel,
    data: &Dataset,
    cfg: &FaultConfig,
    mask: &ProtectionMask,
) -> Result<Vec<TrialOutcome>> {
    let inputs: Vec<Vec<i8>> = (0..data.len()).map(|i| model.quantize_input(data.image(i))).collect();
    let stream_salt = salt(FAULT_SALT);
    (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let rng = trial_rng(cfg.seed, stream_salt, trial as u64);
            let mut hook = InjectionHook {
                stream: FlipStream::new(cfg.ber, rng),
                mask,
                inject_weights: cfg.inject_weights,
                inject_activations: cfg.inject_activations,
            };
            let mut scratch = Scratch::default();
            let mut correct = 0u32;
            for (i, input) in inputs.iter().enumerate() {
                let report = model.forward(input, &mut scratch, Some(&mut hook))?;
                if argmax_i8(&report.logits) == data.label(i) {
                    correct += 1;
                }
            }
            Ok(TrialOutcome {
                trial,
                correct,
                flips_applied: hook.stream.flips_applied,
                flips_offered: hook.stream.flips_offered,
            })
        })
        .collect()
}

/// Monte-Carlo accuracy under faults. Deterministic given the seed.
pub fn evaluate_accuracy(
    model: &QuantizedModel,
    data: &Dataset,
    cfg: &FaultConfig,
    mask: &ProtectionMask,
) -> Result<AccuracyEstimate> {
    let outcomes = run_trials(model, data, cfg, mask)?;
    Ok(summarize(&outcomes, data.len(), cfg))
}

pub fn summarize(outcomes: &[TrialOutcome], samples: usize, cfg: &FaultConfig) -> AccuracyEstimate {
    let correct: u64 = outcomes.iter().map(|o| o.correct as u64).sum();
    let n = outcomes.len() as u64 * samples as u64;
    let (ci_low, ci_high) = wilson95(correct, n);
    AccuracyEstimate {
        mean: correct as f64 / n as f64,
        ci_low,
        ci_high,
        trials: cfg.trials,
        seed: cfg.seed,
    }
}

/// Per-layer sensitivity: accuracy with that single weighted layer fully
/// protected, minus the fully unprotected accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub unprotected: AccuracyEstimate,
    /// `(layer index, estimate, sensitivity)` per weighted layer, in layer
    /// order.
    pub layers: Vec<(usize, AccuracyEstimate, f64)>,
}

impl SensitivityReport {
    /// Weighted-layer indices ordered by descending sensitivity.
    pub fn ranked_layers(&self) -> Vec<usize> {
        let mut order: Vec<(usize, f64)> = self.layers.iter().map(|(l, _, s)| (*l, *s)).collect();
        order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        order.into_iter().map(|(l, _)| l).collect()
    }
}

/// Sensitivity profile over the weighted layers (Fig. 5-style experiment).
pub fn layer_sensitivity(
    model: &QuantizedModel,
    data: &Dataset,
    cfg: &FaultConfig,
) -> Result<SensitivityReport> {
    let unprotected = evaluate_accuracy(model, data, cfg, &ProtectionMask::None)?;
    let mut layers = Vec::new();
    for layer in model.graph.weighted_layers() {
        let est = evaluate_accuracy(
            model,
            data,
            cfg,
            &ProtectionMask::Layers { protected: vec![layer] },
        )?;
        layers.push((layer, est, est.mean - unprotected.mean));
    }
    Ok(SensitivityReport { unprotected, layers })
}

/// Accuracy sequence with the top-k layers of `layer_order` fully
/// protected, k = 0..=len (Fig. 6-style experiment).
pub fn protection_curve(
    model: &QuantizedModel,
    data: &Dataset,
    cfg: &FaultConfig,
    layer_order: &[usize],
) -> Result<Vec<AccuracyEstimate>> {
    let mut curve = Vec::with_capacity(layer_order.len() + 1);
    for k in 0..=layer_order.len() {
        let mask = ProtectionMask::Layers { protected: layer_order[..k].to_vec() };
        curve.push(evaluate_accuracy(model, data, cfg, &mask)?);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::trial_rng;

    #[test]
    fn inject_zero_ber_never_changes() {
        let mut rng = trial_rng(1, 2, 3);
        for v in [-128i8, -1, 0, 1, 5, 127] {
            assert_eq!(inject(v, 0.0, 0, &mut rng), v);
        }
    }

    #[test]
    fn inject_full_ber_flips_everything_unmasked() {
        let mut rng = trial_rng(1, 2, 3);
        assert_eq!(inject(0, 1.0, 0, &mut rng) as u8, 0xFF);
        assert_eq!(inject(0, 1.0, 0b1100_0000, &mut rng) as u8, 0b0011_1111);
        assert_eq!(inject(0x55u8 as i8, 1.0, 0xFF, &mut rng) as u8, 0x55);
    }

    #[test]
    fn inject_consumes_exactly_eight_draws() {
        use rand_chacha::rand_core::RngCore;
        let mut a = trial_rng(9, 9, 9);
        let mut b = trial_rng(9, 9, 9);
        inject(42, 0.3, 0b1111_0000, &mut a);
        for _ in 0..8 {
            b.next_u32();
        }
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn flip_stream_matches_bernoulli_rate() {
        // 3-sigma Poisson check on the number of applied flips
        let ber = 1e-3;
        let values = 200_000u64;
        let mut stream = FlipStream::new(ber, trial_rng(5, 6, 7));
        for _ in 0..values {
            stream.fault_value(0, 0);
        }
        let expect = ber * (values * 8) as f64;
        let sigma = expect.sqrt();
        let got = stream.flips_applied as f64;
        assert!((got - expect).abs() < 3.0 * sigma, "got {got}, expected {expect}±{sigma}");
    }

    #[test]
    fn flip_stream_respects_mask_and_is_mask_independent() {
        let ber = 0.05;
        let mut free = FlipStream::new(ber, trial_rng(1, 1, 1));
        let mut masked = FlipStream::new(ber, trial_rng(1, 1, 1));
        let mut diff_in_protected_bits = 0u32;
        for _ in 0..10_000 {
            let a = free.fault_value(0, 0) as u8;
            let b = masked.fault_value(0, 0b1110_0000) as u8;
            // protected bits never flip
            diff_in_protected_bits += (b & 0b1110_0000).count_ones();
            // unprotected bits see the identical flip pattern
            assert_eq!(a & 0b0001_1111, b & 0b0001_1111);
        }
        assert_eq!(diff_in_protected_bits, 0);
        assert_eq!(free.flips_offered, masked.flips_offered);
        assert!(masked.flips_applied < masked.flips_offered);
    }

    #[test]
    fn full_ber_stream_flips_every_bit() {
        let mut stream = FlipStream::new(1.0, trial_rng(2, 2, 2));
        assert_eq!(stream.fault_value(0, 0) as u8, 0xFF);
        assert_eq!(stream.fault_value(0, 0b1100_0000) as u8, 0b0011_1111);
    }

    #[test]
    fn high_bits_masks() {
        assert_eq!(high_bits(0), 0);
        assert_eq!(high_bits(1), 0b1000_0000);
        assert_eq!(high_bits(2), 0b1100_0000);
        assert_eq!(high_bits(8), 0xFF);
    }
}
