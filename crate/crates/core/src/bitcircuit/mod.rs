//! Gate-level cost and protection model of the bit-protected
//! multiply-accumulate unit.
//!
//! The multiplier's partial-product columns have heights
//! `[1,2,...,8,...,2,1]`; protecting the top `s` bits of an 8-bit output
//! window whose low bit is `q` touches multiplier output columns
//! `[q+8-s, q+7]` (clipped to the 16-bit product). Because `q` is only
//! bounded below by the quantization constraint `q_scale`, the protectable
//! region is the union over all legal `q` — raising `q_scale` shrinks it,
//! which is where the area savings come from.
//!
//! Two protection policies are modeled:
//!
//! * **direct** — every cell of every window column is triplicated, one
//!   voter per window output bit;
//! * **configurable** — a redundant array sized to the two tallest window
//!   columns is mux-steered to the columns active for the runtime `q`.
//!   Adjacent high (short) columns merge into groups that fit one
//!   column-unit of the array, which cuts the steering fan-out; a merged
//!   group is protected whole whenever any member column is active.
//!
//! Protection sizing counts columns in partial-product terms (the paper's
//! "1-bit sums": column 7 counts 8, column 8 counts 7); the functional
//! netlist and the baseline area use the structure's real full/half adder
//! cells. The accumulator's top `s` bits are always protected directly
//! (two register copies plus a voter per bit, costed as adder
//! equivalents); that term is shared by both policies and dominated by the
//! multiplier-side redundancy.

pub mod netlist;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

pub use netlist::{build_multiplier, Cell, CellKind, CellOutput, Circuit, FaultSite, MultiplierKind};

/// Only 8×8 multipliers are modeled.
pub const MULT_WIDTH: usize = 8;
/// Product bits 0..=15.
pub const TOP_COLUMN: u8 = 15;

/// Partial-product height of one output column (0 for column 15, which
/// only ever holds the sign-completion constant and carries).
#[inline]
pub fn column_height(k: u8) -> usize {
    if k >= 15 {
        0
    } else {
        (k as usize + 1).min(15 - k as usize).min(8)
    }
}

/// Per-column structure summary of one multiplier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnProfile {
    pub kind: MultiplierKind,
    /// Partial products per column, k = 0..16.
    pub heights: Vec<usize>,
    pub fa_per_column: Vec<usize>,
    pub ha_per_column: Vec<usize>,
    pub total_fa: usize,
    pub total_ha: usize,
}

/// Column heights and reduction-cell counts for the 8×8 multiplier.
pub fn column_profile(width: usize, kind: MultiplierKind) -> Result<ColumnProfile> {
    if width != MULT_WIDTH {
        return Err(CoreError::UnsupportedCircuit(format!(
            "only {MULT_WIDTH}-bit multipliers are modeled, got {width}"
        )));
    }
    let circuit = build_multiplier(kind);
    let (fa, ha) = circuit.reduction_cells_per_column();
    Ok(ColumnProfile {
        kind,
        heights: (0u8..16).map(column_height).collect(),
        total_fa: fa.iter().sum(),
        total_ha: ha.iter().sum(),
        fa_per_column: fa.to_vec(),
        ha_per_column: ha.to_vec(),
    })
}

/// The multiplier columns that can ever hold the top `s` bits of a legal
/// truncation window, together with the accumulator-side window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportantWindow {
    pub s: u8,
    pub q_scale: u8,
    /// Multiplier output columns, ascending.
    pub columns: Vec<u8>,
    /// Accumulator bits that can carry window data: `[q_scale, 23]`.
    pub acc_window: (u8, u8),
}

pub fn important_window(s: u8, q_scale: u8) -> Result<ImportantWindow> {
    if !(1..=8).contains(&s) {
        return Err(CoreError::invalid("s", format!("protected bits must be 1..=8, got {s}")));
    }
    if q_scale > 16 {
        return Err(CoreError::invalid("q_scale", format!("must be 0..=16, got {q_scale}")));
    }
    // union over legal q of [min(q+8-s, 15), min(q+7, 15)]: contiguous up
    // to column 15
    let low = (q_scale as usize + 8 - s as usize).min(15) as u8;
    Ok(ImportantWindow {
        s,
        q_scale,
        columns: (low..=TOP_COLUMN).collect(),
        acc_window: (q_scale.min(23), 23),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProtectPolicy {
    Direct,
    Configurable,
}

impl ProtectPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProtectPolicy::Direct => "direct",
            ProtectPolicy::Configurable => "configurable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(ProtectPolicy::Direct),
            "configurable" => Ok(ProtectPolicy::Configurable),
            other => Err(CoreError::invalid("pe_policy", format!("unknown policy {other:?}"))),
        }
    }
}

/// Gate-equivalent unit costs. The absolute numbers stand in for a
/// synthesis flow; only relative ordering is asserted anywhere.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostModel {
    pub full_adder: f64,
    pub half_adder: f64,
    pub mux2: f64,
    pub voter: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { full_adder: 1.0, half_adder: 0.5, mux2: 0.4, voter: 0.8 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("full_adder", self.full_adder),
            ("half_adder", self.half_adder),
            ("mux2", self.mux2),
            ("voter", self.voter),
        ] {
            if !(v > 0.0) {
                return Err(CoreError::invalid("cost_model", format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Parse a `key = value` text file.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cm = CostModel::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::invalid("cost_model", format!("bad line {line:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| CoreError::invalid("cost_model", format!("bad value in {line:?}")))?;
            match k.trim() {
                "full_adder" => cm.full_adder = v,
                "half_adder" => cm.half_adder = v,
                "mux2" => cm.mux2 = v,
                "voter" => cm.voter = v,
                other => return Err(CoreError::invalid("cost_model", format!("unknown key {other:?}"))),
            }
        }
        cm.validate()?;
        Ok(cm)
    }
}

/// A merged steering target: adjacent columns sharing redundant units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectionGroup {
    /// Member columns, descending (left-to-right in place-value order).
    pub columns: Vec<u8>,
    /// Total cells (partial-product terms) of the group.
    pub cells: usize,
}

/// Circuit-layer protection plan for one (policy, s, q_scale, structure).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtectedMultiplierPlan {
    pub policy: ProtectPolicy,
    pub structure: MultiplierKind,
    pub window: ImportantWindow,
    /// Runtime truncation bit the steering currently targets.
    pub active_q: u8,
    /// Columns whose cells are protected at `active_q`.
    pub protected_columns: Vec<u8>,
    /// Steering targets (configurable only; direct protects statically).
    pub groups: Vec<ProtectionGroup>,
    /// Redundant adder cells (column partial-product terms): two copies of
    /// the whole window for direct, the two tallest columns for
    /// configurable.
    pub redundant_cells: usize,
    /// 2:1 muxes in the steering network.
    pub mux_count: usize,
    /// Worst per-redundant-unit steering fan-out (1 = hardwired).
    pub max_fanout: usize,
    /// Fan-out without column merging, for comparison.
    pub unmerged_fanout: usize,
    /// Voted output bits (window columns).
    pub voter_bits: usize,
    /// Protected accumulator output bits (= s).
    pub acc_protected_bits: usize,
}

/// Build the protection plan. `active_q` defaults to the smallest legal
/// truncation (`q_scale`) and must satisfy `q_scale <= active_q <= 16`.
pub fn plan_protection(
    policy: ProtectPolicy,
    s: u8,
    q_scale: u8,
    structure: MultiplierKind,
    active_q: Option<u8>,
) -> Result<ProtectedMultiplierPlan> {
    let window = important_window(s, q_scale)?;
    let active_q = active_q.unwrap_or(q_scale);
    if active_q < q_scale || active_q > 16 {
        return Err(CoreError::invalid(
            "active_q",
            format!("runtime q must be in {q_scale}..=16, got {active_q}"),
        ));
    }
    let window_cells: usize = window.columns.iter().map(|&k| column_height(k)).sum();
    // columns of the runtime-active top-s bits
    let m = (active_q + 7).min(TOP_COLUMN);
    let active_low = (active_q as usize + 8 - s as usize).min(15) as u8;
    let active: Vec<u8> = (active_low..=m).collect();

    match policy {
        ProtectPolicy::Direct => Ok(ProtectedMultiplierPlan {
            policy,
            structure,
            protected_columns: window.columns.clone(),
            groups: Vec::new(),
            redundant_cells: 2 * window_cells,
            mux_count: 0,
            max_fanout: 1,
            unmerged_fanout: 1,
            voter_bits: window.columns.len(),
            acc_protected_bits: s as usize,
            active_q,
            window,
        }),
        ProtectPolicy::Configurable => {
            // columns that actually hold computation cells
            let mut with_cells: Vec<u8> =
                window.columns.iter().copied().filter(|&k| column_height(k) > 0).collect();
            with_cells.sort_unstable();
            let mut heights: Vec<usize> = with_cells.iter().map(|&k| column_height(k)).collect();
            let mut tallest: Vec<usize> = heights.clone();
            tallest.sort_unstable_by(|a, b| b.cmp(a));
            let unit1 = tallest.first().copied().unwrap_or(0);
            let unit2 = tallest.get(1).copied().unwrap_or(0);
            let capacity = unit1 + unit2;

            // merge short high columns (left side in place-value order)
            // greedily while a group still fits one column-unit
            let mut groups: Vec<ProtectionGroup> = Vec::new();
            let mut cur_cols: Vec<u8> = Vec::new();
            let mut cur_cells = 0usize;
            for (&k, &h) in with_cells.iter().rev().zip(heights.iter().rev()) {
                if !cur_cols.is_empty() && cur_cells + h > unit1 {
                    groups.push(ProtectionGroup { columns: std::mem::take(&mut cur_cols), cells: cur_cells });
                    cur_cells = 0;
                }
                cur_cols.push(k);
                cur_cells += h;
            }
            if !cur_cols.is_empty() {
                groups.push(ProtectionGroup { columns: cur_cols, cells: cur_cells });
            }
            heights.clear();

            let unmerged_fanout = with_cells.len().max(1);
            let max_fanout = groups.len().max(1);

            // per-cell steering: unit cell j serves every group needing at
            // least j cells; a w-way selector is (w-1) 2:1 muxes
            let mut mux_count = 0usize;
            for unit in [unit1, unit2] {
                for j in 1..=unit {
                    let ways = groups.iter().filter(|g| g.cells >= j).count();
                    mux_count += ways.saturating_sub(1);
                }
            }

            // runtime-protected set: groups touching the active columns,
            // highest columns first, clipped to the redundant capacity
            let mut protected: Vec<u8> = Vec::new();
            let mut used = 0usize;
            let mut candidates: Vec<u8> = groups
                .iter()
                .filter(|g| g.columns.iter().any(|c| active.contains(c)))
                .flat_map(|g| g.columns.iter().copied())
                .collect();
            candidates.sort_unstable_by(|a, b| b.cmp(a));
            for k in candidates {
                let h = column_height(k);
                if used + h <= capacity {
                    protected.push(k);
                    used += h;
                }
            }
            protected.sort_unstable();

            Ok(ProtectedMultiplierPlan {
                policy,
                structure,
                protected_columns: protected,
                groups,
                redundant_cells: capacity,
                mux_count,
                max_fanout,
                unmerged_fanout,
                voter_bits: window.columns.len(),
                acc_protected_bits: s as usize,
                active_q,
                window,
            })
        }
    }
}

/// Gate-equivalent area of one plan.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AreaBreakdown {
    /// Baseline reduction cells of the unprotected multiplier.
    pub reduction_cells: f64,
    /// Redundant adder cells added by the plan.
    pub redundant_cells: f64,
    pub muxes: f64,
    pub voters: f64,
    /// Accumulator-side protection (register copies + voters).
    pub accumulator: f64,
    /// Everything the plan adds on top of the baseline.
    pub added_total: f64,
}

/// Baseline multiplier area: reduction cells only.
pub fn baseline_multiplier_area(profile: &ColumnProfile, cost: &CostModel) -> f64 {
    profile.total_fa as f64 * cost.full_adder + profile.total_ha as f64 * cost.half_adder
}

/// Unprotected processing element: multiplier plus the 24-bit accumulator
/// adder. This is the normalization denominator for design-level areas.
pub fn base_pe_area(profile: &ColumnProfile, cost: &CostModel) -> f64 {
    baseline_multiplier_area(profile, cost) + 24.0 * cost.full_adder
}

pub fn area(plan: &ProtectedMultiplierPlan, cost: &CostModel, profile: &ColumnProfile) -> Result<AreaBreakdown> {
    cost.validate()?;
    if profile.kind != plan.structure {
        return Err(CoreError::Inconsistent("profile structure differs from plan".into()));
    }
    let redundant_cells = plan.redundant_cells as f64 * cost.full_adder;
    let muxes = plan.mux_count as f64 * cost.mux2;
    let voters = plan.voter_bits as f64 * cost.voter;
    let accumulator =
        plan.acc_protected_bits as f64 * (2.0 * cost.full_adder + cost.voter);
    Ok(AreaBreakdown {
        reduction_cells: baseline_multiplier_area(profile, cost),
        redundant_cells,
        muxes,
        voters,
        accumulator,
        added_total: redundant_cells + muxes + voters + accumulator,
    })
}

// ---------------------------------------------------------------------------
// protected functional multiplier
// ---------------------------------------------------------------------------

/// A functional multiplier with the plan's protection applied: cells in
/// protected columns are triplicated and voted per output.
pub struct ProtectedMultiplier {
    pub circuit: Circuit,
    pub plan: ProtectedMultiplierPlan,
    protected: Vec<bool>,
}

impl ProtectedMultiplier {
    pub fn new(plan: ProtectedMultiplierPlan) -> Self {
        let circuit = build_multiplier(plan.structure);
        let protected = circuit
            .cells
            .iter()
            .map(|c| plan.protected_columns.contains(&c.column))
            .collect();
        ProtectedMultiplier { circuit, plan, protected }
    }

    /// Exact product unless an unprotected cell is faulted.
    pub fn multiply(&self, a: i8, b: i8, fault: Option<FaultSite>) -> Result<i16> {
        self.circuit.eval(a, b, fault, &self.protected)
    }

    /// Every fault site in the protected region (all replicas × outputs).
    pub fn protected_fault_sites(&self) -> Vec<FaultSite> {
        let mut sites = Vec::new();
        for (cell, &p) in self.protected.iter().enumerate() {
            if !p {
                continue;
            }
            for replica in 0..3 {
                for output in [CellOutput::Sum, CellOutput::Carry] {
                    sites.push(FaultSite { cell, replica, output });
                }
            }
        }
        sites
    }

    /// Fault sites in unprotected cells of the given column.
    pub fn unprotected_sites_in_column(&self, column: u8) -> Vec<FaultSite> {
        self.circuit
            .cells
            .iter()
            .enumerate()
            .filter(|(id, c)| c.column == column && !self.protected[*id])
            .flat_map(|(cell, _)| {
                [CellOutput::Sum, CellOutput::Carry]
                    .into_iter()
                    .map(move |output| FaultSite { cell, replica: 0, output })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// area table
// ---------------------------------------------------------------------------

pub type AreaKey = (ProtectPolicy, MultiplierKind, u8, u8);

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AreaEntry {
    pub added_area: f64,
    pub redundant_units: usize,
    pub max_fanout: usize,
}

/// Pre-evaluated protection costs keyed by (policy, structure, s, q_scale).
#[derive(Debug, Clone)]
pub struct AreaTable {
    entries: BTreeMap<AreaKey, AreaEntry>,
    /// Unprotected PE area per structure, the normalization denominator.
    base_pe: BTreeMap<MultiplierKind, f64>,
    pub cost: CostModel,
}

impl AreaTable {
    /// Build the full grid: both policies × both structures ×
    /// s ∈ `s_range` × q_scale ∈ `q_range`.
    pub fn build(
        s_range: impl Iterator<Item = u8> + Clone,
        q_range: impl Iterator<Item = u8> + Clone,
        cost: CostModel,
    ) -> Result<AreaTable> {
        cost.validate()?;
        let mut entries = BTreeMap::new();
        let mut base_pe = BTreeMap::new();
        for kind in [MultiplierKind::ShiftAdd, MultiplierKind::Wallace] {
            let profile = column_profile(MULT_WIDTH, kind)?;
            base_pe.insert(kind, base_pe_area(&profile, &cost));
            for policy in [ProtectPolicy::Direct, ProtectPolicy::Configurable] {
                for s in s_range.clone() {
                    for q in q_range.clone() {
                        let plan = plan_protection(policy, s, q, kind, None)?;
                        let breakdown = area(&plan, &cost, &profile)?;
                        entries.insert(
                            (policy, kind, s, q),
                            AreaEntry {
                                added_area: breakdown.added_total,
                                redundant_units: plan.redundant_cells,
                                max_fanout: plan.max_fanout,
                            },
                        );
                    }
                }
            }
        }
        Ok(AreaTable { entries, base_pe, cost })
    }

    /// Default grid covering every bit count and quantization constraint.
    pub fn build_default() -> Result<AreaTable> {
        AreaTable::build(1..=8, 0..=16, CostModel::default())
    }

    pub fn lookup(&self, policy: ProtectPolicy, kind: MultiplierKind, s: u8, q_scale: u8) -> Result<AreaEntry> {
        self.entries.get(&(policy, kind, s, q_scale)).copied().ok_or_else(|| {
            CoreError::MissingTableKey(format!("({}, {}, s={s}, q_scale={q_scale})", policy.as_str(), kind.as_str()))
        })
    }

    /// Added gate-equivalent area for one protected PE.
    pub fn added_area(&self, policy: ProtectPolicy, kind: MultiplierKind, s: u8, q_scale: u8) -> Result<f64> {
        Ok(self.lookup(policy, kind, s, q_scale)?.added_area)
    }

    pub fn base_pe_area(&self, kind: MultiplierKind) -> f64 {
        self.base_pe[&kind]
    }

    pub fn keys(&self) -> impl Iterator<Item = &AreaKey> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heights_match_the_figure() {
        // the two columns discussed for the [2,9] window: 8 and 7 terms
        assert_eq!(column_height(7), 8);
        assert_eq!(column_height(8), 7);
        assert_eq!(column_height(0), 1);
        assert_eq!(column_height(14), 1);
        assert_eq!(column_height(15), 0);
        let heights: Vec<usize> = (0u8..15).map(column_height).collect();
        assert_eq!(heights, vec![1, 2, 3, 4, 5, 6, 7, 8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(heights.iter().sum::<usize>(), 64);
    }

    #[test]
    fn unconstrained_two_bit_window_spans_6_to_15() {
        let w = important_window(2, 0).unwrap();
        assert_eq!(w.columns, (6..=15).collect::<Vec<u8>>());
    }

    #[test]
    fn qscale_5_two_bit_window_spans_11_to_15() {
        let w = important_window(2, 5).unwrap();
        assert_eq!(w.columns, (11..=15).collect::<Vec<u8>>());
        assert_eq!(w.acc_window, (5, 23));
    }

    #[test]
    fn degenerate_window_is_column_15() {
        let w = important_window(8, 16).unwrap();
        assert_eq!(w.columns, vec![15]);
    }

    #[test]
    fn window_shrinks_with_q_scale() {
        for s in 1..=8u8 {
            let mut prev = important_window(s, 0).unwrap().columns.len();
            for q in 1..=16u8 {
                let cur = important_window(s, q).unwrap().columns.len();
                assert!(cur <= prev, "s={s} q={q}");
                prev = cur;
            }
        }
    }

    #[test]
    fn merging_reduces_fanout_6_to_4() {
        let plan = plan_protection(ProtectPolicy::Configurable, 1, 2, MultiplierKind::ShiftAdd, None).unwrap();
        assert_eq!(plan.unmerged_fanout, 6);
        assert_eq!(plan.max_fanout, 4);
        // the merged group is the three leftmost (highest) populated columns
        let merged: Vec<&ProtectionGroup> = plan.groups.iter().filter(|g| g.columns.len() > 1).collect();
        assert_eq!(merged.len(), 1);
        let mut cols = merged[0].columns.clone();
        cols.sort_unstable();
        assert_eq!(cols, vec![12, 13, 14]);
    }

    #[test]
    fn single_legal_column_needs_no_steering() {
        let plan = plan_protection(ProtectPolicy::Configurable, 1, 15, MultiplierKind::Wallace, None).unwrap();
        assert_eq!(plan.window.columns, vec![15]);
        assert_eq!(plan.mux_count, 0);
        assert_eq!(plan.max_fanout, 1);
    }

    #[test]
    fn configurable_redundancy_beats_direct_at_s2_q7() {
        let direct = plan_protection(ProtectPolicy::Direct, 2, 7, MultiplierKind::Wallace, None).unwrap();
        let conf = plan_protection(ProtectPolicy::Configurable, 2, 7, MultiplierKind::Wallace, None).unwrap();
        assert!(conf.redundant_cells < direct.redundant_cells, "{} vs {}", conf.redundant_cells, direct.redundant_cells);
    }

    #[test]
    fn area_orderings_hold_over_the_grid() {
        let profile_w = column_profile(8, MultiplierKind::Wallace).unwrap();
        let cost = CostModel::default();
        for s in 1..=8u8 {
            for q in 0..=16u8 {
                let d = plan_protection(ProtectPolicy::Direct, s, q, MultiplierKind::Wallace, None).unwrap();
                let c = plan_protection(ProtectPolicy::Configurable, s, q, MultiplierKind::Wallace, None).unwrap();
                let da = area(&d, &cost, &profile_w).unwrap();
                let ca = area(&c, &cost, &profile_w).unwrap();
                assert!(da.added_total > 0.0 && ca.added_total > 0.0);
                assert!(
                    ca.added_total <= da.added_total,
                    "configurable exceeds direct at s={s} q={q}: {} > {}",
                    ca.added_total,
                    da.added_total
                );
                // unconstrained direct window is the upper bound
                let d0 = plan_protection(ProtectPolicy::Direct, s, 0, MultiplierKind::Wallace, None).unwrap();
                let d0a = area(&d0, &cost, &profile_w).unwrap();
                assert!(da.added_total <= d0a.added_total);
            }
        }
    }

    #[test]
    fn wallace_reduction_cells_match_recursive_oracle() {
        // independent counting oracle: simulate the same textbook rule on
        // the height profile alone (64 partial products + two constants)
        let mut heights = [0usize; 16];
        for k in 0u8..15 {
            heights[k as usize] = column_height(k);
        }
        heights[8] += 1;
        heights[15] += 1;
        let (mut fa, mut ha) = (0usize, 0usize);
        while heights.iter().any(|&h| h > 2) {
            let mut next = [0usize; 16];
            for k in 0..16 {
                let h = heights[k];
                let fas = h / 3;
                let has = usize::from(h % 3 == 2);
                fa += fas;
                ha += has;
                next[k] += fas + has + usize::from(h % 3 == 1);
                if k + 1 < 16 {
                    next[k + 1] += fas + has;
                }
            }
            heights = next;
        }
        let mut carry = 0usize;
        for k in 0..16 {
            match heights[k] + carry {
                0 | 1 => carry = 0,
                2 => {
                    ha += 1;
                    carry = 1;
                }
                3 => {
                    fa += 1;
                    carry = 1;
                }
                _ => unreachable!(),
            }
        }
        let profile = column_profile(8, MultiplierKind::Wallace).unwrap();
        assert_eq!(profile.total_fa, fa);
        assert_eq!(profile.total_ha, ha);
    }

    #[test]
    fn zero_column_needs_no_adders() {
        let profile = column_profile(8, MultiplierKind::Wallace).unwrap();
        assert_eq!(profile.heights[0], 1);
        assert_eq!(profile.fa_per_column[0] + profile.ha_per_column[0], 0);
    }

    #[test]
    fn table_covers_grid_and_is_monotone() {
        let table = AreaTable::build_default().unwrap();
        assert_eq!(table.len(), 2 * 2 * 8 * 17);
        for kind in [MultiplierKind::ShiftAdd, MultiplierKind::Wallace] {
            for policy in [ProtectPolicy::Direct, ProtectPolicy::Configurable] {
                for q in 0..=16u8 {
                    for s in 1..8u8 {
                        let a = table.added_area(policy, kind, s, q).unwrap();
                        let b = table.added_area(policy, kind, s + 1, q).unwrap();
                        assert!(b >= a, "{policy:?} {kind:?} s {s}->{} q {q}", s + 1);
                    }
                }
                for s in 1..=8u8 {
                    for q in 0..16u8 {
                        let a = table.added_area(policy, kind, s, q).unwrap();
                        let b = table.added_area(policy, kind, s, q + 1).unwrap();
                        assert!(b <= a, "{policy:?} {kind:?} s {s} q {q}->{}", q + 1);
                    }
                }
            }
        }
        // table lookups equal freshly built plans
        let profile = column_profile(8, MultiplierKind::Wallace).unwrap();
        let plan = plan_protection(ProtectPolicy::Configurable, 3, 5, MultiplierKind::Wallace, None).unwrap();
        let breakdown = area(&plan, &CostModel::default(), &profile).unwrap();
        let entry = table.lookup(ProtectPolicy::Configurable, MultiplierKind::Wallace, 3, 5).unwrap();
        assert_eq!(entry.added_area, breakdown.added_total);
        assert!(table.lookup(ProtectPolicy::Direct, MultiplierKind::Wallace, 8, 17).is_err());
    }

    #[test]
    fn protected_region_masks_faults() {
        let plan = plan_protection(ProtectPolicy::Configurable, 2, 4, MultiplierKind::Wallace, None).unwrap();
        let pm = ProtectedMultiplier::new(plan);
        let clean = pm.multiply(93, -41, None).unwrap();
        assert_eq!(clean, 93i16 * -41);
        for site in pm.protected_fault_sites().into_iter().step_by(5) {
            assert_eq!(pm.multiply(93, -41, Some(site)).unwrap(), clean);
        }
    }

    #[test]
    fn unprotected_low_column_fault_corrupts_some_product() {
        let plan = plan_protection(ProtectPolicy::Direct, 2, 7, MultiplierKind::Wallace, None).unwrap();
        let pm = ProtectedMultiplier::new(plan);
        let sites = pm.unprotected_sites_in_column(3);
        assert!(!sites.is_empty());
        let corrupted = sites
            .iter()
            .any(|&f| pm.multiply(127, 127, Some(f)).unwrap() != 127i16 * 127);
        assert!(corrupted);
    }

    #[test]
    fn zero_operand_stays_zero_under_protected_fault() {
        let plan = plan_protection(ProtectPolicy::Direct, 3, 0, MultiplierKind::ShiftAdd, None).unwrap();
        let pm = ProtectedMultiplier::new(plan);
        let site = pm.protected_fault_sites()[0];
        assert_eq!(pm.multiply(0, 66, Some(site)).unwrap(), 0);
        assert_eq!(pm.multiply(-55, 0, Some(site)).unwrap(), 0);
    }
}
