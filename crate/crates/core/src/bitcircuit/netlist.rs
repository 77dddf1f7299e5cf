//! Functional gate-level model of the signed 8×8 multiplier.
//!
//! The partial-product array is Baugh-Wooley sign-corrected (inverted
//! products on the sign row/column plus constant ones at columns 8 and 15),
//! so the unsigned column-height profile carries over and the product is
//! exact two's-complement arithmetic modulo 2^16.
//!
//! Two reduction structures are modeled: a textbook Wallace tree (staged
//! 3:2/2:2 column compression, then a ripple carry-propagate adder) and a
//! shift-add array (row-by-row ripple accumulation). Cells are 1-bit
//! full/half adders tagged with the column of their sum output; they are
//! the fault sites and the protection granularity.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MultiplierKind {
    ShiftAdd,
    Wallace,
}

impl MultiplierKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MultiplierKind::ShiftAdd => "shift-add",
            MultiplierKind::Wallace => "wallace",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shift-add" | "shiftadd" => Ok(MultiplierKind::ShiftAdd),
            "wallace" => Ok(MultiplierKind::Wallace),
            other => Err(CoreError::invalid("structure", format!("unknown multiplier {other:?}"))),
        }
    }
}

pub type NetId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    /// Half adder: two inputs.
    Ha { a: NetId, b: NetId },
    /// Full adder: three inputs.
    Fa { a: NetId, b: NetId, c: NetId },
}

#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub kind: CellKind,
    /// Column of the sum output (the weight 2^column it reduces).
    pub column: u8,
    pub sum: NetId,
    pub carry: NetId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellOutput {
    Sum,
    Carry,
}

/// One injectable fault: flip one output of one cell instance. For
/// TMR-protected cells `replica` selects which of the three copies is hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSite {
    pub cell: usize,
    pub replica: u8,
    pub output: CellOutput,
}

/// Partial product: `(a_i & b_j)`, optionally inverted (Baugh-Wooley sign
/// terms), feeding one net.
#[derive(Debug, Clone, Copy)]
struct PartialProduct {
    net: NetId,
    i: u8,
    j: u8,
    invert: bool,
}

#[derive(Debug, Clone)]
pub struct Circuit {
    pub kind: MultiplierKind,
    net_count: usize,
    pps: Vec<PartialProduct>,
    consts: Vec<(NetId, bool)>,
    pub cells: Vec<Cell>,
    /// Net carrying each product bit 0..16.
    pub outputs: [NetId; 16],
}

struct Builder {
    net_count: usize,
    cells: Vec<Cell>,
}

impl Builder {
    fn net(&mut self) -> NetId {
        let id = self.net_count;
        self.net_count += 1;
        id
    }

    fn ha(&mut self, column: u8, a: NetId, b: NetId) -> (NetId, NetId) {
        let sum = self.net();
        let carry = self.net();
        self.cells.push(Cell { kind: CellKind::Ha { a, b }, column, sum, carry });
        (sum, carry)
    }

    fn fa(&mut self, column: u8, a: NetId, b: NetId, c: NetId) -> (NetId, NetId) {
        let sum = self.net();
        let carry = self.net();
        self.cells.push(Cell { kind: CellKind::Fa { a, b, c }, column, sum, carry });
        (sum, carry)
    }
}

/// Baugh-Wooley partial products and constants for the 16 columns.
/// Columns index the vector; entries are nets.
fn seed_columns(b: &mut Builder) -> (Vec<PartialProduct>, Vec<(NetId, bool)>, Vec<Vec<NetId>>) {
    let mut pps = Vec::with_capacity(64);
    let mut columns: Vec<Vec<NetId>> = vec![Vec::new(); 16];
    for i in 0..8u8 {
        for j in 0..8u8 {
            let net = b.net();
            let invert = (i == 7) ^ (j == 7);
            pps.push(PartialProduct { net, i, j, invert });
            columns[(i + j) as usize].push(net);
        }
    }
    let c8 = b.net();
    let c15 = b.net();
    let consts = vec![(c8, true), (c15, true)];
    columns[8].push(c8);
    columns[15].push(c15);
    (pps, consts, columns)
}

/// Textbook Wallace reduction: per stage, each column compresses triples
/// with full adders and a leftover pair with a half adder until no column
/// holds more than two bits; a ripple carry-propagate adder finishes.
fn build_wallace() -> Circuit {
    let mut b = Builder { net_count: 0, cells: Vec::new() };
    let (pps, consts, mut columns) = seed_columns(&mut b);
    while columns.iter().any(|c| c.len() > 2) {
        let mut next: Vec<Vec<NetId>> = vec![Vec::new(); 16];
        for k in 0..16usize {
            let bits = std::mem::take(&mut columns[k]);
            let mut iter = bits.chunks_exact(3);
            for t in iter.by_ref() {
                let (s, c) = b.fa(k as u8, t[0], t[1], t[2]);
                next[k].push(s);
                if k + 1 < 16 {
                    next[k + 1].push(c); // carry beyond bit 15 drops (mod 2^16)
                }
            }
            let rem = iter.remainder();
            match rem.len() {
                2 => {
                    let (s, c) = b.ha(k as u8, rem[0], rem[1]);
                    next[k].push(s);
                    if k + 1 < 16 {
                        next[k + 1].push(c);
                    }
                }
                1 => next[k].push(rem[0]),
                _ => {}
            }
        }
        columns = next;
    }
    let outputs = ripple_finish(&mut b, columns);
    Circuit { kind: MultiplierKind::Wallace, net_count: b.net_count, pps, consts, cells: b.cells, outputs }
}

/// Shift-add array: start from partial-product row 0 and ripple-add each
/// shifted row, then the Baugh-Wooley constants.
fn build_shift_add() -> Circuit {
    let mut b = Builder { net_count: 0, cells: Vec::new() };
    let (pps, consts, _) = seed_columns(&mut b);
    // rows: row j holds pp(i, j) at column i + j
    let row_net = |j: u8, pps: &[PartialProduct]| -> Vec<(usize, NetId)> {
        (0..8u8).map(|i| ((i + j) as usize, pps[(i * 8 + j) as usize].net)).collect()
    };
    let mut running: Vec<Option<NetId>> = vec![None; 16];
    for (col, net) in row_net(0, &pps) {
        running[col] = Some(net);
    }
    for j in 1..8u8 {
        ripple_add(&mut b, &mut running, row_net(j, &pps));
    }
    ripple_add(&mut b, &mut running, vec![(8usize, consts[0].0), (15usize, consts[1].0)]);
    let mut outputs = [0usize; 16];
    for (k, slot) in running.iter().enumerate() {
        outputs[k] = slot.expect("all 16 product bits driven");
    }
    Circuit { kind: MultiplierKind::ShiftAdd, net_count: b.net_count, pps, consts, cells: b.cells, outputs }
}

/// Add a sparse operand into the running per-column sum with a ripple
/// chain; carries past bit 15 drop.
fn ripple_add(b: &mut Builder, running: &mut [Option<NetId>], addend: Vec<(usize, NetId)>) {
    let mut carry: Option<NetId> = None;
    let start = addend.iter().map(|&(c, _)| c).min().unwrap_or(16);
    let mut add_map: Vec<Option<NetId>> = vec![None; 16];
    for (c, n) in addend {
        if c < 16 {
            add_map[c] = Some(n);
        }
    }
    for k in start..16 {
        let mut inputs: Vec<NetId> = Vec::with_capacity(3);
        if let Some(r) = running[k] {
            inputs.push(r);
        }
        if let Some(a) = add_map[k] {
            inputs.push(a);
        }
        if let Some(c) = carry.take() {
            inputs.push(c);
        }
        match inputs.len() {
            0 => {}
            1 => running[k] = Some(inputs[0]),
            2 => {
                let (s, c) = b.ha(k as u8, inputs[0], inputs[1]);
                running[k] = Some(s);
                carry = Some(c);
            }
            3 => {
                let (s, c) = b.fa(k as u8, inputs[0], inputs[1], inputs[2]);
                running[k] = Some(s);
                carry = Some(c);
            }
            _ => unreachable!(),
        }
    }
}

/// Carry-propagate over columns holding at most two bits each.
fn ripple_finish(b: &mut Builder, columns: Vec<Vec<NetId>>) -> [NetId; 16] {
    let mut outputs = [0usize; 16];
    let mut carry: Option<NetId> = None;
    let mut zero_net: Option<NetId> = None;
    for (k, bits) in columns.into_iter().enumerate() {
        let mut inputs = bits;
        if let Some(c) = carry.take() {
            inputs.push(c);
        }
        outputs[k] = match inputs.len() {
            0 => *zero_net.get_or_insert_with(|| b.net()),
            1 => inputs[0],
            2 => {
                let (s, c) = b.ha(k as u8, inputs[0], inputs[1]);
                carry = Some(c);
                s
            }
            3 => {
                let (s, c) = b.fa(k as u8, inputs[0], inputs[1], inputs[2]);
                carry = Some(c);
                s
            }
            _ => unreachable!("reduction left more than two bits in a column"),
        };
    }
    outputs
}

pub fn build_multiplier(kind: MultiplierKind) -> Circuit {
    match kind {
        MultiplierKind::Wallace => build_wallace(),
        MultiplierKind::ShiftAdd => build_shift_add(),
    }
}

impl Circuit {
    /// Full/half adder counts per column (sum-output attribution).
    pub fn reduction_cells_per_column(&self) -> ([usize; 16], [usize; 16]) {
        let mut fa = [0usize; 16];
        let mut ha = [0usize; 16];
        for cell in &self.cells {
            match cell.kind {
                CellKind::Fa { .. } => fa[cell.column as usize] += 1,
                CellKind::Ha { .. } => ha[cell.column as usize] += 1,
            }
        }
        (fa, ha)
    }

    /// Evaluate the netlist. `protected[cell]` marks TMR cells (three
    /// replicas, bitwise 2-of-3 vote per output); `fault` flips one output
    /// of one replica of one cell.
    pub fn eval(&self, a: i8, b: i8, fault: Option<FaultSite>, protected: &[bool]) -> Result<i16> {
        debug_assert_eq!(protected.len(), self.cells.len());
        if let Some(f) = fault {
            if f.cell >= self.cells.len() {
                return Err(CoreError::invalid("fault", format!("cell {} does not exist", f.cell)));
            }
            let max_replica = if protected[f.cell] { 3 } else { 1 };
            if f.replica >= max_replica {
                return Err(CoreError::invalid(
                    "fault",
                    format!("cell {} has {max_replica} replica(s), got {}", f.cell, f.replica),
                ));
            }
        }
        let mut nets = vec![false; self.net_count];
        let au = a as u8;
        let bu = b as u8;
        for pp in &self.pps {
            let v = ((au >> pp.i) & 1 == 1) && ((bu >> pp.j) & 1 == 1);
            nets[pp.net] = v ^ pp.invert;
        }
        for &(net, v) in &self.consts {
            nets[net] = v;
        }
        for (id, cell) in self.cells.iter().enumerate() {
            let ins = match cell.kind {
                CellKind::Ha { a, b } => (nets[a], nets[b], false),
                CellKind::Fa { a, b, c } => (nets[a], nets[b], nets[c]),
            };
            let base_sum = ins.0 ^ ins.1 ^ ins.2;
            let base_carry = (ins.0 & ins.1) | (ins.1 & ins.2) | (ins.0 & ins.2);
            let (sum, carry) = if protected[id] {
                // three identical replicas with a per-output majority vote
                let mut sums = [base_sum; 3];
                let mut carries = [base_carry; 3];
                if let Some(f) = fault {
                    if f.cell == id {
                        match f.output {
                            CellOutput::Sum => sums[f.replica as usize] ^= true,
                            CellOutput::Carry => carries[f.replica as usize] ^= true,
                        }
                    }
                }
                (majority(sums), majority(carries))
            } else {
                let mut sum = base_sum;
                let mut carry = base_carry;
                if let Some(f) = fault {
                    if f.cell == id {
                        match f.output {
                            CellOutput::Sum => sum ^= true,
                            CellOutput::Carry => carry ^= true,
                        }
                    }
                }
                (sum, carry)
            };
            nets[cell.sum] = sum;
            nets[cell.carry] = carry;
        }
        let mut out = 0u16;
        for (k, &net) in self.outputs.iter().enumerate() {
            if nets[net] {
                out |= 1 << k;
            }
        }
        Ok(out as i16)
    }
}

#[inline]
fn majority(v: [bool; 3]) -> bool {
    (v[0] & v[1]) | (v[1] & v[2]) | (v[0] & v[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_structures_multiply_exactly() {
        for kind in [MultiplierKind::Wallace, MultiplierKind::ShiftAdd] {
            let c = build_multiplier(kind);
            let none = vec![false; c.cells.len()];
            for a in [-128i8, -127, -1, 0, 1, 2, 63, 127] {
                for b in [-128i8, -100, -1, 0, 1, 77, 127] {
                    let want = (a as i16) * (b as i16);
                    assert_eq!(c.eval(a, b, None, &none).unwrap(), want, "{kind:?} {a}*{b}");
                }
            }
        }
    }

    #[test]
    fn fault_on_unprotected_cell_can_corrupt() {
        let c = build_multiplier(MultiplierKind::Wallace);
        let none = vec![false; c.cells.len()];
        let clean = c.eval(127, 127, None, &none).unwrap();
        let mut changed = false;
        for cell in 0..c.cells.len() {
            let f = FaultSite { cell, replica: 0, output: CellOutput::Sum };
            if c.eval(127, 127, Some(f), &none).unwrap() != clean {
                changed = true;
                break;
            }
        }
        assert!(changed);
    }

    #[test]
    fn tmr_masks_single_faults_everywhere() {
        let c = build_multiplier(MultiplierKind::ShiftAdd);
        let all = vec![true; c.cells.len()];
        let clean = c.eval(-77, 93, None, &all).unwrap();
        assert_eq!(clean, -77i16 * 93);
        for cell in (0..c.cells.len()).step_by(7) {
            for replica in 0..3 {
                for output in [CellOutput::Sum, CellOutput::Carry] {
                    let f = FaultSite { cell, replica, output };
                    assert_eq!(c.eval(-77, 93, Some(f), &all).unwrap(), clean);
                }
            }
        }
    }

    #[test]
    fn invalid_fault_sites_are_rejected() {
        let c = build_multiplier(MultiplierKind::Wallace);
        let none = vec![false; c.cells.len()];
        let bad_cell = FaultSite { cell: c.cells.len(), replica: 0, output: CellOutput::Sum };
        assert!(c.eval(1, 1, Some(bad_cell), &none).is_err());
        let bad_replica = FaultSite { cell: 0, replica: 1, output: CellOutput::Sum };
        assert!(c.eval(1, 1, Some(bad_replica), &none).is_err());
    }
}
