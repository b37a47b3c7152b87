//! Return stack buffer, branch target buffer and conditional direction
//! predictor.

use crate::defenses::DefenseConfig;
use crate::isa::Addr;
use crate::machine::{ContextId, Mode};

/// What an RSB does when a return finds it empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnderfillMode {
    /// Fall back to the indirect branch predictor (Intel).
    FallbackIndirect,
    /// Do not predict at all (AMD).
    NoPrediction,
}

impl UnderfillMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UnderfillMode::FallbackIndirect => "fallback",
            UnderfillMode::NoPrediction => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    Address(Addr),
    FallbackIndirect,
    NoPrediction,
}

pub const MIN_RSB_CAPACITY: usize = 4;
pub const MAX_RSB_CAPACITY: usize = 64;
pub const DEFAULT_RSB_CAPACITY: usize = 16;

/// Fixed-capacity ring of predicted return addresses. Pushing into a full
/// buffer overwrites the oldest entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReturnStackBuffer {
    entries: Vec<Addr>,
    top: usize,
    fill: usize,
    underfill: UnderfillMode,
}

impl ReturnStackBuffer {
    /// # Panics
    /// If `capacity` is zero.
    pub fn new(capacity: usize, underfill: UnderfillMode) -> Self {
        assert!(capacity > 0, "rsb capacity must be positive");
        ReturnStackBuffer {
            entries: vec![0; capacity],
            top: 0,
            fill: 0,
            underfill,
        }
    }

    pub fn capacity(&self) -> usize {
        self.entries.len()
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn underfill_mode(&self) -> UnderfillMode {
        self.underfill
    }

    pub fn push(&mut self, addr: Addr) {
        self.top = (self.top + 1) % self.entries.len();
        self.entries[self.top] = addr;
        self.fill = (self.fill + 1).min(self.entries.len());
    }

    pub fn predict_pop(&mut self) -> Prediction {
        if self.fill == 0 {
            return match self.underfill {
                UnderfillMode::FallbackIndirect => Prediction::FallbackIndirect,
                UnderfillMode::NoPrediction => Prediction::NoPrediction,
            };
        }
        let addr = self.entries[self.top];
        self.top = (self.top + self.entries.len() - 1) % self.entries.len();
        self.fill -= 1;
        Prediction::Address(addr)
    }

    /// Top entry without consuming it.
    pub fn peek(&self) -> Option<Addr> {
        (self.fill > 0).then(|| self.entries[self.top])
    }

    /// Live entries, newest first.
    pub fn live_entries(&self) -> Vec<Addr> {
        let cap = self.entries.len();
        (0..self.fill)
            .map(|i| self.entries[(self.top + cap - i) % cap])
            .collect()
    }

    /// Overwrites every slot with `benign` and marks the buffer full.
    pub fn refill(&mut self, benign: Addr) {
        self.entries.iter_mut().for_each(|e| *e = benign);
        self.fill = self.entries.len();
    }
}

/// Who trained a BTB entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Owner {
    pub context: ContextId,
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BtbEntry {
    tag: u64,
    target: Addr,
    owner: Owner,
}

pub const BTB_ENTRIES: usize = 256;

/// Direct-mapped indirect branch target buffer, index = `pc mod size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchTargetBuffer {
    slots: Vec<Option<BtbEntry>>,
}

impl Default for BranchTargetBuffer {
    fn default() -> Self {
        Self::new(BTB_ENTRIES)
    }
}

impl BranchTargetBuffer {
    pub fn new(size: usize) -> Self {
        BranchTargetBuffer {
            slots: vec![None; size],
        }
    }

    fn index(&self, pc: Addr) -> (usize, u64) {
        let n = self.slots.len() as u64;
        ((pc % n) as usize, pc / n)
    }

    pub fn train(&mut self, pc: Addr, target: Addr, owner: Owner) {
        let (i, tag) = self.index(pc);
        self.slots[i] = Some(BtbEntry { tag, target, owner });
    }

    /// Returns the stored target if the tag matches and the IBRS/STIBP
    /// gating in `cfg` allows `requester` to consume it.
    pub fn lookup(&self, pc: Addr, requester: Owner, cfg: &DefenseConfig) -> Option<Addr> {
        let (i, tag) = self.index(pc);
        let e = self.slots[i]?;
        if e.tag != tag {
            return None;
        }
        if cfg.ibrs && e.owner.mode.privilege() < requester.mode.privilege() {
            return None;
        }
        if cfg.stibp && e.owner.context != requester.context {
            return None;
        }
        Some(e.target)
    }

    /// Drops every entry not owned by `survivor`'s context.
    pub fn barrier(&mut self, survivor: ContextId) {
        for slot in &mut self.slots {
            if matches!(slot, Some(e) if e.owner.context != survivor) {
                *slot = None;
            }
        }
    }

    pub fn owner_at(&self, pc: Addr) -> Option<Owner> {
        let (i, tag) = self.index(pc);
        self.slots[i].filter(|e| e.tag == tag).map(|e| e.owner)
    }
}

pub const DIRPRED_ENTRIES: usize = 256;

/// Table of 2-bit saturating counters, initialised to 1 (weakly not-taken).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionPredictor {
    counters: Vec<u8>,
}

impl Default for DirectionPredictor {
    fn default() -> Self {
        Self::new(DIRPRED_ENTRIES)
    }
}

impl DirectionPredictor {
    pub fn new(size: usize) -> Self {
        DirectionPredictor {
            counters: vec![1; size],
        }
    }

    fn index(&self, pc: Addr) -> usize {
        (pc % self.counters.len() as u64) as usize
    }

    pub fn predict(&self, pc: Addr) -> bool {
        self.counters[self.index(pc)] >= 2
    }

    pub fn train(&mut self, pc: Addr, taken: bool) {
        let i = self.index(pc);
        let c = &mut self.counters[i];
        *c = if taken {
            (*c + 1).min(3)
        } else {
            c.saturating_sub(1)
        };
    }

    pub fn counter(&self, pc: Addr) -> u8 {
        self.counters[self.index(pc)]
    }
}
