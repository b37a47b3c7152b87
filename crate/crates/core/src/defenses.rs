//! Mitigations: independent toggles, the two code transforms, and the hook
//! fired on privilege transitions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::isa::{Addr, Instruction, Mem, Op, ProgramImage, Reg, Target};
use crate::machine::{ContextId, Machine, BENIGN_GADGET};
use crate::pipeline::TraceKind;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct DefenseConfig {
    pub lfence_pass: bool,
    pub ibrs: bool,
    pub stibp: bool,
    pub ibpb_on_switch: bool,
    pub retpoline: bool,
    pub rsb_refill_on_kernel_entry: bool,
    pub rsb_refill_on_enclave_entry: bool,
    pub smep: bool,
    pub smap: bool,
    pub kpti: bool,
    pub meltdown_patched: bool,
}

/// One toggle of [`DefenseConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Defense {
    Lfence,
    Ibrs,
    Stibp,
    Ibpb,
    Retpoline,
    RsbRefill,
    RsbRefillEnclave,
    Smep,
    Smap,
    Kpti,
    MeltdownPatch,
}

impl Defense {
    pub const ALL: [Defense; 11] = [
        Defense::Lfence,
        Defense::Ibrs,
        Defense::Stibp,
        Defense::Ibpb,
        Defense::Retpoline,
        Defense::RsbRefill,
        Defense::RsbRefillEnclave,
        Defense::Smep,
        Defense::Smap,
        Defense::Kpti,
        Defense::MeltdownPatch,
    ];

    /// Name used on the command line.
    pub fn flag(self) -> &'static str {
        match self {
            Defense::Lfence => "lfence",
            Defense::Ibrs => "ibrs",
            Defense::Stibp => "stibp",
            Defense::Ibpb => "ibpb",
            Defense::Retpoline => "retpoline",
            Defense::RsbRefill => "rsb-refill",
            Defense::RsbRefillEnclave => "rsb-refill-enclave",
            Defense::Smep => "smep",
            Defense::Smap => "smap",
            Defense::Kpti => "kpti",
            Defense::MeltdownPatch => "meltdown-patch",
        }
    }

    /// Name of the corresponding config-file key.
    pub fn key(self) -> &'static str {
        match self {
            Defense::Lfence => "lfence_pass",
            Defense::Ibrs => "ibrs",
            Defense::Stibp => "stibp",
            Defense::Ibpb => "ibpb_on_switch",
            Defense::Retpoline => "retpoline",
            Defense::RsbRefill => "rsb_refill_on_kernel_entry",
            Defense::RsbRefillEnclave => "rsb_refill_on_enclave_entry",
            Defense::Smep => "smep",
            Defense::Smap => "smap",
            Defense::Kpti => "kpti",
            Defense::MeltdownPatch => "meltdown_patched",
        }
    }

    pub fn from_key(key: &str) -> Option<Defense> {
        Defense::ALL.into_iter().find(|d| d.key() == key)
    }
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown defense `{0}`")]
pub struct UnknownDefense(pub String);

impl FromStr for Defense {
    type Err = UnknownDefense;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Defense::ALL
            .into_iter()
            .find(|d| d.flag() == s || d.key() == s)
            .ok_or_else(|| UnknownDefense(s.to_string()))
    }
}

impl DefenseConfig {
    pub fn none() -> Self {
        Self::default()
    }

    /// Everything on except refilling on enclave entry, which no shipping
    /// part implements.
    pub fn fully_patched() -> Self {
        let mut cfg = Self::all();
        cfg.rsb_refill_on_enclave_entry = false;
        cfg
    }

    pub fn all() -> Self {
        let mut cfg = Self::none();
        for d in Defense::ALL {
            cfg.set(d, true);
        }
        cfg
    }

    /// Older server part: kernel and microcode patches, no RSB refilling.
    pub fn xeon() -> Self {
        DefenseConfig {
            ibrs: true,
            stibp: true,
            ibpb_on_switch: true,
            retpoline: true,
            kpti: true,
            ..Self::none()
        }
    }

    /// Skylake client part: as [`DefenseConfig::xeon`] plus RSB refilling.
    pub fn skylake() -> Self {
        DefenseConfig {
            rsb_refill_on_kernel_entry: true,
            ..Self::xeon()
        }
    }

    pub fn get(&self, d: Defense) -> bool {
        match d {
            Defense::Lfence => self.lfence_pass,
            Defense::Ibrs => self.ibrs,
            Defense::Stibp => self.stibp,
            Defense::Ibpb => self.ibpb_on_switch,
            Defense::Retpoline => self.retpoline,
            Defense::RsbRefill => self.rsb_refill_on_kernel_entry,
            Defense::RsbRefillEnclave => self.rsb_refill_on_enclave_entry,
            Defense::Smep => self.smep,
            Defense::Smap => self.smap,
            Defense::Kpti => self.kpti,
            Defense::MeltdownPatch => self.meltdown_patched,
        }
    }

    pub fn set(&mut self, d: Defense, on: bool) {
        let slot = match d {
            Defense::Lfence => &mut self.lfence_pass,
            Defense::Ibrs => &mut self.ibrs,
            Defense::Stibp => &mut self.stibp,
            Defense::Ibpb => &mut self.ibpb_on_switch,
            Defense::Retpoline => &mut self.retpoline,
            Defense::RsbRefill => &mut self.rsb_refill_on_kernel_entry,
            Defense::RsbRefillEnclave => &mut self.rsb_refill_on_enclave_entry,
            Defense::Smep => &mut self.smep,
            Defense::Smap => &mut self.smap,
            Defense::Kpti => &mut self.kpti,
            Defense::MeltdownPatch => &mut self.meltdown_patched,
        };
        *slot = on;
    }

    pub fn with(mut self, d: Defense) -> Self {
        self.set(d, true);
        self
    }

    pub fn enabled(&self) -> Vec<Defense> {
        Defense::ALL.into_iter().filter(|&d| self.get(d)).collect()
    }

    /// Bit `i` set iff `Defense::ALL[i]` is enabled.
    pub fn bits(&self) -> u16 {
        Defense::ALL
            .iter()
            .enumerate()
            .filter(|(_, &d)| self.get(d))
            .fold(0, |acc, (i, _)| acc | (1 << i))
    }

    pub fn from_bits(bits: u16) -> Self {
        let mut cfg = Self::none();
        for (i, &d) in Defense::ALL.iter().enumerate() {
            cfg.set(d, bits & (1 << i) != 0);
        }
        cfg
    }

    /// Parses a comma separated flag list such as `lfence,smep`.
    pub fn parse_flags(list: &str) -> Result<Vec<Defense>, UnknownDefense> {
        list.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect()
    }
}

/// Inserts an `lfence` at both successors of every conditional branch.
/// Returns are left alone.
pub fn apply_lfence_pass(image: &ProgramImage) -> ProgramImage {
    let mut fenced: BTreeSet<Addr> = BTreeSet::new();
    for (addr, ins) in image.iter() {
        if let Op::Jz(t) | Op::Jnz(t) = ins.op {
            if image.contains_code(addr + 1) {
                fenced.insert(addr + 1);
            }
            if image.contains_code(t) {
                fenced.insert(t);
            }
        }
    }

    let mut map = BTreeMap::new();
    let mut next = image.base;
    for (addr, _) in image.iter() {
        map.insert(addr, next);
        next += if fenced.contains(&addr) { 2 } else { 1 };
    }
    map.insert(image.end(), next);

    let reloc = |a: Addr| map.get(&a).copied().unwrap_or(a);
    let mut instructions = Vec::with_capacity(image.len() + fenced.len());
    for (addr, ins) in image.iter() {
        if fenced.contains(&addr) {
            instructions.push(Instruction::new(Op::Lfence));
        }
        instructions.push(Instruction {
            op: ins.op.relocate(reloc),
            span: ins.span,
        });
    }
    rebuild(image, instructions, reloc, BTreeMap::new())
}

/// Replaces every indirect `jmp r` / `call r` with a return trampoline whose
/// RSB entry points at a capture loop.
///
/// `jmp r` becomes
/// ```text
///     call RT
/// cap: jmp cap
/// RT: store [r15], r
///     ret
/// ```
/// and `call r` wraps the same thunk in a direct call so the callee still
/// returns to the instruction after the original call. `r15` itself cannot
/// be the branch register.
pub fn apply_retpoline(image: &ProgramImage) -> ProgramImage {
    let expansion = |op: &Op| match op {
        Op::Jmp(Target::Indirect(_)) => 4,
        Op::Call(Target::Indirect(_)) => 6,
        _ => 1,
    };
    let mut map = BTreeMap::new();
    let mut next = image.base;
    for (addr, ins) in image.iter() {
        map.insert(addr, next);
        next += expansion(&ins.op);
    }
    map.insert(image.end(), next);
    let reloc = |a: Addr| map.get(&a).copied().unwrap_or(a);

    let mut instructions = Vec::new();
    let mut extra_labels = BTreeMap::new();
    for (n, (addr, ins)) in image.iter().enumerate() {
        let at = map[&addr];
        let span = ins.span;
        let mut emit = |op: Op| instructions.push(Instruction { op, span });
        let thunk = |start: Addr, reg: Reg, emit: &mut dyn FnMut(Op)| {
            let capture = start + 1;
            let setup = start + 2;
            emit(Op::Call(Target::Direct(setup)));
            emit(Op::Jmp(Target::Direct(capture)));
            emit(Op::Store(Mem::reg(Reg::SP), reg));
            emit(Op::Ret);
            (capture, setup)
        };
        match ins.op {
            Op::Jmp(Target::Indirect(r)) => {
                let (cap, setup) = thunk(at, r, &mut emit);
                extra_labels.insert(format!("__retpoline_capture_{n}"), cap);
                extra_labels.insert(format!("__retpoline_target_{n}"), setup);
            }
            Op::Call(Target::Indirect(r)) => {
                let after = at + 6;
                emit(Op::Call(Target::Direct(at + 2)));
                emit(Op::Jmp(Target::Direct(after)));
                let (cap, setup) = thunk(at + 2, r, &mut emit);
                extra_labels.insert(format!("__retpoline_thunk_{n}"), at + 2);
                extra_labels.insert(format!("__retpoline_capture_{n}"), cap);
                extra_labels.insert(format!("__retpoline_target_{n}"), setup);
            }
            op => emit(op.relocate(reloc)),
        }
    }
    rebuild(image, instructions, reloc, extra_labels)
}

fn rebuild(
    image: &ProgramImage,
    instructions: Vec<Instruction>,
    reloc: impl Fn(Addr) -> Addr,
    extra_labels: BTreeMap<String, Addr>,
) -> ProgramImage {
    let in_code = |a: Addr| (image.base..=image.end()).contains(&a);
    let mut labels: BTreeMap<String, Addr> = image
        .labels
        .iter()
        .map(|(k, &a)| (k.clone(), if in_code(a) { reloc(a) } else { a }))
        .collect();
    for (k, a) in extra_labels {
        labels.entry(k).or_insert(a);
    }
    ProgramImage {
        base: image.base,
        instructions,
        labels,
        externs: image.externs.clone(),
        data: image.data.clone(),
        entry: reloc(image.entry),
    }
}

/// Applies whichever code transforms `cfg` enables.
pub fn harden(image: &ProgramImage, cfg: &DefenseConfig) -> ProgramImage {
    let mut out = image.clone();
    if cfg.retpoline {
        out = apply_retpoline(&out);
    }
    if cfg.lfence_pass {
        out = apply_lfence_pass(&out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    KernelEntry,
    EnclaveEntry,
    /// Thread switch; always modeled as a pass through the kernel.
    ContextSwitch {
        to: ContextId,
    },
}

/// Fires RSB refilling and the indirect branch barrier as configured.
pub fn on_privilege_transition(machine: &mut Machine, kind: Transition) {
    let cfg = machine.defenses;
    let refill = match kind {
        Transition::KernelEntry | Transition::ContextSwitch { .. } => {
            cfg.rsb_refill_on_kernel_entry
        }
        Transition::EnclaveEntry => cfg.rsb_refill_on_enclave_entry,
    };
    if refill {
        machine.rsb.refill(BENIGN_GADGET);
        machine.record(
            TraceKind::Refill,
            format!("rsb <- {BENIGN_GADGET:#x} x{}", machine.rsb.capacity()),
        );
    }
    if let Transition::ContextSwitch { to } = kind {
        if cfg.ibpb_on_switch {
            machine.btb.barrier(to);
            machine.record(
                TraceKind::Refill,
                format!("ibpb barrier, survivor ctx{}", to.0),
            );
        }
    }
}
