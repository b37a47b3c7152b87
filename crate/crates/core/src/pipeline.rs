//! In-order commit with speculative windows.
//!
//! Committed instructions update architectural state immediately; loads
//! are non-blocking and tracked with a per-register ready-time scoreboard.
//! A mispredicted return or branch runs a transient window from the
//! predicted target against copies of the register file until the true
//! target resolves, then discards everything except cache and RSB effects.

use std::fmt;
use std::str::FromStr;

use crate::defenses::{on_privilege_transition, Transition};
use crate::isa::{format_op, Addr, Mem, Op, Reg, Src, Target};
use crate::machine::{
    Access, AddressSpaceId, ArchSnapshot, ContextId, ContextStatus, FaultKind, Frame, Machine,
    MachineError, Mode,
};
use crate::predictors::{Owner, Prediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceKind {
    Commit,
    SpecIssue,
    SpecSquash,
    SpecCommit,
    RsbPush,
    RsbPop,
    Refill,
    CacheFill,
    CacheFlush,
    CtxSwitch,
    ModeSwitch,
}

impl TraceKind {
    pub const ALL: [TraceKind; 11] = [
        TraceKind::Commit,
        TraceKind::SpecIssue,
        TraceKind::SpecSquash,
        TraceKind::SpecCommit,
        TraceKind::RsbPush,
        TraceKind::RsbPop,
        TraceKind::Refill,
        TraceKind::CacheFill,
        TraceKind::CacheFlush,
        TraceKind::CtxSwitch,
        TraceKind::ModeSwitch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Commit => "commit",
            TraceKind::SpecIssue => "spec_issue",
            TraceKind::SpecSquash => "spec_squash",
            TraceKind::SpecCommit => "spec_commit",
            TraceKind::RsbPush => "rsb_push",
            TraceKind::RsbPop => "rsb_pop",
            TraceKind::Refill => "refill",
            TraceKind::CacheFill => "cache_fill",
            TraceKind::CacheFlush => "cache_flush",
            TraceKind::CtxSwitch => "ctx_switch",
            TraceKind::ModeSwitch => "mode_switch",
        }
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TraceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TraceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown trace kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub cycle: u64,
    pub ctx: ContextId,
    pub pc: Addr,
    pub mode: Mode,
    pub kind: TraceKind,
    pub detail: String,
}

impl TraceEvent {
    /// `cycle ctx pc kind detail`, tab separated. The mode leads the detail.
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{:#x}\t{}\tmode={} {}",
            self.cycle, self.ctx, self.pc, self.kind, self.mode, self.detail
        )
    }

    pub fn parse_tsv(line: &str) -> Option<TraceEvent> {
        let mut f = line.splitn(5, '\t');
        let cycle = f.next()?.parse().ok()?;
        let ctx = ContextId(f.next()?.parse().ok()?);
        let pc = u64::from_str_radix(f.next()?.strip_prefix("0x")?, 16).ok()?;
        let kind = f.next()?.parse().ok()?;
        let rest = f.next()?.strip_prefix("mode=")?;
        let (mode, detail) = rest.split_once(' ').unwrap_or((rest, ""));
        let mode = match mode {
            "user" => Mode::User,
            "kernel" => Mode::Kernel,
            "enclave" => Mode::Enclave,
            _ => return None,
        };
        Some(TraceEvent {
            cycle,
            ctx,
            pc,
            mode,
            kind,
            detail: detail.to_string(),
        })
    }

    /// Effective address of a committed load or store, if recorded.
    pub fn mem_addr(&self) -> Option<Addr> {
        let v = self
            .detail
            .split_whitespace()
            .find_map(|w| w.strip_prefix("addr="))?;
        u64::from_str_radix(v.strip_prefix("0x")?, 16).ok()
    }
}

pub fn trace_to_tsv(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_tsv());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameCause {
    Return,
    CondBranch,
    IndirectBranch,
}

/// Where a control-flow prediction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictionSource {
    Rsb,
    Btb,
    Direction,
    /// No prediction: fetch stalled until the target resolved.
    Stall,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub regs: [u64; Reg::COUNT],
    pub zf: bool,
    pub pc: Addr,
}

/// State of one open speculation window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecFrame {
    pub cause: FrameCause,
    pub predicted_pc: Addr,
    pub checkpoint: Checkpoint,
    pub store_buffer: Vec<(Addr, u8)>,
    pub resolve_at: u64,
    pub transient_count: usize,
    pub suppressed_fault: Option<(Addr, FaultKind)>,
}

/// One resolved return or branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchRecord {
    pub ctx: ContextId,
    pub pc: Addr,
    pub mode: Mode,
    pub cause: FrameCause,
    pub source: PredictionSource,
    pub predicted: Option<Addr>,
    pub actual: Addr,
    pub opened_at: u64,
    pub resolve_at: u64,
    /// Instructions issued in the transient window; zero unless squashed.
    pub transient_count: usize,
    pub squashed: bool,
    pub suppressed_fault: Option<(Addr, FaultKind)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltReason {
    Halt,
    MaxCycles,
    Fault(FaultKind),
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub halt_reason: HaltReason,
    pub cycles: u64,
    pub trace: Vec<TraceEvent>,
    pub final_snapshot: ArchSnapshot,
    pub branches: Vec<BranchRecord>,
}

impl RunResult {
    pub fn squashed(&self) -> impl Iterator<Item = &BranchRecord> {
        self.branches.iter().filter(|b| b.squashed)
    }
}

enum Step {
    Continue,
    Yield,
    Halt,
    Fault(FaultKind),
}

/// Runs the schedule round-robin until every scheduled context has halted.
/// A slice ends after `budget` committed instructions or at `yield`.
pub fn run(
    m: &mut Machine,
    schedule: &[(ContextId, u64)],
    max_cycles: u64,
) -> Result<RunResult, MachineError> {
    for &(id, _) in schedule {
        m.context(id)?;
    }
    if m.speculating {
        return Err(MachineError::Speculating);
    }
    let start = m.clock;
    let mut branches = Vec::new();
    let halt_reason = 'run: loop {
        let mut ran = false;
        for &(id, budget) in schedule {
            if !m.contexts[id.0].is_runnable() {
                continue;
            }
            if m.current != id {
                m.context_switch(id)?;
            }
            ran = true;
            for _ in 0..budget.max(1) {
                if m.clock - start >= max_cycles {
                    break 'run HaltReason::MaxCycles;
                }
                match step(m, &mut branches) {
                    Step::Continue => {}
                    Step::Yield | Step::Halt => break,
                    Step::Fault(f) => break 'run HaltReason::Fault(f),
                }
            }
        }
        if !ran {
            break HaltReason::Halt;
        }
    };
    Ok(RunResult {
        halt_reason,
        cycles: m.clock - start,
        trace: std::mem::take(&mut m.trace),
        final_snapshot: m.snapshot_arch_state()?,
        branches,
    })
}

/// Runs the same schedule on a copy of `m` with speculation disabled and a
/// flat one-cycle memory. Its snapshot is the architectural ground truth.
pub fn reference_run(
    m: &Machine,
    schedule: &[(ContextId, u64)],
    max_cycles: u64,
) -> Result<RunResult, MachineError> {
    let mut r = m.clone();
    r.reference = true;
    run(&mut r, schedule, max_cycles)
}

fn emit(
    m: &mut Machine,
    cycle: u64,
    pc: Addr,
    mode: Mode,
    kind: TraceKind,
    detail: impl FnOnce() -> String,
) {
    if m.tracing {
        let ctx = m.current;
        m.trace.push(crate::pipeline::TraceEvent {
            cycle,
            ctx,
            pc,
            mode,
            kind,
            detail: detail(),
        });
    }
}

fn src_val(regs: &[u64; Reg::COUNT], s: Src) -> u64 {
    match s {
        Src::Reg(r) => regs[r.index()],
        Src::Imm(v) => v as u64,
        Src::Label(a) => a,
    }
}

fn src_ready(ready: &[u64; Reg::COUNT], s: Src) -> u64 {
    match s {
        Src::Reg(r) => ready[r.index()],
        _ => 0,
    }
}

fn base_ready(ready: &[u64; Reg::COUNT], mem: Mem) -> u64 {
    mem.base.map_or(0, |r| ready[r.index()])
}

fn effective(regs: &[u64; Reg::COUNT], mem: Mem) -> Addr {
    let b = mem.base.map_or(0, |r| regs[r.index()]);
    b.wrapping_add(mem.disp as u64)
}

/// Result of an ALU op, or `None` when `op` is not one.
fn alu(op: Op, regs: &[u64; Reg::COUNT]) -> Option<(Reg, u64, Src)> {
    Some(match op {
        Op::Mov(r, s) => (r, src_val(regs, s), s),
        Op::Add(r, s) => (r, regs[r.index()].wrapping_add(src_val(regs, s)), s),
        Op::Sub(r, s) => (r, regs[r.index()].wrapping_sub(src_val(regs, s)), s),
        Op::And(r, s) => (r, regs[r.index()] & src_val(regs, s), s),
        Op::Shl(r, s) => (r, regs[r.index()] << (src_val(regs, s) & 63), s),
        _ => return None,
    })
}

fn read_raw(m: &Machine, space: AddressSpaceId, addr: Addr) -> u64 {
    let mut b = [0u8; 8];
    for (i, byte) in b.iter_mut().enumerate() {
        let a = addr.wrapping_add(i as u64);
        *byte = m.page_in(space, a).map_or(0, |p| m.page_byte(p, a));
    }
    u64::from_le_bytes(b)
}

/// Committed permission check covering both ends of an 8-byte access.
fn check(
    m: &Machine,
    mode: Mode,
    space: AddressSpaceId,
    addr: Addr,
    write: bool,
) -> Result<usize, FaultKind> {
    let mut first = None;
    for a in [addr, addr.wrapping_add(7)] {
        match m.data_access(mode, space, a, write) {
            Access::Allowed(p) => {
                first.get_or_insert(p);
            }
            Access::Privileged(_, f) | Access::Denied(f) => return Err(f),
        }
    }
    Ok(first.expect("checked"))
}

/// Cache access for a committed or transient memory operation. Returns the
/// latency; misses are traced as fills.
fn touch(m: &mut Machine, page: usize, addr: Addr, cycle: u64, pc: Addr, mode: Mode) -> u64 {
    if m.reference {
        return 1;
    }
    let pa = m.phys_of(page, addr);
    let r = m.cache.access(pa, &m.timing, &mut m.rng);
    if !r.hit {
        emit(m, cycle, pc, mode, TraceKind::CacheFill, || {
            format!("addr={addr:#x} pa={pa:#x}")
        });
    }
    r.latency
}

fn fault(m: &mut Machine, f: FaultKind) -> Step {
    let c = &mut m.contexts[m.current.0];
    c.status = ContextStatus::Faulted(f);
    let (pc, mode) = (c.pc, c.mode);
    let t = m.clock;
    emit(m, t, pc, mode, TraceKind::Commit, || format!("fault {f}"));
    Step::Fault(f)
}

fn all_ready(m: &Machine) -> u64 {
    let c = &m.contexts[m.current.0];
    c.ready
        .iter()
        .copied()
        .max()
        .unwrap_or(0)
        .max(c.flags_ready)
}

fn write_word(m: &mut Machine, space: AddressSpaceId, addr: Addr, v: u64) {
    // permissions were checked by the caller
    let _ = m.write_bytes(space, addr, &v.to_le_bytes());
}

fn step(m: &mut Machine, branches: &mut Vec<BranchRecord>) -> Step {
    let id = m.current;
    let (pc, mode, space) = {
        let c = &m.contexts[id.0];
        (c.pc, c.mode, c.space)
    };
    let ins = match m.exec_access(mode, space, pc) {
        Ok(i) => i,
        Err(f) => return fault(m, f),
    };
    let op = ins.op;
    let t = m.clock;
    let owner = Owner { context: id, mode };
    let sp = Reg::SP.index();

    if let Some((r, v, s)) = alu(op, &m.contexts[id.0].regs) {
        emit(m, t, pc, mode, TraceKind::Commit, || format_op(&op, None));
        let c = &mut m.contexts[id.0];
        let rd = c.ready[r.index()].max(src_ready(&c.ready, s)).max(t) + 1;
        c.regs[r.index()] = v;
        c.ready[r.index()] = if matches!(op, Op::Mov(..)) {
            src_ready(&c.ready, s).max(t) + 1
        } else {
            rd
        };
        c.pc = pc + 1;
        m.clock = t + 1;
        return Step::Continue;
    }

    match op {
        Op::Cmp(r, s) => {
            emit(m, t, pc, mode, TraceKind::Commit, || format_op(&op, None));
            let c = &mut m.contexts[id.0];
            c.zf = c.regs[r.index()] == src_val(&c.regs, s);
            c.flags_ready = c.ready[r.index()].max(src_ready(&c.ready, s)).max(t) + 1;
            c.pc = pc + 1;
            m.clock = t + 1;
        }
        Op::Load(r, _) | Op::Pop(r) => {
            let (mem, is_pop) = match op {
                Op::Load(_, mem) => (mem, false),
                _ => (Mem::reg(Reg::SP), true),
            };
            let c = &m.contexts[id.0];
            let ti = t.max(base_ready(&c.ready, mem));
            let addr = effective(&c.regs, mem);
            let page = match check(m, mode, space, addr, false) {
                Ok(p) => p,
                Err(f) => return fault(m, f),
            };
            let v = read_raw(m, space, addr);
            emit(m, ti, pc, mode, TraceKind::Commit, || {
                format!("{} addr={addr:#x}", format_op(&op, None))
            });
            let lat = touch(m, page, addr, ti, pc, mode);
            let c = &mut m.contexts[id.0];
            if is_pop {
                c.regs[sp] = c.regs[sp].wrapping_add(8);
            }
            c.regs[r.index()] = v;
            c.ready[r.index()] = ti + lat;
            c.pc = pc + 1;
            m.clock = ti + 1;
        }
        Op::Store(_, r) | Op::Push(r) => {
            let c = &m.contexts[id.0];
            let (addr, ti) = match op {
                Op::Store(mem, _) => (
                    effective(&c.regs, mem),
                    t.max(base_ready(&c.ready, mem)).max(c.ready[r.index()]),
                ),
                _ => (
                    c.regs[sp].wrapping_sub(8),
                    t.max(c.ready[sp]).max(c.ready[r.index()]),
                ),
            };
            let v = c.regs[r.index()];
            let page = match check(m, mode, space, addr, true) {
                Ok(p) => p,
                Err(f) => return fault(m, f),
            };
            emit(m, ti, pc, mode, TraceKind::Commit, || {
                format!("{} addr={addr:#x}", format_op(&op, None))
            });
            write_word(m, space, addr, v);
            touch(m, page, addr, ti, pc, mode);
            let c = &mut m.contexts[id.0];
            if matches!(op, Op::Push(_)) {
                c.regs[sp] = addr;
            }
            c.pc = pc + 1;
            m.clock = ti + 1;
        }
        Op::Jz(target) | Op::Jnz(target) => {
            let c = &m.contexts[id.0];
            let taken = c.zf == matches!(op, Op::Jz(_));
            let actual = if taken { target } else { pc + 1 };
            let resolve_at = if c.flags_ready > t {
                c.flags_ready
            } else {
                t + 3
            };
            emit(m, t, pc, mode, TraceKind::Commit, || format_op(&op, None));
            m.contexts[id.0].pc = actual;
            if m.reference {
                m.clock = t + 1;
                return Step::Continue;
            }
            let predicted = if m.dirpred.predict(pc) {
                target
            } else {
                pc + 1
            };
            m.dirpred.train(pc, taken);
            resolve(
                m,
                branches,
                Resolve {
                    pc,
                    mode,
                    cause: FrameCause::CondBranch,
                    source: PredictionSource::Direction,
                    predicted: Some(predicted),
                    actual,
                    t,
                    resolve_at,
                },
            );
        }
        Op::Jmp(Target::Direct(a)) => {
            emit(m, t, pc, mode, TraceKind::Commit, || format_op(&op, None));
            m.contexts[id.0].pc = a;
            m.clock = t + 1;
        }
        Op::Call(target) => {
            let c = &m.contexts[id.0];
            let ti = t.max(c.ready[sp]);
            let slot = c.regs[sp].wrapping_sub(8);
            let page = match check(m, mode, space, slot, true) {
                Ok(p) => p,
                Err(f) => return fault(m, f),
            };
            emit(m, ti, pc, mode, TraceKind::Commit, || {
                format!("{} addr={slot:#x}", format_op(&op, None))
            });
            write_word(m, space, slot, pc + 1);
            touch(m, page, slot, ti, pc, mode);
            m.contexts[id.0].regs[sp] = slot;
            if !m.reference {
                m.rsb.push(pc + 1);
                emit(m, ti, pc, mode, TraceKind::RsbPush, || {
                    format!("{:#x}", pc + 1)
                });
            }
            match target {
                Target::Direct(a) => {
                    m.contexts[id.0].pc = a;
                    m.clock = ti + 1;
                }
                Target::Indirect(r) => indirect(m, branches, pc, mode, owner, r, ti),
            }
        }
        Op::Jmp(Target::Indirect(r)) => {
            emit(m, t, pc, mode, TraceKind::Commit, || format_op(&op, None));
            indirect(m, branches, pc, mode, owner, r, t);
        }
        Op::Ret => {
            let c = &m.contexts[id.0];
            let ti = t.max(c.ready[sp]);
            let slot = c.regs[sp];
            let page = match check(m, mode, space, slot, false) {
                Ok(p) => p,
                Err(f) => return fault(m, f),
            };
            let actual = read_raw(m, space, slot);
            emit(m, ti, pc, mode, TraceKind::Commit, || {
                format!("ret addr={slot:#x}")
            });
            let lat = touch(m, page, slot, ti, pc, mode);
            let c = &mut m.contexts[id.0];
            c.regs[sp] = slot.wrapping_add(8);
            c.pc = actual;
            let resolve_at = ti + lat;
            if m.reference {
                m.clock = resolve_at;
                return Step::Continue;
            }
            let (source, predicted) = match m.rsb.predict_pop() {
                Prediction::Address(a) => (PredictionSource::Rsb, Some(a)),
                Prediction::FallbackIndirect => {
                    let p = m.btb.lookup(pc, owner, &m.defenses);
                    m.btb.train(pc, actual, owner);
                    match p {
                        Some(a) => (PredictionSource::Btb, Some(a)),
                        None => (PredictionSource::Stall, None),
                    }
                }
                Prediction::NoPrediction => (PredictionSource::Stall, None),
            };
            emit(m, ti, pc, mode, TraceKind::RsbPop, || {
                match (source, predicted) {
                    (PredictionSource::Rsb, Some(a)) => format!("{a:#x}"),
                    (PredictionSource::Btb, Some(a)) => format!("underfill btb {a:#x}"),
                    _ => "underfill none".to_string(),
                }
            });
            resolve(
                m,
                branches,
                Resolve {
                    pc,
                    mode,
                    cause: FrameCause::Return,
                    source,
                    predicted,
                    actual,
                    t: ti,
                    resolve_at,
                },
            );
        }
        Op::Clflush(mem) => {
            let c = &m.contexts[id.0];
            let ti = t.max(base_ready(&c.ready, mem));
            let addr = effective(&c.regs, mem);
            emit(m, ti, pc, mode, TraceKind::Commit, || {
                format!("{} addr={addr:#x}", format_op(&op, None))
            });
            if let Some(p) = m.flushable(mode, space, addr) {
                if !m.reference {
                    let pa = m.phys_of(p, addr);
                    m.cache.flush_line(pa);
                    emit(m, ti, pc, mode, TraceKind::CacheFlush, || {
                        format!("addr={addr:#x}")
                    });
                }
            }
            m.contexts[id.0].pc = pc + 1;
            m.clock = ti + 1;
        }
        Op::Rdtscp(r) => {
            let ti = t.max(all_ready(m));
            emit(m, ti, pc, mode, TraceKind::Commit, || format_op(&op, None));
            let c = &mut m.contexts[id.0];
            c.regs[r.index()] = ti;
            c.ready[r.index()] = ti + 1;
            c.pc = pc + 1;
            m.clock = ti + 1;
        }
        Op::Lfence | Op::Cpuid | Op::Nop => {
            let ti = if matches!(op, Op::Nop) {
                t
            } else {
                t.max(all_ready(m))
            };
            emit(m, ti, pc, mode, TraceKind::Commit, || format_op(&op, None));
            m.contexts[id.0].pc = pc + 1;
            m.clock = ti + 1;
        }
        Op::Syscall(n) => {
            if mode != Mode::User {
                return fault(m, FaultKind::BadTransition);
            }
            let Some(&handler) = m.syscalls.get(&n) else {
                return fault(m, FaultKind::UnknownSyscall(n));
            };
            let ti = t.max(all_ready(m));
            emit(m, ti, pc, mode, TraceKind::Commit, || format_op(&op, None));
            let c = &mut m.contexts[id.0];
            c.saved.push(Frame {
                mode,
                pc: pc + 1,
                sp: c.regs[sp],
            });
            c.mode = Mode::Kernel;
            c.regs[sp] = c.kernel_sp;
            c.pc = handler;
            m.clock = ti + 1;
            emit(
                m,
                ti + 1,
                handler,
                Mode::Kernel,
                TraceKind::ModeSwitch,
                || format!("user -> kernel syscall {n}"),
            );
            on_privilege_transition(m, Transition::KernelEntry);
        }
        Op::Eenter(entry) => {
            let Some(esp) = m.contexts[id.0].enclave_sp.filter(|_| mode == Mode::User) else {
                return fault(m, FaultKind::BadTransition);
            };
            let ti = t.max(all_ready(m));
            emit(m, ti, pc, mode, TraceKind::Commit, || format_op(&op, None));
            let c = &mut m.contexts[id.0];
            c.saved.push(Frame {
                mode,
                pc: pc + 1,
                sp: c.regs[sp],
            });
            c.mode = Mode::Enclave;
            c.regs[sp] = esp;
            c.pc = entry;
            m.clock = ti + 1;
            emit(
                m,
                ti + 1,
                entry,
                Mode::Enclave,
                TraceKind::ModeSwitch,
                || "user -> enclave".to_string(),
            );
            on_privilege_transition(m, Transition::EnclaveEntry);
        }
        Op::Sysret | Op::Eexit => {
            let from = if matches!(op, Op::Sysret) {
                Mode::Kernel
            } else {
                Mode::Enclave
            };
            let ok = mode == from
                && m.contexts[id.0]
                    .saved
                    .last()
                    .is_some_and(|f| f.mode == Mode::User);
            if !ok {
                return fault(m, FaultKind::BadTransition);
            }
            let ti = t.max(all_ready(m));
            emit(m, ti, pc, mode, TraceKind::Commit, || format_op(&op, None));
            let c = &mut m.contexts[id.0];
            let f = c.saved.pop().expect("checked");
            c.mode = f.mode;
            c.regs[sp] = f.sp;
            c.pc = f.pc;
            m.clock = ti + 1;
            emit(m, ti + 1, f.pc, f.mode, TraceKind::ModeSwitch, || {
                format!("{from} -> {}", f.mode)
            });
        }
        Op::Yield => {
            emit(m, t, pc, mode, TraceKind::Commit, || "yield".to_string());
            m.contexts[id.0].pc = pc + 1;
            m.clock = t + 1;
            return Step::Yield;
        }
        Op::Halt => {
            emit(m, t, pc, mode, TraceKind::Commit, || "halt".to_string());
            m.contexts[id.0].status = ContextStatus::Halted;
            m.clock = t + 1;
            return Step::Halt;
        }
        Op::Mov(..) | Op::Add(..) | Op::Sub(..) | Op::And(..) | Op::Shl(..) => {
            unreachable!("handled by alu")
        }
    }
    Step::Continue
}

fn indirect(
    m: &mut Machine,
    branches: &mut Vec<BranchRecord>,
    pc: Addr,
    mode: Mode,
    owner: Owner,
    r: Reg,
    t: u64,
) {
    let c = &mut m.contexts[m.current.0];
    let actual = c.regs[r.index()];
    let ready = c.ready[r.index()];
    c.pc = actual;
    let resolve_at = if ready > t { ready } else { t + 3 };
    if m.reference {
        m.clock = t + 1;
        return;
    }
    let predicted = m.btb.lookup(pc, owner, &m.defenses);
    m.btb.train(pc, actual, owner);
    let source = if predicted.is_some() {
        PredictionSource::Btb
    } else {
        PredictionSource::Stall
    };
    resolve(
        m,
        branches,
        Resolve {
            pc,
            mode,
            cause: FrameCause::IndirectBranch,
            source,
            predicted,
            actual,
            t,
            resolve_at,
        },
    );
}

struct Resolve {
    pc: Addr,
    mode: Mode,
    cause: FrameCause,
    source: PredictionSource,
    predicted: Option<Addr>,
    actual: Addr,
    /// Issue cycle of the branch.
    t: u64,
    resolve_at: u64,
}

/// Compares prediction and outcome; a mismatch runs a transient window.
fn resolve(m: &mut Machine, branches: &mut Vec<BranchRecord>, r: Resolve) {
    let mut rec = BranchRecord {
        ctx: m.current,
        pc: r.pc,
        mode: r.mode,
        cause: r.cause,
        source: r.source,
        predicted: r.predicted,
        actual: r.actual,
        opened_at: r.t,
        resolve_at: r.resolve_at,
        transient_count: 0,
        squashed: false,
        suppressed_fault: None,
    };
    match r.predicted {
        Some(p) if p == r.actual => {
            emit(m, r.t, r.pc, r.mode, TraceKind::SpecCommit, || {
                format!("{p:#x}")
            });
            m.clock = r.t + 1;
        }
        Some(p) => {
            let frame = transient(m, r.cause, p, r.t, r.resolve_at);
            let end = r.resolve_at.max(r.t + 1);
            emit(m, end, r.pc, r.mode, TraceKind::SpecSquash, || {
                format!(
                    "predicted={p:#x} actual={:#x} issued={}",
                    r.actual, frame.transient_count
                )
            });
            m.clock = end;
            rec.transient_count = frame.transient_count;
            rec.squashed = true;
            rec.suppressed_fault = frame.suppressed_fault;
        }
        None => {
            m.clock = r.resolve_at.max(r.t + 1);
        }
    }
    branches.push(rec);
}

/// Local register state of a transient window.
struct Shadow {
    regs: [u64; Reg::COUNT],
    ready: [u64; Reg::COUNT],
    zf: bool,
    flags_ready: u64,
    pc: Addr,
}

fn forward(m: &Machine, frame: &SpecFrame, space: AddressSpaceId, addr: Addr) -> u64 {
    let mut b = read_raw(m, space, addr).to_le_bytes();
    for (i, byte) in b.iter_mut().enumerate() {
        let a = addr.wrapping_add(i as u64);
        if let Some(&(_, v)) = frame.store_buffer.iter().rev().find(|(x, _)| *x == a) {
            *byte = v;
        }
    }
    u64::from_le_bytes(b)
}

fn buffer_store(frame: &mut SpecFrame, addr: Addr, v: u64) {
    for (i, b) in v.to_le_bytes().into_iter().enumerate() {
        frame.store_buffer.push((addr.wrapping_add(i as u64), b));
    }
}

/// Transient data read: permission checks are deferred, so privileged data
/// comes back unless the Meltdown fix is in. Returns value and ready time.
fn transient_load(
    m: &mut Machine,
    frame: &mut SpecFrame,
    mode: Mode,
    space: AddressSpaceId,
    addr: Addr,
    tt: u64,
    pc: Addr,
) -> (u64, u64) {
    let page = match m.data_access(mode, space, addr, false) {
        Access::Allowed(p) => Some(p),
        Access::Privileged(p, f) => {
            frame.suppressed_fault.get_or_insert((pc, f));
            (!m.defenses.meltdown_patched).then_some(p)
        }
        Access::Denied(f) => {
            frame.suppressed_fault.get_or_insert((pc, f));
            None
        }
    };
    match page {
        Some(p) => {
            let v = forward(m, frame, space, addr);
            let lat = touch(m, p, addr, tt, pc, mode);
            (v, tt + lat)
        }
        None => (0, tt + 1),
    }
}

fn transient(
    m: &mut Machine,
    cause: FrameCause,
    predicted: Addr,
    t0: u64,
    resolve_at: u64,
) -> SpecFrame {
    let id = m.current;
    let c = &m.contexts[id.0];
    let (mode, space) = (c.mode, c.space);
    let owner = Owner { context: id, mode };
    let mut frame = SpecFrame {
        cause,
        predicted_pc: predicted,
        checkpoint: Checkpoint {
            regs: c.regs,
            zf: c.zf,
            pc: c.pc,
        },
        store_buffer: Vec::new(),
        resolve_at,
        transient_count: 0,
        suppressed_fault: None,
    };
    let mut s = Shadow {
        regs: c.regs,
        ready: c.ready,
        zf: c.zf,
        flags_ready: c.flags_ready,
        pc: predicted,
    };
    let rob_limit = m.config.rob_limit;
    let sp = Reg::SP.index();
    let mut t = t0 + 1;
    m.speculating = true;

    while frame.transient_count < rob_limit && t < resolve_at {
        let pc = s.pc;
        let op = match m.exec_access(mode, space, pc) {
            Ok(i) => i.op,
            Err(f) => {
                frame.suppressed_fault.get_or_insert((pc, f));
                break;
            }
        };
        // issue cycle once operands are available
        let tt = match op {
            Op::Load(_, mem) | Op::Clflush(mem) => t.max(base_ready(&s.ready, mem)),
            Op::Store(mem, r) => t.max(base_ready(&s.ready, mem)).max(s.ready[r.index()]),
            Op::Push(r) => t.max(s.ready[sp]).max(s.ready[r.index()]),
            Op::Pop(_) | Op::Ret | Op::Call(Target::Direct(_)) => t.max(s.ready[sp]),
            Op::Call(Target::Indirect(r)) => t.max(s.ready[sp]).max(s.ready[r.index()]),
            Op::Lfence
            | Op::Cpuid
            | Op::Syscall(_)
            | Op::Sysret
            | Op::Eenter(_)
            | Op::Eexit
            | Op::Yield
            | Op::Halt => break,
            _ => t,
        };
        if tt >= resolve_at {
            break;
        }
        emit(m, tt, pc, mode, TraceKind::SpecIssue, || {
            format_op(&op, None)
        });
        frame.transient_count += 1;
        let mut next = pc + 1;

        if let Some((r, v, src)) = alu(op, &s.regs) {
            let base = if matches!(op, Op::Mov(..)) {
                0
            } else {
                s.ready[r.index()]
            };
            s.ready[r.index()] = base.max(src_ready(&s.ready, src)).max(tt) + 1;
            s.regs[r.index()] = v;
        } else {
            match op {
                Op::Cmp(r, src) => {
                    s.zf = s.regs[r.index()] == src_val(&s.regs, src);
                    s.flags_ready = s.ready[r.index()].max(src_ready(&s.ready, src)).max(tt) + 1;
                }
                Op::Load(r, mem) => {
                    let addr = effective(&s.regs, mem);
                    let (v, ready) = transient_load(m, &mut frame, mode, space, addr, tt, pc);
                    s.regs[r.index()] = v;
                    s.ready[r.index()] = ready;
                }
                Op::Pop(r) => {
                    let addr = s.regs[sp];
                    let (v, ready) = transient_load(m, &mut frame, mode, space, addr, tt, pc);
                    s.regs[sp] = addr.wrapping_add(8);
                    s.regs[r.index()] = v;
                    s.ready[r.index()] = ready;
                }
                Op::Store(mem, r) => {
                    let addr = effective(&s.regs, mem);
                    match m.data_access(mode, space, addr, true) {
                        Access::Allowed(_) => buffer_store(&mut frame, addr, s.regs[r.index()]),
                        Access::Privileged(_, f) | Access::Denied(f) => {
                            frame.suppressed_fault.get_or_insert((pc, f));
                        }
                    }
                }
                Op::Push(r) => {
                    let addr = s.regs[sp].wrapping_sub(8);
                    buffer_store(&mut frame, addr, s.regs[r.index()]);
                    s.regs[sp] = addr;
                }
                Op::Call(target) => {
                    let addr = s.regs[sp].wrapping_sub(8);
                    buffer_store(&mut frame, addr, pc + 1);
                    s.regs[sp] = addr;
                    // survives the squash
                    m.rsb.push(pc + 1);
                    emit(m, tt, pc, mode, TraceKind::RsbPush, || {
                        format!("{:#x}", pc + 1)
                    });
                    next = match target {
                        Target::Direct(a) => a,
                        Target::Indirect(_) => match m.btb.lookup(pc, owner, &m.defenses) {
                            Some(a) => a,
                            None => break,
                        },
                    };
                }
                Op::Ret => {
                    s.regs[sp] = s.regs[sp].wrapping_add(8);
                    let p = match m.rsb.predict_pop() {
                        Prediction::Address(a) => Some(a),
                        Prediction::FallbackIndirect => m.btb.lookup(pc, owner, &m.defenses),
                        Prediction::NoPrediction => None,
                    };
                    emit(m, tt, pc, mode, TraceKind::RsbPop, || match p {
                        Some(a) => format!("{a:#x}"),
                        None => "underfill none".to_string(),
                    });
                    match p {
                        Some(a) => next = a,
                        None => break,
                    }
                }
                Op::Jz(a) | Op::Jnz(a) => {
                    if m.dirpred.predict(pc) {
                        next = a;
                    }
                }
                Op::Jmp(Target::Direct(a)) => next = a,
                Op::Jmp(Target::Indirect(_)) => match m.btb.lookup(pc, owner, &m.defenses) {
                    Some(a) => next = a,
                    None => break,
                },
                Op::Clflush(mem) => {
                    let addr = effective(&s.regs, mem);
                    if let Some(p) = m.flushable(mode, space, addr) {
                        let pa = m.phys_of(p, addr);
                        m.cache.flush_line(pa);
                        emit(m, tt, pc, mode, TraceKind::CacheFlush, || {
                            format!("addr={addr:#x}")
                        });
                    }
                }
                Op::Rdtscp(r) => {
                    s.regs[r.index()] = tt;
                    s.ready[r.index()] = tt + 1;
                }
                _ => {}
            }
        }
        s.pc = next;
        t = tt + 1;
    }

    m.speculating = false;
    frame
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::assemble;
    use crate::machine::{Domain, MachineConfig, Perms};

    const S0: AddressSpaceId = AddressSpaceId(0);

    fn machine_with(src: &str) -> (Machine, ContextId) {
        let mut m = Machine::new(MachineConfig::default()).unwrap();
        m.map_region(0x1000, 0x1000, Perms::RX, Domain::User, Some(S0))
            .unwrap();
        m.map_region(0x8000, 0x1000, Perms::RW, Domain::User, Some(S0))
            .unwrap();
        let img = assemble(src).unwrap();
        let id = m.spawn_context(&img, Mode::User, S0).unwrap();
        (m, id)
    }

    #[test]
    fn mov_halt() {
        let (mut m, id) = machine_with("mov r1, 7\nhalt");
        let r = run(&mut m, &[(id, 100)], 1000).unwrap();
        assert_eq!(r.halt_reason, HaltReason::Halt);
        assert_eq!(r.final_snapshot.contexts[0].regs[1], 7);
        assert!(r.trace.iter().all(|e| e.kind != TraceKind::SpecIssue));
    }

    #[test]
    fn committed_kernel_read_faults_in_both_runs() {
        let mut m = Machine::new(MachineConfig::default()).unwrap();
        m.map_region(0x1000, 0x1000, Perms::RX, Domain::User, Some(S0))
            .unwrap();
        m.map_region(0xFFFF_8000, 0x1000, Perms::RW, Domain::Kernel, None)
            .unwrap();
        let img = assemble("load r1, [0xFFFF8000]\nhalt").unwrap();
        let id = m.spawn_context(&img, Mode::User, S0).unwrap();
        let reference = reference_run(&m, &[(id, 10)], 1000).unwrap();
        let r = run(&mut m, &[(id, 10)], 1000).unwrap();
        assert_eq!(
            r.halt_reason,
            HaltReason::Fault(FaultKind::Privilege(0xFFFF_8000))
        );
        assert_eq!(reference.halt_reason, r.halt_reason);
        assert_eq!(reference.final_snapshot, r.final_snapshot);
    }

    #[test]
    fn infinite_loop_hits_max_cycles() {
        let (mut m, id) = machine_with("top: jmp top");
        let r = run(&mut m, &[(id, 10)], 500).unwrap();
        assert_eq!(r.halt_reason, HaltReason::MaxCycles);
    }

    const STALE: &str = "
        call outer
    after:
        halt
    outer:
        call gadget
    stale:
        mov r7, 1
        halt
    gadget:
        pop r9
        clflush [r15]
        ret
    ";

    #[test]
    fn squash_restores_registers() {
        let (mut m, id) = machine_with(STALE);
        let reference = reference_run(&m, &[(id, 100)], 10_000).unwrap();
        let r = run(&mut m, &[(id, 100)], 10_000).unwrap();
        assert_eq!(reference.final_snapshot, r.final_snapshot);
        let b: Vec<_> = r.squashed().collect();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].predicted, Some(0x1003));
        assert_eq!(b[0].actual, 0x1001);
        assert_eq!(b[0].transient_count, 1);
        assert_eq!(r.final_snapshot.contexts[0].regs[7], 0);
    }

    #[test]
    fn window_shrinks_with_cached_return_address() {
        let (mut m, id) = machine_with(STALE);
        let slow = run(&mut m, &[(id, 100)], 10_000).unwrap();
        let (mut m2, id2) = machine_with(&STALE.replace("clflush [r15]", "nop"));
        let fast = run(&mut m2, &[(id2, 100)], 10_000).unwrap();
        let slow_n =
            slow.squashed().next().unwrap().resolve_at - slow.squashed().next().unwrap().opened_at;
        let fast_n =
            fast.squashed().next().unwrap().resolve_at - fast.squashed().next().unwrap().opened_at;
        assert!(slow_n > fast_n);
    }

    #[test]
    fn transient_store_never_reaches_memory() {
        let src = "
            call outer
        after:
            halt
        outer:
            call gadget
            mov r3, 0x55
            store [0x8100], r3
            halt
        gadget:
            pop r9
            clflush [r15]
            ret
        ";
        let (mut m, id) = machine_with(src);
        let r = run(&mut m, &[(id, 100)], 10_000).unwrap();
        assert_eq!(r.squashed().next().unwrap().transient_count, 2);
        assert_eq!(m.read_word(S0, 0x8100).unwrap(), 0);
    }

    #[test]
    fn tsv_roundtrip() {
        let (mut m, id) = machine_with(STALE);
        let r = run(&mut m, &[(id, 100)], 10_000).unwrap();
        for e in &r.trace {
            assert_eq!(TraceEvent::parse_tsv(&e.to_tsv()).as_ref(), Some(e));
        }
        assert!(r.trace.windows(2).all(|w| w[0].cycle <= w[1].cycle));
    }
}
