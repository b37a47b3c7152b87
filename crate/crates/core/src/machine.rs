//! Architectural state: paged memory with permission tags, execution
//! contexts, privilege modes and the cycle clock. Predictors and the cache
//! hang off the machine because every context on the core shares them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cache::{AccessResult, CacheGeometry, CacheState, CacheTiming, GeometryError};
use crate::defenses::{on_privilege_transition, Defense, DefenseConfig, Transition};
use crate::isa::{Addr, Instruction, Op, ProgramImage, Reg, Target};
use crate::pipeline::{TraceEvent, TraceKind};
use crate::predictors::{
    BranchTargetBuffer, DirectionPredictor, ReturnStackBuffer, UnderfillMode, DEFAULT_RSB_CAPACITY,
    MAX_RSB_CAPACITY, MIN_RSB_CAPACITY,
};

pub const PAGE_SIZE: u64 = 4096;
pub const USER_STACK_BASE: Addr = 0x1_0000;
pub const KERNEL_STACK_BASE: Addr = 0xFFFE_0000;
pub const MAX_CONTEXTS: usize = 16;
/// Two-instruction self loop every refilled RSB entry points at.
pub const BENIGN_GADGET: Addr = 0xFFFF_F000;
pub const DEFAULT_ROB_LIMIT: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    User,
    Kernel,
    Enclave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    User,
    Kernel,
    Enclave,
}

impl Mode {
    /// Ring level used for IBRS comparisons; enclaves run in ring 3.
    pub fn privilege(self) -> u8 {
        match self {
            Mode::User | Mode::Enclave => 0,
            Mode::Kernel => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::User => "user",
            Mode::Kernel => "kernel",
            Mode::Enclave => "enclave",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

impl Perms {
    pub const R: Perms = Perms {
        read: true,
        write: false,
        exec: false,
    };
    pub const RW: Perms = Perms {
        read: true,
        write: true,
        exec: false,
    };
    pub const RX: Perms = Perms {
        read: true,
        write: false,
        exec: true,
    };
    pub const RWX: Perms = Perms {
        read: true,
        write: true,
        exec: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AddressSpaceId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextId(pub usize);

impl fmt::Display for ContextId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageDescriptor {
    pub base: Addr,
    pub perms: Perms,
    pub domain: Domain,
    /// Only meaningful for kernel pages; cleared when KPTI is on.
    pub mapped_in_user: bool,
    /// `None` for pages mapped into every address space.
    pub space: Option<AddressSpaceId>,
    /// Physical frame number; the cache is indexed physically.
    pub frame: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct Page {
    pub desc: PageDescriptor,
    data: Option<Box<[u8]>>,
}

impl Page {
    fn byte(&self, offset: usize) -> u8 {
        self.data.as_ref().map_or(0, |d| d[offset])
    }

    fn set_byte(&mut self, offset: usize, v: u8) {
        let d = self
            .data
            .get_or_insert_with(|| vec![0u8; PAGE_SIZE as usize].into_boxed_slice());
        d[offset] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    /// No page at the address in this view (includes KPTI-hidden pages).
    Unmapped(Addr),
    /// User-mode access to a kernel page.
    Privilege(Addr),
    /// Access to enclave memory from outside the enclave.
    EnclaveAbort(Addr),
    Smap(Addr),
    Smep(Addr),
    ReadProtect(Addr),
    WriteProtect(Addr),
    NoExec(Addr),
    NoInstruction(Addr),
    UnknownSyscall(u64),
    BadTransition,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultKind::Unmapped(a) => write!(f, "unmapped {a:#x}"),
            FaultKind::Privilege(a) => write!(f, "privilege {a:#x}"),
            FaultKind::EnclaveAbort(a) => write!(f, "enclave-abort {a:#x}"),
            FaultKind::Smap(a) => write!(f, "smap {a:#x}"),
            FaultKind::Smep(a) => write!(f, "smep {a:#x}"),
            FaultKind::ReadProtect(a) => write!(f, "read-protect {a:#x}"),
            FaultKind::WriteProtect(a) => write!(f, "write-protect {a:#x}"),
            FaultKind::NoExec(a) => write!(f, "no-exec {a:#x}"),
            FaultKind::NoInstruction(a) => write!(f, "no-instruction {a:#x}"),
            FaultKind::UnknownSyscall(n) => write!(f, "unknown-syscall {n}"),
            FaultKind::BadTransition => f.write_str("bad-transition"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContextStatus {
    Runnable,
    Halted,
    Faulted(FaultKind),
}

/// Saved state for `sysret` / `eexit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Frame {
    pub mode: Mode,
    pub pc: Addr,
    pub sp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub id: ContextId,
    pub mode: Mode,
    pub regs: [u64; Reg::COUNT],
    /// Zero flag written by `cmp`.
    pub zf: bool,
    pub pc: Addr,
    pub space: AddressSpaceId,
    pub status: ContextStatus,
    pub(crate) kernel_sp: u64,
    pub(crate) enclave_sp: Option<u64>,
    pub(crate) saved: Vec<Frame>,
    /// Cycle at which each register's pending load completes.
    pub(crate) ready: [u64; Reg::COUNT],
    pub(crate) flags_ready: u64,
    initial_mode: Mode,
    entry: Addr,
    initial_sp: u64,
}

impl Context {
    pub fn reg(&self, r: Reg) -> u64 {
        self.regs[r.index()]
    }

    pub fn is_runnable(&self) -> bool {
        self.status == ContextStatus::Runnable
    }

    pub fn kernel_sp(&self) -> u64 {
        self.kernel_sp
    }
}

/// Hardware and mitigation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Server part without RSB refilling.
    Xeon,
    /// Client part with RSB refilling on kernel entry.
    Skylake,
    /// Empty RSB gives no prediction.
    Amd,
    None,
    FullyPatched,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Xeon,
        Preset::Skylake,
        Preset::Amd,
        Preset::None,
        Preset::FullyPatched,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Xeon => "xeon",
            Preset::Skylake => "skylake",
            Preset::Amd => "amd",
            Preset::None => "none",
            Preset::FullyPatched => "fully-patched",
        }
    }

    pub fn defenses(self) -> DefenseConfig {
        match self {
            Preset::Xeon => DefenseConfig::xeon(),
            Preset::Skylake => DefenseConfig::skylake(),
            Preset::Amd | Preset::None => DefenseConfig::none(),
            Preset::FullyPatched => DefenseConfig::fully_patched(),
        }
    }

    pub fn underfill(self) -> UnderfillMode {
        match self {
            Preset::Amd => UnderfillMode::NoPrediction,
            _ => UnderfillMode::FallbackIndirect,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().replace('_', "-");
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| ConfigError::BadValue {
                key: "preset".into(),
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {0}: expected `key = value`")]
    Syntax(usize),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MachineConfig {
    pub preset: Preset,
    pub rsb_capacity: usize,
    pub rsb_underfill: UnderfillMode,
    pub cache: CacheGeometry,
    pub hit_latency: u64,
    pub miss_latency: u64,
    pub jitter: bool,
    pub rob_limit: usize,
    pub seed: u64,
    pub defenses: DefenseConfig,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig::preset(Preset::None)
    }
}

impl MachineConfig {
    pub fn preset(preset: Preset) -> Self {
        let timing = CacheTiming::default();
        MachineConfig {
            preset,
            rsb_capacity: DEFAULT_RSB_CAPACITY,
            rsb_underfill: preset.underfill(),
            cache: CacheGeometry::default(),
            hit_latency: timing.hit_latency,
            miss_latency: timing.miss_latency,
            jitter: false,
            rob_limit: DEFAULT_ROB_LIMIT,
            seed: 0,
            defenses: preset.defenses(),
        }
    }

    pub fn timing(&self) -> CacheTiming {
        CacheTiming {
            hit_latency: self.hit_latency,
            miss_latency: self.miss_latency,
            jitter: self.jitter,
        }
    }

    /// Parses the `key = value` config format. `preset` is applied first,
    /// wherever it appears; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax(i + 1))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => MachineConfig::preset(v.parse()?),
            None => MachineConfig::default(),
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        let num = || -> Result<u64, ConfigError> {
            crate::isa::parse_number(value)
                .filter(|v| *v >= 0)
                .map(|v| v as u64)
                .ok_or_else(bad)
        };
        let flag = || -> Result<bool, ConfigError> {
            match value.to_ascii_lowercase().as_str() {
                "true" | "1" | "on" | "yes" => Ok(true),
                "false" | "0" | "off" | "no" => Ok(false),
                _ => Err(bad()),
            }
        };
        match key {
            "preset" => {
                value.parse::<Preset>()?;
            }
            "rsb_capacity" => self.rsb_capacity = num()? as usize,
            "rsb_underfill" => {
                self.rsb_underfill = match value {
                    "fallback" => UnderfillMode::FallbackIndirect,
                    "none" => UnderfillMode::NoPrediction,
                    _ => return Err(bad()),
                }
            }
            "cache_sets" => self.cache.sets = num()? as usize,
            "cache_ways" => self.cache.ways = num()? as usize,
            "line_size" => self.cache.line_size = num()? as usize,
            "hit_latency" => self.hit_latency = num()?,
            "miss_latency" => self.miss_latency = num()?,
            "rob_limit" => self.rob_limit = num()? as usize,
            "seed" => self.seed = num()?,
            "jitter" => self.jitter = flag()?,
            other => match Defense::from_key(other) {
                Some(d) => self.defenses.set(d, flag()?),
                None => return Err(ConfigError::UnknownKey(other.to_string())),
            },
        }
        Ok(())
    }

    /// Canonical `key = value` rendering, parseable by [`MachineConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "preset = {}\nrsb_capacity = {}\nrsb_underfill = {}\ncache_sets = {}\ncache_ways = {}\nline_size = {}\nhit_latency = {}\nmiss_latency = {}\nrob_limit = {}\nseed = {}\njitter = {}\n",
            self.preset,
            self.rsb_capacity,
            self.rsb_underfill.as_str(),
            self.cache.sets,
            self.cache.ways,
            self.cache.line_size,
            self.hit_latency,
            self.miss_latency,
            self.rob_limit,
            self.seed,
            self.jitter,
        );
        for d in Defense::ALL {
            out.push_str(&format!("{} = {}\n", d.key(), self.defenses.get(d)));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("rsb capacity {0} outside {MIN_RSB_CAPACITY}..={MAX_RSB_CAPACITY}")]
    RsbCapacity(usize),
    #[error("region base {0:#x} is not page aligned")]
    Misaligned(Addr),
    #[error("region overlaps existing page at {0:#x}")]
    Overlap(Addr),
    #[error("entry {0:#x} is not in an executable page")]
    UnmappedEntry(Addr),
    #[error("code address {0:#x} is not in an executable page")]
    UnmappedCode(Addr),
    #[error("data address {0:#x} is not mapped")]
    UnmappedData(Addr),
    #[error("no context {0}")]
    UnknownContext(ContextId),
    #[error("operation not allowed while a speculation frame is open")]
    Speculating,
    #[error("too many contexts")]
    TooManyContexts,
}

/// Outcome of a permission check for a data access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Access {
    Allowed(usize),
    /// Mapped, but only reachable transiently through a Meltdown-style
    /// deferred permission check.
    Privileged(usize, FaultKind),
    Denied(FaultKind),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextSnapshot {
    pub id: ContextId,
    pub mode: Mode,
    pub regs: [u64; Reg::COUNT],
    pub zf: bool,
    pub pc: Addr,
    pub status: ContextStatus,
}

/// Committed architectural state only: no cache, predictor or clock state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSnapshot {
    pub contexts: Vec<ContextSnapshot>,
    /// Non-zero contents of writable pages keyed by (space, page base).
    pub memory: BTreeMap<(Option<u32>, Addr), Vec<u8>>,
}

impl ArchSnapshot {
    /// Human-readable list of differences, empty when equal.
    pub fn diff(&self, other: &ArchSnapshot) -> Vec<String> {
        let mut out = Vec::new();
        for (a, b) in self.contexts.iter().zip(&other.contexts) {
            if a != b {
                out.push(format!("context {}: {a:?} != {b:?}", a.id));
            }
        }
        if self.contexts.len() != other.contexts.len() {
            out.push("context count differs".into());
        }
        for (k, v) in &self.memory {
            if other.memory.get(k) != Some(v) {
                out.push(format!("page {:?}@{:#x} differs", k.0, k.1));
            }
        }
        for k in other.memory.keys() {
            if !self.memory.contains_key(k) {
                out.push(format!("page {:?}@{:#x} only on one side", k.0, k.1));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub(crate) config: MachineConfig,
    pub(crate) pages: Vec<Page>,
    page_index: BTreeMap<Addr, Vec<usize>>,
    next_frame: u64,
    pub(crate) code: HashMap<Option<AddressSpaceId>, BTreeMap<Addr, Instruction>>,
    pub(crate) contexts: Vec<Context>,
    pub(crate) current: ContextId,
    pub(crate) clock: u64,
    pub(crate) cache: CacheState,
    pub(crate) timing: CacheTiming,
    pub(crate) rng: ChaCha8Rng,
    pub rsb: ReturnStackBuffer,
    pub btb: BranchTargetBuffer,
    pub dirpred: DirectionPredictor,
    pub defenses: DefenseConfig,
    pub(crate) syscalls: BTreeMap<u64, Addr>,
    pub(crate) trace: Vec<TraceEvent>,
    pub(crate) tracing: bool,
    /// True while the pipeline runs a transient window.
    pub(crate) speculating: bool,
    /// Set by `reference_run`: no speculation, flat one-cycle memory.
    pub(crate) reference: bool,
}

/// Builds an empty machine. The benign delay gadget page is mapped and
/// loaded up front.
pub fn create_machine(config: MachineConfig) -> Result<Machine, MachineError> {
    Machine::new(config)
}

impl Machine {
    pub fn new(config: MachineConfig) -> Result<Machine, MachineError> {
        if !(MIN_RSB_CAPACITY..=MAX_RSB_CAPACITY).contains(&config.rsb_capacity) {
            return Err(MachineError::RsbCapacity(config.rsb_capacity));
        }
        let cache = CacheState::new(config.cache)?;
        let mut m = Machine {
            config,
            pages: Vec::new(),
            page_index: BTreeMap::new(),
            next_frame: 1,
            code: HashMap::new(),
            contexts: Vec::new(),
            current: ContextId(0),
            clock: 0,
            cache,
            timing: config.timing(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            rsb: ReturnStackBuffer::new(config.rsb_capacity, config.rsb_underfill),
            btb: BranchTargetBuffer::default(),
            dirpred: DirectionPredictor::default(),
            defenses: config.defenses,
            syscalls: BTreeMap::new(),
            trace: Vec::new(),
            tracing: true,
            speculating: false,
            reference: false,
        };
        m.map_region(BENIGN_GADGET, PAGE_SIZE, Perms::RX, Domain::Kernel, None)?;
        let global = m.code.entry(None).or_default();
        global.insert(BENIGN_GADGET, Instruction::new(Op::Nop));
        global.insert(
            BENIGN_GADGET + 1,
            Instruction::new(Op::Jmp(Target::Direct(BENIGN_GADGET))),
        );
        Ok(m)
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn cache(&self) -> &CacheState {
        &self.cache
    }

    pub fn timing(&self) -> CacheTiming {
        self.timing
    }

    pub fn contexts(&self) -> &[Context] {
        &self.contexts
    }

    pub fn context(&self, id: ContextId) -> Result<&Context, MachineError> {
        self.contexts
            .get(id.0)
            .ok_or(MachineError::UnknownContext(id))
    }

    pub fn current(&self) -> ContextId {
        self.current
    }

    pub fn pages(&self) -> impl Iterator<Item = &PageDescriptor> {
        self.pages.iter().map(|p| &p.desc)
    }

    pub fn set_tracing(&mut self, on: bool) {
        self.tracing = on;
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    pub fn is_speculating(&self) -> bool {
        self.speculating
    }

    /// Maps `len` bytes at `base`. Kernel pages are hidden from user mode
    /// when KPTI is on. `space = None` maps the pages into every address
    /// space.
    pub fn map_region(
        &mut self,
        base: Addr,
        len: u64,
        perms: Perms,
        domain: Domain,
        space: Option<AddressSpaceId>,
    ) -> Result<(), MachineError> {
        if !base.is_multiple_of(PAGE_SIZE) {
            return Err(MachineError::Misaligned(base));
        }
        let count = len.div_ceil(PAGE_SIZE).max(1);
        for i in 0..count {
            let b = base + i * PAGE_SIZE;
            if let Some(existing) = self.page_index.get(&b) {
                let clash = existing.iter().any(|&p| {
                    let s = self.pages[p].desc.space;
                    s.is_none() || space.is_none() || s == space
                });
                if clash {
                    return Err(MachineError::Overlap(b));
                }
            }
        }
        for i in 0..count {
            let b = base + i * PAGE_SIZE;
            let mapped_in_user = match domain {
                Domain::User => true,
                Domain::Kernel => !self.defenses.kpti,
                Domain::Enclave => false,
            };
            let desc = PageDescriptor {
                base: b,
                perms,
                domain,
                mapped_in_user,
                space,
                frame: self.next_frame,
            };
            self.next_frame += 1;
            self.page_index.entry(b).or_default().push(self.pages.len());
            self.pages.push(Page { desc, data: None });
        }
        Ok(())
    }

    /// Page holding `addr` as seen from `space`, ignoring permissions.
    pub(crate) fn page_in(&self, space: AddressSpaceId, addr: Addr) -> Option<usize> {
        let base = addr & !(PAGE_SIZE - 1);
        self.page_index.get(&base)?.iter().copied().find(|&p| {
            let s = self.pages[p].desc.space;
            s.is_none() || s == Some(space)
        })
    }

    pub fn page_descriptor(&self, space: AddressSpaceId, addr: Addr) -> Option<PageDescriptor> {
        self.page_in(space, addr).map(|p| self.pages[p].desc)
    }

    /// Physical address of `addr` in `space`.
    pub fn phys_addr(&self, space: AddressSpaceId, addr: Addr) -> Option<u64> {
        self.page_in(space, addr).map(|p| self.phys_of(p, addr))
    }

    pub(crate) fn phys_of(&self, page: usize, addr: Addr) -> u64 {
        self.pages[page].desc.frame * PAGE_SIZE + (addr & (PAGE_SIZE - 1))
    }

    /// Data-access permission check for `mode` in `space`.
    pub(crate) fn data_access(
        &self,
        mode: Mode,
        space: AddressSpaceId,
        addr: Addr,
        write: bool,
    ) -> Access {
        let Some(p) = self.page_in(space, addr) else {
            return Access::Denied(FaultKind::Unmapped(addr));
        };
        let d = &self.pages[p].desc;
        let domain_check = match (mode, d.domain) {
            (Mode::User, Domain::User) | (Mode::Kernel, Domain::Kernel) => Access::Allowed(p),
            (Mode::Enclave, Domain::Enclave | Domain::User) => Access::Allowed(p),
            (Mode::User | Mode::Enclave, Domain::Kernel) => {
                if d.mapped_in_user {
                    Access::Privileged(p, FaultKind::Privilege(addr))
                } else {
                    Access::Denied(FaultKind::Unmapped(addr))
                }
            }
            (Mode::User | Mode::Kernel, Domain::Enclave) => {
                Access::Denied(FaultKind::EnclaveAbort(addr))
            }
            (Mode::Kernel, Domain::User) => {
                if self.defenses.smap {
                    Access::Denied(FaultKind::Smap(addr))
                } else {
                    Access::Allowed(p)
                }
            }
        };
        match domain_check {
            Access::Allowed(_) | Access::Privileged(..) => {
                if write && !d.perms.write {
                    Access::Denied(FaultKind::WriteProtect(addr))
                } else if !write && !d.perms.read {
                    Access::Denied(FaultKind::ReadProtect(addr))
                } else {
                    domain_check
                }
            }
            denied => denied,
        }
    }

    /// Instruction-fetch permission check.
    pub(crate) fn exec_access(
        &self,
        mode: Mode,
        space: AddressSpaceId,
        addr: Addr,
    ) -> Result<Instruction, FaultKind> {
        let p = self.page_in(space, addr).ok_or(FaultKind::Unmapped(addr))?;
        let d = &self.pages[p].desc;
        if !d.perms.exec {
            return Err(FaultKind::NoExec(addr));
        }
        match (mode, d.domain) {
            (Mode::User, Domain::User)
            | (Mode::Kernel, Domain::Kernel)
            | (Mode::Enclave, Domain::Enclave | Domain::User) => {}
            (Mode::Kernel, Domain::User) => {
                if self.defenses.smep {
                    return Err(FaultKind::Smep(addr));
                }
            }
            (Mode::User, Domain::Kernel) | (Mode::Enclave, Domain::Kernel) => {
                return Err(FaultKind::Privilege(addr))
            }
            (Mode::User | Mode::Kernel, Domain::Enclave) => {
                return Err(FaultKind::EnclaveAbort(addr))
            }
        }
        self.code
            .get(&d.space)
            .and_then(|c| c.get(&addr))
            .copied()
            .ok_or(FaultKind::NoInstruction(addr))
    }

    /// Whether `clflush` from `mode` can name `addr`: any page present in
    /// the current page tables, so KPTI-hidden kernel pages are out of reach.
    pub(crate) fn flushable(&self, mode: Mode, space: AddressSpaceId, addr: Addr) -> Option<usize> {
        let p = self.page_in(space, addr)?;
        let d = &self.pages[p].desc;
        let hidden = mode != Mode::Kernel && d.domain == Domain::Kernel && !d.mapped_in_user;
        (!hidden).then_some(p)
    }

    pub(crate) fn page_byte(&self, page: usize, addr: Addr) -> u8 {
        self.pages[page].byte((addr & (PAGE_SIZE - 1)) as usize)
    }

    /// Loads `image`'s code and data into `space`. Code lands in the
    /// address space that owns the page it sits in, so images placed in
    /// global pages are visible everywhere.
    pub fn load_image(
        &mut self,
        image: &ProgramImage,
        space: AddressSpaceId,
    ) -> Result<(), MachineError> {
        for (addr, ins) in image.iter() {
            let p = self
                .page_in(space, addr)
                .filter(|&p| self.pages[p].desc.perms.exec)
                .ok_or(MachineError::UnmappedCode(addr))?;
            let owner = self.pages[p].desc.space;
            self.code.entry(owner).or_default().insert(addr, *ins);
        }
        self.write_bytes(space, image.data.base, &image.data.bytes)?;
        Ok(())
    }

    /// Loads `image` and creates a context for it. The context gets a
    /// private stack page and a kernel stack page.
    pub fn spawn_context(
        &mut self,
        image: &ProgramImage,
        mode: Mode,
        space: AddressSpaceId,
    ) -> Result<ContextId, MachineError> {
        let id = ContextId(self.contexts.len());
        if id.0 >= MAX_CONTEXTS {
            return Err(MachineError::TooManyContexts);
        }
        self.load_image(image, space)?;
        if self.exec_access(mode, space, image.entry).is_err() {
            return Err(MachineError::UnmappedEntry(image.entry));
        }
        let stack = USER_STACK_BASE + id.0 as u64 * PAGE_SIZE;
        let (stack_domain, stack_space) = match mode {
            Mode::User => (Domain::User, Some(space)),
            Mode::Enclave => (Domain::Enclave, Some(space)),
            Mode::Kernel => (Domain::Kernel, None),
        };
        self.map_region(stack, PAGE_SIZE, Perms::RW, stack_domain, stack_space)?;
        let kstack = KERNEL_STACK_BASE + id.0 as u64 * PAGE_SIZE;
        self.map_region(kstack, PAGE_SIZE, Perms::RW, Domain::Kernel, None)?;

        let mut regs = [0u64; Reg::COUNT];
        regs[Reg::SP.index()] = stack + PAGE_SIZE;
        self.contexts.push(Context {
            id,
            mode,
            regs,
            zf: false,
            pc: image.entry,
            space,
            status: ContextStatus::Runnable,
            kernel_sp: kstack + PAGE_SIZE,
            enclave_sp: None,
            saved: Vec::new(),
            ready: [0; Reg::COUNT],
            flags_ready: 0,
            initial_mode: mode,
            entry: image.entry,
            initial_sp: stack + PAGE_SIZE,
        });
        Ok(id)
    }

    /// Puts a context back at its entry point with cleared registers.
    /// Memory, caches and predictors are untouched.
    pub fn reset_context(&mut self, id: ContextId) -> Result<(), MachineError> {
        if self.speculating {
            return Err(MachineError::Speculating);
        }
        let c = self
            .contexts
            .get_mut(id.0)
            .ok_or(MachineError::UnknownContext(id))?;
        c.mode = c.initial_mode;
        c.regs = [0; Reg::COUNT];
        c.regs[Reg::SP.index()] = c.initial_sp;
        c.zf = false;
        c.pc = c.entry;
        c.status = ContextStatus::Runnable;
        c.saved.clear();
        c.ready = [0; Reg::COUNT];
        c.flags_ready = 0;
        Ok(())
    }

    pub fn set_reg(&mut self, id: ContextId, r: Reg, v: u64) -> Result<(), MachineError> {
        let c = self
            .contexts
            .get_mut(id.0)
            .ok_or(MachineError::UnknownContext(id))?;
        c.regs[r.index()] = v;
        Ok(())
    }

    /// Stack pointer loaded on `syscall`.
    pub fn set_kernel_sp(&mut self, id: ContextId, sp: u64) -> Result<(), MachineError> {
        self.contexts
            .get_mut(id.0)
            .ok_or(MachineError::UnknownContext(id))?
            .kernel_sp = sp;
        Ok(())
    }

    /// Stack pointer loaded on `eenter`.
    pub fn set_enclave_sp(&mut self, id: ContextId, sp: u64) -> Result<(), MachineError> {
        self.contexts
            .get_mut(id.0)
            .ok_or(MachineError::UnknownContext(id))?
            .enclave_sp = Some(sp);
        Ok(())
    }

    pub fn register_syscall(&mut self, n: u64, handler: Addr) {
        self.syscalls.insert(n, handler);
    }

    /// Switches the running context. Every switch passes through the
    /// kernel, so kernel-entry hooks fire even when `to` is already current.
    pub fn context_switch(&mut self, to: ContextId) -> Result<(), MachineError> {
        if to.0 >= self.contexts.len() {
            return Err(MachineError::UnknownContext(to));
        }
        if self.speculating {
            return Err(MachineError::Speculating);
        }
        let from = self.current;
        self.current = to;
        self.record(TraceKind::CtxSwitch, format!("ctx{from} -> ctx{to}"));
        on_privilege_transition(self, Transition::ContextSwitch { to });
        Ok(())
    }

    pub fn snapshot_arch_state(&self) -> Result<ArchSnapshot, MachineError> {
        if self.speculating {
            return Err(MachineError::Speculating);
        }
        let contexts = self
            .contexts
            .iter()
            .map(|c| ContextSnapshot {
                id: c.id,
                mode: c.mode,
                regs: c.regs,
                zf: c.zf,
                pc: c.pc,
                status: c.status,
            })
            .collect();
        let memory = self
            .pages
            .iter()
            .filter(|p| p.desc.perms.write)
            .filter_map(|p| {
                let d = p.data.as_ref()?;
                d.iter()
                    .any(|&b| b != 0)
                    .then(|| ((p.desc.space.map(|s| s.0), p.desc.base), d.to_vec()))
            })
            .collect();
        Ok(ArchSnapshot { contexts, memory })
    }

    // ---- host-side memory and cache access -------------------------------

    pub fn write_bytes(
        &mut self,
        space: AddressSpaceId,
        addr: Addr,
        bytes: &[u8],
    ) -> Result<(), MachineError> {
        for (i, &b) in bytes.iter().enumerate() {
            let a = addr + i as Addr;
            let p = self
                .page_in(space, a)
                .ok_or(MachineError::UnmappedData(a))?;
            self.pages[p].set_byte((a & (PAGE_SIZE - 1)) as usize, b);
        }
        Ok(())
    }

    pub fn read_bytes(
        &self,
        space: AddressSpaceId,
        addr: Addr,
        len: usize,
    ) -> Result<Vec<u8>, MachineError> {
        (0..len as Addr)
            .map(|i| {
                let a = addr + i;
                self.page_in(space, a)
                    .map(|p| self.page_byte(p, a))
                    .ok_or(MachineError::UnmappedData(a))
            })
            .collect()
    }

    pub fn write_word(
        &mut self,
        space: AddressSpaceId,
        addr: Addr,
        v: u64,
    ) -> Result<(), MachineError> {
        self.write_bytes(space, addr, &v.to_le_bytes())
    }

    pub fn read_word(&self, space: AddressSpaceId, addr: Addr) -> Result<u64, MachineError> {
        let b = self.read_bytes(space, addr, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// Timed access from the host (receivers, priming). Advances the clock
    /// by the access latency.
    pub fn timed_access(
        &mut self,
        space: AddressSpaceId,
        addr: Addr,
    ) -> Result<AccessResult, MachineError> {
        let pa = self
            .phys_addr(space, addr)
            .ok_or(MachineError::UnmappedData(addr))?;
        let r = self.cache.access(pa, &self.timing, &mut self.rng);
        self.clock += r.latency;
        Ok(r)
    }

    pub fn flush(&mut self, space: AddressSpaceId, addr: Addr) -> Result<(), MachineError> {
        let pa = self
            .phys_addr(space, addr)
            .ok_or(MachineError::UnmappedData(addr))?;
        self.cache.flush_line(pa);
        Ok(())
    }

    pub fn is_line_cached(&self, space: AddressSpaceId, addr: Addr) -> bool {
        self.phys_addr(space, addr)
            .is_some_and(|pa| self.cache.is_cached(pa))
    }

    pub(crate) fn record(&mut self, kind: TraceKind, detail: String) {
        if !self.tracing {
            return;
        }
        let (pc, mode) = self
            .contexts
            .get(self.current.0)
            .map_or((0, Mode::Kernel), |c| (c.pc, c.mode));
        self.trace.push(TraceEvent {
            cycle: self.clock,
            ctx: self.current,
            pc,
            mode,
            kind,
            detail,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::assemble;

    const S0: AddressSpaceId = AddressSpaceId(0);

    fn machine(defenses: DefenseConfig) -> Machine {
        Machine::new(MachineConfig {
            defenses,
            ..MachineConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn presets_set_refill() {
        let sky = create_machine(MachineConfig::preset(Preset::Skylake)).unwrap();
        assert!(sky.defenses.rsb_refill_on_kernel_entry);
        let xeon = create_machine(MachineConfig::preset(Preset::Xeon)).unwrap();
        assert!(!xeon.defenses.rsb_refill_on_kernel_entry);
        assert_eq!(xeon.rsb.capacity(), 16);
        assert_eq!(xeon.clock(), 0);
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut cfg = MachineConfig::default();
        cfg.cache.sets = 3;
        assert!(matches!(
            create_machine(cfg),
            Err(MachineError::Geometry(_))
        ));
        let cfg = MachineConfig {
            rsb_capacity: 2,
            ..MachineConfig::default()
        };
        assert_eq!(
            create_machine(cfg).unwrap_err(),
            MachineError::RsbCapacity(2)
        );
    }

    #[test]
    fn map_one_user_page() {
        let mut m = machine(DefenseConfig::none());
        let before = m.pages().count();
        m.map_region(0x8000, 4096, Perms::RWX, Domain::User, Some(S0))
            .unwrap();
        assert_eq!(m.pages().count(), before + 1);
    }

    #[test]
    fn kpti_hides_kernel_pages() {
        let mut m = machine(DefenseConfig {
            kpti: true,
            ..DefenseConfig::none()
        });
        m.map_region(0xFFFF_0000, 4096, Perms::R, Domain::Kernel, None)
            .unwrap();
        assert!(!m.page_descriptor(S0, 0xFFFF_0000).unwrap().mapped_in_user);

        let mut m = machine(DefenseConfig::none());
        m.map_region(0xFFFF_0000, 4096, Perms::R, Domain::Kernel, None)
            .unwrap();
        assert!(m.page_descriptor(S0, 0xFFFF_0000).unwrap().mapped_in_user);
    }

    #[test]
    fn map_errors() {
        let mut m = machine(DefenseConfig::none());
        assert_eq!(
            m.map_region(0x8010, 16, Perms::RW, Domain::User, Some(S0)),
            Err(MachineError::Misaligned(0x8010))
        );
        m.map_region(0x8000, 8192, Perms::RW, Domain::User, Some(S0))
            .unwrap();
        assert_eq!(
            m.map_region(0x9000, 16, Perms::RW, Domain::User, Some(S0)),
            Err(MachineError::Overlap(0x9000))
        );
        // a different address space may reuse the range
        m.map_region(0x9000, 16, Perms::RW, Domain::User, Some(AddressSpaceId(1)))
            .unwrap();
        assert_eq!(
            m.map_region(0x9000, 16, Perms::RW, Domain::Kernel, None),
            Err(MachineError::Overlap(0x9000))
        );
    }

    fn with_code(m: &mut Machine, space: AddressSpaceId) {
        m.map_region(0x1000, 4096, Perms::RX, Domain::User, Some(space))
            .unwrap();
    }

    #[test]
    fn spawn_ids_and_unmapped_entry() {
        let mut m = machine(DefenseConfig::none());
        let img = assemble("halt").unwrap();
        assert_eq!(
            m.spawn_context(&img, Mode::User, S0),
            Err(MachineError::UnmappedCode(0x1000))
        );
        with_code(&mut m, S0);
        assert_eq!(m.spawn_context(&img, Mode::User, S0).unwrap(), ContextId(0));
        assert_eq!(m.spawn_context(&img, Mode::User, S0).unwrap(), ContextId(1));
        let c = m.context(ContextId(0)).unwrap();
        assert_eq!(c.pc, 0x1000);
        assert_eq!(c.reg(Reg::SP), USER_STACK_BASE + PAGE_SIZE);
    }

    #[test]
    fn shared_space_sees_writes() {
        let mut m = machine(DefenseConfig::none());
        with_code(&mut m, S0);
        m.map_region(0x8000, 4096, Perms::RW, Domain::User, Some(S0))
            .unwrap();
        m.map_region(
            0x8000,
            4096,
            Perms::RW,
            Domain::User,
            Some(AddressSpaceId(1)),
        )
        .unwrap();
        m.write_word(S0, 0x8000, 0xDEAD).unwrap();
        assert_eq!(m.read_word(S0, 0x8000).unwrap(), 0xDEAD);
        assert_eq!(m.read_word(AddressSpaceId(1), 0x8000).unwrap(), 0);
    }

    #[test]
    fn enclave_spawn_in_user_space_allowed() {
        let mut m = machine(DefenseConfig::none());
        m.map_region(0xE000_0000, 4096, Perms::RX, Domain::Enclave, Some(S0))
            .unwrap();
        let img = assemble(".org 0xE0000000\nhalt").unwrap();
        assert!(m.spawn_context(&img, Mode::Enclave, S0).is_ok());
    }

    #[test]
    fn context_switch_preserves_or_refills_rsb() {
        for refill in [false, true] {
            let mut m = machine(DefenseConfig {
                rsb_refill_on_kernel_entry: refill,
                ..DefenseConfig::none()
            });
            with_code(&mut m, S0);
            let img = assemble("halt").unwrap();
            m.spawn_context(&img, Mode::User, S0).unwrap();
            m.spawn_context(&img, Mode::User, S0).unwrap();
            m.rsb.push(0xA);
            let before = m.rsb.live_entries();
            m.context_switch(ContextId(1)).unwrap();
            if refill {
                assert_eq!(m.rsb.live_entries(), vec![BENIGN_GADGET; 16]);
            } else {
                assert_eq!(m.rsb.live_entries(), before);
                assert_eq!(m.rsb.peek(), Some(0xA));
            }
        }
    }

    #[test]
    fn switch_to_unknown_context() {
        let mut m = machine(DefenseConfig::none());
        assert_eq!(
            m.context_switch(ContextId(3)),
            Err(MachineError::UnknownContext(ContextId(3)))
        );
    }

    #[test]
    fn fresh_snapshot_has_zero_registers() {
        let mut m = machine(DefenseConfig::none());
        with_code(&mut m, S0);
        m.spawn_context(&assemble("halt").unwrap(), Mode::User, S0)
            .unwrap();
        let s = m.snapshot_arch_state().unwrap();
        assert!(s.contexts[0].regs[..15].iter().all(|&r| r == 0));
    }

    #[test]
    fn config_text_roundtrip_and_overrides() {
        let cfg = MachineConfig::parse(
            "# test\nrsb_capacity = 8\npreset = skylake\nsmep = true\ncache_sets = 128\nrsb_underfill = none\n",
        )
        .unwrap();
        assert_eq!(cfg.preset, Preset::Skylake);
        assert!(cfg.defenses.rsb_refill_on_kernel_entry);
        assert!(cfg.defenses.smep);
        assert_eq!(cfg.rsb_capacity, 8);
        assert_eq!(cfg.cache.sets, 128);
        assert_eq!(cfg.rsb_underfill, UnderfillMode::NoPrediction);
        assert_eq!(MachineConfig::parse(&cfg.to_text()).unwrap(), cfg);

        assert!(matches!(
            MachineConfig::parse("bogus = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            MachineConfig::parse("smep = maybe"),
            Err(ConfigError::BadValue { .. })
        ));
        assert_eq!(MachineConfig::parse("smep"), Err(ConfigError::Syntax(1)));
    }
}
