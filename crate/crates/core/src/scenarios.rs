//! Runnable attack scenarios and cache receivers.
//!
//! Each scenario is a set of assembly programs plus host-side setup. The
//! secret is leaked one byte per round on the same machine: the host
//! prepares the round (pointers, cache state), runs the schedule, then
//! decodes the probe array with Flush+Reload or Prime+Probe.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::defenses::{harden, DefenseConfig};
use crate::isa::{assemble, Addr, AsmError, ProgramImage};
use crate::machine::{
    AddressSpaceId, ContextId, Domain, Machine, MachineConfig, MachineError, Mode, Perms, Preset,
    KERNEL_STACK_BASE, PAGE_SIZE,
};
use crate::pipeline::{run, HaltReason, TraceEvent};

pub const PROBE_BASE: Addr = 0x2_0000;
/// Slot `v + 1` encodes byte `v`; slot 0 is never probed.
pub const PROBE_SLOTS: usize = 257;
pub const PROBE_STRIDE: u64 = 256;
pub const ARGS_PAGE: Addr = 0x8000;
pub const ARG_PTR: Addr = 0x8080;
pub const ARG_SLOT: Addr = 0x8088;
pub const ARG_EVICT: Addr = 0x8090;
pub const RESTRICTED_SECRET: Addr = 0x9040;
pub const EVICT_REGION: Addr = 0x40_0000;
pub const EVICT_PAGES: u64 = 256;
pub const KERNEL_CODE: Addr = 0xFFFF_0000;
pub const KERNEL_DATA: Addr = 0xFFFF_8000;
pub const KERNEL_SECRET: Addr = 0xFFFF_8040;
pub const KERNEL_ARGS: Addr = 0xFFFF_8080;
pub const ENCLAVE_CODE: Addr = 0xE000_0000;
pub const ENCLAVE_DATA: Addr = 0xE000_1000;
pub const ENCLAVE_SECRET: Addr = 0xE000_1040;
pub const ENCLAVE_ARGS: Addr = 0xE000_1080;
pub const ENCLAVE_STACK: Addr = 0xE000_2000;
pub const SPECTRE_ARRAY1: Addr = 0x8140;
pub const SPECTRE_ARRAY1_SIZE: Addr = 0x81C0;
/// Cache sets used with Prime+Probe so every probe slot has its own set.
pub const PRIME_PROBE_SETS: usize = 2048;
pub const DEFAULT_SECRET: &[u8] = b"THESECRT";

const SLICE: u64 = 10_000;
const MAX_CYCLES: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScenarioId {
    Attack1,
    Attack2a,
    Attack2b,
    Attack2c,
    Attack3,
    Attack4,
    SpectreV1,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 7] = [
        ScenarioId::Attack1,
        ScenarioId::Attack2a,
        ScenarioId::Attack2b,
        ScenarioId::Attack2c,
        ScenarioId::Attack3,
        ScenarioId::Attack4,
        ScenarioId::SpectreV1,
    ];

    /// Rows of the attack/defense matrix.
    pub const MATRIX_ROWS: [ScenarioId; 6] = [
        ScenarioId::Attack1,
        ScenarioId::Attack2a,
        ScenarioId::Attack2b,
        ScenarioId::Attack2c,
        ScenarioId::Attack3,
        ScenarioId::Attack4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioId::Attack1 => "attack1",
            ScenarioId::Attack2a => "attack2a",
            ScenarioId::Attack2b => "attack2b",
            ScenarioId::Attack2c => "attack2c",
            ScenarioId::Attack3 => "attack3",
            ScenarioId::Attack4 => "attack4",
            ScenarioId::SpectreV1 => "spectre_v1",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            ScenarioId::Attack1 => "same-process frame drop",
            ScenarioId::Attack2a => "colluding threads, shared address space",
            ScenarioId::Attack2b => "colluding threads, victim blocked in kernel",
            ScenarioId::Attack2c => "separate address spaces, reused victim gadget",
            ScenarioId::Attack3 => "unmatched return inside an enclave",
            ScenarioId::Attack4 => "user-to-kernel unmatched return",
            ScenarioId::SpectreV1 => "bounds check bypass baseline",
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioId {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.as_str() == norm)
            .ok_or_else(|| ScenarioError::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("{name}: {err}")]
    Asm { name: String, err: AsmError },
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error("{0}")]
    Layout(String),
    #[error("reading {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SecretDomain {
    /// Part of the attacker's own address space it never reads directly.
    Restricted,
    /// Another program's private data.
    Victim,
    Kernel,
    Enclave,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Secret {
    pub bytes: Vec<u8>,
    pub addr: Addr,
    pub domain: SecretDomain,
    pub space: AddressSpaceId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Receiver {
    #[default]
    FlushReload,
    PrimeProbe,
}

impl Receiver {
    pub fn as_str(self) -> &'static str {
        match self {
            Receiver::FlushReload => "flush-reload",
            Receiver::PrimeProbe => "prime-probe",
        }
    }
}

/// Preconditions an attack needs from its environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Requirement {
    SmepDisabled,
    KernelStackAddress,
    GadgetAddress,
    SharedProbePage,
    SharedAddressSpace,
    KptiOffMeltdownUnpatched,
}

impl Requirement {
    pub fn describe(self) -> &'static str {
        match self {
            Requirement::SmepDisabled => "smep disabled (payload sits in a user page)",
            Requirement::KernelStackAddress => "address of the kernel stack top is known",
            Requirement::GadgetAddress => "address of the victim gadget is known",
            Requirement::SharedProbePage => "probe array in memory shared with the victim",
            Requirement::SharedAddressSpace => "attacker and victim share an address space",
            Requirement::KptiOffMeltdownUnpatched => "kpti off and meltdown unpatched",
        }
    }

    /// Adjusts a configuration so the precondition holds. `smep_column`
    /// keeps SMEP/SMAP when those are the defense under test.
    pub fn apply(self, cfg: &mut DefenseConfig, smep_column: bool) {
        match self {
            Requirement::SmepDisabled if !smep_column => {
                cfg.smep = false;
                cfg.smap = false;
            }
            Requirement::KptiOffMeltdownUnpatched => {
                cfg.kpti = false;
                cfg.meltdown_patched = false;
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Attacker,
    Victim,
    Kernel,
    Enclave,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub name: String,
    pub source: String,
    pub image: ProgramImage,
    pub role: Role,
    pub mode: Mode,
    pub space: AddressSpaceId,
}

/// Host-side memory reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Location {
    pub space: AddressSpaceId,
    pub addr: Addr,
}

/// One-time machine setup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SetupStep {
    Map {
        base: Addr,
        len: u64,
        perms: Perms,
        domain: Domain,
        space: Option<AddressSpaceId>,
    },
    /// Load a program that runs inside another context (kernel, enclave).
    Load {
        program: usize,
    },
    /// Load a program and give it a context. Contexts are numbered in
    /// spawn order.
    Spawn {
        program: usize,
    },
    /// Like `Spawn`, entering at `label` instead of the image entry.
    SpawnAt {
        program: usize,
        label: String,
    },
    Syscall {
        n: u64,
        handler: Addr,
    },
    KernelSp {
        ctx: ContextId,
        sp: u64,
    },
    EnclaveSp {
        ctx: ContextId,
        sp: u64,
    },
    Word {
        at: Location,
        value: u64,
    },
    PlantSecret,
}

/// Host actions before each round; `k` is the secret byte index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoundStep {
    ResetContexts,
    /// Write `secret.addr + k` to `at`.
    SecretPointer {
        at: Location,
    },
    /// Write `at - base` style offsets: `secret.addr + k - base`.
    SecretOffset {
        at: Location,
        base: Addr,
    },
    Word {
        at: Location,
        value: u64,
    },
    /// Bring secret byte `k` into the cache.
    WarmSecret,
    Flush {
        at: Location,
    },
    /// Write pointers to `ways` lines of `region` that share a cache set
    /// with `target` and flush those lines, so loading them evicts it.
    EvictionPointers {
        at: Location,
        region: Location,
        target: Location,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioParams {
    pub secret: Vec<u8>,
    /// Attack 1 only: target kernel memory instead of the restricted region.
    pub kernel_secret: bool,
    pub receiver: Receiver,
    /// Attack 2c only: victim gadget address handed to the attacker.
    pub gadget: Option<Addr>,
    /// Directory whose `<name>.s` files override the built-in sources.
    pub asset_dir: Option<PathBuf>,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            secret: DEFAULT_SECRET.to_vec(),
            kernel_secret: false,
            receiver: Receiver::FlushReload,
            gadget: None,
            asset_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub id: ScenarioId,
    pub programs: Vec<Program>,
    pub setup: Vec<SetupStep>,
    pub round: Vec<RoundStep>,
    /// Run before the receiver is prepared, so architectural training
    /// accesses do not disturb it.
    pub training: Vec<(ContextId, u64)>,
    pub schedule: Vec<(ContextId, u64)>,
    pub attacker: ContextId,
    pub secret: Secret,
    pub receiver: Receiver,
    pub probe_base: Addr,
    /// Space whose eviction region backs Prime+Probe.
    pub receiver_space: AddressSpaceId,
    pub requirements: Vec<Requirement>,
    pub max_cycles: u64,
}

pub fn asset(name: &str) -> Option<&'static str> {
    Some(match name {
        "attack1" => include_str!("../scenarios/attack1.s"),
        "attack2a_victim" => include_str!("../scenarios/attack2a_victim.s"),
        "attack2a_attacker" => include_str!("../scenarios/attack2a_attacker.s"),
        "attack2b_victim" => include_str!("../scenarios/attack2b_victim.s"),
        "attack2b_kernel" => include_str!("../scenarios/attack2b_kernel.s"),
        "attack2b_attacker" => include_str!("../scenarios/attack2b_attacker.s"),
        "attack2c_victim" => include_str!("../scenarios/attack2c_victim.s"),
        "attack2c_attacker" => include_str!("../scenarios/attack2c_attacker.s"),
        "attack3_user" => include_str!("../scenarios/attack3_user.s"),
        "attack3_enclave" => include_str!("../scenarios/attack3_enclave.s"),
        "attack4_user" => include_str!("../scenarios/attack4_user.s"),
        "attack4_kernel" => include_str!("../scenarios/attack4_kernel.s"),
        "spectre_v1" => include_str!("../scenarios/spectre_v1.s"),
        _ => return None,
    })
}

const S0: AddressSpaceId = AddressSpaceId(0);

struct Builder<'a> {
    params: &'a ScenarioParams,
    programs: Vec<Program>,
    setup: Vec<SetupStep>,
}

impl Builder<'_> {
    fn source(&self, name: &str) -> Result<String, ScenarioError> {
        if let Some(dir) = &self.params.asset_dir {
            let path = dir.join(format!("{name}.s"));
            if path.exists() {
                return std::fs::read_to_string(&path).map_err(|e| ScenarioError::Io {
                    path: path.display().to_string(),
                    msg: e.to_string(),
                });
            }
        }
        asset(name)
            .map(str::to_string)
            .ok_or_else(|| ScenarioError::Layout(format!("no source named {name}")))
    }

    fn program(
        &mut self,
        name: &str,
        source: String,
        role: Role,
        mode: Mode,
        space: AddressSpaceId,
    ) -> Result<usize, ScenarioError> {
        let image = assemble(&source).map_err(|err| ScenarioError::Asm {
            name: name.to_string(),
            err,
        })?;
        self.programs.push(Program {
            name: name.to_string(),
            source,
            image,
            role,
            mode,
            space,
        });
        Ok(self.programs.len() - 1)
    }

    fn add(
        &mut self,
        name: &str,
        role: Role,
        mode: Mode,
        space: AddressSpaceId,
    ) -> Result<usize, ScenarioError> {
        let src = self.source(name)?;
        self.program(name, src, role, mode, space)
    }

    fn map(
        &mut self,
        base: Addr,
        len: u64,
        perms: Perms,
        domain: Domain,
        space: Option<AddressSpaceId>,
    ) {
        self.setup.push(SetupStep::Map {
            base,
            len,
            perms,
            domain,
            space,
        });
    }

    /// Code, argument, secret and eviction pages of one user address space.
    fn user_space(&mut self, space: AddressSpaceId) {
        self.map(0x1000, 2 * PAGE_SIZE, Perms::RX, Domain::User, Some(space));
        self.map(ARGS_PAGE, PAGE_SIZE, Perms::RW, Domain::User, Some(space));
        self.map(
            RESTRICTED_SECRET & !(PAGE_SIZE - 1),
            PAGE_SIZE,
            Perms::RW,
            Domain::User,
            Some(space),
        );
        self.map(
            EVICT_REGION,
            EVICT_PAGES * PAGE_SIZE,
            Perms::RW,
            Domain::User,
            Some(space),
        );
    }

    fn probe(&mut self) {
        let len = PROBE_SLOTS as u64 * PROBE_STRIDE;
        self.map(PROBE_BASE, len, Perms::R, Domain::User, None);
    }

    fn kernel(&mut self) {
        self.map(KERNEL_CODE, PAGE_SIZE, Perms::RX, Domain::Kernel, None);
        self.map(KERNEL_DATA, PAGE_SIZE, Perms::RW, Domain::Kernel, None);
    }

    fn symbol(&self, program: usize, name: &str) -> Result<Addr, ScenarioError> {
        let p = &self.programs[program];
        p.image
            .symbol(name)
            .ok_or_else(|| ScenarioError::Layout(format!("{}: missing symbol {name}", p.name)))
    }
}

fn stack_top(ctx: ContextId) -> Addr {
    crate::machine::USER_STACK_BASE + (ctx.0 as u64 + 1) * PAGE_SIZE
}

fn kernel_stack_top(ctx: ContextId) -> Addr {
    KERNEL_STACK_BASE + (ctx.0 as u64 + 1) * PAGE_SIZE
}

fn loc(space: AddressSpaceId, addr: Addr) -> Location {
    Location { space, addr }
}

/// Builds a scenario. Sources come from the built-in assets unless
/// `params.asset_dir` overrides them.
pub fn build_scenario(id: ScenarioId, params: &ScenarioParams) -> Result<Scenario, ScenarioError> {
    let mut b = Builder {
        params,
        programs: Vec::new(),
        setup: Vec::new(),
    };
    b.probe();
    let c0 = ContextId(0);
    let c1 = ContextId(1);
    let mut round = vec![RoundStep::ResetContexts];
    let mut requirements = vec![Requirement::SharedProbePage];
    let (schedule, attacker, secret, receiver_space);
    let mut training = Vec::new();

    match id {
        ScenarioId::Attack1 => {
            b.user_space(S0);
            let p = b.add("attack1", Role::Attacker, Mode::User, S0)?;
            b.setup.push(SetupStep::Spawn { program: p });
            let addr = if params.kernel_secret {
                b.kernel();
                requirements.push(Requirement::KptiOffMeltdownUnpatched);
                KERNEL_SECRET
            } else {
                RESTRICTED_SECRET
            };
            let domain = if params.kernel_secret {
                SecretDomain::Kernel
            } else {
                SecretDomain::Restricted
            };
            secret = Secret {
                bytes: params.secret.clone(),
                addr,
                domain,
                space: S0,
            };
            round.push(RoundStep::SecretPointer {
                at: loc(S0, ARG_PTR),
            });
            round.push(RoundStep::WarmSecret);
            schedule = vec![(c0, SLICE)];
            attacker = c0;
            receiver_space = S0;
        }
        ScenarioId::Attack2a => {
            requirements.push(Requirement::SharedAddressSpace);
            b.user_space(S0);
            let v = b.add("attack2a_victim", Role::Victim, Mode::User, S0)?;
            let a = b.add("attack2a_attacker", Role::Attacker, Mode::User, S0)?;
            b.setup.push(SetupStep::Spawn { program: v });
            b.setup.push(SetupStep::Spawn { program: a });
            secret = Secret {
                bytes: params.secret.clone(),
                addr: RESTRICTED_SECRET,
                domain: SecretDomain::Victim,
                space: S0,
            };
            round.push(RoundStep::SecretPointer {
                at: loc(S0, ARG_PTR),
            });
            round.push(RoundStep::Word {
                at: loc(S0, ARG_SLOT),
                value: stack_top(c0) - 8,
            });
            schedule = vec![(c0, SLICE), (c1, SLICE)];
            attacker = c1;
            receiver_space = S0;
        }
        ScenarioId::Attack2b => {
            requirements.extend([
                Requirement::SharedAddressSpace,
                Requirement::SmepDisabled,
                Requirement::KernelStackAddress,
            ]);
            b.user_space(S0);
            b.kernel();
            let v = b.add("attack2b_victim", Role::Victim, Mode::User, S0)?;
            let k = b.add("attack2b_kernel", Role::Kernel, Mode::Kernel, S0)?;
            let a = b.add("attack2b_attacker", Role::Attacker, Mode::User, S0)?;
            b.setup.push(SetupStep::Load { program: k });
            b.setup.push(SetupStep::Spawn { program: v });
            b.setup.push(SetupStep::Spawn { program: a });
            let handler = b.symbol(k, "sys_block")?;
            b.setup.push(SetupStep::Syscall { n: 1, handler });
            secret = Secret {
                bytes: params.secret.clone(),
                addr: KERNEL_SECRET,
                domain: SecretDomain::Kernel,
                space: S0,
            };
            round.push(RoundStep::SecretPointer {
                at: loc(S0, KERNEL_ARGS),
            });
            // k_wait's return address: two calls below the kernel stack top
            round.push(RoundStep::EvictionPointers {
                at: loc(S0, ARG_EVICT),
                region: loc(S0, EVICT_REGION),
                target: loc(S0, kernel_stack_top(c0) - 16),
            });
            schedule = vec![(c0, SLICE), (c1, SLICE)];
            attacker = c1;
            receiver_space = S0;
        }
        ScenarioId::Attack2c => {
            requirements.push(Requirement::GadgetAddress);
            let (vs, attacker_space) = (AddressSpaceId(1), AddressSpaceId(2));
            b.user_space(vs);
            b.user_space(attacker_space);
            let v = b.add("attack2c_victim", Role::Victim, Mode::User, vs)?;
            let gadget = match params.gadget {
                Some(g) => g,
                None => b.symbol(v, "gadget")?,
            };
            let src = format!(".org {:#x}\n{}", gadget - 1, b.source("attack2c_attacker")?);
            let a = b.program(
                "attack2c_attacker",
                src,
                Role::Attacker,
                Mode::User,
                attacker_space,
            )?;
            if b.symbol(a, "back")? != gadget {
                return Err(ScenarioError::Layout(
                    "attacker call site is not one before the gadget".into(),
                ));
            }
            b.setup.push(SetupStep::Spawn { program: v });
            b.setup.push(SetupStep::Spawn { program: a });
            secret = Secret {
                bytes: params.secret.clone(),
                addr: RESTRICTED_SECRET,
                domain: SecretDomain::Victim,
                space: vs,
            };
            round.push(RoundStep::SecretPointer {
                at: loc(vs, ARG_PTR),
            });
            round.push(RoundStep::EvictionPointers {
                at: loc(attacker_space, ARG_EVICT),
                region: loc(attacker_space, EVICT_REGION),
                target: loc(vs, stack_top(c0) - 8),
            });
            schedule = vec![(c0, SLICE), (c1, SLICE)];
            attacker = c1;
            receiver_space = attacker_space;
        }
        ScenarioId::Attack3 => {
            requirements.push(Requirement::SharedAddressSpace);
            b.user_space(S0);
            b.map(
                ENCLAVE_CODE,
                PAGE_SIZE,
                Perms::RX,
                Domain::Enclave,
                Some(S0),
            );
            b.map(
                ENCLAVE_DATA,
                PAGE_SIZE,
                Perms::RW,
                Domain::Enclave,
                Some(S0),
            );
            b.map(
                ENCLAVE_STACK,
                PAGE_SIZE,
                Perms::RW,
                Domain::Enclave,
                Some(S0),
            );
            let u = b.add("attack3_user", Role::Attacker, Mode::User, S0)?;
            let e = b.add("attack3_enclave", Role::Enclave, Mode::Enclave, S0)?;
            b.setup.push(SetupStep::Load { program: e });
            b.setup.push(SetupStep::Spawn { program: u });
            if b.symbol(u, "enclave_entry")? != b.symbol(e, "entry")? {
                return Err(ScenarioError::Layout("enclave entry mismatch".into()));
            }
            let esp = ENCLAVE_STACK + PAGE_SIZE - 8;
            let exit_stub = b.symbol(e, "exit_stub")?;
            b.setup.push(SetupStep::EnclaveSp { ctx: c0, sp: esp });
            b.setup.push(SetupStep::Word {
                at: loc(S0, esp),
                value: exit_stub,
            });
            secret = Secret {
                bytes: params.secret.clone(),
                addr: ENCLAVE_SECRET,
                domain: SecretDomain::Enclave,
                space: S0,
            };
            round.push(RoundStep::SecretPointer {
                at: loc(S0, ENCLAVE_ARGS),
            });
            round.push(RoundStep::Word {
                at: loc(S0, ARG_SLOT),
                value: esp,
            });
            schedule = vec![(c0, SLICE)];
            attacker = c0;
            receiver_space = S0;
        }
        ScenarioId::Attack4 => {
            requirements.extend([Requirement::SmepDisabled, Requirement::KernelStackAddress]);
            b.user_space(S0);
            b.kernel();
            let u = b.add("attack4_user", Role::Attacker, Mode::User, S0)?;
            let k = b.add("attack4_kernel", Role::Kernel, Mode::Kernel, S0)?;
            b.setup.push(SetupStep::Load { program: k });
            b.setup.push(SetupStep::Spawn { program: u });
            b.setup.push(SetupStep::Syscall {
                n: 3,
                handler: b.symbol(k, "sys_touch")?,
            });
            b.setup.push(SetupStep::Syscall {
                n: 2,
                handler: b.symbol(k, "sys_ret")?,
            });
            let ksp = kernel_stack_top(c0) - 8;
            b.setup.push(SetupStep::KernelSp { ctx: c0, sp: ksp });
            b.setup.push(SetupStep::Word {
                at: loc(S0, ksp),
                value: b.symbol(k, "k_exit")?,
            });
            secret = Secret {
                bytes: params.secret.clone(),
                addr: KERNEL_SECRET,
                domain: SecretDomain::Kernel,
                space: S0,
            };
            round.push(RoundStep::SecretPointer {
                at: loc(S0, KERNEL_ARGS),
            });
            round.push(RoundStep::SecretPointer {
                at: loc(S0, ARG_PTR),
            });
            round.push(RoundStep::EvictionPointers {
                at: loc(S0, ARG_EVICT),
                region: loc(S0, EVICT_REGION),
                target: loc(S0, ksp),
            });
            schedule = vec![(c0, SLICE)];
            attacker = c0;
            receiver_space = S0;
        }
        ScenarioId::SpectreV1 => {
            b.user_space(S0);
            let p = b.add("spectre_v1", Role::Attacker, Mode::User, S0)?;
            b.setup.push(SetupStep::Spawn { program: p });
            b.setup.push(SetupStep::SpawnAt {
                program: p,
                label: "attack".into(),
            });
            b.setup.push(SetupStep::Word {
                at: loc(S0, SPECTRE_ARRAY1_SIZE),
                value: 16,
            });
            secret = Secret {
                bytes: params.secret.clone(),
                addr: RESTRICTED_SECRET,
                domain: SecretDomain::Restricted,
                space: S0,
            };
            round.push(RoundStep::Word {
                at: loc(S0, 0x8080),
                value: 0,
            });
            round.push(RoundStep::SecretOffset {
                at: loc(S0, 0x8088),
                base: SPECTRE_ARRAY1,
            });
            round.push(RoundStep::WarmSecret);
            training = vec![(c0, SLICE)];
            schedule = vec![(c1, SLICE)];
            attacker = c1;
            receiver_space = S0;
        }
    }
    b.setup.push(SetupStep::PlantSecret);

    Ok(Scenario {
        id,
        programs: b.programs,
        setup: b.setup,
        round,
        training,
        schedule,
        attacker,
        secret,
        receiver: params.receiver,
        probe_base: PROBE_BASE,
        receiver_space,
        requirements,
        max_cycles: MAX_CYCLES,
    })
}

impl Scenario {
    /// Machine configuration actually used for `config`: Prime+Probe needs
    /// a cache with a set per probe slot.
    pub fn effective_config(&self, config: &MachineConfig) -> MachineConfig {
        let mut c = *config;
        if self.receiver == Receiver::PrimeProbe {
            c.cache.sets = c.cache.sets.max(PRIME_PROBE_SETS);
        }
        c
    }

    /// Builds the machine and runs the one-time setup. Programs are
    /// hardened with whatever code transforms `config` enables.
    pub fn prepare(&self, config: &MachineConfig) -> Result<Machine, ScenarioError> {
        let config = self.effective_config(config);
        let mut m = Machine::new(config)?;
        for step in &self.setup {
            match step {
                SetupStep::Map {
                    base,
                    len,
                    perms,
                    domain,
                    space,
                } => m.map_region(*base, *len, *perms, *domain, *space)?,
                SetupStep::Load { program } => {
                    let p = &self.programs[*program];
                    m.load_image(&harden(&p.image, &config.defenses), p.space)?;
                }
                SetupStep::Spawn { program } => {
                    let p = &self.programs[*program];
                    m.spawn_context(&harden(&p.image, &config.defenses), p.mode, p.space)?;
                }
                SetupStep::SpawnAt { program, label } => {
                    let p = &self.programs[*program];
                    let mut img = harden(&p.image, &config.defenses);
                    img.entry = img.symbol(label).ok_or_else(|| {
                        ScenarioError::Layout(format!("{}: missing symbol {label}", p.name))
                    })?;
                    m.spawn_context(&img, p.mode, p.space)?;
                }
                SetupStep::Syscall { n, handler } => m.register_syscall(*n, *handler),
                SetupStep::KernelSp { ctx, sp } => m.set_kernel_sp(*ctx, *sp)?,
                SetupStep::EnclaveSp { ctx, sp } => m.set_enclave_sp(*ctx, *sp)?,
                SetupStep::Word { at, value } => m.write_word(at.space, at.addr, *value)?,
                SetupStep::PlantSecret => {
                    m.write_bytes(self.secret.space, self.secret.addr, &self.secret.bytes)?
                }
            }
        }
        Ok(m)
    }

    /// Host work before leaking byte `k`. Call [`Scenario::prepare_receiver`]
    /// after the training schedule, if any, has run.
    pub fn prepare_round(&self, m: &mut Machine, k: usize) -> Result<(), ScenarioError> {
        let secret_at = self.secret.addr + k as Addr;
        for step in &self.round {
            match step {
                RoundStep::ResetContexts => {
                    for i in 0..m.contexts().len() {
                        m.reset_context(ContextId(i))?;
                    }
                }
                RoundStep::SecretPointer { at } => m.write_word(at.space, at.addr, secret_at)?,
                RoundStep::SecretOffset { at, base } => {
                    m.write_word(at.space, at.addr, secret_at.wrapping_sub(*base))?
                }
                RoundStep::Word { at, value } => m.write_word(at.space, at.addr, *value)?,
                RoundStep::WarmSecret => {
                    m.timed_access(self.secret.space, secret_at)?;
                }
                RoundStep::Flush { at } => m.flush(at.space, at.addr)?,
                RoundStep::EvictionPointers { at, region, target } => {
                    let pa = m
                        .phys_addr(target.space, target.addr)
                        .ok_or(MachineError::UnmappedData(target.addr))?;
                    let ways = m.cache().geometry().ways;
                    let lines = congruent_lines(m, *region, pa, ways);
                    if lines.len() < ways {
                        return Err(ScenarioError::Layout("eviction region too small".into()));
                    }
                    for (i, &l) in lines.iter().enumerate() {
                        m.write_word(at.space, at.addr + 8 * i as Addr, l)?;
                        m.flush(region.space, l)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Flushes the probe array or primes the monitored sets.
    pub fn prepare_receiver(&self, m: &mut Machine) -> Result<(), ScenarioError> {
        match self.receiver {
            Receiver::FlushReload => {
                for s in 0..PROBE_SLOTS {
                    m.flush(
                        self.receiver_space,
                        self.probe_base + s as u64 * PROBE_STRIDE,
                    )?;
                }
            }
            Receiver::PrimeProbe => {
                let sets = self.eviction_sets(m)?;
                prime(m, &sets)?;
            }
        }
        Ok(())
    }

    pub fn eviction_sets(&self, m: &Machine) -> Result<EvictionSets, ScenarioError> {
        build_eviction_sets(
            m,
            loc(self.receiver_space, EVICT_REGION),
            loc(self.receiver_space, self.probe_base),
        )
    }

    /// Decodes one byte from the probe array.
    pub fn receive(&self, m: &mut Machine, threshold: u64) -> Result<u8, ReceiveError> {
        match self.receiver {
            Receiver::FlushReload => {
                receive_flush_reload(m, self.receiver_space, self.probe_base, threshold)
            }
            Receiver::PrimeProbe => {
                let sets = self
                    .eviction_sets(m)
                    .map_err(|_| ReceiveError::Ambiguous { hits: Vec::new() })?;
                receive_prime_probe(m, &sets, threshold)
            }
        }
    }
}

/// Lines of `region` (one per page, same page offset) whose physical set
/// matches `target_pa`.
pub fn congruent_lines(m: &Machine, region: Location, target_pa: u64, count: usize) -> Vec<Addr> {
    let g = m.cache().geometry();
    let want = g.set_of(target_pa);
    (0..EVICT_PAGES)
        .map(|i| region.addr + i * PAGE_SIZE + (target_pa & (PAGE_SIZE - 1)))
        .filter(|&a| {
            m.phys_addr(region.space, a)
                .is_some_and(|pa| g.set_of(pa) == want && g.line_of(pa) != g.line_of(target_pa))
        })
        .take(count)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReceiveError {
    #[error("ambiguous read: {} candidate slots", hits.len())]
    Ambiguous { hits: Vec<usize> },
}

/// Times every probe slot from 1 and flushes it again. The unique fast
/// slot `i` decodes to byte `i - 1`.
pub fn receive_flush_reload(
    m: &mut Machine,
    space: AddressSpaceId,
    probe_base: Addr,
    threshold: u64,
) -> Result<u8, ReceiveError> {
    let mut hits = Vec::new();
    for i in 1..PROBE_SLOTS {
        let a = probe_base + i as u64 * PROBE_STRIDE;
        let Ok(r) = m.timed_access(space, a) else {
            return Err(ReceiveError::Ambiguous { hits });
        };
        let _ = m.flush(space, a);
        if r.latency < threshold {
            hits.push(i);
        }
    }
    match hits.as_slice() {
        [i] => Ok((i - 1) as u8),
        _ => Err(ReceiveError::Ambiguous { hits }),
    }
}

/// Attacker lines covering the cache set of every probe slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictionSets {
    pub space: AddressSpaceId,
    /// Indexed by probe slot; slot 0 is left empty.
    pub slots: Vec<Vec<Addr>>,
}

pub fn build_eviction_sets(
    m: &Machine,
    region: Location,
    probe: Location,
) -> Result<EvictionSets, ScenarioError> {
    let ways = m.cache().geometry().ways;
    let mut slots = vec![Vec::new()];
    for i in 1..PROBE_SLOTS {
        let a = probe.addr + i as u64 * PROBE_STRIDE;
        let pa = m
            .phys_addr(probe.space, a)
            .ok_or(MachineError::UnmappedData(a))?;
        let lines = congruent_lines(m, region, pa, ways);
        if lines.len() < ways {
            return Err(ScenarioError::Layout(format!(
                "no eviction set for probe slot {i}"
            )));
        }
        slots.push(lines);
    }
    Ok(EvictionSets {
        space: region.space,
        slots,
    })
}

/// Fills every monitored set with attacker lines.
pub fn prime(m: &mut Machine, sets: &EvictionSets) -> Result<(), MachineError> {
    for lines in &sets.slots {
        for &l in lines {
            m.timed_access(sets.space, l)?;
        }
    }
    Ok(())
}

/// Re-touches the primed lines; the unique set with a slow access is the
/// one the transmitter evicted.
pub fn receive_prime_probe(
    m: &mut Machine,
    sets: &EvictionSets,
    threshold: u64,
) -> Result<u8, ReceiveError> {
    let mut hits = Vec::new();
    for (i, lines) in sets.slots.iter().enumerate().skip(1) {
        let mut evicted = false;
        for &l in lines {
            match m.timed_access(sets.space, l) {
                Ok(r) if r.latency >= threshold => evicted = true,
                Ok(_) => {}
                Err(_) => return Err(ReceiveError::Ambiguous { hits }),
            }
        }
        if evicted {
            hits.push(i);
        }
    }
    match hits.as_slice() {
        [i] => Ok((i - 1) as u8),
        _ => Err(ReceiveError::Ambiguous { hits }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub scenario: ScenarioId,
    pub success: bool,
    /// One entry per secret byte; `None` where the receiver could not decide.
    pub recovered: Vec<Option<u8>>,
    pub accuracy: f64,
    pub cycles: u64,
    /// Same as `success`: the attack got past the configured defenses.
    pub bypassed: bool,
    /// Rounds that ended in a fault or ran out of cycles.
    pub aborted_rounds: usize,
}

impl AttackOutcome {
    pub fn recovered_hex(&self) -> String {
        self.recovered
            .iter()
            .map(|b| b.map_or("??".to_string(), |v| format!("{v:02x}")))
            .collect::<Vec<_>>()
            .join("")
    }
}

/// Runs `scenario` with `defenses` on the hardware of `preset`.
pub fn run_attack(
    scenario: &Scenario,
    defenses: DefenseConfig,
    preset: Preset,
    seed: u64,
) -> Result<AttackOutcome, ScenarioError> {
    let mut cfg = MachineConfig::preset(preset);
    cfg.defenses = defenses;
    cfg.seed = seed;
    run_attack_with(scenario, &cfg, None)
}

/// Full-control variant. When `trace` is given, every round's events are
/// appended to it.
pub fn run_attack_with(
    scenario: &Scenario,
    config: &MachineConfig,
    mut trace: Option<&mut Vec<TraceEvent>>,
) -> Result<AttackOutcome, ScenarioError> {
    let mut m = scenario.prepare(config)?;
    m.set_tracing(trace.is_some());
    let threshold = m.timing().default_threshold();
    let mut recovered = Vec::with_capacity(scenario.secret.bytes.len());
    let mut cycles = 0;
    let mut aborted = 0;
    for k in 0..scenario.secret.bytes.len() {
        scenario.prepare_round(&mut m, k)?;
        let mut halted = true;
        if !scenario.training.is_empty() {
            let r = run(&mut m, &scenario.training, scenario.max_cycles)?;
            cycles += r.cycles;
            halted = r.halt_reason == HaltReason::Halt;
            if let Some(t) = trace.as_deref_mut() {
                t.extend(r.trace);
            }
        }
        scenario.prepare_receiver(&mut m)?;
        let r = run(&mut m, &scenario.schedule, scenario.max_cycles)?;
        cycles += r.cycles;
        if let Some(t) = trace.as_deref_mut() {
            t.extend(r.trace);
        }
        if !halted || r.halt_reason != HaltReason::Halt {
            aborted += 1;
            recovered.push(None);
            continue;
        }
        recovered.push(scenario.receive(&mut m, threshold).ok());
    }
    let correct = recovered
        .iter()
        .zip(&scenario.secret.bytes)
        .filter(|(r, s)| **r == Some(**s))
        .count();
    let n = scenario.secret.bytes.len();
    let accuracy = if n == 0 {
        1.0
    } else {
        correct as f64 / n as f64
    };
    let success = correct == n;
    Ok(AttackOutcome {
        scenario: scenario.id,
        success,
        recovered,
        accuracy,
        cycles,
        bypassed: success,
        aborted_rounds: aborted,
    })
}
