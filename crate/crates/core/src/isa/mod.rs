//! Toy instruction set used to express scenarios, plus a text assembler and
//! disassembler.
//!
//! Every instruction occupies exactly one address unit, so the instruction at
//! index `k` of an image lives at `image.base + k`.

mod asm;
mod disasm;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub(crate) use asm::parse_number;
pub use asm::{assemble, AsmError, AsmErrorKind};
pub use disasm::disassemble;
pub(crate) use disasm::format_op;

pub type Addr = u64;

/// Default `.org` base for code.
pub const DEFAULT_CODE_BASE: Addr = 0x1000;
/// Default base of the `.data` segment.
pub const DEFAULT_DATA_BASE: Addr = 0x8000;

/// General purpose register `r0`..`r15`. `r15` is the stack pointer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(u8);

impl Reg {
    pub const COUNT: usize = 16;
    pub const SP: Reg = Reg(15);

    pub fn new(index: u8) -> Option<Reg> {
        (usize::from(index) < Self::COUNT).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Line/column of the source text an instruction came from (1-based).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Span {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

/// Second operand of ALU instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Src {
    Reg(Reg),
    Imm(i64),
    /// An immediate that was written as a symbol. Kept distinct from `Imm`
    /// so code transforms can relocate code addresses.
    Label(Addr),
}

/// `[base + disp]` memory operand. Either part may be absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mem {
    pub base: Option<Reg>,
    pub disp: i64,
}

impl Mem {
    pub fn reg(base: Reg) -> Mem {
        Mem {
            base: Some(base),
            disp: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Direct(Addr),
    Indirect(Reg),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mnemonic {
    Mov,
    Load,
    Store,
    Add,
    Sub,
    And,
    Shl,
    Cmp,
    Jz,
    Jnz,
    Jmp,
    Call,
    Ret,
    Push,
    Pop,
    Clflush,
    Rdtscp,
    Lfence,
    Cpuid,
    Syscall,
    Sysret,
    Eenter,
    Eexit,
    Yield,
    Halt,
    Nop,
}

impl Mnemonic {
    pub const ALL: [Mnemonic; 26] = [
        Mnemonic::Mov,
        Mnemonic::Load,
        Mnemonic::Store,
        Mnemonic::Add,
        Mnemonic::Sub,
        Mnemonic::And,
        Mnemonic::Shl,
        Mnemonic::Cmp,
        Mnemonic::Jz,
        Mnemonic::Jnz,
        Mnemonic::Jmp,
        Mnemonic::Call,
        Mnemonic::Ret,
        Mnemonic::Push,
        Mnemonic::Pop,
        Mnemonic::Clflush,
        Mnemonic::Rdtscp,
        Mnemonic::Lfence,
        Mnemonic::Cpuid,
        Mnemonic::Syscall,
        Mnemonic::Sysret,
        Mnemonic::Eenter,
        Mnemonic::Eexit,
        Mnemonic::Yield,
        Mnemonic::Halt,
        Mnemonic::Nop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mnemonic::Mov => "mov",
            Mnemonic::Load => "load",
            Mnemonic::Store => "store",
            Mnemonic::Add => "add",
            Mnemonic::Sub => "sub",
            Mnemonic::And => "and",
            Mnemonic::Shl => "shl",
            Mnemonic::Cmp => "cmp",
            Mnemonic::Jz => "jz",
            Mnemonic::Jnz => "jnz",
            Mnemonic::Jmp => "jmp",
            Mnemonic::Call => "call",
            Mnemonic::Ret => "ret",
            Mnemonic::Push => "push",
            Mnemonic::Pop => "pop",
            Mnemonic::Clflush => "clflush",
            Mnemonic::Rdtscp => "rdtscp",
            Mnemonic::Lfence => "lfence",
            Mnemonic::Cpuid => "cpuid",
            Mnemonic::Syscall => "syscall",
            Mnemonic::Sysret => "sysret",
            Mnemonic::Eenter => "eenter",
            Mnemonic::Eexit => "eexit",
            Mnemonic::Yield => "yield",
            Mnemonic::Halt => "halt",
            Mnemonic::Nop => "nop",
        }
    }
}

impl FromStr for Mnemonic {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Mnemonic::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == lower)
            .ok_or(())
    }
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A decoded instruction with its operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Mov(Reg, Src),
    /// 64-bit little-endian load.
    Load(Reg, Mem),
    /// 64-bit little-endian store.
    Store(Mem, Reg),
    Add(Reg, Src),
    Sub(Reg, Src),
    And(Reg, Src),
    Shl(Reg, Src),
    Cmp(Reg, Src),
    Jz(Addr),
    Jnz(Addr),
    Jmp(Target),
    Call(Target),
    Ret,
    Push(Reg),
    Pop(Reg),
    Clflush(Mem),
    Rdtscp(Reg),
    Lfence,
    Cpuid,
    Syscall(u64),
    Sysret,
    Eenter(Addr),
    Eexit,
    Yield,
    Halt,
    Nop,
}

impl Op {
    pub fn mnemonic(&self) -> Mnemonic {
        match self {
            Op::Mov(..) => Mnemonic::Mov,
            Op::Load(..) => Mnemonic::Load,
            Op::Store(..) => Mnemonic::Store,
            Op::Add(..) => Mnemonic::Add,
            Op::Sub(..) => Mnemonic::Sub,
            Op::And(..) => Mnemonic::And,
            Op::Shl(..) => Mnemonic::Shl,
            Op::Cmp(..) => Mnemonic::Cmp,
            Op::Jz(_) => Mnemonic::Jz,
            Op::Jnz(_) => Mnemonic::Jnz,
            Op::Jmp(_) => Mnemonic::Jmp,
            Op::Call(_) => Mnemonic::Call,
            Op::Ret => Mnemonic::Ret,
            Op::Push(_) => Mnemonic::Push,
            Op::Pop(_) => Mnemonic::Pop,
            Op::Clflush(_) => Mnemonic::Clflush,
            Op::Rdtscp(_) => Mnemonic::Rdtscp,
            Op::Lfence => Mnemonic::Lfence,
            Op::Cpuid => Mnemonic::Cpuid,
            Op::Syscall(_) => Mnemonic::Syscall,
            Op::Sysret => Mnemonic::Sysret,
            Op::Eenter(_) => Mnemonic::Eenter,
            Op::Eexit => Mnemonic::Eexit,
            Op::Yield => Mnemonic::Yield,
            Op::Halt => Mnemonic::Halt,
            Op::Nop => Mnemonic::Nop,
        }
    }

    pub fn is_conditional_branch(&self) -> bool {
        matches!(self, Op::Jz(_) | Op::Jnz(_))
    }

    /// Direct code address this instruction refers to, if any.
    pub fn code_ref(&self) -> Option<Addr> {
        match *self {
            Op::Jz(a) | Op::Jnz(a) | Op::Eenter(a) => Some(a),
            Op::Jmp(Target::Direct(a)) | Op::Call(Target::Direct(a)) => Some(a),
            _ => None,
        }
    }

    /// Rewrites every code address through `f`: branch targets and
    /// symbol-valued immediates.
    pub fn relocate(self, f: impl Fn(Addr) -> Addr) -> Op {
        let src = |s: Src| match s {
            Src::Label(a) => Src::Label(f(a)),
            other => other,
        };
        match self {
            Op::Mov(r, s) => Op::Mov(r, src(s)),
            Op::Add(r, s) => Op::Add(r, src(s)),
            Op::Sub(r, s) => Op::Sub(r, src(s)),
            Op::And(r, s) => Op::And(r, src(s)),
            Op::Shl(r, s) => Op::Shl(r, src(s)),
            Op::Cmp(r, s) => Op::Cmp(r, src(s)),
            Op::Jz(a) => Op::Jz(f(a)),
            Op::Jnz(a) => Op::Jnz(f(a)),
            Op::Eenter(a) => Op::Eenter(f(a)),
            Op::Jmp(Target::Direct(a)) => Op::Jmp(Target::Direct(f(a))),
            Op::Call(Target::Direct(a)) => Op::Call(Target::Direct(f(a))),
            other => other,
        }
    }
}

/// One instruction plus where it came from. Equality ignores the span.
#[derive(Debug, Clone, Copy)]
pub struct Instruction {
    pub op: Op,
    pub span: Span,
}

impl Instruction {
    pub fn new(op: Op) -> Instruction {
        Instruction {
            op,
            span: Span::default(),
        }
    }
}

impl PartialEq for Instruction {
    fn eq(&self, other: &Self) -> bool {
        self.op == other.op
    }
}

impl Eq for Instruction {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSegment {
    pub base: Addr,
    pub bytes: Vec<u8>,
}

impl Default for DataSegment {
    fn default() -> Self {
        DataSegment {
            base: DEFAULT_DATA_BASE,
            bytes: Vec::new(),
        }
    }
}

/// An assembled program: fixed-width code, resolved labels and one data
/// segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramImage {
    pub base: Addr,
    pub instructions: Vec<Instruction>,
    /// Code and data labels.
    pub labels: BTreeMap<String, Addr>,
    /// Symbols declared with `.extern`: addresses outside this image.
    pub externs: BTreeMap<String, Addr>,
    pub data: DataSegment,
    pub entry: Addr,
}

impl ProgramImage {
    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// One past the last instruction address.
    pub fn end(&self) -> Addr {
        self.base + self.instructions.len() as Addr
    }

    pub fn contains_code(&self, addr: Addr) -> bool {
        (self.base..self.end()).contains(&addr)
    }

    pub fn at(&self, addr: Addr) -> Option<&Instruction> {
        if self.contains_code(addr) {
            self.instructions.get((addr - self.base) as usize)
        } else {
            None
        }
    }

    /// Iterates `(address, instruction)` pairs in order.
    pub fn iter(&self) -> impl Iterator<Item = (Addr, &Instruction)> + '_ {
        self.instructions
            .iter()
            .enumerate()
            .map(move |(k, ins)| (self.base + k as Addr, ins))
    }

    /// Address of a label or extern symbol.
    pub fn symbol(&self, name: &str) -> Option<Addr> {
        self.labels
            .get(name)
            .or_else(|| self.externs.get(name))
            .copied()
    }
}
