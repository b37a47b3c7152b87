use std::collections::BTreeMap;

use thiserror::Error;

use super::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("`{mnemonic}` takes {expected} operand(s), found {found}")]
    Arity {
        mnemonic: Mnemonic,
        expected: usize,
        found: usize,
    },
    #[error("bad operand: {0}")]
    BadOperand(String),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("branch target `{0}` is outside the image and not declared .extern")]
    TargetOutsideImage(String),
    #[error("bad directive: {0}")]
    BadDirective(String),
    #[error("bad number `{0}`")]
    BadNumber(String),
    #[error(".org must appear before the first instruction")]
    OrgAfterCode,
    #[error("program has no instructions")]
    EmptyProgram,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{span}: {kind}")]
pub struct AsmError {
    pub span: Span,
    pub kind: AsmErrorKind,
}

fn err<T>(span: Span, kind: AsmErrorKind) -> Result<T, AsmError> {
    Err(AsmError { span, kind })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Text,
    Data,
}

/// A token with the column it starts at.
#[derive(Debug, Clone)]
struct Piece<'a> {
    text: &'a str,
    col: usize,
}

#[derive(Debug)]
enum Stmt<'a> {
    Instr {
        span: Span,
        mnemonic: Mnemonic,
        operands: Vec<Piece<'a>>,
    },
    Words {
        span: Span,
        offset: usize,
        values: Vec<Piece<'a>>,
    },
}

enum LabelSite {
    Code(usize),
    Data(usize),
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub(crate) fn parse_number(text: &str) -> Option<i64> {
    let t = text.trim().replace('_', "");
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.as_str()),
    };
    let magnitude = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()?
    } else {
        if body.is_empty() || !body.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        body.parse::<u64>().ok()?
    };
    let v = magnitude as i64;
    Some(if neg { v.wrapping_neg() } else { v })
}

fn parse_reg(text: &str) -> Option<Reg> {
    let t = text.trim().to_ascii_lowercase();
    if t == "sp" {
        return Some(Reg::SP);
    }
    let digits = t.strip_prefix('r')?;
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    Reg::new(digits.parse().ok()?)
}

/// Splits `text` on commas, keeping track of each piece's column.
fn split_operands(text: &str, col0: usize) -> Vec<Piece<'_>> {
    if text.trim().is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text
        .char_indices()
        .chain(std::iter::once((text.len(), ',')))
    {
        if c == ',' {
            let raw = &text[start..i];
            let lead = raw.len() - raw.trim_start().len();
            out.push(Piece {
                text: raw.trim(),
                col: col0 + start + lead,
            });
            start = i + 1;
        }
    }
    out
}

struct Resolver<'s> {
    labels: &'s BTreeMap<String, Addr>,
    externs: &'s BTreeMap<String, Addr>,
    code: std::ops::Range<Addr>,
}

impl Resolver<'_> {
    fn symbol(&self, name: &str, span: Span) -> Result<Addr, AsmError> {
        match self.labels.get(name).or_else(|| self.externs.get(name)) {
            Some(a) => Ok(*a),
            None => err(span, AsmErrorKind::UndefinedLabel(name.to_string())),
        }
    }

    fn value(&self, p: &Piece<'_>, span: Span) -> Result<Src, AsmError> {
        if let Some(r) = parse_reg(p.text) {
            return Ok(Src::Reg(r));
        }
        if let Some(n) = parse_number(p.text) {
            return Ok(Src::Imm(n));
        }
        if is_ident(p.text) {
            return Ok(Src::Label(self.symbol(p.text, span)?));
        }
        err(span, AsmErrorKind::BadOperand(p.text.to_string()))
    }

    fn target(&self, p: &Piece<'_>, span: Span) -> Result<Addr, AsmError> {
        let addr = if let Some(n) = parse_number(p.text) {
            n as Addr
        } else if is_ident(p.text) {
            self.symbol(p.text, span)?
        } else {
            return err(span, AsmErrorKind::BadOperand(p.text.to_string()));
        };
        let external = self.externs.values().any(|&a| a == addr);
        if self.code.contains(&addr) || external {
            Ok(addr)
        } else {
            err(span, AsmErrorKind::TargetOutsideImage(p.text.to_string()))
        }
    }

    fn mem(&self, p: &Piece<'_>, span: Span) -> Result<Mem, AsmError> {
        let bad = || AsmError {
            span,
            kind: AsmErrorKind::BadOperand(p.text.to_string()),
        };
        let inner = p
            .text
            .strip_prefix('[')
            .and_then(|t| t.strip_suffix(']'))
            .ok_or_else(bad)?;
        let mut base = None;
        let mut disp: i64 = 0;
        let mut sign = 1i64;
        let mut term = String::new();
        let mut terms = Vec::new();
        for c in inner.chars().chain(std::iter::once('+')) {
            if (c == '+' || c == '-') && !term.trim().is_empty() {
                terms.push((sign, std::mem::take(&mut term)));
                sign = if c == '-' { -1 } else { 1 };
            } else if c == '-' && term.trim().is_empty() {
                sign = -sign;
            } else if c == '+' && term.trim().is_empty() {
                continue;
            } else {
                term.push(c);
            }
        }
        if terms.is_empty() {
            return Err(bad());
        }
        for (sign, t) in terms {
            let t = t.trim();
            if let Some(r) = parse_reg(t) {
                if base.is_some() || sign < 0 {
                    return Err(bad());
                }
                base = Some(r);
            } else if let Some(n) = parse_number(t) {
                disp = disp.wrapping_add(sign.wrapping_mul(n));
            } else if is_ident(t) {
                let a = self.symbol(t, span)? as i64;
                disp = disp.wrapping_add(sign.wrapping_mul(a));
            } else {
                return Err(bad());
            }
        }
        Ok(Mem { base, disp })
    }
}

fn expect_reg(p: &Piece<'_>, span: Span) -> Result<Reg, AsmError> {
    parse_reg(p.text).ok_or_else(|| AsmError {
        span,
        kind: AsmErrorKind::BadOperand(format!("expected register, found `{}`", p.text)),
    })
}

fn arity(mnemonic: Mnemonic) -> usize {
    use Mnemonic::*;
    match mnemonic {
        Mov | Load | Store | Add | Sub | And | Shl | Cmp => 2,
        Jz | Jnz | Jmp | Call | Push | Pop | Clflush | Rdtscp | Syscall | Eenter => 1,
        Ret | Lfence | Cpuid | Sysret | Eexit | Yield | Halt | Nop => 0,
    }
}

fn build_op(
    mnemonic: Mnemonic,
    ops: &[Piece<'_>],
    line: usize,
    r: &Resolver<'_>,
) -> Result<Op, AsmError> {
    let at = |i: usize| Span {
        line,
        col: ops[i].col,
    };
    let alu = |f: fn(Reg, Src) -> Op| -> Result<Op, AsmError> {
        Ok(f(expect_reg(&ops[0], at(0))?, r.value(&ops[1], at(1))?))
    };
    let branch = |i: usize| -> Result<Target, AsmError> {
        match parse_reg(ops[i].text) {
            Some(reg) => Ok(Target::Indirect(reg)),
            None => Ok(Target::Direct(r.target(&ops[i], at(i))?)),
        }
    };
    use Mnemonic as M;
    Ok(match mnemonic {
        M::Mov => alu(Op::Mov)?,
        M::Add => alu(Op::Add)?,
        M::Sub => alu(Op::Sub)?,
        M::And => alu(Op::And)?,
        M::Shl => alu(Op::Shl)?,
        M::Cmp => alu(Op::Cmp)?,
        M::Load => Op::Load(expect_reg(&ops[0], at(0))?, r.mem(&ops[1], at(1))?),
        M::Store => Op::Store(r.mem(&ops[0], at(0))?, expect_reg(&ops[1], at(1))?),
        M::Clflush => Op::Clflush(r.mem(&ops[0], at(0))?),
        M::Jz => Op::Jz(r.target(&ops[0], at(0))?),
        M::Jnz => Op::Jnz(r.target(&ops[0], at(0))?),
        M::Eenter => Op::Eenter(r.target(&ops[0], at(0))?),
        M::Jmp => Op::Jmp(branch(0)?),
        M::Call => Op::Call(branch(0)?),
        M::Push => Op::Push(expect_reg(&ops[0], at(0))?),
        M::Pop => Op::Pop(expect_reg(&ops[0], at(0))?),
        M::Rdtscp => Op::Rdtscp(expect_reg(&ops[0], at(0))?),
        M::Syscall => match parse_number(ops[0].text) {
            Some(n) if n >= 0 => Op::Syscall(n as u64),
            _ => return err(at(0), AsmErrorKind::BadNumber(ops[0].text.to_string())),
        },
        M::Ret => Op::Ret,
        M::Lfence => Op::Lfence,
        M::Cpuid => Op::Cpuid,
        M::Sysret => Op::Sysret,
        M::Eexit => Op::Eexit,
        M::Yield => Op::Yield,
        M::Halt => Op::Halt,
        M::Nop => Op::Nop,
    })
}

/// Assembles source text into a [`ProgramImage`].
///
/// Grammar, one statement per line: optional `label:` prefixes, then either a
/// mnemonic with comma separated operands or a directive (`.org`, `.text`,
/// `.data [base]`, `.entry`, `.extern name, addr`, `.byte`, `.word`, `.zero`).
/// `;` starts a comment. Numbers are decimal or `0x` hex.
pub fn assemble(source: &str) -> Result<ProgramImage, AsmError> {
    let mut section = Section::Text;
    let mut base: Option<Addr> = None;
    let mut data_base: Option<Addr> = None;
    let mut data: Vec<u8> = Vec::new();
    let mut code_len = 0usize;
    let mut stmts: Vec<Stmt<'_>> = Vec::new();
    let mut sites: Vec<(String, LabelSite, Span)> = Vec::new();
    let mut externs = BTreeMap::new();
    let mut entry: Option<(String, Span)> = None;

    for (lineno, raw) in source.lines().enumerate() {
        let line = lineno + 1;
        let text = raw.split(';').next().unwrap_or("");
        let mut rest = text;
        let mut col = 1;

        // label prefixes
        loop {
            let trimmed = rest.trim_start();
            col += rest.len() - trimmed.len();
            rest = trimmed;
            let Some(colon) = rest.find(':') else { break };
            let name = rest[..colon].trim_end();
            if !is_ident(name) {
                break;
            }
            let span = Span { line, col };
            let site = match section {
                Section::Text => LabelSite::Code(code_len),
                Section::Data => LabelSite::Data(data.len()),
            };
            sites.push((name.to_string(), site, span));
            rest = &rest[colon + 1..];
            col += colon + 1;
        }
        if rest.trim().is_empty() {
            continue;
        }
        let span = Span { line, col };
        let (head, tail) = match rest.find(char::is_whitespace) {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, ""),
        };
        let tail_col = col + head.len();
        let operands = split_operands(tail, tail_col);

        if let Some(directive) = head.strip_prefix('.') {
            let one_number = |ops: &[Piece<'_>]| -> Result<i64, AsmError> {
                match ops {
                    [p] => parse_number(p.text).ok_or_else(|| AsmError {
                        span,
                        kind: AsmErrorKind::BadNumber(p.text.to_string()),
                    }),
                    _ => err(span, AsmErrorKind::BadDirective(rest.trim().to_string())),
                }
            };
            match directive.to_ascii_lowercase().as_str() {
                "org" => {
                    if code_len > 0 || base.is_some() {
                        return err(span, AsmErrorKind::OrgAfterCode);
                    }
                    base = Some(one_number(&operands)? as Addr);
                }
                "text" => section = Section::Text,
                "data" => {
                    section = Section::Data;
                    if !operands.is_empty() {
                        let b = one_number(&operands)? as Addr;
                        match data_base {
                            Some(old) if old != b || !data.is_empty() => {
                                return err(
                                    span,
                                    AsmErrorKind::BadDirective(
                                        "data base cannot change once set".into(),
                                    ),
                                )
                            }
                            _ => data_base = Some(b),
                        }
                    }
                }
                "entry" => match operands.as_slice() {
                    [p] if is_ident(p.text) => entry = Some((p.text.to_string(), span)),
                    _ => return err(span, AsmErrorKind::BadDirective(rest.trim().to_string())),
                },
                "extern" => match operands.as_slice() {
                    [name, value] if is_ident(name.text) => {
                        let v = parse_number(value.text).ok_or_else(|| AsmError {
                            span,
                            kind: AsmErrorKind::BadNumber(value.text.to_string()),
                        })?;
                        if externs.insert(name.text.to_string(), v as Addr).is_some() {
                            return err(span, AsmErrorKind::DuplicateLabel(name.text.to_string()));
                        }
                    }
                    _ => return err(span, AsmErrorKind::BadDirective(rest.trim().to_string())),
                },
                "byte" | "word" | "zero" if section != Section::Data => {
                    return err(
                        span,
                        AsmErrorKind::BadDirective(format!(".{directive} outside .data")),
                    )
                }
                "byte" => {
                    if operands.is_empty() {
                        return err(
                            span,
                            AsmErrorKind::BadDirective(".byte needs values".into()),
                        );
                    }
                    for p in &operands {
                        match parse_number(p.text) {
                            Some(v) if (-128..=255).contains(&v) => data.push(v as u8),
                            _ => return err(span, AsmErrorKind::BadNumber(p.text.to_string())),
                        }
                    }
                }
                "word" => {
                    if operands.is_empty() {
                        return err(
                            span,
                            AsmErrorKind::BadDirective(".word needs values".into()),
                        );
                    }
                    stmts.push(Stmt::Words {
                        span,
                        offset: data.len(),
                        values: operands,
                    });
                    let n = match stmts.last() {
                        Some(Stmt::Words { values, .. }) => values.len(),
                        _ => 0,
                    };
                    data.resize(data.len() + 8 * n, 0);
                }
                "zero" => {
                    let n = one_number(&operands)?;
                    if n < 0 {
                        return err(span, AsmErrorKind::BadNumber(n.to_string()));
                    }
                    data.resize(data.len() + n as usize, 0);
                }
                _ => return err(span, AsmErrorKind::BadDirective(format!(".{directive}"))),
            }
            continue;
        }

        let Ok(mnemonic) = head.parse::<Mnemonic>() else {
            return err(span, AsmErrorKind::UnknownMnemonic(head.to_string()));
        };
        if section != Section::Text {
            return err(
                span,
                AsmErrorKind::BadDirective("instructions are only allowed in .text".into()),
            );
        }
        let expected = arity(mnemonic);
        if operands.len() != expected {
            return err(
                span,
                AsmErrorKind::Arity {
                    mnemonic,
                    expected,
                    found: operands.len(),
                },
            );
        }
        stmts.push(Stmt::Instr {
            span,
            mnemonic,
            operands,
        });
        code_len += 1;
    }

    if code_len == 0 {
        return err(Span { line: 1, col: 1 }, AsmErrorKind::EmptyProgram);
    }
    let base = base.unwrap_or(DEFAULT_CODE_BASE);
    let data_base = data_base.unwrap_or(DEFAULT_DATA_BASE);

    let mut labels = BTreeMap::new();
    for (name, site, span) in sites {
        let addr = match site {
            LabelSite::Code(k) => base + k as Addr,
            LabelSite::Data(off) => data_base + off as Addr,
        };
        if externs.contains_key(&name) || labels.insert(name.clone(), addr).is_some() {
            return err(span, AsmErrorKind::DuplicateLabel(name));
        }
    }

    let resolver = Resolver {
        labels: &labels,
        externs: &externs,
        code: base..base + code_len as Addr,
    };
    let mut instructions = Vec::with_capacity(code_len);
    for stmt in &stmts {
        match stmt {
            Stmt::Instr {
                span,
                mnemonic,
                operands,
            } => {
                let op = build_op(*mnemonic, operands, span.line, &resolver)?;
                instructions.push(Instruction { op, span: *span });
            }
            Stmt::Words {
                span,
                offset,
                values,
            } => {
                for (i, p) in values.iter().enumerate() {
                    let v = if let Some(n) = parse_number(p.text) {
                        n as u64
                    } else if is_ident(p.text) {
                        resolver.symbol(p.text, *span)?
                    } else {
                        return err(*span, AsmErrorKind::BadNumber(p.text.to_string()));
                    };
                    let at = offset + 8 * i;
                    data[at..at + 8].copy_from_slice(&v.to_le_bytes());
                }
            }
        }
    }

    let entry = match entry {
        None => base,
        Some((name, span)) => match labels.get(&name) {
            Some(&a) if resolver.code.contains(&a) => a,
            Some(_) => return err(span, AsmErrorKind::TargetOutsideImage(name)),
            None => return err(span, AsmErrorKind::UndefinedLabel(name)),
        },
    };

    Ok(ProgramImage {
        base,
        instructions,
        labels,
        externs,
        data: DataSegment {
            base: data_base,
            bytes: data,
        },
        entry,
    })
}
