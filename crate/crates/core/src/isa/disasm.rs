use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::*;

fn hex(v: u64) -> String {
    format!("{v:#x}")
}

fn signed(v: i64) -> String {
    if v < 0 {
        format!("-{:#x}", v.unsigned_abs())
    } else {
        format!("{v:#x}")
    }
}

struct Names {
    by_addr: BTreeMap<Addr, String>,
    generated_code: BTreeSet<Addr>,
    generated_extern: BTreeMap<String, Addr>,
}

impl Names {
    fn new(image: &ProgramImage) -> Names {
        let mut by_addr = BTreeMap::new();
        // first name in map order wins, labels before externs
        for (name, &a) in image.labels.iter().chain(image.externs.iter()) {
            by_addr.entry(a).or_insert_with(|| name.clone());
        }
        let mut names = Names {
            by_addr,
            generated_code: BTreeSet::new(),
            generated_extern: BTreeMap::new(),
        };
        for ins in &image.instructions {
            let mut refs = Vec::new();
            if let Some(a) = ins.op.code_ref() {
                refs.push(a);
            }
            if let Op::Mov(_, Src::Label(a))
            | Op::Add(_, Src::Label(a))
            | Op::Sub(_, Src::Label(a))
            | Op::And(_, Src::Label(a))
            | Op::Shl(_, Src::Label(a))
            | Op::Cmp(_, Src::Label(a)) = ins.op
            {
                refs.push(a);
            }
            for a in refs {
                if names.by_addr.contains_key(&a) {
                    continue;
                }
                let name = format!("L_{a:x}");
                if image.contains_code(a) {
                    names.generated_code.insert(a);
                } else {
                    names.generated_extern.insert(name.clone(), a);
                }
                names.by_addr.insert(a, name);
            }
        }
        if !names.by_addr.contains_key(&image.entry) {
            names.generated_code.insert(image.entry);
            names
                .by_addr
                .insert(image.entry, format!("L_{:x}", image.entry));
        }
        names
    }

    fn name(&self, a: Addr) -> String {
        self.by_addr.get(&a).cloned().unwrap_or_else(|| hex(a))
    }
}

fn src(names: &Names, s: Src) -> String {
    match s {
        Src::Reg(r) => r.to_string(),
        Src::Imm(v) => signed(v),
        Src::Label(a) => names.name(a),
    }
}

fn mem(m: Mem) -> String {
    match (m.base, m.disp) {
        (Some(r), 0) => format!("[{r}]"),
        (Some(r), d) if d < 0 => format!("[{r}-{:#x}]", d.unsigned_abs()),
        (Some(r), d) => format!("[{r}+{d:#x}]"),
        (None, d) => format!("[{}]", signed(d)),
    }
}

fn target(names: &Names, t: Target) -> String {
    match t {
        Target::Direct(a) => names.name(a),
        Target::Indirect(r) => r.to_string(),
    }
}

/// Renders one instruction using `image`'s symbol names where possible.
pub(crate) fn format_op(op: &Op, image: Option<&ProgramImage>) -> String {
    let names = match image {
        Some(img) => Names::new(img),
        None => Names {
            by_addr: BTreeMap::new(),
            generated_code: BTreeSet::new(),
            generated_extern: BTreeMap::new(),
        },
    };
    render(&names, op)
}

fn render(names: &Names, op: &Op) -> String {
    let m = op.mnemonic();
    match *op {
        Op::Mov(r, s)
        | Op::Add(r, s)
        | Op::Sub(r, s)
        | Op::And(r, s)
        | Op::Shl(r, s)
        | Op::Cmp(r, s) => format!("{m} {r}, {}", src(names, s)),
        Op::Load(r, a) => format!("{m} {r}, {}", mem(a)),
        Op::Store(a, r) => format!("{m} {}, {r}", mem(a)),
        Op::Clflush(a) => format!("{m} {}", mem(a)),
        Op::Jz(a) | Op::Jnz(a) | Op::Eenter(a) => format!("{m} {}", names.name(a)),
        Op::Jmp(t) | Op::Call(t) => format!("{m} {}", target(names, t)),
        Op::Push(r) | Op::Pop(r) | Op::Rdtscp(r) => format!("{m} {r}"),
        Op::Syscall(n) => format!("{m} {n}"),
        Op::Ret
        | Op::Lfence
        | Op::Cpuid
        | Op::Sysret
        | Op::Eexit
        | Op::Yield
        | Op::Halt
        | Op::Nop => m.to_string(),
    }
}

/// Renders an image as re-assemblable text.
///
/// Original label names are kept; code addresses referenced without a name
/// get a generated `L_<addr>` label, and unnamed external addresses a
/// generated `.extern`.
pub fn disassemble(image: &ProgramImage) -> String {
    let names = Names::new(image);
    let mut out = String::new();
    let _ = writeln!(out, ".org {}", hex(image.base));
    let _ = writeln!(out, ".entry {}", names.name(image.entry));
    for (name, a) in image.externs.iter().chain(names.generated_extern.iter()) {
        let _ = writeln!(out, ".extern {name}, {}", hex(*a));
    }

    let mut code_labels: BTreeMap<Addr, Vec<String>> = BTreeMap::new();
    let mut data_labels: BTreeMap<Addr, Vec<String>> = BTreeMap::new();
    let data_range = image.data.base..=image.data.base + image.data.bytes.len() as Addr;
    for (name, &a) in &image.labels {
        // code labels may sit one past the last instruction
        if (image.base..=image.end()).contains(&a) {
            code_labels.entry(a).or_default().push(name.clone());
        } else if data_range.contains(&a) {
            data_labels.entry(a).or_default().push(name.clone());
        } else {
            code_labels.entry(a).or_default().push(name.clone());
        }
    }
    for &a in &names.generated_code {
        code_labels.entry(a).or_default().push(format!("L_{a:x}"));
    }

    let _ = writeln!(out, ".text");
    for (addr, ins) in image.iter() {
        for l in code_labels.remove(&addr).unwrap_or_default() {
            let _ = writeln!(out, "{l}:");
        }
        let _ = writeln!(out, "    {}", render(&names, &ins.op));
    }
    if let Some(ls) = code_labels.remove(&image.end()) {
        for l in ls {
            let _ = writeln!(out, "{l}:");
        }
    }

    let _ = writeln!(out, ".data {}", hex(image.data.base));
    let bytes = &image.data.bytes;
    let mut i = 0usize;
    while i < bytes.len() {
        let addr = image.data.base + i as Addr;
        for l in data_labels.remove(&addr).unwrap_or_default() {
            let _ = writeln!(out, "{l}:");
        }
        // run until the next label or 16 bytes
        let next_label = data_labels
            .range(addr + 1..)
            .next()
            .map(|(&a, _)| (a - image.data.base) as usize)
            .unwrap_or(bytes.len());
        let end = (i + 16).min(next_label).min(bytes.len());
        let row: Vec<String> = bytes[i..end].iter().map(|b| format!("{b:#04x}")).collect();
        let _ = writeln!(out, "    .byte {}", row.join(", "));
        i = end;
    }
    for (_, ls) in data_labels {
        for l in ls {
            let _ = writeln!(out, "{l}:");
        }
    }
    // labels outside both ranges were emitted in .text; anything left over
    // points past the code and is written at the end of .text above.
    out
}
