use proptest::prelude::*;

use rsbsim::isa::{assemble, disassemble, Mnemonic, Op};

const MNEMONICS: usize = 27;

fn reg(r: u8) -> String {
    format!("r{}", r % 16)
}

fn line(kind: u8, a: u8, b: u8, imm: u32, target: usize, off: i16) -> String {
    let imm = imm % 0x10000;
    let l = format!("l{target}");
    match kind as usize % MNEMONICS {
        0 => format!("mov {}, {imm:#x}", reg(a)),
        1 => format!("load {}, [{}{off:+}]", reg(a), reg(b)),
        2 => format!("store [{}], {}", reg(b), reg(a)),
        3 => format!("add {}, {}", reg(a), reg(b)),
        4 => format!("sub {}, {imm}", reg(a)),
        5 => format!("and {}, {l}", reg(a)),
        6 => format!("shl {}, {}", reg(a), imm % 64),
        7 => format!("cmp {}, {}", reg(a), reg(b)),
        8 => format!("jz {l}"),
        9 => format!("jnz {l}"),
        10 => format!("jmp {l}"),
        11 => format!("jmp {}", reg(a)),
        12 => format!("call {l}"),
        13 => format!("call {}", reg(b)),
        14 => "ret".into(),
        15 => format!("push {}", reg(a)),
        16 => format!("pop {}", reg(a)),
        17 => format!("clflush [buf+{}]", imm % 16),
        18 => format!("rdtscp {}", reg(a)),
        19 => "lfence".into(),
        20 => "cpuid".into(),
        21 => format!("syscall {}", imm % 8),
        22 => "sysret".into(),
        23 => "eenter far".into(),
        24 => "eexit".into(),
        25 => "yield".into(),
        _ if imm.is_multiple_of(2) => "halt".into(),
        _ => "nop".into(),
    }
}

fn program() -> impl Strategy<Value = String> {
    (
        0x1000u64..0x8000,
        prop::collection::vec(
            (
                any::<u8>(),
                any::<u8>(),
                any::<u8>(),
                any::<u32>(),
                any::<usize>(),
                -64i16..64,
            ),
            1..60,
        ),
        prop::collection::vec(any::<u8>(), 0..24),
    )
        .prop_map(|(org, ops, data)| {
            let n = ops.len();
            let mut s = format!(".org {org:#x}\n.extern far, 0xe0000000\n");
            for (i, (k, a, b, imm, t, off)) in ops.into_iter().enumerate() {
                s += &format!("l{i}:\n    {}\n", line(k, a, b, imm, t % n, off));
            }
            s += ".data 0x9000\nbuf:\n    .zero 16\n";
            if !data.is_empty() {
                let bytes: Vec<String> = data.iter().map(|b| b.to_string()).collect();
                s += &format!("tail:\n    .byte {}\n", bytes.join(", "));
            }
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn assemble_disassemble_assemble_is_identity(src in program()) {
        let first = assemble(&src).unwrap();
        let text = disassemble(&first);
        let second = assemble(&text).unwrap();
        prop_assert_eq!(&first, &second, "{}", text);
        for (k, (addr, _)) in first.iter().enumerate() {
            prop_assert_eq!(addr, first.base + k as u64);
        }
    }
}

#[test]
fn every_mnemonic_is_generated() {
    let mut seen = std::collections::BTreeSet::new();
    for k in 0..MNEMONICS as u8 {
        for imm in 0..2 {
            let src = format!(
                ".extern far, 0xe0000000\nl0: {}\n.data 0x9000\nbuf: .zero 16",
                line(k, 1, 2, imm, 0, 8)
            );
            let img = assemble(&src).unwrap();
            seen.insert(img.instructions[0].op.mnemonic());
        }
    }
    assert_eq!(seen.len(), Mnemonic::ALL.len());
}

#[test]
fn single_halt() {
    let img = assemble("halt").unwrap();
    assert_eq!(img.len(), 1);
    assert_eq!(img.entry, 0x1000);
    let text = disassemble(&img);
    assert_eq!(text.lines().filter(|l| l.trim() == "halt").count(), 1);
}

#[test]
fn frame_dropping_gadget_body() {
    let img = assemble("pop r1\npop r1\npop r1\nnop\npop r2\nclflush [r15]\ncpuid\nret").unwrap();
    let ops: Vec<&str> = img
        .instructions
        .iter()
        .map(|i| i.op.mnemonic().as_str())
        .collect();
    assert_eq!(
        ops,
        ["pop", "pop", "pop", "nop", "pop", "clflush", "cpuid", "ret"]
    );
    assert!(matches!(img.instructions[7].op, Op::Ret));
    let text = disassemble(&img);
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.starts_with('.') && !l.ends_with(':'))
        .collect();
    assert_eq!(lines.len(), 8);
}

#[test]
fn malformed_operands_are_rejected_with_position() {
    for bad in [
        "mov r1",
        "load r1, r2",
        "push 5",
        "jz",
        "ret r1",
        "store [r1], 5",
        "mov r16, 1",
    ] {
        let e = assemble(&format!("nop\n{bad}")).unwrap_err();
        assert_eq!(e.span.line, 2, "{bad}");
    }
}
