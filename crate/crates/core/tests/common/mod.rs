//! Reference models and generators shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsbsim::cache::{CacheGeometry, CacheState, CacheTiming};
use rsbsim::isa::assemble;
use rsbsim::machine::{
    AddressSpaceId, ArchSnapshot, ContextId, Domain, Machine, MachineConfig, Mode, Perms,
};
use rsbsim::pipeline::{reference_run, run};
use rsbsim::predictors::{Prediction, ReturnStackBuffer, UnderfillMode};
use rsbsim::scenarios::{build_scenario, ScenarioId, ScenarioParams};

/// Bounded stack: drop the bottom when full.
struct RingModel {
    cap: usize,
    items: Vec<u64>,
}

impl RingModel {
    fn push(&mut self, a: u64) {
        if self.items.len() == self.cap {
            self.items.remove(0);
        }
        self.items.push(a);
    }

    fn pop(&mut self) -> Option<u64> {
        self.items.pop()
    }
}

pub fn rsb_sequences(n: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut diffs = 0;
    for _ in 0..n {
        let cap = rng.gen_range(4..=32);
        let mode = if rng.gen_bool(0.5) {
            UnderfillMode::FallbackIndirect
        } else {
            UnderfillMode::NoPrediction
        };
        let mut rsb = ReturnStackBuffer::new(cap, mode);
        let mut model = RingModel {
            cap,
            items: Vec::new(),
        };
        let len = rng.gen_range(1..=1000);
        for _ in 0..len {
            if rng.gen_bool(0.55) {
                let a = rng.gen_range(0..1u64 << 20);
                rsb.push(a);
                model.push(a);
            } else {
                let want = match model.pop() {
                    Some(a) => Prediction::Address(a),
                    None if mode == UnderfillMode::FallbackIndirect => Prediction::FallbackIndirect,
                    None => Prediction::NoPrediction,
                };
                if rsb.predict_pop() != want {
                    diffs += 1;
                }
            }
            if rsb.fill() != model.items.len() || rsb.fill() > cap {
                diffs += 1;
            }
            let mut newest_first = model.items.clone();
            newest_first.reverse();
            if rsb.live_entries() != newest_first {
                diffs += 1;
            }
        }
    }
    diffs
}

/// Per-set recency lists of whole line numbers.
struct LruModel {
    sets: usize,
    ways: usize,
    line: u64,
    contents: Vec<Vec<u64>>,
}

impl LruModel {
    fn access(&mut self, addr: u64) -> bool {
        let line = addr / self.line;
        let set = &mut self.contents[(line % self.sets as u64) as usize];
        if let Some(i) = set.iter().position(|&l| l == line) {
            set.remove(i);
            set.push(line);
            true
        } else {
            if set.len() == self.ways {
                set.remove(0);
            }
            set.push(line);
            false
        }
    }

    fn flush(&mut self, addr: u64) {
        let line = addr / self.line;
        let set = &mut self.contents[(line % self.sets as u64) as usize];
        set.retain(|&l| l != line);
    }
}

pub fn lru_trace(steps: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = CacheGeometry {
        sets: 8,
        ways: 4,
        line_size: 64,
    };
    let mut cache = CacheState::new(geometry).unwrap();
    let mut model = LruModel {
        sets: 8,
        ways: 4,
        line: 64,
        contents: vec![Vec::new(); 8],
    };
    let timing = CacheTiming::default();
    let mut jrng = ChaCha8Rng::seed_from_u64(1);
    let mut diffs = 0;
    for _ in 0..steps {
        // a small address pool so sets see real contention
        let addr = rng.gen_range(0..96u64) * 64 + rng.gen_range(0..64);
        if rng.gen_bool(0.1) {
            cache.flush_line(addr);
            model.flush(addr);
        } else {
            let r = cache.access(addr, &timing, &mut jrng);
            let hit = model.access(addr);
            let latency = if hit {
                timing.hit_latency
            } else {
                timing.miss_latency
            };
            if r.hit != hit || r.latency != latency {
                diffs += 1;
            }
        }
        if cache.is_cached(addr) != model.contents.iter().flatten().any(|&l| l == addr / 64) {
            diffs += 1;
        }
    }
    diffs
}

const DATA: u64 = 0x8000;

/// Random single-context program over the committed-deterministic part
/// of the ISA (no rdtscp). Branches only go forward; helper functions
/// include a frame-dropping pair so returns mispredict.
pub fn random_program(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(8..40);
    let mut s = String::from(".org 0x1000\nmain:\n  mov r10, 0x8000\n");
    let reg = |rng: &mut ChaCha8Rng| format!("r{}", rng.gen_range(1..9));
    let slot = |rng: &mut ChaCha8Rng| 8 * rng.gen_range(0..64);
    let mut depth = 0;
    for i in 0..n {
        s += &format!("l{i}:\n");
        let line = match rng.gen_range(0..21) {
            0 | 1 => format!("mov {}, {}", reg(rng), rng.gen_range(0..1000)),
            2 => format!("add {}, {}", reg(rng), reg(rng)),
            3 => format!("sub {}, {}", reg(rng), rng.gen_range(0..50)),
            4 => format!("and {}, {}", reg(rng), rng.gen_range(0..256)),
            5 => format!("shl {}, {}", reg(rng), rng.gen_range(0..4)),
            6 => format!("cmp {}, {}", reg(rng), reg(rng)),
            7 | 8 => format!("load {}, [r10+{}]", reg(rng), slot(rng)),
            9 => format!("store [r10+{}], {}", slot(rng), reg(rng)),
            10 => format!("clflush [r10+{}]", slot(rng)),
            11 | 12 => {
                let j = rng.gen_range(i + 1..=n);
                let op = if rng.gen_bool(0.5) { "jz" } else { "jnz" };
                format!("{op} l{j}")
            }
            13 => format!("call f{}", rng.gen_range(0..4)),
            14 | 19 => "call drop".to_string(),
            15 => {
                let j = rng.gen_range(i + 1..=n);
                format!("mov r12, l{j}\n  jmp r12")
            }
            16 => {
                depth += 1;
                format!("push {}", reg(rng))
            }
            17 if depth > 0 => {
                depth -= 1;
                format!("pop {}", reg(rng))
            }
            18 => "lfence".to_string(),
            _ => "nop".to_string(),
        };
        s += &format!("  {line}\n");
    }
    s += &format!("l{n}:\n  halt\n");
    for f in 0..4 {
        s += &format!("f{f}:\n");
        for _ in 0..rng.gen_range(0..4) {
            s += &format!("  load {}, [r10+{}]\n", reg(rng), slot(rng));
            s += &format!("  add {}, {}\n", reg(rng), rng.gen_range(1..9));
        }
        if rng.gen_bool(0.5) {
            s += "  clflush [r15]\n";
        }
        s += "  ret\n";
    }
    s += "drop:\n  call inner\n  load r5, [r10+8]\n  add r5, 1\n  store [r10+16], r5\n  push r5\n  call f0\n  halt\ninner:\n  pop r11\n  clflush [r15]\n  ret\n";
    s
}

pub fn program_machine(source: &str, config: MachineConfig) -> Machine {
    let img = assemble(source).unwrap_or_else(|e| panic!("{e}\n{source}"));
    let mut m = Machine::new(config).unwrap();
    let s = Some(AddressSpaceId(0));
    m.map_region(0x1000, 0x1000, Perms::RX, Domain::User, s)
        .unwrap();
    m.map_region(DATA, 0x1000, Perms::RW, Domain::User, s)
        .unwrap();
    m.spawn_context(&img, Mode::User, AddressSpaceId(0))
        .unwrap();
    m
}

/// Runs `source` speculatively and on the reference path, returning
/// both final snapshots.
pub fn program_snapshots(source: &str, config: MachineConfig) -> (ArchSnapshot, ArchSnapshot) {
    let mut m = program_machine(source, config);
    let schedule = [(ContextId(0), 1000)];
    let reference = reference_run(&m, &schedule, 1_000_000).unwrap();
    let real = run(&mut m, &schedule, 1_000_000).unwrap();
    (real.final_snapshot, reference.final_snapshot)
}

/// Snapshot pair for the first round of a shipped scenario.
pub fn scenario_snapshots(id: ScenarioId, config: MachineConfig) -> (ArchSnapshot, ArchSnapshot) {
    let s = build_scenario(id, &ScenarioParams::default()).unwrap();
    let mut m = s.prepare(&config).unwrap();
    s.prepare_round(&mut m, 0).unwrap();
    s.prepare_receiver(&mut m).unwrap();
    let schedule: Vec<_> = s.training.iter().chain(&s.schedule).copied().collect();
    let reference = reference_run(&m, &schedule, s.max_cycles).unwrap();
    let real = run(&mut m, &schedule, s.max_cycles).unwrap();
    (real.final_snapshot, reference.final_snapshot)
}

/// Counts snapshot mismatches over every scenario and `programs` random
/// programs.
pub fn equivalence_diffs(programs: usize) -> usize {
    let mut diffs = 0;
    for preset in [rsbsim::machine::Preset::None, rsbsim::machine::Preset::Xeon] {
        for id in ScenarioId::ALL {
            let (a, b) = scenario_snapshots(id, MachineConfig::preset(preset));
            if a != b {
                eprintln!("{id} {preset}: {:?}", a.diff(&b));
                diffs += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xE0);
    for i in 0..programs {
        let src = random_program(&mut rng);
        let cfg = MachineConfig {
            rsb_capacity: 4 + i % 13,
            ..MachineConfig::default()
        };
        let (a, b) = program_snapshots(&src, cfg);
        if a != b {
            eprintln!("program {i}: {:?}\n{src}", a.diff(&b));
            diffs += 1;
        }
    }
    diffs
}
