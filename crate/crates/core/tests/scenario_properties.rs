use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsbsim::defenses::{Defense, DefenseConfig};
use rsbsim::isa::assemble;
use rsbsim::machine::{MachineConfig, Mode, Preset, KERNEL_STACK_BASE, PAGE_SIZE};
use rsbsim::pipeline::{reference_run, TraceKind};
use rsbsim::scenarios::{
    asset, build_scenario, run_attack, run_attack_with, Receiver, Requirement, RoundStep,
    ScenarioId, ScenarioParams, SecretDomain, PROBE_BASE,
};

fn scenario(id: ScenarioId) -> rsbsim::scenarios::Scenario {
    build_scenario(id, &ScenarioParams::default()).unwrap()
}

fn succeeds(id: ScenarioId, cfg: DefenseConfig) -> bool {
    run_attack(&scenario(id), cfg, Preset::Xeon, 0)
        .unwrap()
        .success
}

#[test]
fn attacker_never_reads_the_secret_architecturally() {
    for id in ScenarioId::ALL {
        let s = scenario(id);
        let range = s.secret.addr..s.secret.addr + s.secret.bytes.len() as u64;
        for k in 0..s.secret.bytes.len() {
            let mut m = s.prepare(&MachineConfig::preset(Preset::None)).unwrap();
            m.set_tracing(true);
            s.prepare_round(&mut m, k).unwrap();
            s.prepare_receiver(&mut m).unwrap();
            let schedule: Vec<_> = s.training.iter().chain(&s.schedule).copied().collect();
            let r = reference_run(&m, &schedule, s.max_cycles).unwrap();
            let leaks: Vec<_> = r
                .trace
                .iter()
                .filter(|e| {
                    e.kind == TraceKind::Commit && e.ctx == s.attacker && e.mode == Mode::User
                })
                .filter(|e| e.mem_addr().is_some_and(|a| range.contains(&a)))
                .collect();
            assert!(leaks.is_empty(), "{id}: {leaks:?}");
            assert!(r.trace.iter().all(|e| e.kind != TraceKind::SpecIssue));
        }
    }
}

#[test]
fn adding_a_defense_never_helps_the_attacker() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for id in ScenarioId::ALL {
        let s = scenario(id);
        for _ in 0..12 {
            let base = DefenseConfig::from_bits(rng.gen::<u16>() & 0x7ff);
            let ok = run_attack(&s, base, Preset::Xeon, 0).unwrap().success;
            if ok {
                continue;
            }
            for d in Defense::ALL {
                if !base.get(d) {
                    let more = base.with(d);
                    assert!(
                        !run_attack(&s, more, Preset::Xeon, 0).unwrap().success,
                        "{id}: {base:?} + {d} turned failure into success"
                    );
                }
            }
        }
    }
}

#[test]
fn outcomes_are_total_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut configs: Vec<DefenseConfig> = Defense::ALL
        .iter()
        .map(|&d| DefenseConfig::none().with(d))
        .collect();
    configs.extend((0..100).map(|_| DefenseConfig::from_bits(rng.gen::<u16>() & 0x7ff)));
    for id in ScenarioId::ALL {
        let s = scenario(id);
        for (i, cfg) in configs.iter().enumerate() {
            if i >= Defense::ALL.len() && i % 7 != id as usize {
                continue;
            }
            let a = run_attack(&s, *cfg, Preset::Xeon, 5).unwrap();
            let b = run_attack(&s, *cfg, Preset::Xeon, 5).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.success, a.accuracy == 1.0);
            assert_eq!(a.bypassed, a.success);
        }
    }
}

#[test]
fn receivers_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for id in ScenarioId::ALL {
        let fr = scenario(id);
        let pp = build_scenario(
            id,
            &ScenarioParams {
                receiver: Receiver::PrimeProbe,
                ..ScenarioParams::default()
            },
        )
        .unwrap();
        for _ in 0..4 {
            let cfg = DefenseConfig::from_bits(rng.gen::<u16>() & 0x7ff);
            let a = run_attack(&fr, cfg, Preset::Xeon, 0).unwrap();
            let b = run_attack(&pp, cfg, Preset::Xeon, 0).unwrap();
            assert_eq!(a.recovered, b.recovered, "{id} {cfg:?}");
        }
    }
}

#[test]
fn every_byte_value_crosses_the_channel() {
    let secret: Vec<u8> = vec![0x00, 0x01, 0x41, 0x7f, 0x80, 0xfe, 0xff];
    for id in [ScenarioId::Attack1, ScenarioId::Attack4] {
        let s = build_scenario(
            id,
            &ScenarioParams {
                secret: secret.clone(),
                ..Default::default()
            },
        )
        .unwrap();
        let o = run_attack(&s, DefenseConfig::none(), Preset::Xeon, 0).unwrap();
        assert_eq!(
            o.recovered,
            secret.iter().map(|&b| Some(b)).collect::<Vec<_>>(),
            "{id}"
        );
    }
}

#[test]
fn build_examples() {
    assert_eq!(
        scenario(ScenarioId::Attack1).secret.domain,
        SecretDomain::Restricted
    );
    assert!(scenario(ScenarioId::Attack2b)
        .requirements
        .contains(&Requirement::SmepDisabled));
    let a4 = scenario(ScenarioId::Attack4);
    assert!(a4.round.iter().any(|r| matches!(
        r,
        RoundStep::EvictionPointers { target, .. } if target.addr == KERNEL_STACK_BASE + PAGE_SIZE - 8
    )));
    let a2c = scenario(ScenarioId::Attack2c);
    assert_ne!(a2c.programs[0].space, a2c.programs[1].space);
    assert!("attack9".parse::<ScenarioId>().is_err());
}

#[test]
fn table_examples() {
    assert!(succeeds(
        ScenarioId::Attack1,
        DefenseConfig::fully_patched()
    ));
    let refill = DefenseConfig::none().with(Defense::RsbRefill);
    assert!(!succeeds(ScenarioId::Attack2a, refill));
    assert!(succeeds(
        ScenarioId::Attack3,
        DefenseConfig::fully_patched()
    ));
    assert!(!succeeds(
        ScenarioId::Attack3,
        DefenseConfig::fully_patched().with(Defense::RsbRefillEnclave)
    ));
    let smep = DefenseConfig::none()
        .with(Defense::Smep)
        .with(Defense::Smap);
    assert!(!succeeds(ScenarioId::Attack4, smep));
}

#[test]
fn kernel_secret_needs_meltdown() {
    let s = build_scenario(
        ScenarioId::Attack1,
        &ScenarioParams {
            kernel_secret: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(s.secret.domain, SecretDomain::Kernel);
    let open = run_attack(&s, DefenseConfig::none(), Preset::Xeon, 0).unwrap();
    assert!(open.success);
    let kpti = run_attack(
        &s,
        DefenseConfig::none().with(Defense::Kpti),
        Preset::Xeon,
        0,
    )
    .unwrap();
    assert!(!kpti.success);
    let patched = DefenseConfig::none().with(Defense::MeltdownPatch);
    assert!(!run_attack(&s, patched, Preset::Xeon, 0).unwrap().success);
}

#[test]
fn frame_drop_trace_order() {
    let s = scenario(ScenarioId::Attack1);
    let img = assemble(asset("attack1").unwrap()).unwrap();
    let sym = |n: &str| img.symbol(n).unwrap();
    let mut trace = Vec::new();
    let cfg = MachineConfig {
        defenses: DefenseConfig::none(),
        ..MachineConfig::default()
    };
    let o = run_attack_with(&s, &cfg, Some(&mut trace)).unwrap();
    assert!(o.success);
    let pos =
        |pred: &dyn Fn(&rsbsim::pipeline::TraceEvent) -> bool| trace.iter().position(pred).unwrap();
    let push = pos(&|e| e.kind == TraceKind::RsbPush && e.pc == sym("speculative"));
    let issue = pos(&|e| e.kind == TraceKind::SpecIssue && e.pc == sym("payload"));
    let fill = pos(&|e| {
        e.kind == TraceKind::CacheFill
            && e.mem_addr()
                .is_some_and(|a| a > PROBE_BASE && a < PROBE_BASE + 257 * 256)
    });
    let squash = pos(&|e| e.kind == TraceKind::SpecSquash);
    let back = pos(&|e| e.kind == TraceKind::Commit && e.pc == sym("after"));
    assert!(push < issue && issue < fill && fill < squash && squash < back);
}

#[test]
fn cached_return_address_closes_the_window() {
    let src = asset("attack1").unwrap().replace("clflush [r15]", "nop");
    let dir = std::env::temp_dir().join(format!("rsbsim-assets-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("attack1.s"), src).unwrap();
    let s = build_scenario(
        ScenarioId::Attack1,
        &ScenarioParams {
            asset_dir: Some(dir.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    let mut trace = Vec::new();
    let o = run_attack_with(&s, &MachineConfig::default(), Some(&mut trace)).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
    assert!(!o.success);
    let probe_fills = trace
        .iter()
        .filter(|e| e.kind == TraceKind::CacheFill)
        .filter(|e| {
            e.mem_addr()
                .is_some_and(|a| (PROBE_BASE..PROBE_BASE + 257 * 256).contains(&a))
        })
        .count();
    assert_eq!(probe_fills, 0);
}

#[test]
fn threshold_sweep_under_jitter() {
    let s = scenario(ScenarioId::Attack1);
    let mut cfg = MachineConfig {
        jitter: true,
        ..MachineConfig::default()
    };
    // misses land in [270, 330] and hits stay at 4
    for threshold in [20u64, 100, 152, 200, 260] {
        for seed in 0..20 {
            cfg.seed = seed;
            let mut m = s.prepare(&cfg).unwrap();
            s.prepare_round(&mut m, 0).unwrap();
            s.prepare_receiver(&mut m).unwrap();
            rsbsim::pipeline::run(&mut m, &s.schedule, s.max_cycles).unwrap();
            assert_eq!(
                s.receive(&mut m, threshold),
                Ok(s.secret.bytes[0]),
                "t={threshold} seed={seed}"
            );
        }
    }
}
