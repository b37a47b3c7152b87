//! Squashed speculation never changes architectural state.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{equivalence_diffs, program_machine, program_snapshots, random_program};
use rsbsim::machine::ContextId;
use rsbsim::machine::MachineConfig;
use rsbsim::pipeline::run;

#[test]
fn scenarios_and_random_programs_match_reference() {
    assert_eq!(equivalence_diffs(300), 0);
}

#[test]
fn snapshot_ignores_latency_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let src = random_program(&mut rng);
        let (a, _) = program_snapshots(&src, MachineConfig::default());
        let slow = MachineConfig {
            hit_latency: 9,
            miss_latency: 700,
            ..MachineConfig::default()
        };
        let (b, _) = program_snapshots(&src, slow);
        assert_eq!(a, b, "{src}");
    }
}

#[test]
fn random_programs_do_speculate() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE0);
    let (mut squashed, mut transient) = (0, 0);
    for _ in 0..100 {
        let src = random_program(&mut rng);
        let mut m = program_machine(&src, MachineConfig::default());
        let r = run(&mut m, &[(ContextId(0), 1000)], 1_000_000).unwrap();
        squashed += r.squashed().count();
        transient += r.branches.iter().map(|b| b.transient_count).sum::<usize>();
    }
    assert!(squashed > 50, "{squashed}");
    assert!(transient > 500, "{transient}");
}
