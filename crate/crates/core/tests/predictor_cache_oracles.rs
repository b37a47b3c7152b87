//! RSB, BTB and cache checked against brute-force reference models.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{lru_trace, rsb_sequences};
use rsbsim::cache::{CacheGeometry, CacheState};
use rsbsim::defenses::DefenseConfig;
use rsbsim::machine::{ContextId, Mode};
use rsbsim::predictors::{BranchTargetBuffer, Owner, Prediction, ReturnStackBuffer, UnderfillMode};

#[test]
fn rsb_matches_bounded_ring_over_1000_sequences() {
    assert_eq!(rsb_sequences(1000), 0);
}

#[test]
fn rsb_overfill_examples() {
    let mut rsb = ReturnStackBuffer::new(16, UnderfillMode::FallbackIndirect);
    for a in 1..=17 {
        rsb.push(a);
    }
    for a in (2..=17).rev() {
        assert_eq!(rsb.predict_pop(), Prediction::Address(a));
    }
    assert_eq!(rsb.predict_pop(), Prediction::FallbackIndirect);
    let mut small = ReturnStackBuffer::new(4, UnderfillMode::NoPrediction);
    for a in 1..=5 {
        small.push(a);
    }
    assert_eq!(small.live_entries(), vec![5, 4, 3, 2]);
}

#[test]
fn cache_matches_lru_model_over_10k_steps() {
    for seed in 0..3 {
        assert_eq!(lru_trace(10_000, seed), 0, "seed {seed}");
    }
}

#[test]
fn cache_two_way_eviction() {
    let g = CacheGeometry {
        sets: 1,
        ways: 2,
        line_size: 64,
    };
    let mut c = CacheState::new(g).unwrap();
    assert!(!c.touch(0));
    assert!(!c.touch(64));
    assert!(!c.touch(128));
    assert!(!c.is_cached(0));
    assert!(c.is_cached(64) && c.is_cached(128));
    c.flush_line(64);
    assert!(c.is_cached(128));
}

#[test]
fn btb_gating_never_leaks_across_owners() {
    let cfg = DefenseConfig {
        ibrs: true,
        stibp: true,
        ibpb_on_switch: true,
        ..DefenseConfig::none()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut btb = BranchTargetBuffer::new(256);
    let owners: Vec<Owner> = (0..3)
        .flat_map(|c| {
            [Mode::User, Mode::Kernel]
                .into_iter()
                .map(move |mode| Owner {
                    context: ContextId(c),
                    mode,
                })
        })
        .collect();
    for _ in 0..20_000 {
        let pc = rng.gen_range(0..512);
        let o = owners[rng.gen_range(0..owners.len())];
        match rng.gen_range(0..10) {
            0..=4 => btb.train(pc, rng.gen_range(0..1 << 16), o),
            5 => btb.barrier(o.context),
            _ => {
                if btb.lookup(pc, o, &cfg).is_some() {
                    let trainer = btb.owner_at(pc).unwrap();
                    assert_eq!(trainer.context, o.context);
                    assert!(trainer.mode.privilege() >= o.mode.privilege());
                }
            }
        }
    }
}

#[test]
fn btb_index_collision_evicts() {
    let o = Owner {
        context: ContextId(0),
        mode: Mode::User,
    };
    let mut btb = BranchTargetBuffer::new(256);
    btb.train(0x10, 0xAAA, o);
    btb.train(0x110, 0xBBB, o);
    assert_eq!(btb.lookup(0x10, o, &DefenseConfig::none()), None);
    assert_eq!(btb.lookup(0x110, o, &DefenseConfig::none()), Some(0xBBB));
}
