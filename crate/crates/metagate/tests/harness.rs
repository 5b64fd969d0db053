mod common;

use common::harness_invariants as inv;

#[test]
fn ablate_deterministic() {
    inv::ablate_deterministic().unwrap();
}

#[test]
fn writes_inside_out_dir() {
    inv::writes_inside_out_dir().unwrap();
}

#[test]
fn checkpoint_round_trip() {
    inv::checkpoint_round_trip().unwrap();
}

#[test]
fn summary_recomputable() {
    inv::summary_recomputable().unwrap();
}

#[test]
fn catalogue_is_complete() {
    assert_eq!(inv::ALL.len(), 4);
}
