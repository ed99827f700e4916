mod common;

use common::invariants::{run, PROPERTIES};

const CASES: u32 = 128;

#[test]
fn kernels_on_simplex_and_importance_in_unit_interval() {
    run("simplex_and_sigmoid_range", CASES).unwrap();
}

#[test]
fn branches_ignore_pixel_arrangement() {
    run("spatial_shuffle_invariance", CASES).unwrap();
}

#[test]
fn videos_do_not_interact_at_inference() {
    run("batch_independence", CASES).unwrap();
}

#[test]
fn channels_do_not_leak_into_each_other() {
    run("channel_isolation", CASES).unwrap();
}

#[test]
fn frame_wise_baseline_ignores_frame_order() {
    run("c2d_frame_permutation_invariance", CASES).unwrap();
}

#[test]
fn unknown_property_is_reported() {
    assert!(run("nope", 1).is_err());
    assert_eq!(PROPERTIES.len(), 5);
}
