mod common;

const CASES: u32 = 1_000;

#[test]
fn dataset_invariants_hold() {
    common::dataset_invariants(CASES).unwrap();
}

#[test]
fn categories_partition_generations() {
    common::categorization_partition(CASES).unwrap();
}

#[test]
fn extraction_is_idempotent() {
    common::extraction_idempotence(CASES).unwrap();
}
