mod common;

#[test]
fn algorithm_trace_is_bit_exact() {
    common::golden::check_algorithm_trace();
}
