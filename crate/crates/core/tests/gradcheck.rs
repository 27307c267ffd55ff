mod common;

use common::{fd_check, network_fd_check, op_cases, NET_TOL, OP_TOL};

#[test]
fn every_op_matches_central_differences() {
    for (name, inputs, f) in op_cases() {
        let r = fd_check(&inputs, f.as_ref(), 99).unwrap();
        assert!(r.worst < OP_TOL, "{name}: {r:?}");
    }
}

#[test]
fn small_network_matches_central_differences() {
    for seed in [5, 11] {
        let r = network_fd_check(seed).unwrap();
        assert!(r.checked > 100);
        assert!(r.worst < NET_TOL, "seed {seed}: {r:?}");
    }
}
