//! Property tests for the library's structural invariants.

use blockgate::certkit::{
    ca_issue, ca_keygen, extract_username, verify_certificate, Certificate, TrustStore,
};
use blockgate::registry::{MiddlewareCatalog, Registry};
use proptest::prelude::*;

fn username_strategy() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,31}"
}

fn catalog() -> MiddlewareCatalog {
    let mut c = MiddlewareCatalog::new();
    c.insert("gt4", "/opt/mw/gt4");
    c
}

proptest! {
    /// Issuance round-trip: any valid (username, window) verifies at any
    /// instant inside the window, and the username survives extraction.
    #[test]
    fn issue_verify_round_trip(
        username in username_strategy(),
        not_before in 0i64..1_000_000,
        width in 1i64..1_000_000,
        offset in 0i64..1_000_000,
    ) {
        let ca = ca_keygen("grid1", 99).unwrap();
        let mut store = TrustStore::new();
        store.add_ca(&ca).unwrap();
        let not_after = not_before + width;
        let cert = ca_issue(&ca, &username, not_before, not_after).unwrap();
        let now = not_before + offset % width;
        prop_assert_eq!(verify_certificate(&cert, &store, now), Ok(()));
        prop_assert_eq!(extract_username(&cert), username.as_str());
    }

    /// Wire round-trip is lossless for any issued certificate.
    #[test]
    fn wire_round_trip(username in username_strategy(), seed in 0u64..1000) {
        let ca = ca_keygen("grid1", seed).unwrap();
        let cert = ca_issue(&ca, &username, 0, 1000).unwrap();
        prop_assert_eq!(Certificate::from_wire(&cert.to_wire()).unwrap(), cert);
    }

    /// A certificate never verifies against a store trusting only a
    /// different grid's key.
    #[test]
    fn cross_ca_rejection(username in username_strategy(), seed in 0u64..1000) {
        let grid1 = ca_keygen("grid1", seed).unwrap();
        let grid2 = ca_keygen("grid2", seed).unwrap();
        let mut store = TrustStore::new();
        store.add_ca(&grid2).unwrap();
        let cert = ca_issue(&grid1, &username, 0, 1000).unwrap();
        prop_assert!(verify_certificate(&cert, &store, 500).is_err());
    }

    /// Arbitrary approve/release interleavings preserve conservation,
    /// disjointness, and the queue-name naming rule.
    #[test]
    fn registry_churn_consistency(ops in prop::collection::vec((0usize..10, 1usize..5, prop::bool::ANY), 1..60)) {
        let users = ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy"];
        let cat = catalog();
        let mut reg = Registry::with_nodes("n", 12);
        for (user_idx, count, release) in ops {
            let user = users[user_idx];
            if release {
                let _ = reg.release(user);
            } else if let Ok(alloc) = reg.approve_user(user, count, "gt4", &cat, 0, 1000) {
                prop_assert_eq!(&alloc.queue_name, &alloc.owner_username);
            }
            prop_assert!(reg.check_consistency().is_ok());
        }
    }
}
