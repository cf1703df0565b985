//! blockgate: a gateway that lets blocks of a publicly leased cluster
//! join different computing grids at once.
//!
//! The cluster is partitioned into blocks, each leased wholly to one
//! user. A request arriving from a collaborating grid carries a digital
//! certificate; the gateway verifies it against a multi-CA trust store,
//! reads the username out of the certificate, maps it to the queue named
//! after that user, and forwards the job to a simulated execution engine
//! running on the owner's nodes. Authentication happens twice: once at
//! the gateway and again, via a proxy credential, at the queue boundary.
//!
//! Module map:
//! - [`certkit`]: certificates, trust stores, proxy credentials
//! - [`registry`]: node inventory, block allocations, snapshots
//! - [`pqueue`]: per-block FIFO queues and the job state machine
//! - [`router`]: the authenticate/map/forward pipeline
//! - [`sim`]: the discrete-time execution engine
//! - [`gateway`]: HTTP service, config, CLI plumbing, demo scenario

pub mod certkit;
pub mod gateway;
pub mod pqueue;
pub mod registry;
pub mod router;
pub mod sim;

#[cfg(doctest)]
mod book {
    //! Doc-tests the guide's code snippets so the book stays in sync
    //! with the library.
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }
    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(certificates, "../../../book/src/certificates.md");
    chapter!(allocation, "../../../book/src/allocation.md");
    chapter!(queues, "../../../book/src/queues.md");
    chapter!(routing, "../../../book/src/routing.md");
    chapter!(simulation, "../../../book/src/simulation.md");
    chapter!(gateway_ch, "../../../book/src/gateway.md");
}
