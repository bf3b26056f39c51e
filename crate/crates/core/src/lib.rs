//! Dataflow graphs with first-class recursion.
//!
//! A [`graph::GraphBuilder`] declares named SubGraphs that can invoke each
//! other (and themselves) through Invoke and lazy Cond operations. A
//! finalized graph runs on the [`executor::Executor`], a pool of workers
//! sharing one FIFO ready queue; each call spawns a child frame keyed by its
//! path in the invocation tree. [`autodiff::differentiate`] derives a
//! gradient SubGraph for every SubGraph on the loss path; forward values
//! reach the gradient frames through the keyed [`cache::ValueCache`].
//!
//! [`models`] builds TreeRNN, RNTN and TreeLSTM in a recursive and an
//! iterative form, [`trainer`] trains and checks them and [`bench`] measures
//! throughput.

pub mod autodiff;
pub mod bench;
pub mod cache;
pub mod data;
pub mod executor;
pub mod graph;
pub mod models;
pub mod tensor;
pub mod trainer;
pub mod value;
