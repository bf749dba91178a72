pub mod callgraph;
pub mod campaign;
pub mod conditions;
pub mod diagnostics;
pub mod engine;
pub mod gateway;
pub mod harness;
pub mod inputgen;
pub mod mutatorgen;
pub mod process;
pub mod rag;
pub mod sandbox;
pub mod trace;
