//! A rule-driven MCU peripheral emulation engine.
//!
//! Peripherals are described by condition-action rule files: a register
//! map, interrupt and DMA source tables, and rules that fire on buffer
//! changes, firmware accesses, chained value changes, or ticks. A machine
//! composes peripherals behind an MMIO bus with a reduced NVIC and a
//! generic DMA engine; a scripted firmware surrogate drives it and
//! produces execution traces and access histories.
//!
//! Three analyses run over those artifacts: trace-fidelity scoring with a
//! repetition-discounted edit distance, R1/R2 driver-compliance checking,
//! and trace-divergence diagnosis.

pub mod compliance;
pub mod diagnosis;
pub mod dsl;
pub mod engine;
pub mod fidelity;
pub mod machine;
pub mod par;
pub mod script;
pub mod state;
pub mod trace;

pub use dsl::{parse_rule_file, resolve_rules, serialize_rule, serialize_rule_file};
pub use fidelity::{fidelity_score, partition_trace, weighted_edit_distance};
pub use machine::{Machine, MachineConfig};
pub use script::{parse_script, run};
pub use trace::{Context, Trace};
