//! Trace similarity scoring.
//!
//! Traces are partitioned into init/main/irq parts; each part is compared
//! with a repetition-discounted edit distance: matches are free,
//! substitutions cost 2, and deleting or inserting a symbol costs 1 when
//! it equals its immediate predecessor in its own sequence, else 2. The
//! discount makes polling loops cheap — whether a wait spins 100 or 1,000
//! times barely moves the distance. The score normalizes the summed
//! distance against a worst-case baseline run of the same script:
//! `1 - min(D_emu / D_base, 1)`.

use crate::par::*;
use crate::trace::{Context, Trace};

/// Per-context symbol projection of a trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartitionedTrace {
    pub init: Vec<String>,
    pub main: Vec<String>,
    pub irq: Vec<String>,
}

/// Stable-order projection of events by context; concatenating the three
/// preserves per-context order.
pub fn partition_trace(trace: &Trace) -> PartitionedTrace {
    let mut parts = PartitionedTrace::default();
    for event in &trace.events {
        let bucket = match event.context {
            Context::Init => &mut parts.init,
            Context::Main => &mut parts.main,
            Context::Irq => &mut parts.irq,
        };
        bucket.push(event.step_id.clone());
    }
    parts
}

fn deletion_cost<T: PartialEq>(seq: &[T], index: usize) -> u64 {
    if index >= 2 && seq[index - 1] == seq[index - 2] {
        1
    } else {
        2
    }
}

/// Minimum cost to transform `a` into `b` under the weighted scheme.
/// Directional: the repetition discount keys off each sequence's own
/// predecessors, so d(a, b) and d(b, a) may differ.
pub fn weighted_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> u64 {
    let n = a.len();
    let m = b.len();
    let mut prev: Vec<u64> = vec![0; m + 1];
    let mut cur: Vec<u64> = vec![0; m + 1];
    for j in 1..=m {
        prev[j] = prev[j - 1] + deletion_cost(b, j);
    }
    for i in 1..=n {
        cur[0] = prev[0] + deletion_cost(a, i);
        for j in 1..=m {
            let sub = if a[i - 1] == b[j - 1] { 0 } else { 2 };
            cur[j] = (prev[j] + deletion_cost(a, i))
                .min(cur[j - 1] + deletion_cost(b, j))
                .min(prev[j - 1] + sub);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityReport {
    pub d_init: u64,
    pub d_main: u64,
    pub d_irq: u64,
    pub d_emu: u64,
    pub d_base: u64,
    pub score: f64,
}

fn summed_distance(a: &PartitionedTrace, b: &PartitionedTrace) -> (u64, u64, u64) {
    (
        weighted_edit_distance(&a.init, &b.init),
        weighted_edit_distance(&a.main, &b.main),
        weighted_edit_distance(&a.irq, &b.irq),
    )
}

/// Fidelity of an emulated trace against a reference, normalized by the
/// baseline (the same script against the null model). A zero baseline
/// distance scores 1 only for an exact emulated match.
pub fn fidelity_score(
    emu: &PartitionedTrace,
    reference: &PartitionedTrace,
    baseline: &PartitionedTrace,
) -> FidelityReport {
    let (d_init, d_main, d_irq) = summed_distance(emu, reference);
    let d_emu = d_init + d_main + d_irq;
    let (b_init, b_main, b_irq) = summed_distance(baseline, reference);
    let d_base = b_init + b_main + b_irq;
    let score = if d_base == 0 {
        if d_emu == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - (d_emu as f64 / d_base as f64).min(1.0)
    };
    FidelityReport {
        d_init,
        d_main,
        d_irq,
        d_emu,
        d_base,
        score,
    }
}

/// Batch distance over many sequence pairs; parallel when the `parallel`
/// feature is on.
pub fn pair_distances<T: PartialEq + Sync>(pairs: &[(Vec<T>, Vec<T>)]) -> Vec<u64> {
    pairs
        .par_iter()
        .map(|(a, b)| weighted_edit_distance(a, b))
        .collect()
}

/// Always-sequential twin of [`pair_distances`], kept for benchmarking the
/// two lanes against each other.
pub fn pair_distances_seq<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Vec<u64> {
    pairs
        .iter()
        .map(|(a, b)| weighted_edit_distance(a, b))
        .collect()
}
