//! Trace-divergence diagnosis: find the first place an emulated trace
//! departs from a reference trace, point at the most recent peripheral
//! read before it, and list the executed rules that touched the offending
//! register in reverse firing order.

use crate::engine::EffectLog;
use crate::fidelity::partition_trace;
use crate::machine::{AccessDir, AccessRecord};
use crate::trace::{Context, Trace};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub context: Context,
    /// Position within the diverging context's symbol sequence.
    pub index: usize,
    pub last_read: Option<AccessRecord>,
}

/// One rule firing that touched the entity under suspicion, most recent
/// first.
#[derive(Debug, Clone, PartialEq)]
pub struct SuspectFiring {
    /// Index of the firing in the effect log (strictly decreasing across
    /// the returned list).
    pub firing_index: usize,
    pub rule_id: usize,
    pub context: Context,
    pub entity: String,
    pub old: u32,
    pub new: u32,
}

/// Compare per context in the order init, main, irq and return the first
/// differing position; `None` when the traces agree. The last firmware
/// read at or before the divergence point comes from the emulated run's
/// access history.
pub fn locate_divergence(
    emulated: &Trace,
    reference: &Trace,
    history: &[AccessRecord],
) -> Option<Divergence> {
    let emu = partition_trace(emulated);
    let reference_parts = partition_trace(reference);
    let contexts = [
        (Context::Init, &emu.init, &reference_parts.init),
        (Context::Main, &emu.main, &reference_parts.main),
        (Context::Irq, &emu.irq, &reference_parts.irq),
    ];
    for (context, emu_seq, ref_seq) in contexts {
        let common = emu_seq.len().min(ref_seq.len());
        let mut diverge_at = None;
        for i in 0..common {
            if emu_seq[i] != ref_seq[i] {
                diverge_at = Some(i);
                break;
            }
        }
        if diverge_at.is_none() && emu_seq.len() != ref_seq.len() {
            diverge_at = Some(common);
        }
        let Some(index) = diverge_at else {
            continue;
        };
        let position = emulated_position(emulated, reference, context, index);
        let last_read = history
            .iter()
            .rev()
            .find(|r| r.dir == AccessDir::Read && r.event_index <= position)
            .cloned();
        return Some(Divergence {
            context,
            index,
            last_read,
        });
    }
    None
}

/// Global position in the emulated trace corresponding to a per-context
/// divergence. When the emulated run has the event, that's its position;
/// when the event is missing, the position of the reference's preceding
/// event mapped back onto the emulated trace.
fn emulated_position(emulated: &Trace, reference: &Trace, context: Context, index: usize) -> usize {
    if let Some(pos) = nth_in_context(emulated, context, index) {
        return pos;
    }
    let Some(ref_pos) = nth_in_context(reference, context, index) else {
        return emulated.len();
    };
    if ref_pos == 0 {
        return 0;
    }
    // Per-context coordinates of the reference's preceding event.
    let prev = &reference.events[ref_pos - 1];
    let prev_ordinal = reference.events[..ref_pos]
        .iter()
        .filter(|e| e.context == prev.context)
        .count()
        - 1;
    nth_in_context(emulated, prev.context, prev_ordinal).unwrap_or(emulated.len())
}

fn nth_in_context(trace: &Trace, context: Context, n: usize) -> Option<usize> {
    trace
        .events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.context == context)
        .map(|(i, _)| i)
        .nth(n)
}

/// All effect-log firings whose changes overlap `(address, mask)`, most
/// recent first. Every matching change record appears exactly once.
pub fn suspect_rules(log: &EffectLog, address: u32, mask: u32) -> Vec<SuspectFiring> {
    let mut suspects = Vec::new();
    for (firing_index, entry) in log.entries.iter().enumerate().rev() {
        for change in &entry.changes {
            if change.address == address && change.mask & mask != 0 {
                suspects.push(SuspectFiring {
                    firing_index,
                    rule_id: entry.rule_id,
                    context: entry.context,
                    entity: change.entity.clone(),
                    old: change.old,
                    new: change.new,
                });
            }
        }
    }
    suspects
}

/// Report: `DIVERGE <context>@<index>  last-read <addr>` followed by
/// `SUSPECT <ruleId> <sourceText>` lines.
pub fn report_text(
    divergence: &Divergence,
    suspects: &[SuspectFiring],
    sources: impl Fn(usize) -> String,
) -> String {
    let mut out = String::new();
    let last_read = match &divergence.last_read {
        Some(r) => format!("{:#010x}", r.address),
        None => "-".to_string(),
    };
    let _ = writeln!(
        out,
        "DIVERGE {}@{}  last-read {}",
        divergence.context, divergence.index, last_read
    );
    for s in suspects {
        let _ = writeln!(out, "SUSPECT {} {}", s.rule_id, sources(s.rule_id));
    }
    out
}
