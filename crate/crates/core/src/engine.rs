//! Rule evaluation and chained execution.
//!
//! A dispatch runs in two phases. Phase 1 evaluates the rules whose trigger
//! matches the event (W rules after the raw value is stored, R rules after
//! the return value is computed, B rules on buffer changes, O rules on
//! ticks) and fires those whose whole conjunction holds, in rule-file
//! order. Phase 2 chains: entities changed by fired actions wake V-trigger
//! rules, whose actions may change further entities, until a wave fires
//! nothing or the chain-depth limit trips. Each rule is evaluated at most
//! once per wave; idempotent writes produce no new wave, which is what
//! makes mutually-referencing rules terminate.

use crate::dsl::{
    CompareOp, RequestState, ResolvedActionTarget, ResolvedActionValue, ResolvedOperand,
    ResolvedPredicate, ResolvedRule, ResolvedRuleSet, Trigger,
};
use crate::state::{BufferSide, PeripheralState};
use crate::trace::Context;
use std::fmt::Write as _;
use thiserror::Error;

pub const DEFAULT_CHAIN_LIMIT: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    /// A rule cycle kept producing changes past the wave limit.
    #[error("chained rule execution exceeded {0} waves")]
    ChainLimitExceeded(usize),
    #[error("rule {rule}: `*` value used outside a W/R-triggered firing")]
    UnboundWildcard { rule: usize },
}

/// What happened to drive a dispatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    /// Firmware stored `value` at `address` (the raw store happens here).
    FirmwareWrite { address: u32, value: u32 },
    /// Firmware read `address` and will observe `value`.
    FirmwareRead { address: u32, value: u32 },
    BufferChanged(BufferSide),
    Tick,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldChange {
    pub entity: String,
    pub address: u32,
    pub mask: u32,
    pub old: u32,
    pub new: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestKind {
    Irq,
    Dma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestChange {
    pub kind: RequestKind,
    pub source: String,
    pub old: RequestState,
    pub new: RequestState,
}

/// One rule firing: the wildcard binding, the field changes it made, and
/// the request-state transitions it caused.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectEntry {
    pub rule_id: usize,
    pub context: Context,
    pub wave: usize,
    pub wildcard: Option<u32>,
    pub changes: Vec<FieldChange>,
    pub requests: Vec<RequestChange>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EffectLog {
    pub entries: Vec<EffectEntry>,
}

impl EffectLog {
    pub fn extend(&mut self, other: EffectLog) {
        self.entries.extend(other.entries);
    }

    /// Newline-delimited audit export: `ruleId|entity|old->new` per field
    /// change plus `IRQ <src> -> <state>` / `DMA <src> -> <state>` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            for c in &entry.changes {
                let _ = writeln!(out, "{}|{}|{:#x}->{:#x}", entry.rule_id, c.entity, c.old, c.new);
            }
            for r in &entry.requests {
                let kind = match r.kind {
                    RequestKind::Irq => "IRQ",
                    RequestKind::Dma => "DMA",
                };
                let _ = writeln!(out, "{} {} -> {}", kind, r.source, r.new);
            }
        }
        out
    }
}

/// Does the predicate hold over the current state? `binding` carries the
/// event value for wildcard comparisons on buffer entities; ANY predicates
/// hold unconditionally. No side effects.
pub fn eval_predicate(
    state: &PeripheralState,
    pred: &ResolvedPredicate,
    binding: Option<u32>,
) -> bool {
    if pred.op == CompareOp::Any {
        return true;
    }
    let lhs = if pred.lhs.entity.is_buffer() {
        binding.unwrap_or_else(|| state.read_field(&pred.lhs))
    } else {
        state.read_field(&pred.lhs)
    };
    let rhs = match &pred.rhs {
        ResolvedOperand::Constant(c) => *c,
        ResolvedOperand::Entity(e) => state.read_field(e),
        ResolvedOperand::Wildcard => return true,
    };
    match pred.op {
        CompareOp::Eq => lhs == rhs,
        CompareOp::Ge => lhs >= rhs,
        CompareOp::Le => lhs <= rhs,
        CompareOp::Gt => lhs > rhs,
        CompareOp::Lt => lhs < rhs,
        CompareOp::Any => true,
    }
}

/// Apply one action of a fired rule, recording what changed into `entry`.
/// Field assignments are engine-internal masked writes; entity values are
/// read at application time; the bound wildcard is masked to the target
/// width.
pub fn apply_action(
    state: &mut PeripheralState,
    rule: &ResolvedRule,
    action: &crate::dsl::ResolvedAction,
    binding: Option<u32>,
    entry: &mut EffectEntry,
) -> Result<(), EngineError> {
    match (&action.target, &action.value) {
        (ResolvedActionTarget::Entity(target), value) => {
            let raw = match value {
                ResolvedActionValue::Constant(c) => *c,
                ResolvedActionValue::Entity(e) => state.read_field(e),
                ResolvedActionValue::BoundWildcard => {
                    binding.ok_or(EngineError::UnboundWildcard { rule: rule.id })?
                }
                ResolvedActionValue::Request(_) => 0,
            };
            let value = raw & target.max_value();
            let old = state.read_field(target);
            // Engine-internal write: RO access applies to firmware only.
            let _ = state
                .write_field(target, value)
                .expect("masked value fits the field");
            entry.changes.push(FieldChange {
                entity: target.name(),
                address: target.address,
                mask: target.mask,
                old,
                new: value,
            });
        }
        (ResolvedActionTarget::Irq(source), ResolvedActionValue::Request(req)) => {
            let old = state.set_irq_state(source, *req);
            entry.requests.push(RequestChange {
                kind: RequestKind::Irq,
                source: source.clone(),
                old,
                new: *req,
            });
        }
        (ResolvedActionTarget::Dma(source), ResolvedActionValue::Request(req)) => {
            let old = state.set_dma_state(source, *req);
            entry.requests.push(RequestChange {
                kind: RequestKind::Dma,
                source: source.clone(),
                old,
                new: *req,
            });
        }
        // The parser only pairs request states with IRQ/DMA targets.
        _ => unreachable!("request value on a field target"),
    }
    Ok(())
}

/// The wildcard binding for a rule woken by `event`: the value its
/// triggering predicate observed.
fn rule_binding(
    state: &PeripheralState,
    rule: &ResolvedRule,
    event: Event,
) -> Option<u32> {
    match event {
        Event::FirmwareWrite { value, .. } => rule
            .predicates
            .iter()
            .find(|p| p.trigger == Trigger::Write)
            .map(|p| p.lhs.extract(value)),
        Event::FirmwareRead { value, .. } => rule
            .predicates
            .iter()
            .find(|p| p.trigger == Trigger::Read)
            .map(|p| p.lhs.extract(value)),
        Event::BufferChanged(_) => rule
            .predicates
            .iter()
            .find(|p| p.trigger == Trigger::Buffer)
            .map(|p| state.read_field(&p.lhs)),
        Event::Tick => None,
    }
}

fn rule_holds(state: &PeripheralState, rule: &ResolvedRule, binding: Option<u32>) -> bool {
    rule.predicates
        .iter()
        .all(|p| eval_predicate(state, p, binding))
}

/// Run one event against the rule set: phase-1 trigger matching, then the
/// V-chaining fixpoint. Returns the complete effect log for this event.
pub fn dispatch(
    state: &mut PeripheralState,
    rules: &ResolvedRuleSet,
    event: Event,
    context: Context,
    chain_limit: usize,
) -> Result<EffectLog, EngineError> {
    let mut log = EffectLog::default();
    // Changed entities accumulate as (address, xor-of-bits) pairs.
    let mut changed: Vec<(u32, u32)> = Vec::new();

    let candidates: Vec<usize> = match event {
        Event::FirmwareWrite { address, value } => {
            let (old, new) = state.store_raw(address, value);
            if old != new {
                changed.push((address, old ^ new));
            }
            rules.rules_for_write(address).to_vec()
        }
        Event::FirmwareRead { address, .. } => rules.rules_for_read(address).to_vec(),
        Event::BufferChanged(BufferSide::Rx) => rules.rules_for_rx_buffer().to_vec(),
        Event::BufferChanged(BufferSide::Tx) => rules.rules_for_tx_buffer().to_vec(),
        Event::Tick => rules.other_rules().to_vec(),
    };

    let mut candidates = candidates;
    candidates.sort_unstable();
    fire_wave(state, rules, &candidates, event, context, 0, &mut log, &mut changed)?;

    // Phase 2: chaining fixpoint over value-change wakeups.
    let mut wave = 0usize;
    while !changed.is_empty() {
        wave += 1;
        if wave > chain_limit {
            return Err(EngineError::ChainLimitExceeded(chain_limit));
        }
        let mut woken: Vec<usize> = Vec::new();
        for (address, bits) in changed.drain(..) {
            woken.extend(rules.rules_for_value_change(address, bits));
        }
        woken.sort_unstable();
        woken.dedup();
        fire_wave(state, rules, &woken, Event::Tick, context, wave, &mut log, &mut changed)?;
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn fire_wave(
    state: &mut PeripheralState,
    rules: &ResolvedRuleSet,
    candidates: &[usize],
    event: Event,
    context: Context,
    wave: usize,
    log: &mut EffectLog,
    changed: &mut Vec<(u32, u32)>,
) -> Result<(), EngineError> {
    for &id in candidates {
        let rule = &rules.rules[id];
        let binding = if wave == 0 {
            rule_binding(state, rule, event)
        } else {
            None
        };
        if !rule_holds(state, rule, binding) {
            continue;
        }
        let mut entry = EffectEntry {
            rule_id: rule.id,
            context,
            wave,
            wildcard: binding,
            changes: Vec::new(),
            requests: Vec::new(),
        };
        for action in &rule.actions {
            apply_action(state, rule, action, binding, &mut entry)?;
        }
        for c in &entry.changes {
            let bits = (c.old ^ c.new) << trailing_shift(c.mask);
            if bits & c.mask != 0 {
                changed.push((c.address, bits & c.mask));
            }
        }
        log.entries.push(entry);
    }
    Ok(())
}

fn trailing_shift(mask: u32) -> u32 {
    if mask == 0 {
        0
    } else {
        mask.trailing_zeros()
    }
}
