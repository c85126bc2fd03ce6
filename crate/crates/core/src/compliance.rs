//! Driver compliance checking over completed access histories.
//!
//! R1 (state verification): data-register accesses in main or irq context
//! must be preceded by a read of the guarding status field since the
//! previous access to the same data register and within the same context
//! segment — the window that catches stale-check races.
//!
//! R2 (interrupt activation consistency): enabling an interrupt requires
//! both the local peripheral enable field and the NVIC set-enable bit.
//! R2A flags NVIC-only configurations, R2B local-only ones; both are
//! end-of-run findings over ever-set flags.

use crate::dsl::{
    ActionKind, CompareOp, EntityKind, ResolvedActionTarget, ResolvedOperand, ResolvedRuleSet,
    Trigger,
};
use crate::machine::{AccessDir, AccessRecord, Machine, NVIC_ISER_WORDS};
use crate::state::BufferSide;
use crate::trace::Context;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// One guard: accesses of `data_address` in `direction` require a read of
/// `guard_address` first.
#[derive(Debug, Clone, PartialEq)]
pub struct Guard {
    pub direction: BufferSide,
    pub data_address: u32,
    pub guard_name: String,
    pub guard_address: u32,
    pub required: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GuardSpec {
    pub peripheral: String,
    pub guards: Vec<Guard>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    R1,
    R2A,
    R2B,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::R1 => "R1",
            ViolationKind::R2A => "R2A",
            ViolationKind::R2B => "R2B",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub peripheral: String,
    pub detail: String,
    /// History index for R1; R2 findings are end-of-run.
    pub index: Option<usize>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = match self.index {
            Some(i) => i.to_string(),
            None => "end".to_string(),
        };
        write!(
            f,
            "{} {} {} @{}",
            self.kind.as_str(),
            self.peripheral,
            self.detail,
            at
        )
    }
}

pub fn report_text(violations: &[Violation]) -> String {
    let mut out = String::new();
    for v in violations {
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

/// Derive guards from the B-trigger rules: the status fields assigned when
/// a buffer becomes ready guard that buffer's data-register direction.
/// Receive readiness is occupancy at or above a threshold; transmit
/// readiness is occupancy at or below one.
pub fn derive_guards(rules: &ResolvedRuleSet, peripheral: &str) -> GuardSpec {
    let mut spec = GuardSpec {
        peripheral: peripheral.to_string(),
        ..GuardSpec::default()
    };
    let rx_data = rules.map.rx_data_address();
    let tx_data = rules.map.tx_data_address();
    for rule in &rules.rules {
        let Some(buffer_pred) = rule
            .predicates
            .iter()
            .find(|p| p.trigger == Trigger::Buffer)
        else {
            continue;
        };
        let (direction, data_address, ready) = match buffer_pred.lhs.entity.kind {
            EntityKind::RxOccupancy => (
                BufferSide::Rx,
                rx_data,
                matches!(buffer_pred.op, CompareOp::Ge | CompareOp::Gt | CompareOp::Eq),
            ),
            EntityKind::TxOccupancy => (
                BufferSide::Tx,
                tx_data,
                matches!(buffer_pred.op, CompareOp::Le | CompareOp::Lt | CompareOp::Eq),
            ),
            _ => continue,
        };
        if !ready {
            continue;
        }
        let Some(data_address) = data_address else {
            continue;
        };
        for action in &rule.actions {
            if action.kind() != ActionKind::FieldAssign {
                continue;
            }
            let (target, value) = match (&action.target, &action.value) {
                (
                    ResolvedActionTarget::Entity(t),
                    crate::dsl::ResolvedActionValue::Constant(c),
                ) => (t, *c),
                _ => continue,
            };
            let guard = Guard {
                direction,
                data_address,
                guard_name: target.name(),
                guard_address: target.address,
                required: value,
            };
            if !spec.guards.contains(&guard) {
                spec.guards.push(guard);
            }
        }
    }
    let has_data = rx_data.is_some() || tx_data.is_some();
    if has_data && spec.guards.is_empty() {
        spec.warnings.push(format!(
            "{}: no guard derivable, peripheral has data registers but no B rules",
            peripheral
        ));
    }
    spec
}

/// Parse a guard override file: one guard per line,
/// `read|write <Reg[Field]> <value>`, `#` comments. Overrides replace the
/// derivation entirely.
pub fn parse_guard_overrides(
    text: &str,
    rules: &ResolvedRuleSet,
    peripheral: &str,
) -> Result<GuardSpec, String> {
    let mut spec = GuardSpec {
        peripheral: peripheral.to_string(),
        ..GuardSpec::default()
    };
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => raw[..pos].trim(),
            None => raw.trim(),
        };
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(format!("guard line {}: need `read|write <entity> <value>`", idx + 1));
        }
        let (direction, data_address) = match tokens[0] {
            "read" => (BufferSide::Rx, rules.map.rx_data_address()),
            "write" => (BufferSide::Tx, rules.map.tx_data_address()),
            other => return Err(format!("guard line {}: bad direction `{}`", idx + 1, other)),
        };
        let Some(data_address) = data_address else {
            return Err(format!("guard line {}: peripheral has no data register", idx + 1));
        };
        let (register, field) = tokens[1]
            .split_once('[')
            .and_then(|(r, rest)| rest.strip_suffix(']').map(|f| (r, f)))
            .ok_or_else(|| format!("guard line {}: bad entity `{}`", idx + 1, tokens[1]))?;
        let entity = rules
            .resolve_name(register, field)
            .ok_or_else(|| format!("guard line {}: unknown entity `{}`", idx + 1, tokens[1]))?;
        let required: u32 = tokens[2]
            .parse()
            .map_err(|_| format!("guard line {}: bad value `{}`", idx + 1, tokens[2]))?;
        spec.guards.push(Guard {
            direction,
            data_address,
            guard_name: entity.name(),
            guard_address: entity.address,
            required,
        });
    }
    Ok(spec)
}

/// R1 scan. For each guarded data access outside init context, the window
/// back to the previous access of the same data register and direction
/// (clipped to the current context segment) must contain a read of the
/// guard's status register.
pub fn check_r1(history: &[AccessRecord], guards: &GuardSpec) -> Vec<Violation> {
    let mut violations = Vec::new();
    for (idx, record) in history.iter().enumerate() {
        if record.context == Context::Init {
            continue;
        }
        let applicable: Vec<&Guard> = guards
            .guards
            .iter()
            .filter(|g| {
                g.data_address == record.address
                    && match g.direction {
                        BufferSide::Rx => record.dir == AccessDir::Read,
                        BufferSide::Tx => record.dir == AccessDir::Write,
                    }
            })
            .collect();
        if applicable.is_empty() {
            continue;
        }
        // Window start: after the previous same-entity access, and never
        // before the current segment began.
        let mut start = 0;
        for (j, earlier) in history[..idx].iter().enumerate() {
            if earlier.segment != record.segment {
                start = j + 1;
                continue;
            }
            if earlier.address == record.address && earlier.dir == record.dir {
                start = j + 1;
            }
        }
        let guarded = history[start..idx].iter().any(|earlier| {
            earlier.dir == AccessDir::Read
                && applicable.iter().any(|g| g.guard_address == earlier.address)
        });
        if !guarded {
            let dir = match record.dir {
                AccessDir::Read => "read",
                AccessDir::Write => "write",
            };
            violations.push(Violation {
                kind: ViolationKind::R1,
                peripheral: guards.peripheral.clone(),
                detail: format!(
                    "unguarded {} of {:#010x} (guard {})",
                    dir, record.address, applicable[0].guard_name
                ),
                index: Some(idx),
            });
        }
    }
    violations
}

/// R2 scan over one peripheral's rule set. Local-enable fields are the
/// fields required to equal 1 by rules that raise an interrupt request;
/// "ever set" means a firmware write stored a nonzero value in the field.
pub fn check_r2(
    history: &[AccessRecord],
    rules: &ResolvedRuleSet,
    peripheral: &str,
    iser: &[u32; NVIC_ISER_WORDS],
) -> Vec<Violation> {
    // irq number -> local-enable candidates (name, address, mask).
    let mut candidates: BTreeMap<u32, BTreeSet<(String, u32, u32)>> = BTreeMap::new();
    for rule in &rules.rules {
        let sources: Vec<&str> = rule
            .actions
            .iter()
            .filter_map(|a| match &a.target {
                ResolvedActionTarget::Irq(s) => Some(s.as_str()),
                _ => None,
            })
            .collect();
        if sources.is_empty() {
            continue;
        }
        for source in sources {
            let Some(irq) = rules.map.irq_number(source) else {
                continue;
            };
            for pred in &rule.predicates {
                let required_one = pred.op == CompareOp::Eq
                    && matches!(pred.rhs, ResolvedOperand::Constant(1))
                    && pred.lhs.entity.kind == EntityKind::Field
                    && !pred.lhs.entity.is_always();
                if required_one {
                    candidates.entry(irq).or_default().insert((
                        pred.lhs.name(),
                        pred.lhs.address,
                        pred.lhs.mask,
                    ));
                }
            }
        }
    }

    let iser_ever = |irq: u32| {
        let word = (irq / 32) as usize;
        word < NVIC_ISER_WORDS && iser[word] & (1 << (irq % 32)) != 0
    };
    let field_ever_written = |address: u32, mask: u32| {
        history.iter().any(|r| {
            r.dir == AccessDir::Write && r.address == address && r.value & mask != 0
        })
    };

    let mut violations = Vec::new();
    for (irq, fields) in &candidates {
        let locally_enabled: Vec<&(String, u32, u32)> = fields
            .iter()
            .filter(|(_, addr, mask)| field_ever_written(*addr, *mask))
            .collect();
        let nvic_enabled = iser_ever(*irq);
        if nvic_enabled && locally_enabled.is_empty() {
            violations.push(Violation {
                kind: ViolationKind::R2A,
                peripheral: peripheral.to_string(),
                detail: format!(
                    "irq {} enabled in NVIC but no local enable field was ever set",
                    irq
                ),
                index: None,
            });
        } else if !nvic_enabled && !locally_enabled.is_empty() {
            violations.push(Violation {
                kind: ViolationKind::R2B,
                peripheral: peripheral.to_string(),
                detail: format!(
                    "{} set but irq {} never enabled in NVIC",
                    locally_enabled[0].0, irq
                ),
                index: None,
            });
        }
    }
    violations
}

/// Convenience wrapper: derived (or overridden) guards plus R2 across all
/// peripherals of a machine.
pub fn check_machine(machine: &Machine, overrides: Option<&GuardSpec>) -> Vec<Violation> {
    let mut violations = Vec::new();
    for p in machine.peripherals() {
        let guards = match overrides {
            Some(spec) => spec.clone(),
            None => derive_guards(&p.rules, &p.name),
        };
        violations.extend(check_r1(machine.history(), &guards));
        violations.extend(check_r2(
            machine.history(),
            &p.rules,
            &p.name,
            machine.iser(),
        ));
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{parse_rule_file, resolve_rules};

    const K64F_UART: &str =
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/uart_k64f.rules"));

    fn uart_rules() -> ResolvedRuleSet {
        let (map, rules) = parse_rule_file(K64F_UART).unwrap();
        resolve_rules(&map, &rules).unwrap()
    }

    fn record(
        context: Context,
        dir: AccessDir,
        address: u32,
        segment: u32,
        event_index: usize,
    ) -> AccessRecord {
        AccessRecord {
            context,
            dir,
            address,
            value: 0,
            event_index,
            segment,
        }
    }

    #[test]
    fn guards_derived_from_watermark_rules() {
        let spec = derive_guards(&uart_rules(), "uart0");
        assert!(spec.guards.iter().any(|g| g.direction == BufferSide::Rx
            && g.guard_name == "S1[RDRF]"
            && g.data_address == 0x4006a007
            && g.required == 1));
        assert!(spec.guards.iter().any(|g| g.direction == BufferSide::Tx
            && g.guard_name == "S1[TDRE]"
            && g.required == 1));
        assert!(spec.warnings.is_empty());
    }

    #[test]
    fn no_b_rules_warns() {
        let (map, rules) = parse_rule_file("Fields\nD[R] 0x10 *\nRules\n").unwrap();
        let set = resolve_rules(&map, &rules).unwrap();
        let spec = derive_guards(&set, "p");
        assert!(spec.guards.is_empty());
        assert_eq!(spec.warnings.len(), 1);
    }

    #[test]
    fn r1_guarded_pair_passes() {
        let spec = derive_guards(&uart_rules(), "uart0");
        let history = vec![
            record(Context::Main, AccessDir::Read, 0x4006a004, 1, 0),
            record(Context::Main, AccessDir::Read, 0x4006a007, 1, 1),
        ];
        assert!(check_r1(&history, &spec).is_empty());
    }

    #[test]
    fn r1_unguarded_first_access() {
        let spec = derive_guards(&uart_rules(), "uart0");
        let history = vec![record(Context::Main, AccessDir::Read, 0x4006a007, 1, 0)];
        let violations = check_r1(&history, &spec);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].index, Some(0));
    }

    #[test]
    fn r1_window_resets_at_previous_data_access() {
        let spec = derive_guards(&uart_rules(), "uart0");
        let history = vec![
            record(Context::Main, AccessDir::Read, 0x4006a004, 1, 0),
            record(Context::Main, AccessDir::Read, 0x4006a007, 1, 1),
            record(Context::Main, AccessDir::Read, 0x4006a007, 1, 2),
        ];
        let violations = check_r1(&history, &spec);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].index, Some(2));
    }

    #[test]
    fn r1_guard_does_not_cross_segments() {
        let spec = derive_guards(&uart_rules(), "uart0");
        // Guard read in main (segment 1), data access in a handler
        // (segment 2): segments do not vouch for each other.
        let history = vec![
            record(Context::Main, AccessDir::Read, 0x4006a004, 1, 0),
            record(Context::Irq, AccessDir::Read, 0x4006a007, 2, 1),
        ];
        let violations = check_r1(&history, &spec);
        assert_eq!(violations.len(), 1);
    }

    #[test]
    fn r1_init_exempt() {
        let spec = derive_guards(&uart_rules(), "uart0");
        let history = vec![record(Context::Init, AccessDir::Read, 0x4006a007, 0, 0)];
        assert!(check_r1(&history, &spec).is_empty());
    }

    #[test]
    fn r1_empty_history_empty_report() {
        let spec = derive_guards(&uart_rules(), "uart0");
        assert!(check_r1(&[], &spec).is_empty());
    }

    #[test]
    fn r2a_nvic_only() {
        let rules = uart_rules();
        let mut iser = [0u32; NVIC_ISER_WORDS];
        iser[0] = 1 << 31;
        let violations = check_r2(&[], &rules, "uart0", &iser);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].kind, ViolationKind::R2A);
    }

    #[test]
    fn r2b_local_only() {
        let rules = uart_rules();
        let history = vec![AccessRecord {
            context: Context::Init,
            dir: AccessDir::Write,
            address: 0x4006a003,
            value: 0x20, // C2[RIE]
            event_index: 0,
            segment: 0,
        }];
        let violations = check_r2(&history, &rules, "uart0", &[0; NVIC_ISER_WORDS]);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].kind, ViolationKind::R2B);
    }

    #[test]
    fn r2_consistent_configuration_passes() {
        let rules = uart_rules();
        let mut iser = [0u32; NVIC_ISER_WORDS];
        iser[0] = 1 << 31;
        let history = vec![AccessRecord {
            context: Context::Init,
            dir: AccessDir::Write,
            address: 0x4006a003,
            value: 0x20,
            event_index: 0,
            segment: 0,
        }];
        assert!(check_r2(&history, &rules, "uart0", &iser).is_empty());
    }

    #[test]
    fn r2_never_both_for_one_irq() {
        // Exclusivity follows from the iser condition; spot-check both
        // configurations.
        let rules = uart_rules();
        for &(iser_set, local_set) in &[(true, true), (true, false), (false, true), (false, false)]
        {
            let mut iser = [0u32; NVIC_ISER_WORDS];
            if iser_set {
                iser[0] = 1 << 31;
            }
            let history = if local_set {
                vec![AccessRecord {
                    context: Context::Init,
                    dir: AccessDir::Write,
                    address: 0x4006a003,
                    value: 0x20,
                    event_index: 0,
                    segment: 0,
                }]
            } else {
                Vec::new()
            };
            let violations = check_r2(&history, &rules, "uart0", &iser);
            let a = violations.iter().filter(|v| v.kind == ViolationKind::R2A).count();
            let b = violations.iter().filter(|v| v.kind == ViolationKind::R2B).count();
            assert!(a == 0 || b == 0);
        }
    }

    /// Inserting a guard read right before every guarded access removes
    /// all R1 violations.
    #[test]
    fn r1_soundness_guard_insertion() {
        let spec = derive_guards(&uart_rules(), "uart0");
        let history = vec![
            record(Context::Main, AccessDir::Read, 0x4006a007, 1, 0),
            record(Context::Main, AccessDir::Write, 0x4006a007, 1, 1),
            record(Context::Main, AccessDir::Read, 0x4006a007, 1, 2),
        ];
        assert!(!check_r1(&history, &spec).is_empty());
        let mut fixed = Vec::new();
        for r in &history {
            fixed.push(record(r.context, AccessDir::Read, 0x4006a004, r.segment, r.event_index));
            fixed.push(r.clone());
        }
        assert!(check_r1(&fixed, &spec).is_empty());
    }
}
