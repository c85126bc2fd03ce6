//! Entity resolution: names to addresses, masks, and shifts, plus the
//! trigger indices the engine dispatches from.

use super::*;
use std::collections::BTreeMap;

/// An entity annotated with its resolved location.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedEntity {
    pub entity: EntityRef,
    pub address: u32,
    pub mask: u32,
    pub shift: u8,
}

impl ResolvedEntity {
    fn always() -> Self {
        ResolvedEntity {
            entity: EntityRef::always(),
            address: 0,
            mask: 0,
            shift: 0,
        }
    }

    pub fn name(&self) -> String {
        self.entity.to_string()
    }

    /// Extract this entity's value from a raw register word.
    pub fn extract(&self, raw: u32) -> u32 {
        (raw & self.mask) >> self.shift
    }

    /// Insert `value` into `raw`, touching only this entity's bits.
    pub fn insert(&self, raw: u32, value: u32) -> u32 {
        (raw & !self.mask) | ((value << self.shift) & self.mask)
    }

    /// Largest value the field can hold.
    pub fn max_value(&self) -> u32 {
        self.mask >> self.shift
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedOperand {
    Constant(u32),
    Entity(ResolvedEntity),
    Wildcard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPredicate {
    pub trigger: Trigger,
    pub lhs: ResolvedEntity,
    pub op: CompareOp,
    pub rhs: ResolvedOperand,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedActionTarget {
    Entity(ResolvedEntity),
    Irq(String),
    Dma(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedActionValue {
    Constant(u32),
    Entity(ResolvedEntity),
    BoundWildcard,
    Request(RequestState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedAction {
    pub target: ResolvedActionTarget,
    pub value: ResolvedActionValue,
}

impl ResolvedAction {
    pub fn kind(&self) -> ActionKind {
        match self.target {
            ResolvedActionTarget::Entity(_) => ActionKind::FieldAssign,
            ResolvedActionTarget::Irq(_) => ActionKind::IrqSet,
            ResolvedActionTarget::Dma(_) => ActionKind::DmaSet,
        }
    }
}

/// Condition-type family, matching the usual statistics breakdown:
/// hardware-signal conditions (B/O), firmware-access conditions (W/R),
/// and internal chaining conditions (V).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleClass {
    Hardware,
    Firmware,
    Internal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRule {
    pub id: usize,
    pub source_text: String,
    pub predicates: Vec<ResolvedPredicate>,
    pub actions: Vec<ResolvedAction>,
}

impl ResolvedRule {
    pub fn trigger(&self) -> Trigger {
        for p in &self.predicates {
            if matches!(p.trigger, Trigger::Buffer | Trigger::Write | Trigger::Read) {
                return p.trigger;
            }
        }
        if self.predicates.iter().any(|p| p.trigger == Trigger::ValueChange) {
            Trigger::ValueChange
        } else {
            Trigger::Other
        }
    }

    pub fn class(&self) -> RuleClass {
        match self.trigger() {
            Trigger::Buffer | Trigger::Other => RuleClass::Hardware,
            Trigger::Write | Trigger::Read => RuleClass::Firmware,
            Trigger::ValueChange => RuleClass::Internal,
        }
    }
}

/// A rule set with every entity resolved and per-trigger dispatch indices.
#[derive(Debug, Clone)]
pub struct ResolvedRuleSet {
    pub map: RegisterMap,
    pub rules: Vec<ResolvedRule>,
    write_index: BTreeMap<u32, Vec<usize>>,
    read_index: BTreeMap<u32, Vec<usize>>,
    rx_buffer_rules: Vec<usize>,
    tx_buffer_rules: Vec<usize>,
    value_index: BTreeMap<u32, Vec<(u32, usize)>>,
    other_rules: Vec<usize>,
}

impl ResolvedRuleSet {
    pub fn rules_for_write(&self, address: u32) -> &[usize] {
        self.write_index.get(&address).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn rules_for_read(&self, address: u32) -> &[usize] {
        self.read_index.get(&address).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn rules_for_rx_buffer(&self) -> &[usize] {
        &self.rx_buffer_rules
    }

    pub fn rules_for_tx_buffer(&self) -> &[usize] {
        &self.tx_buffer_rules
    }

    pub fn other_rules(&self) -> &[usize] {
        &self.other_rules
    }

    /// Rules whose V predicates watch any of the changed bits of `address`.
    pub fn rules_for_value_change(&self, address: u32, changed_bits: u32) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .value_index
            .get(&address)
            .map(Vec::as_slice)
            .unwrap_or(&[])
            .iter()
            .filter(|(mask, _)| mask & changed_bits != 0)
            .map(|&(_, id)| id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Resolve a `(register, field)` name against the map.
    pub fn resolve_name(&self, register: &str, field: &str) -> Option<ResolvedEntity> {
        self.map.entry(register, field).map(resolve_entry)
    }

    /// Union of the masks of read-only entities at `address`.
    pub fn ro_mask(&self, address: u32) -> u32 {
        self.map
            .entities
            .iter()
            .filter(|e| e.address == address && e.access == Some(Access::ReadOnly))
            .map(|e| bits_mask(e.bits, self.map.register_width).0)
            .fold(0, |acc, m| acc | m)
    }

    /// All register addresses named by the map.
    pub fn register_addresses(&self) -> Vec<u32> {
        let mut addrs: Vec<u32> = self.map.entities.iter().map(|e| e.address).collect();
        addrs.sort_unstable();
        addrs.dedup();
        addrs
    }

    /// Register reset values folded from the field table's reset column.
    pub fn reset_values(&self) -> BTreeMap<u32, u32> {
        let mut values: BTreeMap<u32, u32> = BTreeMap::new();
        for addr in self.register_addresses() {
            values.insert(addr, 0);
        }
        for e in &self.map.entities {
            if let Some(reset) = e.reset {
                let resolved = resolve_entry(e);
                let cell = values.entry(e.address).or_insert(0);
                *cell = resolved.insert(*cell, reset);
            }
        }
        values
    }
}

fn bits_mask(bits: BitSpec, width: u8) -> (u32, u8) {
    match bits {
        BitSpec::Bit(b) => (1u32 << b, b),
        BitSpec::Range(lo, hi) => {
            let len = hi - lo + 1;
            let mask = if len >= 32 { u32::MAX } else { ((1u32 << len) - 1) << lo };
            (mask, lo)
        }
        BitSpec::Whole => {
            let mask = if width >= 32 { u32::MAX } else { (1u32 << width) - 1 };
            (mask, 0)
        }
    }
}

fn resolve_entry(entry: &FieldEntry) -> ResolvedEntity {
    let (mask, shift) = bits_mask(entry.bits, 32);
    ResolvedEntity {
        entity: entry.entity.clone(),
        address: entry.address,
        mask,
        shift,
    }
}

/// Resolve every entity of every rule against the map and build the
/// trigger indices. Buffer and occupancy references bind to the data
/// register's address.
pub fn resolve_rules(map: &RegisterMap, rules: &[Rule]) -> Result<ResolvedRuleSet, DslError> {
    // Distinct field entities on one address must not overlap.
    let fields: Vec<(&FieldEntry, ResolvedEntity)> = map
        .entities
        .iter()
        .filter(|e| e.entity.kind == EntityKind::Field)
        .map(|e| (e, resolve_entry(e)))
        .collect();
    for (i, (ea, ra)) in fields.iter().enumerate() {
        for (eb, rb) in &fields[i + 1..] {
            if ra.address == rb.address && ra.mask & rb.mask != 0 {
                return Err(DslError::OverlappingFields {
                    a: ea.entity.to_string(),
                    b: eb.entity.to_string(),
                    address: ra.address,
                });
            }
        }
    }

    let lookup = |entity: &EntityRef, rule_id: usize| -> Result<ResolvedEntity, DslError> {
        if entity.is_always() {
            return Ok(ResolvedEntity::always());
        }
        let entry = map
            .entry(&entity.register, &entity.field)
            .ok_or_else(|| DslError::UnknownEntity {
                name: entity.to_string(),
                rule: rule_id,
            })?;
        let mut resolved = resolve_entry(entry);
        resolved.entity = entity.clone();
        Ok(resolved)
    };

    let mut resolved_rules = Vec::with_capacity(rules.len());
    let mut write_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut read_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut value_index: BTreeMap<u32, Vec<(u32, usize)>> = BTreeMap::new();
    let mut rx_buffer_rules = Vec::new();
    let mut tx_buffer_rules = Vec::new();
    let mut other_rules = Vec::new();

    for rule in rules {
        let mut predicates = Vec::with_capacity(rule.predicates.len());
        for pred in &rule.predicates {
            let lhs = lookup(&pred.lhs, rule.id)?;
            let rhs = match &pred.rhs {
                Operand::Constant(c) => ResolvedOperand::Constant(*c),
                Operand::Entity(e) => ResolvedOperand::Entity(lookup(e, rule.id)?),
                Operand::Wildcard => ResolvedOperand::Wildcard,
            };
            match pred.trigger {
                Trigger::Write => push_unique(write_index.entry(lhs.address).or_default(), rule.id),
                Trigger::Read => push_unique(read_index.entry(lhs.address).or_default(), rule.id),
                Trigger::Buffer => match pred.lhs.kind {
                    EntityKind::RxOccupancy => push_unique(&mut rx_buffer_rules, rule.id),
                    EntityKind::TxOccupancy => push_unique(&mut tx_buffer_rules, rule.id),
                    _ => unreachable!("parser enforces occupancy lhs for B"),
                },
                Trigger::ValueChange => {
                    let by_addr = value_index.entry(lhs.address).or_default();
                    if !by_addr.iter().any(|&(m, id)| id == rule.id && m == lhs.mask) {
                        by_addr.push((lhs.mask, rule.id));
                    }
                }
                Trigger::Other => push_unique(&mut other_rules, rule.id),
            }
            predicates.push(ResolvedPredicate {
                trigger: pred.trigger,
                lhs,
                op: pred.op,
                rhs,
            });
        }

        let mut actions = Vec::with_capacity(rule.actions.len());
        for action in &rule.actions {
            let target = match &action.target {
                ActionTarget::Entity(e) => ResolvedActionTarget::Entity(lookup(e, rule.id)?),
                ActionTarget::Irq(s) => ResolvedActionTarget::Irq(s.clone()),
                ActionTarget::Dma(s) => ResolvedActionTarget::Dma(s.clone()),
            };
            let value = match &action.value {
                ActionValue::Constant(c) => {
                    if let ResolvedActionTarget::Entity(t) = &target {
                        if *c > t.max_value() {
                            return Err(DslError::WidthOverflow {
                                rule: rule.id,
                                name: t.name(),
                                value: *c,
                            });
                        }
                    }
                    ResolvedActionValue::Constant(*c)
                }
                ActionValue::Entity(e) => ResolvedActionValue::Entity(lookup(e, rule.id)?),
                ActionValue::BoundWildcard => ResolvedActionValue::BoundWildcard,
                ActionValue::Request(r) => ResolvedActionValue::Request(*r),
            };
            actions.push(ResolvedAction { target, value });
        }

        resolved_rules.push(ResolvedRule {
            id: rule.id,
            source_text: rule.source_text.clone(),
            predicates,
            actions,
        });
    }

    Ok(ResolvedRuleSet {
        map: map.clone(),
        rules: resolved_rules,
        write_index,
        read_index,
        rx_buffer_rules,
        tx_buffer_rules,
        value_index,
        other_rules,
    })
}

fn push_unique(list: &mut Vec<usize>, id: usize) {
    if !list.contains(&id) {
        list.push(id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const K64F_UART: &str =
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/uart_k64f.rules"));

    fn k64f() -> ResolvedRuleSet {
        let (map, rules) = parse_rule_file(K64F_UART).unwrap();
        resolve_rules(&map, &rules).unwrap()
    }

    #[test]
    fn rdrf_mask_and_shift() {
        let set = k64f();
        let rule = set
            .rules
            .iter()
            .find(|r| r.source_text.contains(">= RWFIFO"))
            .unwrap();
        let target = match &rule.actions[0].target {
            ResolvedActionTarget::Entity(e) => e,
            other => panic!("unexpected target {:?}", other),
        };
        assert_eq!(target.address, 0x4006a004);
        assert_eq!(target.mask, 0x20);
        assert_eq!(target.shift, 5);
    }

    #[test]
    fn whole_width_buffer_entity() {
        let set = k64f();
        let rule = set
            .rules
            .iter()
            .find(|r| r.source_text.starts_with("R D[R]"))
            .unwrap();
        let lhs = &rule.predicates[0].lhs;
        assert_eq!(lhs.address, 0x4006a007);
        assert_eq!(lhs.mask, u32::MAX);
        assert_eq!(lhs.shift, 0);
    }

    #[test]
    fn unknown_entity_reported() {
        let (map, rules) =
            parse_rule_file("Fields\nA[B] 0x10 0\nRules\nV S9[NOPE] == 1 -> A[B] := 1\n").unwrap();
        let err = resolve_rules(&map, &rules).unwrap_err();
        assert!(matches!(err, DslError::UnknownEntity { ref name, rule: 0 } if name == "S9[NOPE]"));
    }

    #[test]
    fn constant_wider_than_field() {
        let (map, rules) =
            parse_rule_file("Fields\nA[B] 0x10 0\nRules\nV A[B] == 1 -> A[B] := 2\n").unwrap();
        let err = resolve_rules(&map, &rules).unwrap_err();
        assert!(matches!(err, DslError::WidthOverflow { .. }));
    }

    #[test]
    fn overlap_detected() {
        let (map, rules) = parse_rule_file("Fields\nA[B] 0x10 2\nA[C] 0x10 1-3\n").unwrap();
        let err = resolve_rules(&map, &rules).unwrap_err();
        assert!(matches!(err, DslError::OverlappingFields { .. }));
    }

    #[test]
    fn trigger_index_partition() {
        let set = k64f();
        // Every rule appears in exactly the index sets implied by its
        // predicates' triggers and in no other.
        for rule in &set.rules {
            let in_write = set.write_index.values().any(|v| v.contains(&rule.id));
            let in_read = set.read_index.values().any(|v| v.contains(&rule.id));
            let in_rx = set.rx_buffer_rules.contains(&rule.id);
            let in_tx = set.tx_buffer_rules.contains(&rule.id);
            let in_value = set
                .value_index
                .values()
                .any(|v| v.iter().any(|&(_, id)| id == rule.id));
            let in_other = set.other_rules.contains(&rule.id);
            let has = |t: Trigger| rule.predicates.iter().any(|p| p.trigger == t);
            assert_eq!(in_write, has(Trigger::Write), "rule {}", rule.id);
            assert_eq!(in_read, has(Trigger::Read), "rule {}", rule.id);
            assert_eq!(
                in_rx,
                rule.predicates
                    .iter()
                    .any(|p| p.trigger == Trigger::Buffer
                        && p.lhs.entity.kind == EntityKind::RxOccupancy),
                "rule {}",
                rule.id
            );
            assert_eq!(
                in_tx,
                rule.predicates
                    .iter()
                    .any(|p| p.trigger == Trigger::Buffer
                        && p.lhs.entity.kind == EntityKind::TxOccupancy),
                "rule {}",
                rule.id
            );
            assert_eq!(in_value, has(Trigger::ValueChange), "rule {}", rule.id);
            assert_eq!(in_other, has(Trigger::Other), "rule {}", rule.id);
        }
    }

    #[test]
    fn value_change_wakeup_honors_mask_overlap() {
        let set = k64f();
        // Changing bit 5 of S1 wakes the RDRF chains but not the TDRE ones.
        let woken = set.rules_for_value_change(0x4006a004, 0x20);
        assert!(!woken.is_empty());
        for id in woken {
            assert!(set.rules[id].source_text.contains("RDRF"));
        }
    }
}
