//! The condition-action rule file format.
//!
//! A rule file describes one peripheral in four line-oriented sections:
//! a named-entity table (`Fields`), an interrupt-source table, an optional
//! DMA-source table, and the rules themselves. Rules pair a trigger kind
//! and a conjunction of predicates with an ordered action list:
//!
//! ```text
//! B #D[R] >= RWFIFO[RXWATER] -> S1[RDRF] := 1
//! V S1[RDRF] == 1 & V C2[RIE] == 1 & V C5[RDMAS] == 0 -> IRQ[RDRF] := Pending
//! ```
//!
//! `parse_rule_file` accepts the format as printed in vendor-style listings
//! (dashed separators, `...` elision markers, tolerant spacing around `->`,
//! `:=` vs `=`), and [`serialize_rule_file`] emits a canonical form that
//! re-parses to an equal structure.

mod parse;
mod resolve;

pub use parse::parse_rule_file;
pub use resolve::{
    resolve_rules, ResolvedAction, ResolvedActionTarget, ResolvedActionValue, ResolvedEntity,
    ResolvedOperand, ResolvedPredicate, ResolvedRule, ResolvedRuleSet, RuleClass,
};

use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DslError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: duplicate entity {name}")]
    DuplicateEntity { line: usize, name: String },
    #[error("rule {rule}: unknown entity {name}")]
    UnknownEntity { name: String, rule: usize },
    #[error("rule {rule}: constant {value} exceeds the width of {name}")]
    WidthOverflow { rule: usize, name: String, value: u32 },
    #[error("entities {a} and {b} overlap at {address:#010x}")]
    OverlappingFields { a: String, b: String, address: u32 },
}

/// What a named entity denotes inside one peripheral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityKind {
    /// A register field (possibly the whole register).
    Field,
    /// The receive data buffer, written `D[R]`.
    RxBuffer,
    /// The transmit data buffer, written `D[T]`.
    TxBuffer,
    /// Occupancy of the receive buffer, written `#D[R]`.
    RxOccupancy,
    /// Occupancy of the transmit buffer, written `#D[T]`.
    TxOccupancy,
}

/// A named entity reference: `Reg[Field]`, `D[R]`/`D[T]`, or `#D[R]`/`#D[T]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityRef {
    pub register: String,
    pub field: String,
    pub kind: EntityKind,
}

impl EntityRef {
    pub fn field(register: &str, field: &str) -> Self {
        EntityRef {
            register: register.to_string(),
            field: field.to_string(),
            kind: EntityKind::Field,
        }
    }

    /// The synthetic entity behind the bare `*` condition of O rules.
    pub fn always() -> Self {
        EntityRef::field("*", "*")
    }

    pub fn is_always(&self) -> bool {
        self.register == "*"
    }

    pub fn is_occupancy(&self) -> bool {
        matches!(self.kind, EntityKind::RxOccupancy | EntityKind::TxOccupancy)
    }

    pub fn is_buffer(&self) -> bool {
        matches!(self.kind, EntityKind::RxBuffer | EntityKind::TxBuffer)
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_always() {
            return write!(f, "*");
        }
        let prefix = if self.is_occupancy() { "#" } else { "" };
        if self.field == self.register && self.kind == EntityKind::Field {
            write!(f, "{}{}", prefix, self.register)
        } else {
            write!(f, "{}{}[{}]", prefix, self.register, self.field)
        }
    }
}

/// The five trigger kinds of the rule language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Trigger {
    /// `B`: buffer content changed.
    Buffer,
    /// `W`: firmware wrote the entity.
    Write,
    /// `R`: firmware read the entity.
    Read,
    /// `V`: the entity's value changed through a prior action.
    ValueChange,
    /// `O`: other signals; checked on ticks and before reads.
    Other,
}

impl Trigger {
    pub fn letter(self) -> char {
        match self {
            Trigger::Buffer => 'B',
            Trigger::Write => 'W',
            Trigger::Read => 'R',
            Trigger::ValueChange => 'V',
            Trigger::Other => 'O',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareOp {
    Eq,
    Ge,
    Le,
    Gt,
    Lt,
    /// Matches any value; the observed value binds the rule's wildcard.
    Any,
}

impl CompareOp {
    fn symbol(self) -> &'static str {
        match self {
            CompareOp::Eq => "==",
            CompareOp::Ge => ">=",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Lt => "<",
            CompareOp::Any => "==",
        }
    }
}

/// Right-hand side of a predicate.
#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Constant(u32),
    Entity(EntityRef),
    Wildcard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub trigger: Trigger,
    pub lhs: EntityRef,
    pub op: CompareOp,
    pub rhs: Operand,
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lhs.is_always() && self.op == CompareOp::Any {
            return write!(f, "{} *", self.trigger.letter());
        }
        match (&self.op, &self.rhs) {
            (CompareOp::Any, Operand::Wildcard) => {
                write!(f, "{} {} == *", self.trigger.letter(), self.lhs)
            }
            (op, Operand::Constant(c)) => {
                write!(f, "{} {} {} {}", self.trigger.letter(), self.lhs, op.symbol(), c)
            }
            (op, Operand::Entity(e)) => {
                write!(f, "{} {} {} {}", self.trigger.letter(), self.lhs, op.symbol(), e)
            }
            (op, Operand::Wildcard) => {
                write!(f, "{} {} {} *", self.trigger.letter(), self.lhs, op.symbol())
            }
        }
    }
}

/// Interrupt or DMA request state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RequestState {
    Disable,
    Enable,
    Pending,
}

impl RequestState {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestState::Disable => "Disable",
            RequestState::Enable => "Enable",
            RequestState::Pending => "Pending",
        }
    }
}

impl fmt::Display for RequestState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionTarget {
    Entity(EntityRef),
    Irq(String),
    Dma(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionValue {
    Constant(u32),
    Entity(EntityRef),
    /// `*` on the action side: the value bound by a W/R trigger predicate.
    BoundWildcard,
    Request(RequestState),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    FieldAssign,
    IrqSet,
    DmaSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub target: ActionTarget,
    pub value: ActionValue,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self.target {
            ActionTarget::Entity(_) => ActionKind::FieldAssign,
            ActionTarget::Irq(_) => ActionKind::IrqSet,
            ActionTarget::Dma(_) => ActionKind::DmaSet,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.target {
            ActionTarget::Entity(e) => write!(f, "{} := ", e)?,
            ActionTarget::Irq(s) => write!(f, "IRQ[{}] := ", s)?,
            ActionTarget::Dma(s) => write!(f, "DMA[{}] := ", s)?,
        }
        match &self.value {
            ActionValue::Constant(c) => write!(f, "{}", c),
            ActionValue::Entity(e) => write!(f, "{}", e),
            ActionValue::BoundWildcard => write!(f, "*"),
            ActionValue::Request(r) => write!(f, "{}", r),
        }
    }
}

/// One condition-action rule. `id` is the position in file order.
#[derive(Debug, Clone)]
pub struct Rule {
    pub id: usize,
    pub predicates: Vec<Predicate>,
    pub actions: Vec<Action>,
    pub source_text: String,
}

/// Rules compare by content; `id` and the original text are bookkeeping.
impl PartialEq for Rule {
    fn eq(&self, other: &Self) -> bool {
        self.predicates == other.predicates && self.actions == other.actions
    }
}

impl Rule {
    /// The trigger that fires this rule: the single B/W/R predicate when
    /// present, otherwise V, otherwise O.
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
}

/// Bit coverage of an entity within its register.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitSpec {
    Bit(u8),
    Range(u8, u8),
    /// `*`: the full register width.
    Whole,
}

impl fmt::Display for BitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BitSpec::Bit(b) => write!(f, "{}", b),
            BitSpec::Range(lo, hi) => write!(f, "{}-{}", lo, hi),
            BitSpec::Whole => write!(f, "*"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    ReadOnly,
    WriteOnly,
    ReadWrite,
}

impl Access {
    pub fn as_str(self) -> &'static str {
        match self {
            Access::ReadOnly => "RO",
            Access::WriteOnly => "WO",
            Access::ReadWrite => "RW",
        }
    }
}

/// One row of the entity table.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEntry {
    pub entity: EntityRef,
    pub address: u32,
    pub bits: BitSpec,
    pub access: Option<Access>,
    pub reset: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrqSourceEntry {
    pub name: String,
    pub irq: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmaSourceEntry {
    pub name: String,
    pub number: u32,
}

/// Peripheral layout: named entities plus the interrupt and DMA tables.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisterMap {
    pub entities: Vec<FieldEntry>,
    pub irq_sources: Vec<IrqSourceEntry>,
    pub dma_sources: Vec<DmaSourceEntry>,
    pub register_width: u8,
}

impl Default for RegisterMap {
    fn default() -> Self {
        RegisterMap {
            entities: Vec::new(),
            irq_sources: Vec::new(),
            dma_sources: Vec::new(),
            register_width: 32,
        }
    }
}

impl RegisterMap {
    pub fn entry(&self, register: &str, field: &str) -> Option<&FieldEntry> {
        self.entities
            .iter()
            .find(|e| e.entity.register == register && e.entity.field == field)
    }

    /// Address of the receive data register, when the map declares `D[R]`.
    pub fn rx_data_address(&self) -> Option<u32> {
        self.entities
            .iter()
            .find(|e| e.entity.kind == EntityKind::RxBuffer)
            .map(|e| e.address)
    }

    /// Address of the transmit data register, when the map declares `D[T]`.
    pub fn tx_data_address(&self) -> Option<u32> {
        self.entities
            .iter()
            .find(|e| e.entity.kind == EntityKind::TxBuffer)
            .map(|e| e.address)
    }

    pub fn irq_number(&self, source: &str) -> Option<u32> {
        self.irq_sources
            .iter()
            .find(|s| s.name == source)
            .map(|s| s.irq)
    }

    /// Completion IRQ of a DMA channel: the table row naming the channel
    /// ("Channel N transfer complete") when present, else the channel number.
    pub fn completion_irq(&self, channel: u32) -> u32 {
        let label = format!("Channel {} ", channel);
        self.dma_sources
            .iter()
            .find(|s| s.name.starts_with(&label) || s.name == format!("Channel {}", channel))
            .map(|s| s.number)
            .unwrap_or(channel)
    }
}

/// Canonical single-line form of a rule; re-parses to an equal rule.
pub fn serialize_rule(rule: &Rule) -> String {
    let preds: Vec<String> = rule.predicates.iter().map(|p| p.to_string()).collect();
    let actions: Vec<String> = rule.actions.iter().map(|a| a.to_string()).collect();
    format!("{} -> {}", preds.join(" & "), actions.join(", "))
}

/// Canonical rule file: all four sections, stable column spacing.
pub fn serialize_rule_file(map: &RegisterMap, rules: &[Rule]) -> String {
    let mut out = String::new();
    out.push_str("Fields\n");
    for e in &map.entities {
        let mut line = format!("{:<24}{:<14}{}", e.entity.to_string(), format!("{:#010x}", e.address), e.bits);
        if let Some(a) = e.access {
            line.push_str(&format!(" {}", a.as_str()));
        }
        if let Some(r) = e.reset {
            line.push_str(&format!(" {:#x}", r));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out.push_str("------------------------------------------------------\n");
    out.push_str("Interrupt Sources\n");
    for s in &map.irq_sources {
        out.push_str(&format!("{:<44}{}\n", s.name, s.irq));
    }
    out.push_str("------------------------------------------------------\n");
    if !map.dma_sources.is_empty() {
        out.push_str("DMA Sources\n");
        for s in &map.dma_sources {
            out.push_str(&format!("{:<44}{}\n", s.name, s.number));
        }
        out.push_str("------------------------------------------------------\n");
    }
    out.push_str("Rules\n");
    for r in rules {
        out.push_str(&serialize_rule(r));
        out.push('\n');
    }
    out
}
