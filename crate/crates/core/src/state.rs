//! Concrete state of one peripheral: register values, the receive and
//! transmit byte FIFOs, and per-source interrupt/DMA request states.

use crate::dsl::{EntityKind, RequestState, ResolvedEntity, ResolvedRuleSet};
use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use thiserror::Error;

pub const DEFAULT_BUFFER_CAPACITY: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("buffer overflow: capacity {capacity}")]
    Overflow { capacity: usize },
    #[error("value {value:#x} exceeds the width of {name}")]
    WidthOverflow { name: String, value: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferSide {
    Rx,
    Tx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeripheralState {
    registers: BTreeMap<u32, u32>,
    rx: VecDeque<u8>,
    tx: VecDeque<u8>,
    irq_state: BTreeMap<String, RequestState>,
    dma_state: BTreeMap<String, RequestState>,
    reset_values: BTreeMap<u32, u32>,
    capacity: usize,
    underflows: u64,
}

impl PeripheralState {
    /// Fresh state for a resolved rule set: registers at their reset values
    /// (zero unless the field table says otherwise), empty buffers, all
    /// request sources disabled.
    pub fn new(rules: &ResolvedRuleSet, capacity: usize) -> Self {
        let reset_values = rules.reset_values();
        let mut irq_state = BTreeMap::new();
        for source in &rules.map.irq_sources {
            irq_state.insert(source.name.clone(), RequestState::Disable);
        }
        PeripheralState {
            registers: reset_values.clone(),
            rx: VecDeque::new(),
            tx: VecDeque::new(),
            irq_state,
            dma_state: BTreeMap::new(),
            reset_values,
            capacity,
            underflows: 0,
        }
    }

    pub fn reset(&mut self) {
        self.registers = self.reset_values.clone();
        self.rx.clear();
        self.tx.clear();
        for state in self.irq_state.values_mut() {
            *state = RequestState::Disable;
        }
        self.dma_state.clear();
        self.underflows = 0;
    }

    pub fn register(&self, address: u32) -> u32 {
        self.registers.get(&address).copied().unwrap_or(0)
    }

    /// Store a whole register cell; returns `(old, new)`.
    pub fn store_raw(&mut self, address: u32, value: u32) -> (u32, u32) {
        let cell = self.registers.entry(address).or_insert(0);
        let old = *cell;
        *cell = value;
        (old, value)
    }

    /// Current value of a resolved entity: the extracted field bits, a
    /// buffer occupancy, or the head byte for buffer entities.
    pub fn read_field(&self, entity: &ResolvedEntity) -> u32 {
        match entity.entity.kind {
            EntityKind::Field => entity.extract(self.register(entity.address)),
            EntityKind::RxOccupancy => self.rx.len() as u32,
            EntityKind::TxOccupancy => self.tx.len() as u32,
            EntityKind::RxBuffer => self.rx.front().copied().unwrap_or(0) as u32,
            EntityKind::TxBuffer => self.tx.front().copied().unwrap_or(0) as u32,
        }
    }

    /// Masked field update. Bits outside the entity's mask never change.
    /// Returns whether the stored field value differs from before.
    pub fn write_field(&mut self, entity: &ResolvedEntity, value: u32) -> Result<bool, StateError> {
        if value > entity.max_value() {
            return Err(StateError::WidthOverflow {
                name: entity.name(),
                value,
            });
        }
        let cell = self.registers.entry(entity.address).or_insert(0);
        let old = (*cell & entity.mask) >> entity.shift;
        *cell = (*cell & !entity.mask) | ((value << entity.shift) & entity.mask);
        Ok(old != value)
    }

    pub fn occupancy(&self, side: BufferSide) -> usize {
        match side {
            BufferSide::Rx => self.rx.len(),
            BufferSide::Tx => self.tx.len(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Append bytes FIFO; the caller dispatches B triggers afterwards.
    pub fn buffer_feed(&mut self, side: BufferSide, bytes: &[u8]) -> Result<usize, StateError> {
        let queue = match side {
            BufferSide::Rx => &mut self.rx,
            BufferSide::Tx => &mut self.tx,
        };
        if queue.len() + bytes.len() > self.capacity {
            return Err(StateError::Overflow {
                capacity: self.capacity,
            });
        }
        queue.extend(bytes.iter().copied());
        Ok(queue.len())
    }

    /// Remove and return the FIFO head. An empty buffer yields 0 with
    /// `taken == false` and counts as an underflow, like stale hardware
    /// reads; the run keeps going.
    pub fn buffer_take(&mut self, side: BufferSide) -> (u8, bool) {
        let queue = match side {
            BufferSide::Rx => &mut self.rx,
            BufferSide::Tx => &mut self.tx,
        };
        match queue.pop_front() {
            Some(byte) => (byte, true),
            None => {
                self.underflows += 1;
                (0, false)
            }
        }
    }

    pub fn underflow_count(&self) -> u64 {
        self.underflows
    }

    pub fn irq_state(&self, source: &str) -> RequestState {
        self.irq_state
            .get(source)
            .copied()
            .unwrap_or(RequestState::Disable)
    }

    pub fn dma_state(&self, source: &str) -> RequestState {
        self.dma_state
            .get(source)
            .copied()
            .unwrap_or(RequestState::Disable)
    }

    pub fn set_irq_state(&mut self, source: &str, state: RequestState) -> RequestState {
        self.irq_state
            .insert(source.to_string(), state)
            .unwrap_or(RequestState::Disable)
    }

    pub fn set_dma_state(&mut self, source: &str, state: RequestState) -> RequestState {
        self.dma_state
            .insert(source.to_string(), state)
            .unwrap_or(RequestState::Disable)
    }

    /// Sources currently requesting an interrupt, in name order.
    pub fn pending_irq_sources(&self) -> Vec<String> {
        self.irq_state
            .iter()
            .filter(|(_, s)| **s == RequestState::Pending)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Sources currently requesting a DMA transfer, in name order.
    pub fn pending_dma_sources(&self) -> Vec<String> {
        self.dma_state
            .iter()
            .filter(|(_, s)| **s == RequestState::Pending)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Golden-state export: `address=value` lines plus buffer contents.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (addr, value) in &self.registers {
            let _ = writeln!(out, "{:#010x}={:#x}", addr, value);
        }
        let _ = writeln!(out, "rx={}", hex_bytes(&self.rx));
        let _ = writeln!(out, "tx={}", hex_bytes(&self.tx));
        out
    }
}

fn hex_bytes(queue: &VecDeque<u8>) -> String {
    queue.iter().map(|b| format!("{:02x}", b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{parse_rule_file, resolve_rules};
    use proptest::prelude::*;

    const K64F_UART: &str =
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/uart_k64f.rules"));

    fn uart_state() -> (ResolvedRuleSet, PeripheralState) {
        let (map, rules) = parse_rule_file(K64F_UART).unwrap();
        let set = resolve_rules(&map, &rules).unwrap();
        let state = PeripheralState::new(&set, DEFAULT_BUFFER_CAPACITY);
        (set, state)
    }

    fn rdrf(set: &ResolvedRuleSet) -> ResolvedEntity {
        ResolvedEntity {
            entity: set.map.entry("S1", "RDRF").unwrap().entity.clone(),
            address: 0x4006a004,
            mask: 0x20,
            shift: 5,
        }
    }

    #[test]
    fn single_bit_extraction() {
        let (set, mut state) = uart_state();
        state.store_raw(0x4006a004, 0x20);
        assert_eq!(state.read_field(&rdrf(&set)), 1);
    }

    #[test]
    fn occupancy_is_queue_length() {
        let (_, mut state) = uart_state();
        state.buffer_feed(BufferSide::Rx, b"abc").unwrap();
        assert_eq!(state.occupancy(BufferSide::Rx), 3);
    }

    #[test]
    fn reset_registers_read_zero() {
        let (set, state) = uart_state();
        for addr in set.register_addresses() {
            assert_eq!(state.register(addr), 0);
        }
    }

    #[test]
    fn set_bit_and_idempotent_write() {
        let (set, mut state) = uart_state();
        let e = rdrf(&set);
        assert!(state.write_field(&e, 1).unwrap());
        assert_eq!(state.register(0x4006a004), 0x20);
        assert!(!state.write_field(&e, 1).unwrap());
    }

    #[test]
    fn wide_value_rejected() {
        let (set, mut state) = uart_state();
        let err = state.write_field(&rdrf(&set), 2).unwrap_err();
        assert!(matches!(err, StateError::WidthOverflow { .. }));
    }

    #[test]
    fn fifo_order_and_underflow() {
        let (_, mut state) = uart_state();
        state.buffer_feed(BufferSide::Rx, &[0x41, 0x42]).unwrap();
        assert_eq!(state.buffer_take(BufferSide::Rx), (0x41, true));
        assert_eq!(state.buffer_take(BufferSide::Rx), (0x42, true));
        assert_eq!(state.buffer_take(BufferSide::Rx), (0, false));
        assert_eq!(state.underflow_count(), 1);
    }

    #[test]
    fn capacity_bound() {
        let (_, mut state) = uart_state();
        let bytes = vec![0u8; 17];
        let err = state.buffer_feed(BufferSide::Rx, &bytes).unwrap_err();
        assert!(matches!(err, StateError::Overflow { capacity: 16 }));
        assert_eq!(state.occupancy(BufferSide::Rx), 0);
    }

    #[test]
    fn empty_feed_keeps_occupancy() {
        let (_, mut state) = uart_state();
        assert_eq!(state.buffer_feed(BufferSide::Rx, b"").unwrap(), 0);
    }

    #[test]
    fn reset_column_seeds_register_values() {
        let (map, rules) =
            parse_rule_file("Fields\nCR[EN] 0x10 0 RW 1\nCR[MODE] 0x10 2-3 RW 2\n").unwrap();
        let set = resolve_rules(&map, &rules).unwrap();
        let state = PeripheralState::new(&set, 16);
        assert_eq!(state.register(0x10), 0b1001);
    }

    #[test]
    fn snapshot_golden_shape() {
        let (_, mut state) = uart_state();
        state.store_raw(0x4006a004, 0x20);
        state.buffer_feed(BufferSide::Rx, &[0xab, 0x01]).unwrap();
        let snapshot = state.snapshot();
        assert!(snapshot.contains("0x4006a004=0x20\n"));
        assert!(snapshot.ends_with("rx=ab01\ntx=\n"));
    }

    #[test]
    fn reset_determinism() {
        let (set, mut a) = uart_state();
        let b = PeripheralState::new(&set, DEFAULT_BUFFER_CAPACITY);
        a.store_raw(0x4006a004, 0xff);
        a.buffer_feed(BufferSide::Tx, b"x").unwrap();
        a.reset();
        assert_eq!(a, b);
    }

    proptest! {
        // Bits outside the written field's mask never change.
        #[test]
        fn mask_isolation(raw in any::<u32>(), bit in 0u8..32, value in 0u32..2) {
            let entity = ResolvedEntity {
                entity: crate::dsl::EntityRef::field("R", "F"),
                address: 0x10,
                mask: 1 << bit,
                shift: bit,
            };
            let (map, rules) = parse_rule_file("Fields\nR[F] 0x10 0\n").unwrap();
            let set = resolve_rules(&map, &rules).unwrap();
            let mut state = PeripheralState::new(&set, 16);
            state.store_raw(0x10, raw);
            state.write_field(&entity, value).unwrap();
            let after = state.register(0x10);
            prop_assert_eq!(raw & !entity.mask, after & !entity.mask);
            prop_assert_eq!((after & entity.mask) >> bit, value);
        }

        // FIFO law: without underflow, taken bytes replay the fed sequence.
        #[test]
        fn fifo_law(bytes in proptest::collection::vec(any::<u8>(), 0..16)) {
            let (map, rules) = parse_rule_file("Fields\nR[F] 0x10 0\n").unwrap();
            let set = resolve_rules(&map, &rules).unwrap();
            let mut state = PeripheralState::new(&set, 16);
            state.buffer_feed(BufferSide::Rx, &bytes).unwrap();
            let mut taken = Vec::new();
            while state.occupancy(BufferSide::Rx) > 0 {
                taken.push(state.buffer_take(BufferSide::Rx).0);
            }
            prop_assert_eq!(taken, bytes);
        }
    }
}
