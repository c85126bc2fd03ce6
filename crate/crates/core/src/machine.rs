//! The machine: peripherals composed behind an MMIO bus, a reduced NVIC
//! (set-enable registers plus an internal pending set), a generic DMA
//! engine, and the global tick loop.
//!
//! One machine is one logical thread of execution; the run loop is
//! sequential and deterministic. Distinct machines are independent and may
//! run concurrently.

use crate::dsl::{parse_rule_file, resolve_rules, RequestState, ResolvedRuleSet};
use crate::engine::{self, EffectLog, Event};
use crate::state::{BufferSide, PeripheralState, DEFAULT_BUFFER_CAPACITY};
use crate::trace::Context;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

pub const NVIC_ISER_BASE: u32 = 0xE000_E100;
pub const NVIC_ISER_WORDS: usize = 8;
pub const DEFAULT_MEMORY_BASE: u32 = 0x2000_0000;
pub const DEFAULT_MEMORY_SIZE: usize = 0x1_0000;
pub const DEFAULT_MAX_WAIT_STEPS: usize = 1000;

#[derive(Debug, Error)]
pub enum MachineError {
    #[error("unmapped address {0:#010x}")]
    UnmappedAddress(u32),
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error(transparent)]
    Dsl(#[from] crate::dsl::DslError),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessDir {
    Read,
    Write,
}

/// One firmware MMIO access, in run order.
#[derive(Debug, Clone, PartialEq)]
pub struct AccessRecord {
    pub context: Context,
    pub dir: AccessDir,
    pub address: u32,
    pub value: u32,
    /// Index of the trace event being executed when the access happened.
    pub event_index: usize,
    /// Monotone context-segment id; bumps on every context switch.
    pub segment: u32,
}

impl AccessRecord {
    pub fn to_line(&self) -> String {
        let dir = match self.dir {
            AccessDir::Read => "R",
            AccessDir::Write => "W",
        };
        format!(
            "{}|{}|{:#010x}|{:#x}",
            self.context, dir, self.address, self.value
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmaDirection {
    RxToMem,
    MemToTx,
}

#[derive(Debug, Clone)]
pub struct DmaChannel {
    pub number: u32,
    pub source: String,
    pub direction: DmaDirection,
    pub dst_address: u32,
    pub count: u32,
    pub enabled: bool,
    moved: u32,
}

/// Outcome of servicing one channel in a DMA step.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub channel: u32,
    pub source: String,
    pub bytes_moved: u32,
    pub completed: bool,
}

/// Receive-path byte accounting, for the conservation property:
/// bytes fed == bytes read + bytes DMA'd + residual occupancy.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RxAccounting {
    pub fed: u64,
    pub read: u64,
    pub dma: u64,
}

#[derive(Debug)]
pub struct Peripheral {
    pub name: String,
    pub base: u32,
    pub size: u32,
    pub rules: ResolvedRuleSet,
    pub state: PeripheralState,
    pub accounting: RxAccounting,
    rx_dispatch_pending: bool,
}

impl Peripheral {
    fn contains(&self, address: u32) -> bool {
        address >= self.base && address < self.base + self.size
    }
}

#[derive(Debug, Clone)]
pub struct MachineConfig {
    pub chain_limit: usize,
    pub buffer_capacity: usize,
    pub max_wait_steps: usize,
    pub tx_drain_per_tick: usize,
    pub null_model: bool,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            chain_limit: engine::DEFAULT_CHAIN_LIMIT,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            max_wait_steps: DEFAULT_MAX_WAIT_STEPS,
            tx_drain_per_tick: 1,
            null_model: false,
        }
    }
}

#[derive(Debug, Default)]
struct Nvic {
    iser: [u32; NVIC_ISER_WORDS],
    pending: BTreeSet<u32>,
}

impl Nvic {
    fn contains(address: u32) -> bool {
        address >= NVIC_ISER_BASE && address < NVIC_ISER_BASE + (NVIC_ISER_WORDS as u32) * 4
    }

    fn enabled(&self, irq: u32) -> bool {
        let word = (irq / 32) as usize;
        word < NVIC_ISER_WORDS && self.iser[word] & (1 << (irq % 32)) != 0
    }
}

pub struct Machine {
    peripherals: Vec<Peripheral>,
    nvic: Nvic,
    dma_channels: BTreeMap<u32, DmaChannel>,
    memory_base: u32,
    memory: Vec<u8>,
    history: Vec<AccessRecord>,
    effects: EffectLog,
    warnings: Vec<String>,
    pub config: MachineConfig,
    context: Context,
    event_index: usize,
    segment: u32,
}

impl Machine {
    pub fn new(config: MachineConfig) -> Self {
        Machine {
            peripherals: Vec::new(),
            nvic: Nvic::default(),
            dma_channels: BTreeMap::new(),
            memory_base: DEFAULT_MEMORY_BASE,
            memory: vec![0; DEFAULT_MEMORY_SIZE],
            history: Vec::new(),
            effects: EffectLog::default(),
            warnings: Vec::new(),
            config,
            context: Context::Init,
            event_index: 0,
            segment: 0,
        }
    }

    /// Build a machine from a config file's text. `base_dir` anchors
    /// relative rule-file paths.
    pub fn from_config_str(text: &str, base_dir: &Path) -> Result<Machine, MachineError> {
        let mut machine = Machine::new(MachineConfig::default());
        let mut entries: Vec<(usize, Vec<String>)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            entries.push((idx + 1, line.split_whitespace().map(String::from).collect()));
        }
        // Scalar settings apply before peripherals are instantiated.
        for (line, tokens) in &entries {
            match tokens[0].as_str() {
                "capacity" => {
                    machine.config.buffer_capacity =
                        parse_cfg_number(tokens.get(1), *line, "capacity")? as usize
                }
                "chainlimit" => {
                    machine.config.chain_limit =
                        parse_cfg_number(tokens.get(1), *line, "chainlimit")? as usize
                }
                _ => {}
            }
        }
        for (line, tokens) in &entries {
            match tokens[0].as_str() {
                "periph" => {
                    if tokens.len() != 5 {
                        return Err(MachineError::Config {
                            line: *line,
                            reason: "periph needs <name> <ruleFile> <baseAddr> <size>".into(),
                        });
                    }
                    let path = base_dir.join(&tokens[2]);
                    let text = std::fs::read_to_string(&path).map_err(|source| MachineError::Io {
                        path: path.display().to_string(),
                        source,
                    })?;
                    let (map, rules) = parse_rule_file(&text)?;
                    let resolved = resolve_rules(&map, &rules)?;
                    let base = parse_cfg_number(tokens.get(3), *line, "base address")?;
                    let size = parse_cfg_number(tokens.get(4), *line, "size")?;
                    machine.add_peripheral(&tokens[1], resolved, base, size)?;
                }
                "dma" => {
                    if tokens.len() != 6 {
                        return Err(MachineError::Config {
                            line: *line,
                            reason: "dma needs <channel> <source> <dir> <dst> <count>".into(),
                        });
                    }
                    let channel = parse_cfg_number(tokens.get(1), *line, "channel")?;
                    let direction = match tokens[3].as_str() {
                        "rx2mem" => DmaDirection::RxToMem,
                        "mem2tx" => DmaDirection::MemToTx,
                        other => {
                            return Err(MachineError::Config {
                                line: *line,
                                reason: format!("bad dma direction `{}`", other),
                            })
                        }
                    };
                    let dst = parse_cfg_number(tokens.get(4), *line, "dst")?;
                    let count = parse_cfg_number(tokens.get(5), *line, "count")?;
                    machine.configure_dma_channel(channel, &tokens[2], direction, dst, count);
                }
                "capacity" | "chainlimit" => {}
                other => {
                    return Err(MachineError::Config {
                        line: *line,
                        reason: format!("unknown config key `{}`", other),
                    })
                }
            }
        }
        Ok(machine)
    }

    pub fn from_config_file(path: &Path) -> Result<Machine, MachineError> {
        let text = std::fs::read_to_string(path).map_err(|source| MachineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
        Machine::from_config_str(&text, base_dir)
    }

    pub fn add_peripheral(
        &mut self,
        name: &str,
        rules: ResolvedRuleSet,
        base: u32,
        size: u32,
    ) -> Result<(), MachineError> {
        for p in &self.peripherals {
            if base < p.base + p.size && p.base < base + size {
                return Err(MachineError::Config {
                    line: 0,
                    reason: format!("peripheral `{}` overlaps `{}`", name, p.name),
                });
            }
        }
        for addr in rules.register_addresses() {
            if addr < base || addr >= base + size {
                return Err(MachineError::Config {
                    line: 0,
                    reason: format!(
                        "entity address {:#010x} outside `{}` range {:#010x}+{:#x}",
                        addr, name, base, size
                    ),
                });
            }
        }
        let state = PeripheralState::new(&rules, self.config.buffer_capacity);
        self.peripherals.push(Peripheral {
            name: name.to_string(),
            base,
            size,
            rules,
            state,
            accounting: RxAccounting::default(),
            rx_dispatch_pending: false,
        });
        Ok(())
    }

    pub fn configure_dma_channel(
        &mut self,
        number: u32,
        source: &str,
        direction: DmaDirection,
        dst_address: u32,
        count: u32,
    ) {
        self.dma_channels.insert(
            number,
            DmaChannel {
                number,
                source: source.to_string(),
                direction,
                dst_address,
                count,
                enabled: true,
                moved: 0,
            },
        );
    }

    // --- run bookkeeping, driven by the script runner ------------------

    pub fn set_context(&mut self, context: Context) {
        if context != self.context {
            self.segment += 1;
        }
        self.context = context;
    }

    pub fn set_event_index(&mut self, index: usize) {
        self.event_index = index;
    }

    fn record(&mut self, dir: AccessDir, address: u32, value: u32) {
        self.history.push(AccessRecord {
            context: self.context,
            dir,
            address,
            value,
            event_index: self.event_index,
            segment: self.segment,
        });
    }

    pub fn history(&self) -> &[AccessRecord] {
        &self.history
    }

    pub fn history_text(&self) -> String {
        let mut out = String::new();
        for record in &self.history {
            out.push_str(&record.to_line());
            out.push('\n');
        }
        out
    }

    pub fn effects(&self) -> &EffectLog {
        &self.effects
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn peripherals(&self) -> &[Peripheral] {
        &self.peripherals
    }

    pub fn peripheral(&self, name: &str) -> Option<&Peripheral> {
        self.peripherals.iter().find(|p| p.name == name)
    }

    pub fn peripheral_mut(&mut self, name: &str) -> Option<&mut Peripheral> {
        self.peripherals.iter_mut().find(|p| p.name == name)
    }

    pub fn iser(&self) -> &[u32; NVIC_ISER_WORDS] {
        &self.nvic.iser
    }

    pub fn nvic_pending(&self) -> Vec<u32> {
        self.nvic.pending.iter().copied().collect()
    }

    /// Put an IRQ back into the pending set (e.g. deferred delivery while
    /// init context runs).
    pub fn requeue_irq(&mut self, irq: u32) {
        self.nvic.pending.insert(irq);
    }

    pub fn dma_channel(&self, number: u32) -> Option<&DmaChannel> {
        self.dma_channels.get(&number)
    }

    pub fn memory_byte(&self, address: u32) -> Option<u8> {
        let offset = address.checked_sub(self.memory_base)? as usize;
        self.memory.get(offset).copied()
    }

    fn warn(&mut self, message: String) {
        self.warnings.push(message);
    }

    // --- MMIO ------------------------------------------------------------

    fn peripheral_index(&self, address: u32) -> Option<usize> {
        self.peripherals.iter().position(|p| p.contains(address))
    }

    /// Firmware read. O rules run first; a data-register read consumes one
    /// receive byte and dispatches the buffer change; R-trigger rules run
    /// on the returned value.
    pub fn mmio_read(&mut self, address: u32) -> Result<u32, MachineError> {
        if self.config.null_model {
            self.record(AccessDir::Read, address, 0);
            return Ok(0);
        }
        if Nvic::contains(address) {
            let word = ((address - NVIC_ISER_BASE) / 4) as usize;
            let value = self.nvic.iser[word];
            self.record(AccessDir::Read, address, value);
            return Ok(value);
        }
        let idx = self
            .peripheral_index(address)
            .ok_or(MachineError::UnmappedAddress(address))?;
        let context = self.context;
        let chain_limit = self.config.chain_limit;

        let mut dispatched = EffectLog::default();
        let p = &mut self.peripherals[idx];
        dispatched.extend(engine::dispatch(
            &mut p.state,
            &p.rules,
            Event::Tick,
            context,
            chain_limit,
        )?);

        let value = if p.rules.map.rx_data_address() == Some(address) {
            let (byte, took) = p.state.buffer_take(BufferSide::Rx);
            if took {
                p.accounting.read += 1;
                dispatched.extend(engine::dispatch(
                    &mut p.state,
                    &p.rules,
                    Event::BufferChanged(BufferSide::Rx),
                    context,
                    chain_limit,
                )?);
            } else {
                let name = p.name.clone();
                self.warn(format!("{}: receive buffer underflow", name));
            }
            byte as u32
        } else {
            self.peripherals[idx].state.register(address)
        };

        let p = &mut self.peripherals[idx];
        dispatched.extend(engine::dispatch(
            &mut p.state,
            &p.rules,
            Event::FirmwareRead { address, value },
            context,
            chain_limit,
        )?);
        self.effects.extend(dispatched);
        self.record(AccessDir::Read, address, value);
        Ok(value)
    }

    /// Firmware write. NVIC writes set enable bits; a data-register write
    /// pushes the byte into the transmit buffer; anything else stores the
    /// raw value (read-only bits untouched) and dispatches W rules plus
    /// the chained V waves.
    pub fn mmio_write(&mut self, address: u32, value: u32) -> Result<(), MachineError> {
        if self.config.null_model {
            self.record(AccessDir::Write, address, value);
            return Ok(());
        }
        if Nvic::contains(address) {
            let word = ((address - NVIC_ISER_BASE) / 4) as usize;
            self.nvic.iser[word] |= value;
            self.record(AccessDir::Write, address, value);
            return Ok(());
        }
        let idx = self
            .peripheral_index(address)
            .ok_or(MachineError::UnmappedAddress(address))?;
        let context = self.context;
        let chain_limit = self.config.chain_limit;
        self.record(AccessDir::Write, address, value);

        if self.peripherals[idx].rules.map.tx_data_address() == Some(address) {
            let p = &mut self.peripherals[idx];
            match p.state.buffer_feed(BufferSide::Tx, &[(value & 0xFF) as u8]) {
                Ok(_) => {
                    let log = engine::dispatch(
                        &mut p.state,
                        &p.rules,
                        Event::BufferChanged(BufferSide::Tx),
                        context,
                        chain_limit,
                    )?;
                    self.effects.extend(log);
                }
                Err(_) => {
                    let name = p.name.clone();
                    self.warn(format!("{}: transmit buffer overflow, byte dropped", name));
                }
            }
            return Ok(());
        }

        let p = &mut self.peripherals[idx];
        let ro_mask = p.rules.ro_mask(address);
        let old = p.state.register(address);
        let mut effective = value;
        if ro_mask != 0 && (value ^ old) & ro_mask != 0 {
            effective = (old & ro_mask) | (value & !ro_mask);
            let name = p.name.clone();
            self.warn(format!(
                "{}: access violation, write to read-only bits at {:#010x}",
                name, address
            ));
        }
        let p = &mut self.peripherals[idx];
        let log = engine::dispatch(
            &mut p.state,
            &p.rules,
            Event::FirmwareWrite {
                address,
                value: effective,
            },
            context,
            chain_limit,
        )?;
        self.effects.extend(log);
        Ok(())
    }

    /// External input: append bytes to a peripheral's receive buffer. The
    /// buffer-change dispatch is deferred to the next tick phase, modeling
    /// asynchronous arrival.
    pub fn feed_rx(&mut self, peripheral: &str, bytes: &[u8]) -> Result<usize, MachineError> {
        let idx = self
            .peripherals
            .iter()
            .position(|p| p.name == peripheral)
            .ok_or_else(|| MachineError::Config {
                line: 0,
                reason: format!("unknown peripheral `{}`", peripheral),
            })?;
        let p = &mut self.peripherals[idx];
        match p.state.buffer_feed(BufferSide::Rx, bytes) {
            Ok(occupancy) => {
                p.accounting.fed += bytes.len() as u64;
                if !bytes.is_empty() && !self.config.null_model {
                    p.rx_dispatch_pending = true;
                }
                Ok(occupancy)
            }
            Err(e) => {
                let name = p.name.clone();
                self.warn(format!("{}: receive overflow on feed ({})", name, e));
                Ok(self.peripherals[idx].state.occupancy(BufferSide::Rx))
            }
        }
    }

    /// One machine step: promote pending peripheral requests into the NVIC,
    /// select the lowest enabled pending IRQ, then run the tick phase
    /// (deferred feeds, transmit drain, DMA service, O rules). Returns the
    /// dispatched IRQ number, if any.
    pub fn step(&mut self) -> Result<Option<u32>, MachineError> {
        if self.config.null_model {
            return Ok(None);
        }
        // Promotion: Pending sources whose IRQ is enabled move into the
        // NVIC pending set and return to Enable; gated sources stay put.
        for p in &mut self.peripherals {
            for source in p.state.pending_irq_sources() {
                match p.rules.map.irq_number(&source) {
                    Some(irq) => {
                        if self.nvic.enabled(irq) {
                            self.nvic.pending.insert(irq);
                            p.state.set_irq_state(&source, RequestState::Enable);
                        }
                    }
                    None => {
                        p.state.set_irq_state(&source, RequestState::Enable);
                        self.warnings.push(format!(
                            "{}: irq source `{}` has no IRQ number",
                            p.name, source
                        ));
                    }
                }
            }
        }
        // Selection: lowest pending+enabled IRQ wins, no priorities.
        let selected = self
            .nvic
            .pending
            .iter()
            .copied()
            .find(|&irq| self.nvic.enabled(irq));
        if let Some(irq) = selected {
            self.nvic.pending.remove(&irq);
        }

        // Tick phase.
        let context = self.context;
        let chain_limit = self.config.chain_limit;
        for idx in 0..self.peripherals.len() {
            if self.peripherals[idx].rx_dispatch_pending {
                self.peripherals[idx].rx_dispatch_pending = false;
                let p = &mut self.peripherals[idx];
                let log = engine::dispatch(
                    &mut p.state,
                    &p.rules,
                    Event::BufferChanged(BufferSide::Rx),
                    context,
                    chain_limit,
                )?;
                self.effects.extend(log);
            }
            for _ in 0..self.config.tx_drain_per_tick {
                let p = &mut self.peripherals[idx];
                if p.state.occupancy(BufferSide::Tx) == 0 {
                    break;
                }
                p.state.buffer_take(BufferSide::Tx);
                let log = engine::dispatch(
                    &mut p.state,
                    &p.rules,
                    Event::BufferChanged(BufferSide::Tx),
                    context,
                    chain_limit,
                )?;
                self.effects.extend(log);
            }
        }
        self.dma_step()?;
        for idx in 0..self.peripherals.len() {
            let p = &mut self.peripherals[idx];
            let log = engine::dispatch(&mut p.state, &p.rules, Event::Tick, context, chain_limit)?;
            self.effects.extend(log);
        }
        Ok(selected)
    }

    /// Service every enabled DMA channel whose source is requesting:
    /// move min(count, occupancy) bytes, decrement the count, return the
    /// source to Enable, and raise the completion IRQ when the count
    /// reaches zero.
    pub fn dma_step(&mut self) -> Result<Vec<TransferReport>, MachineError> {
        let mut reports = Vec::new();
        if self.config.null_model {
            return Ok(reports);
        }
        let numbers: Vec<u32> = self.dma_channels.keys().copied().collect();
        let context = self.context;
        let chain_limit = self.config.chain_limit;

        // Requests without any configured channel get a warning.
        let configured: BTreeSet<String> = self
            .dma_channels
            .values()
            .map(|c| c.source.clone())
            .collect();
        for p in &self.peripherals {
            for source in p.state.pending_dma_sources() {
                if !configured.contains(&source) {
                    self.warnings.push(format!(
                        "{}: dma request `{}` has no configured channel",
                        p.name, source
                    ));
                }
            }
        }

        for number in numbers {
            let channel = self.dma_channels.get(&number).unwrap().clone();
            let Some(idx) = self
                .peripherals
                .iter()
                .position(|p| p.state.dma_state(&channel.source) == RequestState::Pending)
            else {
                continue;
            };
            if !channel.enabled {
                self.warnings.push(format!(
                    "dma channel {} disabled; request `{}` not serviced",
                    number, channel.source
                ));
                continue;
            }
            if channel.count == 0 {
                continue;
            }

            let p = &mut self.peripherals[idx];
            let side = match channel.direction {
                DmaDirection::RxToMem => BufferSide::Rx,
                DmaDirection::MemToTx => BufferSide::Tx,
            };
            let available = match channel.direction {
                DmaDirection::RxToMem => p.state.occupancy(BufferSide::Rx) as u32,
                DmaDirection::MemToTx => {
                    (p.state.capacity() - p.state.occupancy(BufferSide::Tx)) as u32
                }
            };
            let n = channel.count.min(available);
            let mut moved = 0;
            for i in 0..n {
                match channel.direction {
                    DmaDirection::RxToMem => {
                        let (byte, took) = p.state.buffer_take(BufferSide::Rx);
                        if !took {
                            break;
                        }
                        let offset = (channel.dst_address + channel.moved + i)
                            .wrapping_sub(self.memory_base)
                            as usize;
                        if offset < self.memory.len() {
                            self.memory[offset] = byte;
                        }
                        p.accounting.dma += 1;
                    }
                    DmaDirection::MemToTx => {
                        let offset = (channel.dst_address + channel.moved + i)
                            .wrapping_sub(self.memory_base)
                            as usize;
                        let byte = self.memory.get(offset).copied().unwrap_or(0);
                        if p.state.buffer_feed(BufferSide::Tx, &[byte]).is_err() {
                            break;
                        }
                    }
                }
                moved += 1;
            }
            p.state.set_dma_state(&channel.source, RequestState::Enable);
            if moved > 0 {
                let log = engine::dispatch(
                    &mut p.state,
                    &p.rules,
                    Event::BufferChanged(side),
                    context,
                    chain_limit,
                )?;
                self.effects.extend(log);
            }

            let completion_irq = self.peripherals[idx].rules.map.completion_irq(number);
            let entry = self.dma_channels.get_mut(&number).unwrap();
            entry.count -= moved;
            entry.moved += moved;
            let completed = moved > 0 && entry.count == 0;
            if completed {
                self.nvic.pending.insert(completion_irq);
            }
            reports.push(TransferReport {
                channel: number,
                source: channel.source.clone(),
                bytes_moved: moved,
                completed,
            });
        }
        Ok(reports)
    }
}

fn parse_cfg_number(tok: Option<&String>, line: usize, what: &str) -> Result<u32, MachineError> {
    let tok = tok.ok_or_else(|| MachineError::Config {
        line,
        reason: format!("missing {}", what),
    })?;
    let parsed = if let Some(hex) = tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        u32::from_str_radix(hex, 16).ok()
    } else {
        tok.parse().ok()
    };
    parsed.ok_or_else(|| MachineError::Config {
        line,
        reason: format!("bad {} `{}`", what, tok),
    })
}
