//! The firmware surrogate: a deterministic script of MMIO operations,
//! environment inputs, loops, and interrupt handlers.
//!
//! Scripts are line-oriented with `@init` / `@main` / `@irq <n>` sections.
//! Executing a script against a machine produces the trace (one event per
//! executed step, tagged init/main/irq) and the access history. Interrupts
//! dispatch only between script steps; a handler runs to completion before
//! the suspended context resumes.

use crate::machine::{Machine, MachineError};
use crate::trace::{Context, Trace};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScriptError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: unknown directive `{word}`")]
    UnknownDirective { line: usize, word: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepKind {
    Read { address: u32, expect: Option<u32> },
    Write { address: u32, value: u32 },
    FeedRx { peripheral: String, bytes: Vec<u8> },
    WaitIrq { irq: u32, max_steps: Option<usize> },
    Tick { count: usize },
    Label(String),
    PollUntil { address: u32, mask: u32, value: u32, max_steps: Option<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Step { line: usize, kind: StepKind },
    Loop { line: usize, count: usize, body: Vec<Node> },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Script {
    pub name: String,
    pub init: Vec<Node>,
    pub main: Vec<Node>,
    pub handlers: Vec<(u32, Vec<Node>)>,
}

impl Script {
    fn handler(&self, irq: u32) -> Option<&Vec<Node>> {
        self.handlers.iter().find(|(n, _)| *n == irq).map(|(_, b)| b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    /// A read's returned value differed from the script's `expect`.
    Mismatch { step_id: String, address: u32, expected: u32, actual: u32 },
    WaitTimeout { step_id: String, irq: u32 },
    PollTimeout { step_id: String, address: u32 },
    UnhandledIrq { irq: u32 },
}

#[derive(Debug, Default)]
pub struct RunOutput {
    pub trace: Trace,
    pub diagnostics: Vec<Diagnostic>,
    /// IRQ numbers in dispatch order.
    pub dispatched: Vec<u32>,
    /// Engine/machine failure that cut the run short, with partial trace.
    pub aborted: Option<String>,
}

impl RunOutput {
    pub fn mismatches(&self) -> usize {
        self.diagnostics
            .iter()
            .filter(|d| matches!(d, Diagnostic::Mismatch { .. }))
            .count()
    }
}

fn syntax(line: usize, reason: impl Into<String>) -> ScriptError {
    ScriptError::Syntax { line, reason: reason.into() }
}

fn parse_number(tok: &str, line: usize) -> Result<u32, ScriptError> {
    let parsed = if let Some(hex) = tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        u32::from_str_radix(hex, 16).ok()
    } else {
        tok.parse().ok()
    };
    parsed.ok_or_else(|| syntax(line, format!("bad number `{}`", tok)))
}

fn parse_hex_bytes(tok: &str, line: usize) -> Result<Vec<u8>, ScriptError> {
    if !tok.len().is_multiple_of(2) {
        return Err(syntax(line, "hex byte string must have even length"));
    }
    (0..tok.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&tok[i..i + 2], 16)
                .map_err(|_| syntax(line, format!("bad hex bytes `{}`", tok)))
        })
        .collect()
}

/// Parse a script. `name` becomes the file part of step ids.
pub fn parse_script(text: &str, name: &str) -> Result<Script, ScriptError> {
    #[derive(PartialEq)]
    enum Section {
        Init,
        Main,
        Irq(u32),
    }
    let mut script = Script {
        name: name.to_string(),
        ..Script::default()
    };
    let mut section = Section::Init;
    // Stack of open loop bodies; the bottom is the current section list.
    let mut stack: Vec<(usize, usize, Vec<Node>)> = Vec::new();

    let close_into = |script: &mut Script, section: &Section, node: Node, stack: &mut Vec<(usize, usize, Vec<Node>)>| {
        if let Some(top) = stack.last_mut() {
            top.2.push(node);
            return;
        }
        match section {
            Section::Init => script.init.push(node),
            Section::Main => script.main.push(node),
            Section::Irq(n) => {
                if let Some(pos) = script.handlers.iter().position(|(irq, _)| irq == n) {
                    script.handlers[pos].1.push(node);
                } else {
                    script.handlers.push((*n, vec![node]));
                }
            }
        }
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => raw[..pos].trim(),
            None => raw.trim(),
        };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('@') {
            if !stack.is_empty() {
                return Err(syntax(line_no, "section marker inside a loop"));
            }
            let tokens: Vec<&str> = rest.split_whitespace().collect();
            section = match tokens.as_slice() {
                ["init"] => Section::Init,
                ["main"] => Section::Main,
                ["irq", n] => {
                    let irq = parse_number(n, line_no)?;
                    if script.handlers.iter().any(|(existing, _)| *existing == irq) {
                        return Err(syntax(line_no, format!("duplicate handler for irq {}", irq)));
                    }
                    script.handlers.push((irq, Vec::new()));
                    Section::Irq(irq)
                }
                _ => return Err(syntax(line_no, format!("bad section marker `@{}`", rest))),
            };
            continue;
        }
        if line == "}" {
            let (loop_line, count, body) = stack
                .pop()
                .ok_or_else(|| syntax(line_no, "unmatched `}`"))?;
            let node = Node::Loop { line: loop_line, count, body };
            close_into(&mut script, &section, node, &mut stack);
            continue;
        }

        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "loop" => {
                if tokens.len() != 3 || tokens[2] != "{" {
                    return Err(syntax(line_no, "loop syntax: `loop <count> {`"));
                }
                let count = parse_number(tokens[1], line_no)? as usize;
                if count < 1 {
                    return Err(syntax(line_no, "loop count must be >= 1"));
                }
                stack.push((line_no, count, Vec::new()));
            }
            "read" => {
                let kind = match tokens.as_slice() {
                    ["read", addr] => StepKind::Read {
                        address: parse_number(addr, line_no)?,
                        expect: None,
                    },
                    ["read", addr, "expect", value] => StepKind::Read {
                        address: parse_number(addr, line_no)?,
                        expect: Some(parse_number(value, line_no)?),
                    },
                    _ => return Err(syntax(line_no, "read syntax: `read <addr> [expect <v>]`")),
                };
                close_into(&mut script, &section, Node::Step { line: line_no, kind }, &mut stack);
            }
            "write" => {
                if tokens.len() != 3 {
                    return Err(syntax(line_no, "write syntax: `write <addr> <value>`"));
                }
                let kind = StepKind::Write {
                    address: parse_number(tokens[1], line_no)?,
                    value: parse_number(tokens[2], line_no)?,
                };
                close_into(&mut script, &section, Node::Step { line: line_no, kind }, &mut stack);
            }
            "feed" => {
                if tokens.len() != 3 {
                    return Err(syntax(line_no, "feed syntax: `feed <peripheral> <hexbytes>`"));
                }
                let kind = StepKind::FeedRx {
                    peripheral: tokens[1].to_string(),
                    bytes: parse_hex_bytes(tokens[2], line_no)?,
                };
                close_into(&mut script, &section, Node::Step { line: line_no, kind }, &mut stack);
            }
            "waitirq" => {
                let kind = match tokens.as_slice() {
                    ["waitirq", irq] => StepKind::WaitIrq {
                        irq: parse_number(irq, line_no)?,
                        max_steps: None,
                    },
                    ["waitirq", irq, "max", n] => StepKind::WaitIrq {
                        irq: parse_number(irq, line_no)?,
                        max_steps: Some(parse_number(n, line_no)? as usize),
                    },
                    _ => return Err(syntax(line_no, "waitirq syntax: `waitirq <irq> [max <n>]`")),
                };
                if matches!(section, Section::Irq(_)) {
                    return Err(syntax(line_no, "waitirq is not allowed inside handlers"));
                }
                close_into(&mut script, &section, Node::Step { line: line_no, kind }, &mut stack);
            }
            "tick" => {
                let count = match tokens.as_slice() {
                    ["tick"] => 1,
                    ["tick", n] => parse_number(n, line_no)? as usize,
                    _ => return Err(syntax(line_no, "tick syntax: `tick [<n>]`")),
                };
                let kind = StepKind::Tick { count };
                close_into(&mut script, &section, Node::Step { line: line_no, kind }, &mut stack);
            }
            "label" => {
                if tokens.len() != 2 {
                    return Err(syntax(line_no, "label syntax: `label <name>`"));
                }
                let kind = StepKind::Label(tokens[1].to_string());
                close_into(&mut script, &section, Node::Step { line: line_no, kind }, &mut stack);
            }
            "poll" => {
                let kind = match tokens.as_slice() {
                    ["poll", addr, "mask", m, "eq", v] => StepKind::PollUntil {
                        address: parse_number(addr, line_no)?,
                        mask: parse_number(m, line_no)?,
                        value: parse_number(v, line_no)?,
                        max_steps: None,
                    },
                    ["poll", addr, "mask", m, "eq", v, "max", n] => StepKind::PollUntil {
                        address: parse_number(addr, line_no)?,
                        mask: parse_number(m, line_no)?,
                        value: parse_number(v, line_no)?,
                        max_steps: Some(parse_number(n, line_no)? as usize),
                    },
                    _ => {
                        return Err(syntax(
                            line_no,
                            "poll syntax: `poll <addr> mask <m> eq <v> [max <n>]`",
                        ))
                    }
                };
                close_into(&mut script, &section, Node::Step { line: line_no, kind }, &mut stack);
            }
            other => {
                return Err(ScriptError::UnknownDirective {
                    line: line_no,
                    word: other.to_string(),
                })
            }
        }
    }
    if let Some((line, _, _)) = stack.last() {
        return Err(syntax(*line, "unclosed loop"));
    }
    Ok(script)
}

struct Runner<'a> {
    machine: &'a mut Machine,
    script: &'a Script,
    out: RunOutput,
}

/// Execute the script: init then main, with `machine.step()` after every
/// step; a dispatched IRQ suspends the current context and runs its
/// handler to completion. Handlers execute atomically, with no machine
/// steps in between. Returns the trace even when the run aborts.
pub fn run(machine: &mut Machine, script: &Script) -> RunOutput {
    let mut runner = Runner {
        machine,
        script,
        out: RunOutput::default(),
    };
    let result = runner.run_all();
    let mut out = runner.out;
    if let Err(e) = result {
        out.aborted = Some(e.to_string());
    }
    out
}

impl<'a> Runner<'a> {
    fn run_all(&mut self) -> Result<(), MachineError> {
        let script = self.script;
        self.machine.set_context(Context::Init);
        self.exec_nodes(&script.init, Context::Init, "")?;
        self.machine.set_context(Context::Main);
        self.exec_nodes(&script.main, Context::Main, "")?;
        Ok(())
    }

    fn step_id(&self, line: usize, iter_path: &str) -> String {
        let suffix = if iter_path.is_empty() { "0" } else { iter_path };
        format!("{}:{}#{}", self.script.name, line, suffix)
    }

    fn exec_nodes(
        &mut self,
        nodes: &[Node],
        context: Context,
        iter_path: &str,
    ) -> Result<(), MachineError> {
        for node in nodes {
            match node {
                Node::Loop { count, body, .. } => {
                    for i in 0..*count {
                        let path = if iter_path.is_empty() {
                            i.to_string()
                        } else {
                            format!("{}.{}", iter_path, i)
                        };
                        self.exec_nodes(body, context, &path)?;
                    }
                }
                Node::Step { line, kind } => {
                    let step_id = self.step_id(*line, iter_path);
                    self.exec_step(kind, context, &step_id)?;
                }
            }
        }
        Ok(())
    }

    fn post_step(&mut self, context: Context) -> Result<(), MachineError> {
        if let Some(irq) = self.machine.step()? {
            self.deliver(irq, context)?;
        }
        Ok(())
    }

    fn deliver(&mut self, irq: u32, resume: Context) -> Result<(), MachineError> {
        if resume == Context::Init {
            // Irq segments only interleave after init completes.
            self.machine.requeue_irq(irq);
            return Ok(());
        }
        self.out.dispatched.push(irq);
        let script = self.script;
        match script.handler(irq) {
            Some(body) => {
                self.machine.set_context(Context::Irq);
                self.exec_handler_nodes(body, "")?;
                self.machine.set_context(resume);
            }
            None => {
                self.out.diagnostics.push(Diagnostic::UnhandledIrq { irq });
            }
        }
        Ok(())
    }

    /// Handler bodies run without machine steps in between.
    fn exec_handler_nodes(&mut self, nodes: &[Node], iter_path: &str) -> Result<(), MachineError> {
        for node in nodes {
            match node {
                Node::Loop { count, body, .. } => {
                    for i in 0..*count {
                        let path = if iter_path.is_empty() {
                            i.to_string()
                        } else {
                            format!("{}.{}", iter_path, i)
                        };
                        self.exec_handler_nodes(body, &path)?;
                    }
                }
                Node::Step { line, kind } => {
                    let step_id = self.step_id(*line, iter_path);
                    self.exec_action(kind, Context::Irq, &step_id)?;
                }
            }
        }
        Ok(())
    }

    fn exec_step(
        &mut self,
        kind: &StepKind,
        context: Context,
        step_id: &str,
    ) -> Result<(), MachineError> {
        self.exec_action(kind, context, step_id)?;
        self.post_step(context)
    }

    /// The step body itself, shared between contexts.
    fn exec_action(
        &mut self,
        kind: &StepKind,
        context: Context,
        step_id: &str,
    ) -> Result<(), MachineError> {
        self.machine.set_event_index(self.out.trace.len());
        self.out.trace.push(context, step_id.to_string());
        match kind {
            StepKind::Read { address, expect } => {
                let value = self.machine.mmio_read(*address)?;
                if let Some(expected) = expect {
                    if value != *expected {
                        self.out.diagnostics.push(Diagnostic::Mismatch {
                            step_id: step_id.to_string(),
                            address: *address,
                            expected: *expected,
                            actual: value,
                        });
                    }
                }
            }
            StepKind::Write { address, value } => {
                self.machine.mmio_write(*address, *value)?;
            }
            StepKind::FeedRx { peripheral, bytes } => {
                self.machine.feed_rx(peripheral, bytes)?;
            }
            StepKind::Tick { count } => {
                for _ in 0..*count {
                    if let Some(irq) = self.machine.step()? {
                        self.deliver(irq, context)?;
                    }
                }
            }
            StepKind::Label(_) => {}
            StepKind::WaitIrq { irq, max_steps } => {
                let limit = max_steps.unwrap_or(self.machine.config.max_wait_steps);
                let mut satisfied = false;
                for _ in 0..limit {
                    match self.machine.step()? {
                        Some(n) if n == *irq => {
                            self.deliver(n, context)?;
                            satisfied = true;
                            break;
                        }
                        Some(n) => self.deliver(n, context)?,
                        None => {}
                    }
                }
                if !satisfied {
                    self.out.diagnostics.push(Diagnostic::WaitTimeout {
                        step_id: step_id.to_string(),
                        irq: *irq,
                    });
                }
            }
            StepKind::PollUntil { address, mask, value, max_steps } => {
                let limit = max_steps.unwrap_or(self.machine.config.max_wait_steps);
                let mut satisfied = false;
                for _ in 0..limit {
                    let read = self.machine.mmio_read(*address)?;
                    if read & mask == *value {
                        satisfied = true;
                        break;
                    }
                    if let Some(irq) = self.machine.step()? {
                        self.deliver(irq, context)?;
                    }
                }
                if !satisfied {
                    self.out.diagnostics.push(Diagnostic::PollTimeout {
                        step_id: step_id.to_string(),
                        address: *address,
                    });
                }
            }
        }
        Ok(())
    }
}
