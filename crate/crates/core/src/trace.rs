//! Execution traces: one event per executed firmware-script step, tagged
//! with its execution context.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Context {
    Init,
    Main,
    Irq,
}

impl Context {
    pub fn as_str(self) -> &'static str {
        match self {
            Context::Init => "init",
            Context::Main => "main",
            Context::Irq => "irq",
        }
    }

    pub fn parse(s: &str) -> Option<Context> {
        match s {
            "init" => Some(Context::Init),
            "main" => Some(Context::Main),
            "irq" => Some(Context::Irq),
            _ => None,
        }
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub step_id: String,
    pub context: Context,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn push(&mut self, context: Context, step_id: String) {
        self.events.push(TraceEvent { step_id, context });
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Newline-delimited `context|stepId` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(e.context.as_str());
            out.push('|');
            out.push_str(&e.step_id);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Trace, String> {
        let mut trace = Trace::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (ctx, step) = line
                .split_once('|')
                .ok_or_else(|| format!("trace line {}: missing `|`", idx + 1))?;
            let context = Context::parse(ctx)
                .ok_or_else(|| format!("trace line {}: unknown context `{}`", idx + 1, ctx))?;
            trace.push(context, step.to_string());
        }
        Ok(trace)
    }
}
