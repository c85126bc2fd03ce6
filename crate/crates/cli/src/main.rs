//! Command-line entry point: run scripts against rule-driven machines,
//! score trace fidelity, check driver compliance, diagnose divergences,
//! and lint rule files.
//!
//! Exit codes: 0 success, 1 findings (violations, divergence, aborted
//! run), 2 input errors.

use clap::{Parser, Subcommand};
use rulemu::compliance;
use rulemu::diagnosis;
use rulemu::dsl::{parse_rule_file, resolve_rules, ActionKind, RuleClass};
use rulemu::fidelity::{self, partition_trace};
use rulemu::machine::Machine;
use rulemu::script::{self, parse_script, Diagnostic};
use rulemu::trace::Trace;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rulemu", about = "Rule-driven MCU peripheral emulation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a script against a machine and write run artifacts.
    Run {
        config: PathBuf,
        script: PathBuf,
        /// Write the execution trace (`context|stepId` lines).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the MMIO access history.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Write the effect log (rule firings and their changes).
        #[arg(long)]
        effects: Option<PathBuf>,
        /// Null model: reads return 0, nothing dispatches (fidelity baseline).
        #[arg(long = "null-model")]
        null_model: bool,
    },
    /// Score an emulated trace against a reference, normalized by a baseline.
    Fidelity {
        emulated: PathBuf,
        reference: PathBuf,
        baseline: PathBuf,
    },
    /// Run a script and check the access history against R1/R2.
    Comply {
        config: PathBuf,
        script: PathBuf,
        /// Guard override file (`read|write <Reg[Field]> <value>` lines).
        #[arg(long)]
        guards: Option<PathBuf>,
    },
    /// Run a script and locate the first divergence from a reference trace.
    Diagnose {
        config: PathBuf,
        script: PathBuf,
        reference: PathBuf,
    },
    /// Parse and resolve a rule file; print table and rule statistics.
    Lint { rules: PathBuf },
}

fn main() -> ExitCode {
    // Die quietly on closed pipes (`rulemu lint ... | head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {}", message);
            ExitCode::from(2)
        }
    }
}

fn read_file(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {}", path.display(), e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), String> {
    std::fs::write(path, contents).map_err(|e| format!("cannot write {}: {}", path.display(), e))
}

fn load_machine(path: &Path) -> Result<Machine, String> {
    Machine::from_config_file(path).map_err(|e| e.to_string())
}

fn load_script(path: &Path) -> Result<rulemu::script::Script, String> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    parse_script(&read_file(path)?, &name).map_err(|e| e.to_string())
}

fn load_trace(path: &Path) -> Result<Trace, String> {
    Trace::from_text(&read_file(path)?)
}

fn dispatch(command: Command) -> Result<ExitCode, String> {
    match command {
        Command::Run {
            config,
            script: script_path,
            trace,
            history,
            effects,
            null_model,
        } => {
            let mut machine = load_machine(&config)?;
            machine.config.null_model = null_model;
            let script = load_script(&script_path)?;
            let out = script::run(&mut machine, &script);
            if let Some(path) = trace {
                write_file(&path, &out.trace.to_text())?;
            }
            if let Some(path) = history {
                write_file(&path, &machine.history_text())?;
            }
            if let Some(path) = effects {
                write_file(&path, &machine.effects().to_text())?;
            }
            let timeouts = out
                .diagnostics
                .iter()
                .filter(|d| {
                    matches!(d, Diagnostic::WaitTimeout { .. } | Diagnostic::PollTimeout { .. })
                })
                .count();
            println!(
                "steps {} irqs {} mismatches {} timeouts {} warnings {}",
                out.trace.len(),
                out.dispatched.len(),
                out.mismatches(),
                timeouts,
                machine.warnings().len()
            );
            match out.aborted {
                Some(reason) => {
                    eprintln!("run aborted: {}", reason);
                    Ok(ExitCode::from(1))
                }
                None => Ok(ExitCode::SUCCESS),
            }
        }
        Command::Fidelity {
            emulated,
            reference,
            baseline,
        } => {
            let emulated = partition_trace(&load_trace(&emulated)?);
            let reference = partition_trace(&load_trace(&reference)?);
            let baseline = partition_trace(&load_trace(&baseline)?);
            let report = fidelity::fidelity_score(&emulated, &reference, &baseline);
            println!(
                "{} {} {} {:.6}",
                report.d_init, report.d_main, report.d_irq, report.score
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Comply {
            config,
            script: script_path,
            guards,
        } => {
            let mut machine = load_machine(&config)?;
            let script = load_script(&script_path)?;
            let out = script::run(&mut machine, &script);
            if let Some(reason) = out.aborted {
                return Err(format!("run aborted: {}", reason));
            }
            let violations = match guards {
                Some(path) => {
                    let text = read_file(&path)?;
                    let mut all = Vec::new();
                    for p in machine.peripherals() {
                        let spec = compliance::parse_guard_overrides(&text, &p.rules, &p.name)?;
                        all.extend(compliance::check_r1(machine.history(), &spec));
                        all.extend(compliance::check_r2(
                            machine.history(),
                            &p.rules,
                            &p.name,
                            machine.iser(),
                        ));
                    }
                    all
                }
                None => compliance::check_machine(&machine, None),
            };
            print!("{}", compliance::report_text(&violations));
            if violations.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
        Command::Diagnose {
            config,
            script: script_path,
            reference,
        } => {
            let mut machine = load_machine(&config)?;
            let script = load_script(&script_path)?;
            let out = script::run(&mut machine, &script);
            let reference = load_trace(&reference)?;
            match diagnosis::locate_divergence(&out.trace, &reference, machine.history()) {
                None => {
                    println!("no divergence");
                    Ok(ExitCode::SUCCESS)
                }
                Some(divergence) => {
                    let suspects = match &divergence.last_read {
                        Some(read) => {
                            diagnosis::suspect_rules(machine.effects(), read.address, u32::MAX)
                        }
                        None => Vec::new(),
                    };
                    let owner = divergence.last_read.as_ref().and_then(|read| {
                        machine
                            .peripherals()
                            .iter()
                            .find(|p| p.rules.register_addresses().contains(&read.address))
                    });
                    print!(
                        "{}",
                        diagnosis::report_text(&divergence, &suspects, |id| {
                            owner
                                .and_then(|p| p.rules.rules.get(id))
                                .map(|r| r.source_text.clone())
                                .unwrap_or_default()
                        })
                    );
                    Ok(ExitCode::from(1))
                }
            }
        }
        Command::Lint { rules: path } => {
            let text = read_file(&path)?;
            let (map, rules) = parse_rule_file(&text).map_err(|e| e.to_string())?;
            let resolved = resolve_rules(&map, &rules).map_err(|e| e.to_string())?;
            println!("rules {}", resolved.rules.len());
            println!("entities {}", map.entities.len());
            println!("irq-sources {}", map.irq_sources.len());
            println!("dma-sources {}", map.dma_sources.len());
            for s in &map.irq_sources {
                println!("irq {} {}", s.name, s.irq);
            }
            for s in &map.dma_sources {
                println!("dma {} {}", s.name, s.number);
            }
            let mut by_class = [0usize; 3];
            for rule in &resolved.rules {
                let idx = match rule.class() {
                    RuleClass::Hardware => 0,
                    RuleClass::Firmware => 1,
                    RuleClass::Internal => 2,
                };
                by_class[idx] += 1;
            }
            let mut by_action = [0usize; 3];
            for rule in &resolved.rules {
                for action in &rule.actions {
                    let idx = match action.kind() {
                        ActionKind::FieldAssign => 0,
                        ActionKind::IrqSet => 1,
                        ActionKind::DmaSet => 2,
                    };
                    by_action[idx] += 1;
                }
            }
            println!(
                "conditions C1 {} C2 {} C3 {}",
                by_class[0], by_class[1], by_class[2]
            );
            println!(
                "actions A1 {} A2 {} A3 {}",
                by_action[0], by_action[1], by_action[2]
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
