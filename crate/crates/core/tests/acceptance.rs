//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! The criteria pin the ground-truth fixtures (the K64F UART0 rule file and
//! the receive/transmit scenarios), the edit-distance oracle equivalence,
//! the fidelity endpoints, the compliance findings, the diagnosis pointers,
//! run determinism, and receive-path byte conservation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rulemu::compliance::{self, ViolationKind};
use rulemu::diagnosis;
use rulemu::dsl::{parse_rule_file, resolve_rules, serialize_rule_file, Rule};
use rulemu::fidelity::{self, partition_trace};
use rulemu::machine::{AccessDir, Machine, MachineConfig};
use rulemu::par::*;
use rulemu::script::{self, parse_script, Script};
use rulemu::trace::Context;
use std::collections::BinaryHeap;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fixture(name: &str) -> String {
    std::fs::read_to_string(fixtures_dir().join(name))
        .unwrap_or_else(|e| panic!("missing fixture {}: {}", name, e))
}

fn machine_from_cfg(name: &str) -> Machine {
    Machine::from_config_file(&fixtures_dir().join(name)).unwrap()
}

fn script_fixture(name: &str) -> Script {
    parse_script(&fixture(name), name).unwrap()
}

/// The receive-interrupt chain rule, deleted by the degradation fixtures.
const RDRF_IRQ_RULE: &str = "IRQ[RDRF]";

/// Parse the UART rule file with the interrupt-raising RDRF rule removed,
/// ids reassigned to file order.
fn broken_uart_machine() -> Machine {
    let (map, rules) = parse_rule_file(&fixture("uart_k64f.rules")).unwrap();
    let kept: Vec<Rule> = rules
        .into_iter()
        .filter(|r| !(r.source_text.contains(RDRF_IRQ_RULE) && r.source_text.contains("RDMAS] == 0")))
        .enumerate()
        .map(|(id, mut r)| {
            r.id = id;
            r
        })
        .collect();
    assert_eq!(kept.len(), 23, "exactly one rule is deleted");
    let resolved = resolve_rules(&map, &kept).unwrap();
    let mut machine = Machine::new(MachineConfig::default());
    machine
        .add_peripheral("uart0", resolved, 0x4006a000, 0x20)
        .unwrap();
    machine
}

#[test]
fn a1_uart_listing_ingestion_and_round_trip() {
    let started = Instant::now();
    let text = fixture("uart_k64f.rules");
    let (map, rules) = parse_rule_file(&text).expect("verbatim listing parses with zero errors");
    assert!(rules.len() >= 24, "rule count {}", rules.len());
    assert!(map.entities.len() >= 25, "entity count {}", map.entities.len());
    assert_eq!(map.irq_number("RDRF"), Some(31));
    assert!(map
        .dma_sources
        .iter()
        .any(|s| s.name.contains("Channel 0") && s.number == 0));
    resolve_rules(&map, &rules).expect("the listing resolves");

    let canonical = serialize_rule_file(&map, &rules);
    let (map2, rules2) = parse_rule_file(&canonical).unwrap();
    assert_eq!(map, map2, "round-trip preserves the register map");
    assert_eq!(rules, rules2, "round-trip preserves every rule");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {:?}", elapsed);
    println!("ACCEPTANCE 1 uart listing ingestion + round trip: PASS ({:?})", elapsed);
}

#[test]
fn a2_watermark_receive_scenario() {
    let started = Instant::now();
    let mut machine = machine_from_cfg("uart.cfg");
    let script = script_fixture("rx.script");
    let out = script::run(&mut machine, &script);
    assert!(out.aborted.is_none());
    assert_eq!(out.mismatches(), 0, "zero expect mismatches");
    assert_eq!(out.dispatched, vec![31], "IRQ 31 dispatched once");

    // Ordered effects: RDRF set, then the interrupt request, then the
    // clearing B rule after the handler's data read.
    let effects = machine.effects();
    let rdrf_set = effects
        .entries
        .iter()
        .position(|e| e.changes.iter().any(|c| c.entity == "S1[RDRF]" && c.old == 0 && c.new == 1))
        .expect("RDRF set by the watermark rule");
    let irq_pending = effects
        .entries
        .iter()
        .position(|e| {
            e.requests
                .iter()
                .any(|r| r.source == "RDRF" && r.new == rulemu::dsl::RequestState::Pending)
        })
        .expect("RDRF interrupt request raised");
    let rdrf_clear = effects
        .entries
        .iter()
        .position(|e| e.changes.iter().any(|c| c.entity == "S1[RDRF]" && c.old == 1 && c.new == 0))
        .expect("RDRF cleared after the handler read");
    assert!(rdrf_set < irq_pending, "set before request");
    assert!(irq_pending < rdrf_clear, "request before clear");

    // The handler read the data register and obtained the fed byte.
    let handler_read = machine
        .history()
        .iter()
        .find(|r| r.context == Context::Irq && r.dir == AccessDir::Read && r.address == 0x4006a007)
        .expect("handler data read");
    assert_eq!(handler_read.value, 0x41);

    // The trace ends inside the interrupt context.
    assert_eq!(out.trace.events.last().unwrap().context, Context::Irq);

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {:?}", elapsed);
    println!("ACCEPTANCE 2 watermark receive scenario: PASS ({:?})", elapsed);
}

#[test]
fn a3_dma_variant_moves_byte_to_memory() {
    let mut machine = machine_from_cfg("uart_dma.cfg");
    let script = script_fixture("rx_dma.script");
    let out = script::run(&mut machine, &script);
    assert!(out.aborted.is_none());
    assert_eq!(machine.memory_byte(0x2000_0000), Some(0x41), "byte landed in memory");
    assert_eq!(machine.dma_channel(0).unwrap().count, 0, "channel count exhausted");
    assert!(out.dispatched.contains(&0), "completion IRQ 0 dispatched");
    assert!(!out.dispatched.contains(&31), "IRQ 31 never dispatched for RDRF");
    assert_ne!(
        machine.peripheral("uart0").unwrap().state.irq_state("RDRF"),
        rulemu::dsl::RequestState::Pending,
        "the interrupt branch of the RDRF chain stayed cold"
    );
    println!("ACCEPTANCE 3 dma variant: PASS");
}

/// Uniform-cost search over the edit graph: an oracle for the weighted
/// distance that shares only the cost definition with the DP.
fn oracle_distance(a: &[u8], b: &[u8]) -> u64 {
    #[derive(PartialEq, Eq)]
    struct Node(u64, usize, usize);
    impl Ord for Node {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            other.0.cmp(&self.0)
        }
    }
    impl PartialOrd for Node {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    let del = |seq: &[u8], i: usize| -> u64 {
        if i >= 2 && seq[i - 1] == seq[i - 2] {
            1
        } else {
            2
        }
    };
    let mut best = vec![vec![u64::MAX; b.len() + 1]; a.len() + 1];
    let mut heap = BinaryHeap::new();
    heap.push(Node(0, 0, 0));
    while let Some(Node(cost, i, j)) = heap.pop() {
        if best[i][j] <= cost {
            continue;
        }
        best[i][j] = cost;
        if i == a.len() && j == b.len() {
            return cost;
        }
        if i < a.len() {
            heap.push(Node(cost + del(a, i + 1), i + 1, j));
        }
        if j < b.len() {
            heap.push(Node(cost + del(b, j + 1), i, j + 1));
        }
        if i < a.len() && j < b.len() {
            let sub = if a[i] == b[j] { 0 } else { 2 };
            heap.push(Node(cost + sub, i + 1, j + 1));
        }
    }
    unreachable!("the goal state is always reachable");
}

#[test]
fn a4_edit_distance_matches_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EDA);
    let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..1000)
        .map(|_| {
            let n = rng.gen_range(0..=12);
            let m = rng.gen_range(0..=12);
            let a: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let b: Vec<u8> = (0..m).map(|_| rng.gen_range(0..3)).collect();
            (a, b)
        })
        .collect();
    let computed = fidelity::pair_distances(&pairs);
    for (idx, (a, b)) in pairs.iter().enumerate() {
        let expected = oracle_distance(a, b);
        assert_eq!(
            computed[idx], expected,
            "pair {}: a={:?} b={:?}",
            idx, a, b
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {:?}", elapsed);
    println!("ACCEPTANCE 4 edit-distance oracle x1000: PASS ({:?})", elapsed);
}

#[test]
fn a5_fidelity_endpoints_and_degradation() {
    let script = script_fixture("rxtx.script");

    let mut reference_machine = machine_from_cfg("uart.cfg");
    let reference = partition_trace(&script::run(&mut reference_machine, &script).trace);

    let mut baseline_machine = machine_from_cfg("uart.cfg");
    baseline_machine.config.null_model = true;
    let baseline = partition_trace(&script::run(&mut baseline_machine, &script).trace);

    // Identical traces score exactly 1.
    let perfect = fidelity::fidelity_score(&reference, &reference, &baseline);
    assert_eq!(perfect.score, 1.0);
    assert_eq!((perfect.d_init, perfect.d_main, perfect.d_irq), (0, 0, 0));

    // The baseline as the emulated trace scores exactly 0.
    let worst = fidelity::fidelity_score(&baseline, &reference, &baseline);
    assert_eq!(worst.score, 0.0);
    assert!(worst.d_base > 0, "the scenario distinguishes ref from baseline");

    // Deleting the interrupt-raising receive rule degrades the score into
    // the open interval: transmit interrupts survive, receive ones die.
    let mut broken = broken_uart_machine();
    let emu = partition_trace(&script::run(&mut broken, &script).trace);
    let report = fidelity::fidelity_score(&emu, &reference, &baseline);
    assert!(
        report.score > 0.0 && report.score < 1.0,
        "score {} (d_emu {} d_base {})",
        report.score,
        report.d_emu,
        report.d_base
    );
    assert!(report.d_irq > 0, "degradation shows up in the interrupt part");
    println!(
        "ACCEPTANCE 5 fidelity endpoints: PASS (degraded score {:.3})",
        report.score
    );
}

#[test]
fn a6_compliance_fixtures() {
    // R2A: NVIC enabled, local enable never set.
    let mut machine = machine_from_cfg("uart.cfg");
    let out = script::run(&mut machine, &script_fixture("r2a.script"));
    assert!(out.aborted.is_none());
    let violations = compliance::check_machine(&machine, None);
    assert_eq!(violations.len(), 1, "{:?}", violations);
    assert_eq!(violations[0].kind, ViolationKind::R2A);

    // R2B: local enable set, NVIC never enabled.
    let mut machine = machine_from_cfg("uart.cfg");
    let out = script::run(&mut machine, &script_fixture("r2b.script"));
    assert!(out.aborted.is_none());
    let violations = compliance::check_machine(&machine, None);
    assert_eq!(violations.len(), 1, "{:?}", violations);
    assert_eq!(violations[0].kind, ViolationKind::R2B);

    // Stale-check race: guard read, data access, second data access.
    let mut machine = machine_from_cfg("uart.cfg");
    let out = script::run(&mut machine, &script_fixture("race.script"));
    assert!(out.aborted.is_none());
    let violations = compliance::check_machine(&machine, None);
    assert_eq!(violations.len(), 1, "{:?}", violations);
    assert_eq!(violations[0].kind, ViolationKind::R1);
    // The flagged index is the second data read in the history.
    let second_data_read = machine
        .history()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.address == 0x4006a007 && r.dir == AccessDir::Read)
        .map(|(i, _)| i)
        .nth(1)
        .unwrap();
    assert_eq!(violations[0].index, Some(second_data_read));
    println!("ACCEPTANCE 6 compliance fixtures (R2A, R2B, R1 race): PASS");
}

#[test]
fn a7_diagnosis_of_deleted_rule() {
    let script = script_fixture("rx_poll.script");

    let mut reference_machine = machine_from_cfg("uart.cfg");
    let reference_out = script::run(&mut reference_machine, &script);
    assert_eq!(reference_out.mismatches(), 0);

    let mut broken = broken_uart_machine();
    let emu_out = script::run(&mut broken, &script);

    let divergence =
        diagnosis::locate_divergence(&emu_out.trace, &reference_out.trace, broken.history())
            .expect("the deleted rule produces a divergence");
    assert_eq!(divergence.context, Context::Irq, "divergence at the main/irq boundary");
    assert_eq!(divergence.index, 0);
    let last_read = divergence.last_read.as_ref().expect("a status read precedes it");
    assert_eq!(last_read.address, 0x4006a004, "the poll of S1");

    // Suspects: RDRF-touching firings, strictly reverse firing order.
    let suspects = diagnosis::suspect_rules(broken.effects(), 0x4006a004, 0x20);
    assert!(suspects.len() >= 2, "{:?}", suspects);
    for pair in suspects.windows(2) {
        assert!(
            pair[0].firing_index > pair[1].firing_index,
            "strictly reverse firing order"
        );
    }
    for s in &suspects {
        assert_eq!(s.entity, "S1[RDRF]");
    }
    println!("ACCEPTANCE 7 diagnosis fixture: PASS ({} suspects)", suspects.len());
}

#[test]
fn a8_determinism_of_all_fixtures() {
    let fixtures: &[(&str, &str)] = &[
        ("uart.cfg", "rx.script"),
        ("uart.cfg", "rx_poll.script"),
        ("uart.cfg", "rxtx.script"),
        ("uart_dma.cfg", "rx_dma.script"),
        ("uart.cfg", "r2a.script"),
        ("uart.cfg", "r2b.script"),
        ("uart.cfg", "race.script"),
    ];
    for (cfg, script_name) in fixtures {
        let script = script_fixture(script_name);
        let run_once = || {
            let mut machine = machine_from_cfg(cfg);
            let out = script::run(&mut machine, &script);
            let report = compliance::report_text(&compliance::check_machine(&machine, None));
            (
                out.trace.to_text(),
                machine.history_text(),
                machine.effects().to_text(),
                report,
            )
        };
        let first = run_once();
        for repeat in 1..10 {
            assert_eq!(run_once(), first, "{} run {} differs", script_name, repeat);
        }
    }
    println!("ACCEPTANCE 8 determinism x10 over {} fixtures: PASS", fixtures.len());
}

#[test]
fn a9_conservation_over_random_schedules() {
    let started = Instant::now();
    let seeds: Vec<u64> = (0..100).collect();
    let failures: Vec<String> = seeds
        .par_iter()
        .filter_map(|&seed| conservation_run(seed).err())
        .collect();
    assert!(failures.is_empty(), "{:?}", failures);
    let elapsed = started.elapsed();
    println!("ACCEPTANCE 9 conservation x100 seeds: PASS ({:?})", elapsed);
}

/// One randomized feed/read/step/dma schedule; checks after every action
/// that bytes fed == bytes read + bytes moved by DMA + residual occupancy.
fn conservation_run(seed: u64) -> Result<(), String> {
    let mut machine = machine_from_cfg("uart_dma.cfg");
    // A long-lived channel so DMA keeps firing through the schedule.
    machine.configure_dma_channel(0, "RDRF", rulemu::machine::DmaDirection::RxToMem, 0x2000_0000, 100_000);
    machine.mmio_write(0x4006a015, 1).map_err(|e| e.to_string())?;
    machine.mmio_write(0x4006a003, 0x20).map_err(|e| e.to_string())?;
    machine.mmio_write(0x4006a00b, 0x20).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for action_index in 0..200 {
        match rng.gen_range(0..4) {
            0 => {
                let occupancy = machine
                    .peripheral("uart0")
                    .unwrap()
                    .state
                    .occupancy(rulemu::state::BufferSide::Rx);
                let space = 16 - occupancy;
                let n = rng.gen_range(0..=3).min(space);
                let bytes: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
                machine.feed_rx("uart0", &bytes).map_err(|e| e.to_string())?;
            }
            1 => {
                machine.mmio_read(0x4006a007).map_err(|e| e.to_string())?;
            }
            2 => {
                machine.step().map_err(|e| e.to_string())?;
            }
            _ => {
                machine.dma_step().map_err(|e| e.to_string())?;
            }
        }
        let p = machine.peripheral("uart0").unwrap();
        let occupancy = p.state.occupancy(rulemu::state::BufferSide::Rx) as u64;
        let a = p.accounting;
        if a.fed != a.read + a.dma + occupancy {
            return Err(format!(
                "seed {} action {}: fed {} != read {} + dma {} + residual {}",
                seed, action_index, a.fed, a.read, a.dma, occupancy
            ));
        }
    }
    Ok(())
}
