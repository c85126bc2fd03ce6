//! Compares the parallel and sequential lanes on the two batch workloads:
//! edit-distance scoring over many trace pairs, and independent scenario
//! runs across many machines.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rulemu::machine::{Machine, MachineConfig};
use rulemu::par::*;
use rulemu::{fidelity, parse_rule_file, parse_script, resolve_rules, run};

const K64F_UART: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/uart_k64f.rules"));
const RX_SCRIPT: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/rx.script"));

fn symbol_pairs(count: usize, len: usize) -> Vec<(Vec<u16>, Vec<u16>)> {
    // Deterministic pseudo-random pairs over a small alphabet; repetition
    // runs are common, like polling traces.
    let mut seed = 0x243f_6a88u32;
    let mut next = move || {
        seed = seed.wrapping_mul(1664525).wrapping_add(1013904223);
        seed >> 16
    };
    (0..count)
        .map(|_| {
            let make = |n: &mut dyn FnMut() -> u32| {
                let mut v = Vec::with_capacity(len);
                while v.len() < len {
                    let sym = (n() % 5) as u16;
                    let run = 1 + (n() % 4) as usize;
                    for _ in 0..run.min(len - v.len()) {
                        v.push(sym);
                    }
                }
                v
            };
            (make(&mut next), make(&mut next))
        })
        .collect()
}

fn bench_distance_batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("edit_distance_batch");
    for &count in &[64usize, 256] {
        let pairs = symbol_pairs(count, 96);
        group.bench_with_input(BenchmarkId::new("sequential", count), &pairs, |b, pairs| {
            b.iter(|| fidelity::pair_distances_seq(pairs))
        });
        group.bench_with_input(BenchmarkId::new("parallel", count), &pairs, |b, pairs| {
            b.iter(|| fidelity::pair_distances(pairs))
        });
    }
    group.finish();
}

fn scenario_machine() -> Machine {
    let (map, rules) = parse_rule_file(K64F_UART).unwrap();
    let resolved = resolve_rules(&map, &rules).unwrap();
    let mut machine = Machine::new(MachineConfig::default());
    machine
        .add_peripheral("uart0", resolved, 0x4006a000, 0x20)
        .unwrap();
    machine
}

fn bench_machine_sweep(c: &mut Criterion) {
    let script = parse_script(RX_SCRIPT, "rx.script").unwrap();
    let mut group = c.benchmark_group("machine_sweep");
    for &count in &[16usize, 64] {
        group.bench_with_input(BenchmarkId::new("sequential", count), &count, |b, &count| {
            b.iter(|| {
                (0..count)
                    .map(|_| {
                        let mut machine = scenario_machine();
                        run(&mut machine, &script).trace.len()
                    })
                    .sum::<usize>()
            })
        });
        group.bench_with_input(BenchmarkId::new("parallel", count), &count, |b, &count| {
            b.iter(|| {
                (0..count)
                    .into_par_iter()
                    .map(|_| {
                        let mut machine = scenario_machine();
                        run(&mut machine, &script).trace.len()
                    })
                    .sum::<usize>()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_distance_batch, bench_machine_sweep);
criterion_main!(benches);
