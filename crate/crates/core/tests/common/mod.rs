//! Randomized interleavings of delay-counter operations, shared by the
//! counter-model tests and the acceptance suite.

#![allow(dead_code)]

use causard::runtime::{
    after_block_op, catch_up_obligation, execute_pause, on_thread_create, process_thread_samples,
    GlobalDelayState, Sample, Sleeper, ThreadDelayState,
};
use causard::{Scope, SourceLocation, TimeNs};
use rand::Rng;

pub fn selected() -> SourceLocation {
    "hot.c:7".parse().unwrap()
}

pub fn elsewhere() -> SourceLocation {
    "cold.c:3".parse().unwrap()
}

/// Returns the request plus a fixed oversleep, and remembers the total.
pub struct OversleepingSleeper {
    pub extra: TimeNs,
}

impl Sleeper for OversleepingSleeper {
    fn sleep(&mut self, request: TimeNs) -> TimeNs {
        request + self.extra
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    /// `thread` processes a batch of `size` samples, `hits` of them in the selected line.
    Batch { thread: usize, size: usize, hits: usize },
    /// `thread` pays everything it owes before waking someone.
    Wake { thread: usize },
    /// `thread` resumes from a blocking call and is credited.
    Resume { thread: usize },
    /// `parent` spawns a new thread.
    Spawn { parent: usize },
    /// The experiment ends and a new one starts.
    Restart,
}

pub fn random_ops(rng: &mut impl Rng, len: usize, max_threads: usize) -> Vec<Op> {
    let mut threads = 1 + rng.random_range(0..max_threads.min(3));
    (0..len)
        .map(|_| {
            let thread = rng.random_range(0..threads);
            match rng.random_range(0..20) {
                0..=10 => {
                    let size = rng.random_range(1..=10);
                    Op::Batch { thread, size, hits: rng.random_range(0..=size) }
                }
                11..=13 => Op::Wake { thread },
                14..=16 => Op::Resume { thread },
                17..=18 if threads < max_threads => {
                    threads += 1;
                    Op::Spawn { parent: thread }
                }
                _ => Op::Restart,
            }
        })
        .collect()
}

fn batch(thread: usize, size: usize, hits: usize, ts: TimeNs) -> Vec<Sample> {
    (0..size)
        .map(|k| {
            let loc = if k < hits { selected() } else { elsewhere() };
            Sample::new(thread as u32, ts, vec![loc])
        })
        .collect()
}

/// Final state of an interleaving after every thread settled.
pub struct Settled {
    pub global: u64,
    pub threads: Vec<ThreadDelayState>,
    pub restarted: bool,
}

/// Runs `initial_threads` threads through `ops` and checks the accounting
/// identities after every step. Every thread settles at the end.
pub fn run_interleaving(ops: &[Op], initial_threads: usize, delay: TimeNs, extra: TimeNs) -> Result<Settled, String> {
    let g = GlobalDelayState::new();
    let scope = Scope::everything();
    let mut now = TimeNs(1);
    g.start_experiment(selected(), delay, now);
    let mut threads: Vec<ThreadDelayState> = (0..initial_threads).map(|_| ThreadDelayState::synced_with(&g)).collect();
    let mut sleeper = OversleepingSleeper { extra };
    let mut restarted = false;
    for (step, op) in ops.iter().enumerate() {
        now += TimeNs(1000);
        match *op {
            Op::Batch { thread, size, hits } if thread < threads.len() => {
                let owed = process_thread_samples(&mut threads[thread], &g, &batch(thread, size, hits, now), &scope);
                execute_pause(&mut threads[thread], owed, &mut sleeper);
            }
            Op::Wake { thread } if thread < threads.len() => {
                let owed = catch_up_obligation(&mut threads[thread], &g);
                execute_pause(&mut threads[thread], owed, &mut sleeper);
            }
            Op::Resume { thread } if thread < threads.len() => after_block_op(&mut threads[thread], &g),
            Op::Spawn { parent } if parent < threads.len() => {
                let child = on_thread_create(&threads[parent]);
                threads.push(child);
            }
            Op::Restart => {
                g.end_experiment();
                g.start_experiment(selected(), delay, now);
                restarted = true;
            }
            _ => {}
        }
        check(&g, &threads).map_err(|e| format!("after step {step} ({op:?}): {e}"))?;
    }
    for t in threads.iter_mut() {
        let owed = catch_up_obligation(t, &g);
        execute_pause(t, owed, &mut sleeper);
    }
    check(&g, &threads)?;
    let global = g.global_count();
    for (i, t) in threads.iter().enumerate() {
        if t.local_delay_count != global {
            return Err(format!("thread {i} settled at {} but the global count is {global}", t.local_delay_count));
        }
    }
    Ok(Settled { global, threads, restarted })
}

fn check(g: &GlobalDelayState, threads: &[ThreadDelayState]) -> Result<(), String> {
    let global = g.global_count();
    for (i, t) in threads.iter().enumerate() {
        if t.stats.accounted_units() != t.local_delay_count {
            return Err(format!("thread {i}: local {} but accounted {:?}", t.local_delay_count, t.stats));
        }
        if t.local_delay_count > global {
            return Err(format!("thread {i}: local {} above global {global}", t.local_delay_count));
        }
        if t.stats.total_slept.checked_sub(t.stats.total_obligation) != Some(t.excess_sleep) {
            return Err(format!("thread {i}: excess sleep identity broken: {:?}", t.stats));
        }
    }
    Ok(())
}
