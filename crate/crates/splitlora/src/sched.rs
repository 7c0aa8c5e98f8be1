//! Single-machine scheduling of the server's per-client work within one
//! round.
//!
//! Each client contributes one job: it becomes available at `release`
//! (client forward + uplink), occupies the server for `server_time`, and is
//! followed by a `tail` (gradient downlink + client backward) that overlaps
//! the server's other jobs. The round ends when the last tail finishes, so
//! the objective is the classic single-machine makespan with release dates
//! and delivery times.
//!
//! The greedy policy is event-driven list scheduling: whenever the server
//! frees up, serve the released job with the longest tail. With equal
//! release dates this is exactly optimal (longest delivery time first); with
//! staggered releases it is a strong heuristic, checked against the
//! brute-force oracle in tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timing profile of one client's job within a round. All fields are
/// simulated seconds; `release` is an arrival instant, the rest durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProfile {
    pub client_id: usize,
    pub release: f64,
    pub server_time: f64,
    pub tail: f64,
}

/// One server-occupancy interval plus the completion of its tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub client: usize,
    pub start: f64,
    pub end: f64,
    pub tail_end: f64,
}

/// A complete order with its simulated timeline.
/// Serializes as `{policy, order, jobs, makespan}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub policy: String,
    pub order: Vec<usize>,
    pub jobs: Vec<Job>,
    pub makespan: f64,
}

fn validate_tasks(tasks: &[TaskProfile]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot schedule an empty task list".into(),
        ));
    }
    let mut ids: Vec<usize> = tasks.iter().map(|t| t.client_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != tasks.len() {
        return Err(Error::InvalidArgument(
            "duplicate client ids in task list".into(),
        ));
    }
    for t in tasks {
        for (name, v) in [
            ("release", t.release),
            ("server_time", t.server_time),
            ("tail", t.tail),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "client {}: {name} must be finite and >= 0, got {v}",
                    t.client_id
                )));
            }
        }
    }
    Ok(())
}

/// Runs the server through `order`, never starting a job before its
/// release. Returns the jobs in serve order and the resulting makespan.
fn simulate<'a>(order: impl Iterator<Item = &'a TaskProfile>) -> (Vec<Job>, f64) {
    let mut jobs = Vec::new();
    let mut t = 0.0f64;
    let mut makespan = 0.0f64;
    for task in order {
        let start = t.max(task.release);
        let end = start + task.server_time;
        let tail_end = end + task.tail;
        makespan = makespan.max(tail_end);
        jobs.push(Job {
            client: task.client_id,
            start,
            end,
            tail_end,
        });
        t = end;
    }
    (jobs, makespan)
}

fn schedule_from(policy: &str, order: Vec<&TaskProfile>) -> Schedule {
    let (jobs, makespan) = simulate(order.iter().copied());
    Schedule {
        policy: policy.to_string(),
        order: order.iter().map(|t| t.client_id).collect(),
        jobs,
        makespan,
    }
}

/// Event-driven list scheduling, longest tail first. Whenever the server is
/// free, it serves the released task with the largest tail (ties: larger
/// server_time, then smaller client_id); if nothing is released it idles
/// until the next release.
pub fn greedy_order(tasks: &[TaskProfile]) -> Result<Schedule> {
    validate_tasks(tasks)?;
    let mut remaining: Vec<&TaskProfile> = tasks.iter().collect();
    let mut order = Vec::with_capacity(tasks.len());
    let mut t = 0.0f64;
    while !remaining.is_empty() {
        let mut released: Vec<usize> = (0..remaining.len())
            .filter(|&i| remaining[i].release <= t)
            .collect();
        if released.is_empty() {
            t = remaining
                .iter()
                .map(|task| task.release)
                .fold(f64::INFINITY, f64::min);
            continue;
        }
        released.sort_by(|&a, &b| {
            let (ta, tb) = (remaining[a], remaining[b]);
            tb.tail
                .partial_cmp(&ta.tail)
                .unwrap()
                .then(tb.server_time.partial_cmp(&ta.server_time).unwrap())
                .then(ta.client_id.cmp(&tb.client_id))
        });
        let chosen = remaining.remove(released[0]);
        t = t.max(chosen.release) + chosen.server_time;
        order.push(chosen);
    }
    Ok(schedule_from("greedy", order))
}

/// Serves tasks in non-decreasing release order (ties: smaller client_id).
pub fn fifo_order(tasks: &[TaskProfile]) -> Result<Schedule> {
    validate_tasks(tasks)?;
    let mut order: Vec<&TaskProfile> = tasks.iter().collect();
    order.sort_by(|a, b| {
        a.release
            .partial_cmp(&b.release)
            .unwrap()
            .then(a.client_id.cmp(&b.client_id))
    });
    Ok(schedule_from("fifo", order))
}

/// Maximum task count accepted by the brute-force oracle.
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Evaluates every permutation and returns the minimum-makespan schedule
/// (first permutation in lexicographic client-id order wins ties).
pub fn brute_force_order(tasks: &[TaskProfile]) -> Result<Schedule> {
    validate_tasks(tasks)?;
    if tasks.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "brute force supports at most {BRUTE_FORCE_LIMIT} tasks, got {}",
            tasks.len()
        )));
    }
    let mut sorted: Vec<&TaskProfile> = tasks.iter().collect();
    sorted.sort_by_key(|t| t.client_id);

    use itertools::Itertools;
    let mut best: Option<(f64, Vec<&TaskProfile>)> = None;
    for perm in sorted.iter().copied().permutations(sorted.len()) {
        let (_, makespan) = simulate(perm.iter().copied());
        let better = match &best {
            None => true,
            Some((current, _)) => makespan < *current,
        };
        if better {
            best = Some((makespan, perm));
        }
    }
    let (_, order) = best.expect("non-empty task list");
    Ok(schedule_from("brute_force", order))
}

/// Builds the full timeline for an explicit serve order. The order must
/// cover the task set exactly.
pub fn schedule_with_order(
    tasks: &[TaskProfile],
    order: &[usize],
    policy: &str,
) -> Result<Schedule> {
    validate_tasks(tasks)?;
    let mut expected: Vec<usize> = tasks.iter().map(|t| t.client_id).collect();
    expected.sort_unstable();
    let mut got: Vec<usize> = order.to_vec();
    got.sort_unstable();
    if expected != got {
        return Err(Error::InvalidArgument(format!(
            "order {order:?} does not cover the task set {expected:?}"
        )));
    }
    let by_id = |id: usize| tasks.iter().find(|t| t.client_id == id).unwrap();
    Ok(schedule_from(
        policy,
        order.iter().map(|&id| by_id(id)).collect(),
    ))
}

/// Recomputes the makespan of `schedule.order` over `tasks`. Pure; fails if
/// the order does not cover the task set exactly.
pub fn makespan(schedule: &Schedule, tasks: &[TaskProfile]) -> Result<f64> {
    Ok(schedule_with_order(tasks, &schedule.order, &schedule.policy)?.makespan)
}
