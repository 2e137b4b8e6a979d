//! Communication ledger, execution trace and aggregate statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::distribution::HyperRect;
use crate::machine::ProcCoord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Placement,
    Compute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Copy,
    Reduce,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEvent {
    pub step: usize,
    pub phase: Phase,
    pub launch: usize,
    pub src: ProcCoord,
    pub dst: ProcCoord,
    pub tensor: String,
    pub rect: HyperRect,
    pub elements: usize,
    pub kind: EventKind,
    /// Both ends in the same node of a hierarchical machine.
    pub intra_node: bool,
}

impl std::fmt::Display for CommEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step={} phase={:?} kind={:?} {} -> {} {}{} elements={}",
            self.step, self.phase, self.kind, self.src, self.dst, self.tensor, self.rect, self.elements
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub proc: ProcCoord,
    /// Values of the distributed loop variables.
    pub point: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub launch: usize,
    pub tasks: Vec<TaskRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub events: Vec<CommEvent>,
    pub steps: Vec<StepRecord>,
    /// Peak resident elements per processor, in enumerate order.
    pub memory_high_water: Vec<(ProcCoord, usize)>,
}

impl ExecutionTrace {
    pub fn compute_events(&self) -> impl Iterator<Item = &CommEvent> {
        self.events.iter().filter(|e| e.phase == Phase::Compute)
    }

    pub fn events_for<'a>(&'a self, tensor: &'a str) -> impl Iterator<Item = &'a CommEvent> + 'a {
        self.events.iter().filter(move |e| e.tensor == tensor)
    }

    /// Distinct compute-phase steps in order.
    pub fn compute_steps(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| s.phase == Phase::Compute)
            .map(|s| s.step)
            .collect()
    }

    pub fn max_memory(&self) -> usize {
        self.memory_high_water.iter().map(|(_, m)| *m).max().unwrap_or(0)
    }

    pub fn total_memory(&self) -> usize {
        self.memory_high_water.iter().map(|(_, m)| *m).sum()
    }

    pub fn stats(&self) -> Stats {
        Stats::from_trace(self)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
/// Compute-phase counts; placement traffic is reported separately.
pub struct Totals {
    pub messages: usize,
    pub elements: usize,
    pub copy_messages: usize,
    pub reduce_messages: usize,
    pub inter_node_messages: usize,
    pub placement_messages: usize,
    pub placement_elements: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeStat {
    pub src: ProcCoord,
    pub dst: ProcCoord,
    pub messages: usize,
    pub elements: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepStat {
    pub step: usize,
    pub phase: Phase,
    pub messages: usize,
    pub elements: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub totals: Totals,
    pub per_edge: Vec<EdgeStat>,
    pub per_step: Vec<StepStat>,
    pub memory_high_water: Vec<(ProcCoord, usize)>,
}

impl Stats {
    pub fn from_trace(t: &ExecutionTrace) -> Stats {
        let mut totals = Totals::default();
        let mut edges: BTreeMap<(ProcCoord, ProcCoord), (usize, usize)> = BTreeMap::new();
        let mut steps: BTreeMap<usize, StepStat> = t
            .steps
            .iter()
            .map(|s| {
                (
                    s.step,
                    StepStat {
                        step: s.step,
                        phase: s.phase,
                        messages: 0,
                        elements: 0,
                    },
                )
            })
            .collect();
        for e in &t.events {
            match e.phase {
                Phase::Placement => {
                    totals.placement_messages += 1;
                    totals.placement_elements += e.elements;
                }
                Phase::Compute => {
                    totals.messages += 1;
                    totals.elements += e.elements;
                    match e.kind {
                        EventKind::Copy => totals.copy_messages += 1,
                        EventKind::Reduce => totals.reduce_messages += 1,
                    }
                    if !e.intra_node {
                        totals.inter_node_messages += 1;
                    }
                }
            }
            let edge = edges.entry((e.src.clone(), e.dst.clone())).or_default();
            edge.0 += 1;
            edge.1 += e.elements;
            let s = steps.entry(e.step).or_insert(StepStat {
                step: e.step,
                phase: e.phase,
                messages: 0,
                elements: 0,
            });
            s.messages += 1;
            s.elements += e.elements;
        }
        Stats {
            totals,
            per_edge: edges
                .into_iter()
                .map(|((src, dst), (messages, elements))| EdgeStat {
                    src,
                    dst,
                    messages,
                    elements,
                })
                .collect(),
            per_step: steps.into_values().collect(),
            memory_high_water: t.memory_high_water.clone(),
        }
    }

    /// Versioned JSON document; `config` is embedded verbatim.
    pub fn to_json(&self, config: Value) -> Value {
        json!({
            "schema": 1,
            "config": config,
            "totals": self.totals,
            "per_edge": self.per_edge.iter().map(|e| json!([e.src.0, e.dst.0, e.messages, e.elements])).collect::<Vec<_>>(),
            "per_step": self.per_step,
            "memory_high_water": self.memory_high_water.iter().map(|(p, m)| json!({"proc": p.0, "elements": m})).collect::<Vec<_>>(),
        })
    }
}
