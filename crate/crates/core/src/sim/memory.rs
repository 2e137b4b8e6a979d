//! Per-processor residency: which blocks of each tensor a processor holds,
//! and the copy rule that fills missing data.

use std::collections::BTreeMap;

use crate::distribution::{HyperRect, TensorDistribution};
use crate::machine::{Machine, ProcCoord};
use crate::tensor::linear_index;

use super::trace::{CommEvent, EventKind, Phase};
use super::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Home,
    Copy,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub rect: HyperRect,
    /// Step at which the block arrived; home blocks predate every step.
    pub acquired: i64,
    pub kind: BlockKind,
    /// No longer needed; removed at the end of the current step.
    pub stale: bool,
}

#[derive(Clone, Debug, Default)]
struct TensorMem {
    blocks: Vec<Block>,
    live: Vec<bool>,
}

/// Where and when a copy happens; used to stamp ledger entries.
#[derive(Clone, Copy, Debug)]
pub struct Stamp {
    pub step: usize,
    pub phase: Phase,
    pub launch: usize,
}

/// Residency state of every processor.
#[derive(Clone, Debug)]
pub struct Memories {
    machine: Machine,
    procs: Vec<ProcCoord>,
    dims: BTreeMap<String, Vec<usize>>,
    layout: BTreeMap<String, TensorDistribution>,
    mem: Vec<BTreeMap<String, TensorMem>>,
    extra: Vec<usize>,
    high_water: Vec<usize>,
}

/// Splits the cells of `rect` satisfying `want` into boxes that contain only
/// such cells, halving along the longest side when a bounding box is mixed.
pub fn cover(rect: &HyperRect, want: &dyn Fn(&[usize]) -> bool) -> Vec<HyperRect> {
    let mut lo: Option<Vec<usize>> = None;
    let mut hi = Vec::new();
    let mut count = 0usize;
    rect.for_each(|c| {
        if want(c) {
            count += 1;
            match &mut lo {
                None => {
                    lo = Some(c.to_vec());
                    hi = c.iter().map(|x| x + 1).collect();
                }
                Some(l) => {
                    for k in 0..c.len() {
                        l[k] = l[k].min(c[k]);
                        hi[k] = hi[k].max(c[k] + 1);
                    }
                }
            }
        }
    });
    let Some(lo) = lo else {
        return Vec::new();
    };
    let bbox = HyperRect::new(lo, hi);
    if bbox.volume() == count {
        return vec![bbox];
    }
    let ext = bbox.extents();
    let d = (0..ext.len()).max_by_key(|&k| (ext[k], usize::MAX - k)).unwrap();
    let mid = bbox.lo[d] + ext[d] / 2;
    let mut a = bbox.clone();
    a.hi[d] = mid;
    let mut b = bbox;
    b.lo[d] = mid;
    let mut out = cover(&a, want);
    out.extend(cover(&b, want));
    out
}

impl Memories {
    pub fn new(machine: &Machine) -> Self {
        let procs = machine.enumerate();
        let n = procs.len();
        Memories {
            machine: machine.clone(),
            procs,
            dims: BTreeMap::new(),
            layout: BTreeMap::new(),
            mem: vec![BTreeMap::new(); n],
            extra: vec![0; n],
            high_water: vec![0; n],
        }
    }

    pub fn procs(&self) -> &[ProcCoord] {
        &self.procs
    }

    pub fn layout(&self, tensor: &str) -> Option<&TensorDistribution> {
        self.layout.get(tensor)
    }

    fn slot(&mut self, p: usize, tensor: &str) -> &mut TensorMem {
        let vol: usize = self.dims[tensor].iter().product();
        self.mem[p].entry(tensor.to_string()).or_insert_with(|| TensorMem {
            blocks: Vec::new(),
            live: vec![false; vol],
        })
    }

    fn add_block(&mut self, p: usize, tensor: &str, block: Block) {
        let dims = self.dims[tensor].clone();
        let m = self.slot(p, tensor);
        block.rect.for_each(|c| m.live[linear_index(&dims, c)] = true);
        m.blocks.push(block);
    }

    fn clear_tensor(&mut self, p: usize, tensor: &str) {
        if let Some(m) = self.mem[p].get_mut(tensor) {
            m.blocks.clear();
            m.live.iter_mut().for_each(|x| *x = false);
        }
    }

    /// Homes only: each piece at the first of its processors.
    pub fn place_homes(&mut self, d: &TensorDistribution) {
        self.install(d, false);
    }

    /// Every piece on every processor the distribution assigns it.
    pub fn place_full(&mut self, d: &TensorDistribution) {
        self.install(d, true);
    }

    fn install(&mut self, d: &TensorDistribution, replicas: bool) {
        let name = d.tensor().name().to_string();
        self.dims.insert(name.clone(), d.tensor().dims().to_vec());
        for p in 0..self.procs.len() {
            self.clear_tensor(p, &name);
        }
        for (_, rect, procs) in d.pieces() {
            if rect.is_empty() {
                continue;
            }
            let take = if replicas { procs.len() } else { 1 };
            for q in &procs[..take] {
                let p = self.machine.proc_index(q);
                self.add_block(
                    p,
                    &name,
                    Block {
                        rect: rect.clone(),
                        acquired: -1,
                        kind: BlockKind::Home,
                        stale: false,
                    },
                );
            }
        }
        self.layout.insert(name, d.clone());
        self.refresh_high_water();
    }

    pub fn is_live(&self, p: usize, tensor: &str, coord: &[usize]) -> bool {
        self.mem[p]
            .get(tensor)
            .is_some_and(|m| m.live[linear_index(&self.dims[tensor], coord)])
    }

    /// Processors holding `coord` of `tensor`.
    pub fn holders(&self, tensor: &str, coord: &[usize]) -> Vec<ProcCoord> {
        (0..self.procs.len())
            .filter(|&p| self.is_live(p, tensor, coord))
            .map(|p| self.procs[p].clone())
            .collect()
    }

    pub fn blocks(&self, p: &ProcCoord, tensor: &str) -> Vec<Block> {
        let p = self.machine.proc_index(p);
        self.mem[p].get(tensor).map(|m| m.blocks.clone()).unwrap_or_default()
    }

    /// Elements in non-stale blocks plus task-local extras.
    pub fn resident(&self, p: usize) -> usize {
        let held: usize = self.mem[p]
            .values()
            .flat_map(|m| m.blocks.iter())
            .filter(|b| !b.stale)
            .map(|b| b.rect.volume())
            .sum();
        held + self.extra[p]
    }

    pub fn set_extra(&mut self, p: usize, n: usize) {
        self.extra[p] = n;
        self.note_memory(p);
    }

    pub fn clear_extras(&mut self) {
        self.extra.iter_mut().for_each(|x| *x = 0);
    }

    fn note_memory(&mut self, p: usize) {
        let r = self.resident(p);
        self.high_water[p] = self.high_water[p].max(r);
    }

    fn refresh_high_water(&mut self) {
        for p in 0..self.procs.len() {
            self.note_memory(p);
        }
    }

    pub fn high_water(&self) -> Vec<(ProcCoord, usize)> {
        self.procs.iter().cloned().zip(self.high_water.iter().copied()).collect()
    }

    /// Makes `need` resident at processor `p`, recording a copy for every
    /// missing box. Copies held from earlier visits of the same scope that
    /// fall outside `need` become stale.
    pub fn fetch(
        &mut self,
        p: usize,
        tensor: &str,
        need: &HyperRect,
        stamp: Stamp,
        ledger: &mut Vec<CommEvent>,
    ) -> Result<(), SimError> {
        if need.is_empty() {
            return Ok(());
        }
        let layout = self
            .layout
            .get(tensor)
            .ok_or_else(|| SimError::MissingDistribution(tensor.to_string()))?
            .clone();
        {
            let m = self.slot(p, tensor);
            for b in m.blocks.iter_mut().filter(|b| b.kind == BlockKind::Copy) {
                b.stale = !need.contains_rect(&b.rect);
            }
        }
        let dims = self.dims[tensor].clone();
        for (_, piece, _) in layout.pieces() {
            let sub = need.intersect(&piece);
            if sub.is_empty() {
                continue;
            }
            let live = &self.mem[p][tensor].live;
            let missing = cover(&sub, &|c| !live[linear_index(&dims, c)]);
            for rect in missing {
                let src = self.source(p, tensor, &rect, stamp.step)?;
                ledger.push(CommEvent {
                    step: stamp.step,
                    phase: stamp.phase,
                    launch: stamp.launch,
                    src: self.procs[src].clone(),
                    dst: self.procs[p].clone(),
                    tensor: tensor.to_string(),
                    elements: rect.volume(),
                    rect: rect.clone(),
                    kind: EventKind::Copy,
                    intra_node: self.machine.same_node(&self.procs[src], &self.procs[p]),
                });
                self.add_block(
                    p,
                    tensor,
                    Block {
                        rect,
                        acquired: stamp.step as i64,
                        kind: BlockKind::Copy,
                        stale: false,
                    },
                );
            }
        }
        self.note_memory(p);
        Ok(())
    }

    /// The holder of a block containing `rect` that arrived most recently
    /// before `step`; ties go to the lowest processor in enumerate order.
    fn source(&self, p: usize, tensor: &str, rect: &HyperRect, step: usize) -> Result<usize, SimError> {
        let mut best: Option<(i64, usize)> = None;
        for (q, mem) in self.mem.iter().enumerate() {
            if q == p {
                continue;
            }
            let Some(m) = mem.get(tensor) else { continue };
            for b in &m.blocks {
                if b.acquired < step as i64 && b.rect.contains_rect(rect) {
                    let better = match best {
                        None => true,
                        Some((a, bq)) => b.acquired > a || (b.acquired == a && q < bq),
                    };
                    if better {
                        best = Some((b.acquired, q));
                    }
                }
            }
        }
        best.map(|(_, q)| q).ok_or_else(|| SimError::NoSource {
            tensor: tensor.to_string(),
            rect: rect.to_string(),
        })
    }

    /// Drops stale blocks.
    pub fn end_step(&mut self) {
        for p in 0..self.procs.len() {
            let names: Vec<String> = self.mem[p].keys().cloned().collect();
            for t in names {
                self.retain(p, &t, |b| !b.stale);
            }
        }
    }

    /// Drops every copy, keeping homes.
    pub fn drop_copies(&mut self) {
        for p in 0..self.procs.len() {
            let names: Vec<String> = self.mem[p].keys().cloned().collect();
            for t in names {
                self.retain(p, &t, |b| b.kind == BlockKind::Home);
            }
        }
    }

    fn retain(&mut self, p: usize, tensor: &str, keep: impl Fn(&Block) -> bool) {
        let dims = self.dims[tensor].clone();
        let m = self.mem[p].get_mut(tensor).unwrap();
        let (kept, gone): (Vec<Block>, Vec<Block>) = m.blocks.drain(..).partition(|b| keep(b));
        for b in &gone {
            b.rect.for_each(|c| m.live[linear_index(&dims, c)] = false);
        }
        m.blocks = kept;
    }

    /// After placement: every processor holds exactly the pieces `d` assigns
    /// it, all as home blocks.
    pub fn rebuild_homes(&mut self, d: &TensorDistribution) {
        self.place_full(d);
    }
}
