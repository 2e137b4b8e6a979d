//! Leaf kernels: local code that runs the innermost loops of a task.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::cin::{exec_leaf, CinError, CinStmt, Env, Loop, Resolver, Store};

pub trait LocalKernel: Send + Sync {
    fn name(&self) -> &str;

    /// Runs `leaf` over `loops` with the outer variables bound in `env`.
    /// Implementations must visit each output element's reduction points in
    /// the same order as the plain loop nest.
    fn execute(
        &self,
        loops: &[Loop],
        leaf: &CinStmt,
        resolver: &Resolver,
        env: &mut Env,
        store: &mut dyn Store,
    ) -> Result<(), CinError>;
}

/// Runs the loops as written.
pub struct Interpreter;

pub fn interpret_loops(
    loops: &[Loop],
    leaf: &CinStmt,
    resolver: &Resolver,
    env: &mut Env,
    store: &mut dyn Store,
) -> Result<(), CinError> {
    let Some((lp, rest)) = loops.split_first() else {
        return exec_leaf(leaf, resolver, env, store);
    };
    env.push(lp.var.clone(), 0);
    for x in lp.range() {
        env.set_last(x);
        interpret_loops(rest, leaf, resolver, env, store)?;
    }
    env.pop();
    Ok(())
}

impl LocalKernel for Interpreter {
    fn name(&self) -> &str {
        "interp"
    }

    fn execute(
        &self,
        loops: &[Loop],
        leaf: &CinStmt,
        resolver: &Resolver,
        env: &mut Env,
        store: &mut dyn Store,
    ) -> Result<(), CinError> {
        interpret_loops(loops, leaf, resolver, env, store)
    }
}

/// Tiled matrix multiply over a three-loop nest `(row, col, reduction)`.
/// Tiles the first two loops and keeps the third innermost, so each output
/// element still accumulates in loop order.
pub struct BlockedMatmul {
    pub tile: usize,
}

impl LocalKernel for BlockedMatmul {
    fn name(&self) -> &str {
        "gemm"
    }

    fn execute(
        &self,
        loops: &[Loop],
        leaf: &CinStmt,
        resolver: &Resolver,
        env: &mut Env,
        store: &mut dyn Store,
    ) -> Result<(), CinError> {
        let [a, b, c] = loops else {
            return interpret_loops(loops, leaf, resolver, env, store);
        };
        let (ra, rb) = (a.range(), b.range());
        let tile = self.tile.max(1);
        let mut a0 = ra.start;
        while a0 < ra.end {
            let mut b0 = rb.start;
            while b0 < rb.end {
                for x in a0..(a0 + tile).min(ra.end) {
                    env.push(a.var.clone(), x);
                    for y in b0..(b0 + tile).min(rb.end) {
                        env.push(b.var.clone(), y);
                        interpret_loops(std::slice::from_ref(c), leaf, resolver, env, store)?;
                        env.pop();
                    }
                    env.pop();
                }
                b0 += tile;
            }
            a0 += tile;
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct KernelRegistry {
    kernels: BTreeMap<String, Arc<dyn LocalKernel>>,
}

impl Default for KernelRegistry {
    fn default() -> Self {
        let mut r = KernelRegistry {
            kernels: BTreeMap::new(),
        };
        r.register(Arc::new(Interpreter));
        r.register(Arc::new(BlockedMatmul { tile: 2 }));
        r
    }
}

impl KernelRegistry {
    pub fn register(&mut self, k: Arc<dyn LocalKernel>) {
        self.kernels.insert(k.name().to_string(), k);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn LocalKernel>> {
        self.kernels.get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.kernels.keys().cloned().collect()
    }
}

impl std::fmt::Debug for KernelRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.kernels.keys()).finish()
    }
}
