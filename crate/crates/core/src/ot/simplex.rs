//! Primal network simplex for balanced, uncapacitated transportation problems
//! with integer supplies and costs.
//!
//! The tree bookkeeping (thread / reverse-thread / successor counts) follows
//! the LEMON formulation. Pivoting uses block search over the arcs in index
//! order and keeps the first arc reaching the block minimum, so the pivot
//! sequence depends only on the input.

const NONE: usize = usize::MAX;
const STATE_UPPER: i64 = -1;
const STATE_TREE: i64 = 0;
const STATE_LOWER: i64 = 1;
const DIR_UP: i64 = 1;
const DIR_DOWN: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Solver state for a complete bipartite graph `sources x sinks`.
///
/// Node `i < m` is source `i`, node `m + j` is sink `j`, node `m + n` is the
/// artificial root. Arc `i * n + j` connects source `i` to sink `j`.
pub(crate) struct TransportSimplex {
    m: usize,
    n: usize,
    node_num: usize,
    arc_num: usize,
    root: usize,

    source: Vec<usize>,
    target: Vec<usize>,
    cost: Vec<i64>,
    supply: Vec<i64>,
    flow: Vec<i64>,
    state: Vec<i64>,
    pi: Vec<i64>,

    parent: Vec<usize>,
    pred: Vec<usize>,
    pred_dir: Vec<i64>,
    thread: Vec<usize>,
    rev_thread: Vec<usize>,
    succ_num: Vec<usize>,
    last_succ: Vec<usize>,
    dirty_revs: Vec<usize>,

    in_arc: usize,
    join: usize,
    u_in: usize,
    v_in: usize,
    u_out: usize,
    delta: i64,

    block_size: usize,
    next_arc: usize,
    pivots: usize,
}

impl TransportSimplex {
    /// `cost(i, j)` must be nonnegative; `supplies` and `demands` must have
    /// equal sums.
    pub(crate) fn new(
        supplies: &[i64],
        demands: &[i64],
        cost: impl Fn(usize, usize) -> i64,
    ) -> Self {
        let m = supplies.len();
        let n = demands.len();
        let node_num = m + n;
        let arc_num = m * n;
        let all_arc_num = arc_num + node_num;
        let all_node_num = node_num + 1;

        let mut source = vec![0usize; all_arc_num];
        let mut target = vec![0usize; all_arc_num];
        let mut costs = vec![0i64; all_arc_num];
        let mut max_cost = 0i64;
        for i in 0..m {
            for j in 0..n {
                let e = i * n + j;
                source[e] = i;
                target[e] = m + j;
                let c = cost(i, j);
                max_cost = max_cost.max(c);
                costs[e] = c;
            }
        }
        let mut supply = Vec::with_capacity(all_node_num);
        supply.extend_from_slice(supplies);
        supply.extend(demands.iter().map(|d| -d));
        supply.push(0);

        let block_size = ((arc_num as f64).sqrt() as usize).max(10);
        TransportSimplex {
            m,
            n,
            node_num,
            arc_num,
            root: node_num,
            source,
            target,
            cost: costs,
            supply,
            flow: vec![0; all_arc_num],
            state: vec![STATE_LOWER; all_arc_num],
            pi: vec![0; all_node_num],
            parent: vec![NONE; all_node_num],
            pred: vec![NONE; all_node_num],
            pred_dir: vec![DIR_UP; all_node_num],
            thread: vec![0; all_node_num],
            rev_thread: vec![0; all_node_num],
            succ_num: vec![0; all_node_num],
            last_succ: vec![0; all_node_num],
            dirty_revs: Vec::new(),
            in_arc: 0,
            join: 0,
            u_in: 0,
            v_in: 0,
            u_out: 0,
            delta: 0,
            block_size,
            next_arc: 0,
            pivots: 0,
        }
        .with_art_cost(max_cost)
    }

    fn with_art_cost(mut self, max_cost: i64) -> Self {
        self.init_tree((max_cost + 1) * self.node_num.max(1) as i64);
        self
    }

    fn init_tree(&mut self, art_cost: i64) {
        let root = self.root;
        self.parent[root] = NONE;
        self.pred[root] = NONE;
        self.thread[root] = 0;
        self.rev_thread[0] = root;
        self.succ_num[root] = self.node_num + 1;
        self.last_succ[root] = if self.node_num == 0 { root } else { root - 1 };
        self.supply[root] = 0;
        self.pi[root] = 0;
        if self.node_num == 0 {
            self.thread[root] = root;
            self.rev_thread[root] = root;
            return;
        }

        let mut e = self.arc_num;
        for u in 0..self.node_num {
            self.parent[u] = root;
            self.pred[u] = e;
            self.thread[u] = u + 1;
            self.rev_thread[u + 1] = u;
            self.succ_num[u] = 1;
            self.last_succ[u] = u;
            self.state[e] = STATE_TREE;
            if self.supply[u] >= 0 {
                self.pred_dir[u] = DIR_UP;
                self.pi[u] = 0;
                self.source[e] = u;
                self.target[e] = root;
                self.flow[e] = self.supply[u];
                self.cost[e] = 0;
            } else {
                self.pred_dir[u] = DIR_DOWN;
                self.pi[u] = art_cost;
                self.source[e] = root;
                self.target[e] = u;
                self.flow[e] = -self.supply[u];
                self.cost[e] = art_cost;
            }
            e += 1;
        }
    }

    #[inline]
    fn reduced(&self, e: usize) -> i64 {
        self.state[e] * (self.cost[e] + self.pi[self.source[e]] - self.pi[self.target[e]])
    }

    fn find_entering_arc(&mut self) -> bool {
        let mut min = 0i64;
        let mut cnt = self.block_size;
        let mut e = self.next_arc;
        while e != self.arc_num {
            let c = self.reduced(e);
            if c < min {
                min = c;
                self.in_arc = e;
            }
            cnt -= 1;
            if cnt == 0 {
                if min < 0 {
                    self.next_arc = e;
                    return true;
                }
                cnt = self.block_size;
            }
            e += 1;
        }
        e = 0;
        while e != self.next_arc {
            let c = self.reduced(e);
            if c < min {
                min = c;
                self.in_arc = e;
            }
            cnt -= 1;
            if cnt == 0 {
                if min < 0 {
                    self.next_arc = e;
                    return true;
                }
                cnt = self.block_size;
            }
            e += 1;
        }
        if min >= 0 {
            return false;
        }
        self.next_arc = e;
        true
    }

    fn find_join_node(&mut self) {
        let mut u = self.source[self.in_arc];
        let mut v = self.target[self.in_arc];
        while u != v {
            if self.succ_num[u] < self.succ_num[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        self.join = u;
    }

    /// Returns `false` when no blocking arc exists (unbounded direction).
    fn find_leaving_arc(&mut self) -> bool {
        let (first, second) = if self.state[self.in_arc] == STATE_LOWER {
            (self.source[self.in_arc], self.target[self.in_arc])
        } else {
            (self.target[self.in_arc], self.source[self.in_arc])
        };
        self.delta = i64::MAX;
        let mut result = 0;
        let mut u = first;
        while u != self.join {
            let d = if self.pred_dir[u] == DIR_DOWN {
                i64::MAX
            } else {
                self.flow[self.pred[u]]
            };
            if d < self.delta {
                self.delta = d;
                self.u_out = u;
                result = 1;
            }
            u = self.parent[u];
        }
        u = second;
        while u != self.join {
            let d = if self.pred_dir[u] == DIR_UP {
                i64::MAX
            } else {
                self.flow[self.pred[u]]
            };
            if d <= self.delta {
                self.delta = d;
                self.u_out = u;
                result = 2;
            }
            u = self.parent[u];
        }
        if result == 1 {
            self.u_in = first;
            self.v_in = second;
        } else {
            self.u_in = second;
            self.v_in = first;
        }
        result != 0
    }

    fn change_flow(&mut self) {
        if self.delta > 0 {
            let val = self.state[self.in_arc] * self.delta;
            self.flow[self.in_arc] += val;
            let mut u = self.source[self.in_arc];
            while u != self.join {
                self.flow[self.pred[u]] -= self.pred_dir[u] * val;
                u = self.parent[u];
            }
            u = self.target[self.in_arc];
            while u != self.join {
                self.flow[self.pred[u]] += self.pred_dir[u] * val;
                u = self.parent[u];
            }
        }
        self.state[self.in_arc] = STATE_TREE;
        let out = self.pred[self.u_out];
        self.state[out] = if self.flow[out] == 0 {
            STATE_LOWER
        } else {
            STATE_UPPER
        };
    }

    fn update_tree_structure(&mut self) {
        let u_in = self.u_in;
        let v_in = self.v_in;
        let u_out = self.u_out;
        let join = self.join;
        let in_arc = self.in_arc;
        let old_rev_thread = self.rev_thread[u_out];
        let old_succ_num = self.succ_num[u_out];
        let old_last_succ = self.last_succ[u_out];
        let v_out = self.parent[u_out];

        if u_in == u_out {
            self.parent[u_in] = v_in;
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = if u_in == self.source[in_arc] {
                DIR_UP
            } else {
                DIR_DOWN
            };
            if self.thread[v_in] != u_out {
                let mut after = self.thread[old_last_succ];
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
                after = self.thread[v_in];
                self.thread[v_in] = u_out;
                self.rev_thread[u_out] = v_in;
                self.thread[old_last_succ] = after;
                self.rev_thread[after] = old_last_succ;
            }
        } else {
            let thread_continue = if old_rev_thread == v_in {
                self.thread[old_last_succ]
            } else {
                self.thread[v_in]
            };

            let mut stem = u_in;
            let mut par_stem = v_in;
            let mut last = self.last_succ[u_in];
            let mut after = self.thread[last];
            self.thread[v_in] = u_in;
            self.dirty_revs.clear();
            self.dirty_revs.push(v_in);
            while stem != u_out {
                let next_stem = self.parent[stem];
                self.thread[last] = next_stem;
                self.dirty_revs.push(last);

                let before = self.rev_thread[stem];
                self.thread[before] = after;
                self.rev_thread[after] = before;

                self.parent[stem] = par_stem;
                par_stem = stem;
                stem = next_stem;

                last = if self.last_succ[stem] == self.last_succ[par_stem] {
                    self.rev_thread[par_stem]
                } else {
                    self.last_succ[stem]
                };
                after = self.thread[last];
            }
            self.parent[u_out] = par_stem;
            self.thread[last] = thread_continue;
            self.rev_thread[thread_continue] = last;
            self.last_succ[u_out] = last;

            if old_rev_thread != v_in {
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
            }

            for k in 0..self.dirty_revs.len() {
                let u = self.dirty_revs[k];
                let t = self.thread[u];
                self.rev_thread[t] = u;
            }

            let mut tmp_sc = 0usize;
            let tmp_ls = self.last_succ[u_out];
            let mut u = u_out;
            while u != u_in {
                let p = self.parent[u];
                self.pred[u] = self.pred[p];
                self.pred_dir[u] = -self.pred_dir[p];
                tmp_sc = tmp_sc + self.succ_num[u] - self.succ_num[p];
                self.succ_num[u] = tmp_sc;
                self.last_succ[p] = tmp_ls;
                u = p;
            }
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = if u_in == self.source[in_arc] {
                DIR_UP
            } else {
                DIR_DOWN
            };
            self.succ_num[u_in] = old_succ_num;
        }

        let up_limit_out = if self.last_succ[join] == v_in {
            join
        } else {
            NONE
        };
        let last_succ_out = self.last_succ[u_out];
        let mut u = v_in;
        while u != NONE && self.last_succ[u] == v_in {
            self.last_succ[u] = last_succ_out;
            u = self.parent[u];
        }

        if join != old_rev_thread && v_in != old_rev_thread {
            let mut u = v_out;
            while u != NONE && u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = old_rev_thread;
                u = self.parent[u];
            }
        } else if last_succ_out != old_last_succ {
            let mut u = v_out;
            while u != NONE && u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = last_succ_out;
                u = self.parent[u];
            }
        }

        let mut u = v_in;
        while u != join {
            self.succ_num[u] += old_succ_num;
            u = self.parent[u];
        }
        let mut u = v_out;
        while u != join {
            self.succ_num[u] -= old_succ_num;
            u = self.parent[u];
        }
    }

    fn update_potential(&mut self) {
        let sigma = self.pi[self.v_in]
            - self.pi[self.u_in]
            - self.pred_dir[self.u_in] * self.cost[self.in_arc];
        let end = self.thread[self.last_succ[self.u_in]];
        let mut u = self.u_in;
        while u != end {
            self.pi[u] += sigma;
            u = self.thread[u];
        }
    }

    /// Runs pivots until optimality or until `max_pivots` is exceeded.
    pub(crate) fn run(&mut self, max_pivots: usize) -> SolveStatus {
        if self.node_num == 0 {
            return SolveStatus::Optimal;
        }
        while self.find_entering_arc() {
            self.find_join_node();
            if !self.find_leaving_arc() || self.delta == i64::MAX {
                return SolveStatus::Unbounded;
            }
            self.change_flow();
            self.update_tree_structure();
            self.update_potential();
            self.pivots += 1;
            if self.pivots > max_pivots {
                return SolveStatus::Infeasible;
            }
        }
        if (self.arc_num..self.arc_num + self.node_num).any(|e| self.flow[e] != 0) {
            return SolveStatus::Infeasible;
        }
        SolveStatus::Optimal
    }

    pub(crate) fn pivots(&self) -> usize {
        self.pivots
    }

    /// Integer flow on source `i` to sink `j`.
    pub(crate) fn flow(&self, i: usize, j: usize) -> i64 {
        self.flow[i * self.n + j]
    }

    /// Total cost of the integer flow.
    pub(crate) fn total_cost(&self) -> i128 {
        (0..self.arc_num)
            .filter(|&e| self.flow[e] != 0)
            .map(|e| self.flow[e] as i128 * self.cost[e] as i128)
            .sum()
    }

    /// Re-solves the flows on the final spanning tree for real-valued
    /// supplies. Returns `None` if the tree is not primal feasible for them
    /// (a tree arc would need negative flow, or an artificial arc would carry
    /// mass beyond `tol`).
    pub(crate) fn tree_flows(
        &self,
        supplies: &[f64],
        demands: &[f64],
        tol: f64,
    ) -> Option<Vec<(usize, usize, f64)>> {
        let mut excess = vec![0.0f64; self.node_num + 1];
        excess[..self.m].copy_from_slice(supplies);
        for (j, d) in demands.iter().enumerate() {
            excess[self.m + j] = -d;
        }
        // Reverse thread order visits every node after all of its descendants.
        let mut order = Vec::with_capacity(self.node_num + 1);
        let mut u = self.root;
        loop {
            order.push(u);
            u = self.thread[u];
            if u == self.root {
                break;
            }
        }
        let mut arcs = Vec::new();
        for &u in order.iter().rev() {
            if u == self.root {
                continue;
            }
            let e = self.pred[u];
            let f = if self.pred_dir[u] == DIR_UP {
                excess[u]
            } else {
                -excess[u]
            };
            let p = self.parent[u];
            excess[p] += excess[u];
            if e >= self.arc_num {
                if f.abs() > tol {
                    return None;
                }
                continue;
            }
            if f < -tol {
                return None;
            }
            if f > 0.0 {
                arcs.push((self.source[e], self.target[e] - self.m, f));
            }
        }
        arcs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        Some(arcs)
    }
}
