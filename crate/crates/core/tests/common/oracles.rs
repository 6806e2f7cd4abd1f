//! Graph oracles written independently of the library: typed multigraph
//! isomorphism by backtracking search, and series/parallel contraction of
//! identical devices.

use std::collections::{BTreeMap, HashMap};

use circuitcl::graph::CircuitGraph;

/// Node-typed, arc-typed directed multigraph.
#[derive(Debug, Clone, PartialEq)]
pub struct Plain {
    pub types: Vec<usize>,
    pub params: Vec<Option<f64>>,
    pub arcs: Vec<(usize, usize, usize)>,
}

impl Plain {
    pub fn from_graph(g: &CircuitGraph) -> Self {
        Self {
            types: g.nodes.iter().map(|t| t.code()).collect(),
            params: g.params.clone(),
            arcs: g.arcs.iter().map(|a| (a.src, a.dst, a.etype.code())).collect(),
        }
    }

    fn is_device(&self, v: usize) -> bool {
        self.types[v] >= 3
    }

    fn is_mos(&self, v: usize) -> bool {
        self.types[v] == 4 || self.types[v] == 5
    }

    /// Removes the listed nodes and reindexes.
    fn without(&self, dead: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.types.len()];
        let mut types = Vec::new();
        let mut params = Vec::new();
        for v in 0..self.types.len() {
            if !dead.contains(&v) {
                map[v] = types.len();
                types.push(self.types[v]);
                params.push(self.params[v]);
            }
        }
        let arcs = self
            .arcs
            .iter()
            .filter(|(s, d, _)| !dead.contains(s) && !dead.contains(d))
            .map(|&(s, d, e)| (map[s], map[d], e))
            .collect();
        Self { types, params, arcs }
    }

    /// Sorted list of (other endpoint, etype, outgoing) for one node.
    fn incidence(&self, v: usize) -> Vec<(usize, usize, bool)> {
        let mut out: Vec<_> = self
            .arcs
            .iter()
            .filter_map(|&(s, d, e)| {
                if s == v {
                    Some((d, e, true))
                } else if d == v {
                    Some((s, e, false))
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Current-path neighbours of a device, with multiplicity.
    fn current_nets(&self, v: usize) -> Vec<usize> {
        let mut nets: Vec<usize> = self.arcs.iter().filter(|&&(s, _, e)| s == v && e == 0).map(|a| a.1).collect();
        nets.sort_unstable();
        nets
    }

    fn control_nets(&self, v: usize) -> Vec<(usize, usize)> {
        let mut c: Vec<_> = self.arcs.iter().filter(|&&(_, d, e)| d == v && e != 0).map(|a| (a.0, a.2)).collect();
        c.sort_unstable();
        c
    }

    fn same_device(&self, a: usize, b: usize) -> bool {
        self.types[a] == self.types[b] && self.params[a] == self.params[b]
    }

    /// Finds one pair of identical devices with identical incidence.
    fn parallel_pair(&self) -> Option<(usize, usize)> {
        let devices: Vec<usize> = (0..self.types.len()).filter(|&v| self.is_device(v)).collect();
        let inc: Vec<_> = devices.iter().map(|&v| self.incidence(v)).collect();
        for i in 0..devices.len() {
            for j in i + 1..devices.len() {
                if self.same_device(devices[i], devices[j]) && inc[i] == inc[j] {
                    return Some((devices[i], devices[j]));
                }
            }
        }
        None
    }

    /// Finds a plain net touched by exactly two identical devices on their
    /// current paths (and nothing else), where merging them would not create a
    /// self-loop. Returns (net, kept device, removed device, far net).
    fn series_pair(&self) -> Option<(usize, usize, usize, usize)> {
        for n in (0..self.types.len()).filter(|&v| self.types[v] == 2) {
            let inc = self.incidence(n);
            if inc.len() != 4 || inc.iter().any(|&(_, e, _)| e != 0) {
                continue;
            }
            let mut devs: Vec<usize> = inc.iter().map(|x| x.0).collect();
            devs.dedup();
            if devs.len() != 2 {
                continue;
            }
            let (a, b) = (devs[0], devs[1]);
            if !self.same_device(a, b) || self.control_nets(a) != self.control_nets(b) {
                continue;
            }
            let far_a = self.current_nets(a).into_iter().find(|&x| x != n)?;
            let far_b = self.current_nets(b).into_iter().find(|&x| x != n)?;
            if far_a == far_b {
                continue;
            }
            return Some((n, a, b, far_b));
        }
        None
    }

    /// Repeatedly contracts identical parallel devices and identical series
    /// pairs until neither applies.
    pub fn reduce(&self) -> Self {
        let mut g = self.clone();
        loop {
            if let Some((_, b)) = g.parallel_pair() {
                g = g.without(&[b]);
                continue;
            }
            if let Some((n, a, b, far)) = g.series_pair() {
                for arc in g.arcs.iter_mut() {
                    if arc.2 == 0 && arc.0 == a && arc.1 == n {
                        arc.1 = far;
                    } else if arc.2 == 0 && arc.1 == a && arc.0 == n {
                        arc.0 = far;
                    }
                }
                g = g.without(&[n, b]);
                continue;
            }
            return g;
        }
    }

    fn arc_counts(&self) -> HashMap<(usize, usize, usize), usize> {
        let mut m = HashMap::new();
        for &a in &self.arcs {
            *m.entry(a).or_insert(0) += 1;
        }
        m
    }

    fn degree_signature(&self, v: usize) -> Vec<(usize, bool)> {
        let mut s: Vec<_> = self.incidence(v).into_iter().map(|(_, e, out)| (e, out)).collect();
        s.sort_unstable();
        s
    }

    /// Whether `self` and `other` are isomorphic as typed multigraphs
    /// (device parameters ignored).
    pub fn isomorphic(&self, other: &Plain) -> bool {
        let n = self.types.len();
        if n != other.types.len() || self.arcs.len() != other.arcs.len() {
            return false;
        }
        let (ca, cb) = refine(self, other);
        let mut hist_a: BTreeMap<usize, usize> = BTreeMap::new();
        let mut hist_b: BTreeMap<usize, usize> = BTreeMap::new();
        for v in 0..n {
            *hist_a.entry(ca[v]).or_insert(0) += 1;
            *hist_b.entry(cb[v]).or_insert(0) += 1;
        }
        if hist_a != hist_b {
            return false;
        }
        let count_a = self.arc_counts();
        let count_b = other.arc_counts();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&v| hist_a[&ca[v]]);
        let mut map = vec![usize::MAX; n];
        let mut used = vec![false; n];
        search(0, &order, &ca, &cb, &count_a, &count_b, &mut map, &mut used)
    }
}

/// Joint colour refinement of two graphs so colour ids are comparable.
fn refine(a: &Plain, b: &Plain) -> (Vec<usize>, Vec<usize>) {
    let init = |g: &Plain| -> Vec<(usize, Vec<(usize, bool)>)> {
        (0..g.types.len()).map(|v| (g.types[v], g.degree_signature(v))).collect()
    };
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut intern = |key: String| {
        let next = ids.len();
        *ids.entry(key).or_insert(next)
    };
    let mut ca: Vec<usize> = init(a).into_iter().map(|k| intern(format!("{k:?}"))).collect();
    let mut cb: Vec<usize> = init(b).into_iter().map(|k| intern(format!("{k:?}"))).collect();
    for _ in 0..a.types.len() {
        let step = |g: &Plain, c: &[usize]| -> Vec<String> {
            (0..g.types.len())
                .map(|v| {
                    let mut nb: Vec<_> = g.incidence(v).into_iter().map(|(u, e, out)| (c[u], e, out)).collect();
                    nb.sort_unstable();
                    format!("{}:{nb:?}", c[v])
                })
                .collect()
        };
        let ka = step(a, &ca);
        let kb = step(b, &cb);
        let na: Vec<usize> = ka.into_iter().map(&mut intern).collect();
        let nb: Vec<usize> = kb.into_iter().map(&mut intern).collect();
        let classes = |c: &[usize]| c.iter().collect::<std::collections::BTreeSet<_>>().len();
        let stable = classes(&na) == classes(&ca) && classes(&nb) == classes(&cb);
        ca = na;
        cb = nb;
        if stable {
            break;
        }
    }
    (ca, cb)
}

#[allow(clippy::too_many_arguments)]
fn search(
    depth: usize,
    order: &[usize],
    ca: &[usize],
    cb: &[usize],
    count_a: &HashMap<(usize, usize, usize), usize>,
    count_b: &HashMap<(usize, usize, usize), usize>,
    map: &mut [usize],
    used: &mut [bool],
) -> bool {
    if depth == order.len() {
        return true;
    }
    let v = order[depth];
    for w in 0..cb.len() {
        if used[w] || cb[w] != ca[v] {
            continue;
        }
        map[v] = w;
        let consistent = order[..=depth].iter().all(|&u| {
            (0..5).all(|e| {
                let ab = |x: usize, y: usize| count_a.get(&(x, y, e)).copied().unwrap_or(0);
                let bb = |x: usize, y: usize| count_b.get(&(x, y, e)).copied().unwrap_or(0);
                ab(v, u) == bb(w, map[u]) && ab(u, v) == bb(map[u], w)
            })
        });
        if consistent {
            used[w] = true;
            if search(depth + 1, order, ca, cb, count_a, count_b, map, used) {
                return true;
            }
            used[w] = false;
        }
    }
    map[v] = usize::MAX;
    false
}
