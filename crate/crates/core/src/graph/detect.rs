//! Repeated-substructure detection.
//!
//! Regions are seeded from weight tensors with fan-out > 1 and grown
//! greedily along dataflow in lockstep across all prospective copies: a
//! node tuple is admitted only when every copy offers a structurally
//! identical candidate (same op kind, same attributes, weight inputs
//! referencing the very same weight tensors). Tuples that fail for a
//! strict subset of copies are recorded and the growth is retried on the
//! agreeing subset, which handles a copy whose weight was forked away from
//! the shared tensor. Candidate outcomes are ranked by (region size, copy
//! count) and the winner is verified with Weisfeiler-Leman refinement over
//! op-kind/attribute colors.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use sha2::{Digest, Sha256};

use super::model::Graph;
use super::GraphError;

/// One detected copy of the repeated block.
#[derive(Debug, Clone)]
pub struct CopyRegion {
    /// Node ids in canonical topological order.
    pub nodes: Vec<String>,
    /// External tensors consumed, in an order aligned across regions:
    /// index j refers to the same structural port in every region.
    pub boundary_inputs: Vec<String>,
    /// Tensors produced here and consumed outside (or graph outputs).
    pub outputs: Vec<String>,
}

/// Result of [`detect_repeats`].
#[derive(Debug, Clone)]
pub struct RepeatDetection {
    pub regions: Vec<CopyRegion>,
    /// Weights referenced from inside the regions (shared across copies).
    pub shared_weights: Vec<String>,
    /// Human-readable notes, e.g. structurally matching nodes excluded for
    /// not sharing weights.
    pub diagnostics: Vec<String>,
}

struct Ctx<'g> {
    g: &'g Graph,
    topo_pos: HashMap<usize, usize>,
    producer: HashMap<&'g str, usize>,
    /// tensor -> (consumer node index, input port), sorted by (id, port)
    consumers: HashMap<&'g str, Vec<(usize, usize)>>,
}

impl<'g> Ctx<'g> {
    fn new(g: &'g Graph) -> Result<Self, GraphError> {
        let order = g.canonical_topo_order()?;
        let mut topo_pos = HashMap::new();
        for (pos, idx) in order.iter().enumerate() {
            topo_pos.insert(*idx, pos);
        }
        let producer: HashMap<&str, usize> = g
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.output(), i))
            .collect();
        let mut consumers: HashMap<&str, Vec<(usize, usize)>> = HashMap::new();
        for (i, n) in g.nodes.iter().enumerate() {
            for (port, inp) in n.inputs.iter().enumerate() {
                consumers.entry(inp.as_str()).or_default().push((i, port));
            }
        }
        for list in consumers.values_mut() {
            list.sort_by(|a, b| {
                let ida = g.nodes[a.0].id.as_str();
                let idb = g.nodes[b.0].id.as_str();
                (ida, a.1).cmp(&(idb, b.1))
            });
        }
        Ok(Self {
            g,
            topo_pos,
            producer,
            consumers,
        })
    }

    fn sig(&self, node: usize) -> (u64, u64) {
        let n = &self.g.nodes[node];
        let mut h = Sha256::new();
        h.update(n.op.kind().as_bytes());
        let kind = u64::from_le_bytes(h.finalize()[..8].try_into().unwrap());
        (kind, n.op.attr_hash())
    }
}

#[derive(Debug)]
struct GrowOutcome {
    /// regions[r] holds node indices, position-aligned across regions
    regions: Vec<Vec<usize>>,
    /// boundary[e][r]: external tensor consumed by region r at event e
    boundary: Vec<Vec<String>>,
    shared_weights: BTreeSet<String>,
    /// region-index subsets that agreed with each other when a tuple failed
    mismatch_subsets: Vec<Vec<usize>>,
    notes: Vec<String>,
}

fn grow(ctx: &Ctx<'_>, seeds: &[usize]) -> GrowOutcome {
    let k = seeds.len();
    let mut regions: Vec<Vec<usize>> = seeds.iter().map(|&s| vec![s]).collect();
    let mut assigned: HashMap<usize, (usize, usize)> = HashMap::new(); // node -> (region, pos)
    for (r, &s) in seeds.iter().enumerate() {
        assigned.insert(s, (r, 0));
    }
    let mut boundary: Vec<Vec<String>> = Vec::new();
    let mut boundary_seen: HashSet<Vec<String>> = HashSet::new();
    let mut shared_weights = BTreeSet::new();
    let mut mismatch_subsets: Vec<Vec<usize>> = Vec::new();
    let mut notes = Vec::new();
    let mut queue: VecDeque<usize> = VecDeque::from([0usize]);

    let record_boundary =
        |boundary: &mut Vec<Vec<String>>, seen: &mut HashSet<Vec<String>>, tensors: Vec<String>| {
            if seen.insert(tensors.clone()) {
                boundary.push(tensors);
            }
        };
    let record_mismatch = |subsets: &mut Vec<Vec<usize>>,
                           notes: &mut Vec<String>,
                           classes: Vec<Vec<usize>>,
                           what: String| {
        for class in classes {
            if class.len() >= 2 && class.len() < k && !subsets.contains(&class) {
                subsets.push(class);
            }
        }
        notes.push(what);
    };

    // lockstep candidate admission
    let try_add = |ctx: &Ctx<'_>,
                   regions: &mut Vec<Vec<usize>>,
                   assigned: &mut HashMap<usize, (usize, usize)>,
                   queue: &mut VecDeque<usize>,
                   tuple: &[usize]|
     -> Result<bool, Vec<Vec<usize>>> {
        // already admitted together at the same position?
        let existing: Vec<Option<(usize, usize)>> =
            tuple.iter().map(|n| assigned.get(n).copied()).collect();
        if existing.iter().all(|e| e.is_some()) {
            let pos0 = existing[0].unwrap().1;
            if existing
                .iter()
                .enumerate()
                .all(|(r, e)| e.unwrap() == (r, pos0))
            {
                return Ok(false);
            }
            return Err(vec![]);
        }
        if existing.iter().any(|e| e.is_some()) {
            return Err(vec![]);
        }
        // pairwise distinct
        let set: HashSet<usize> = tuple.iter().copied().collect();
        if set.len() != tuple.len() {
            return Err(vec![]);
        }
        // identical signature
        let sig0 = ctx.sig(tuple[0]);
        let arity0 = ctx.g.nodes[tuple[0]].inputs.len();
        for &n in &tuple[1..] {
            if ctx.sig(n) != sig0 || ctx.g.nodes[n].inputs.len() != arity0 {
                // group agreeing members for subset retry
                let mut classes: BTreeMap<(u64, u64, usize), Vec<usize>> = BTreeMap::new();
                for (r, &m) in tuple.iter().enumerate() {
                    let s = ctx.sig(m);
                    classes
                        .entry((s.0, s.1, ctx.g.nodes[m].inputs.len()))
                        .or_default()
                        .push(r);
                }
                return Err(classes.into_values().collect());
            }
        }
        // weight ports must reference identical weights
        for port in 0..arity0 {
            let names: Vec<&str> = tuple
                .iter()
                .map(|&n| ctx.g.nodes[n].inputs[port].as_str())
                .collect();
            let weightish: Vec<bool> = names.iter().map(|n| ctx.g.is_weight(n)).collect();
            if weightish.iter().any(|&w| w)
                && (!weightish.iter().all(|&w| w) || names.iter().any(|&n| n != names[0]))
            {
                let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
                for (r, &name) in names.iter().enumerate() {
                    classes.entry(name).or_default().push(r);
                }
                return Err(classes.into_values().collect());
            }
        }
        let pos = regions[0].len();
        for (r, &n) in tuple.iter().enumerate() {
            regions[r].push(n);
            assigned.insert(n, (r, pos));
        }
        queue.push_back(pos);
        Ok(true)
    };

    while let Some(pos) = queue.pop_front() {
        let nodes_at: Vec<usize> = regions.iter().map(|r| r[pos]).collect();
        let arity = ctx.g.nodes[nodes_at[0]].inputs.len();

        // upstream: producers of each input port
        for port in 0..arity {
            let names: Vec<String> = nodes_at
                .iter()
                .map(|&n| ctx.g.nodes[n].inputs[port].clone())
                .collect();
            if names.iter().all(|n| n == &names[0]) {
                if ctx.g.is_weight(&names[0]) {
                    shared_weights.insert(names[0].clone());
                } else {
                    // same tensor for every copy: a shared outer boundary
                    record_boundary(&mut boundary, &mut boundary_seen, names);
                }
                continue;
            }
            let weightish: Vec<bool> = names.iter().map(|n| ctx.g.is_weight(n)).collect();
            if weightish.iter().all(|&w| w) {
                // differing weights: fork of a shared tensor
                let mut classes: BTreeMap<&String, Vec<usize>> = BTreeMap::new();
                for (r, name) in names.iter().enumerate() {
                    classes.entry(name).or_default().push(r);
                }
                record_mismatch(
                    &mut mismatch_subsets,
                    &mut notes,
                    classes.values().cloned().collect(),
                    format!(
                        "weight fork at node '{}' port {port}: {:?}",
                        ctx.g.nodes[nodes_at[0]].id, names
                    ),
                );
                record_boundary(&mut boundary, &mut boundary_seen, names);
                continue;
            }
            let producers: Vec<Option<usize>> = names
                .iter()
                .map(|n| ctx.producer.get(n.as_str()).copied())
                .collect();
            if producers.iter().all(|p| p.is_some()) {
                let tuple: Vec<usize> = producers.into_iter().map(|p| p.unwrap()).collect();
                match try_add(ctx, &mut regions, &mut assigned, &mut queue, &tuple) {
                    Ok(_) => continue,
                    Err(classes) => {
                        if !classes.is_empty() {
                            record_mismatch(
                                &mut mismatch_subsets,
                                &mut notes,
                                classes,
                                format!(
                                    "producer mismatch at node '{}' port {port}",
                                    ctx.g.nodes[nodes_at[0]].id
                                ),
                            );
                        }
                        record_boundary(&mut boundary, &mut boundary_seen, names);
                    }
                }
            } else {
                // mixed graph-input / node-output: per-copy dynamic boundary
                record_boundary(&mut boundary, &mut boundary_seen, names);
            }
        }

        // downstream: consumers of the aligned outputs, grouped by class
        let outs: Vec<&str> = nodes_at.iter().map(|&n| ctx.g.nodes[n].output()).collect();
        let mut classes: BTreeMap<(u64, u64, usize), Vec<Vec<usize>>> = BTreeMap::new();
        for (r, out) in outs.iter().enumerate() {
            if let Some(list) = ctx.consumers.get(out) {
                for &(c, port) in list {
                    let s = ctx.sig(c);
                    let entry = classes
                        .entry((s.0, s.1, port))
                        .or_insert_with(|| vec![Vec::new(); k]);
                    entry[r].push(c);
                }
            }
        }
        for (class, members) in classes {
            let counts: Vec<usize> = members.iter().map(|m| m.len()).collect();
            if counts.iter().all(|&c| c == 1) {
                let tuple: Vec<usize> = members.iter().map(|m| m[0]).collect();
                let _ = try_add(ctx, &mut regions, &mut assigned, &mut queue, &tuple);
            } else if counts.contains(&1) {
                // present for a strict subset: candidate for a retry
                let subset: Vec<usize> = counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c == 1)
                    .map(|(r, _)| r)
                    .collect();
                record_mismatch(
                    &mut mismatch_subsets,
                    &mut notes,
                    vec![subset],
                    format!("consumer class {class:?} present for a subset of copies"),
                );
            }
        }
    }

    GrowOutcome {
        regions,
        boundary,
        shared_weights,
        mismatch_subsets,
        notes,
    }
}

/// Regions must not read each other's outputs directly; the repeated block
/// of an unrolled loop is always fed through scaffolding.
fn has_inter_region_edge(ctx: &Ctx<'_>, regions: &[Vec<usize>]) -> bool {
    let mut owner: HashMap<usize, usize> = HashMap::new();
    for (r, region) in regions.iter().enumerate() {
        for &n in region {
            owner.insert(n, r);
        }
    }
    for (r, region) in regions.iter().enumerate() {
        for &n in region {
            for inp in &ctx.g.nodes[n].inputs {
                if let Some(&p) = ctx.producer.get(inp.as_str()) {
                    if let Some(&o) = owner.get(&p) {
                        if o != r {
                            return true;
                        }
                    }
                }
            }
        }
    }
    false
}

/// WL refinement hash of one region; equal hashes across regions verify
/// the pairwise isomorphism of the attributed subgraphs.
fn wl_region_hash(ctx: &Ctx<'_>, region: &[usize]) -> u64 {
    let members: HashMap<usize, usize> = region.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut colors: Vec<u64> = region
        .iter()
        .map(|&n| {
            let (kind, attr) = ctx.sig(n);
            let mut h = Sha256::new();
            h.update(kind.to_le_bytes());
            h.update(attr.to_le_bytes());
            // weight names are part of the color (shared across copies);
            // non-weight external ports get a positional marker
            for (port, inp) in ctx.g.nodes[n].inputs.iter().enumerate() {
                h.update((port as u64).to_le_bytes());
                if ctx.g.is_weight(inp) {
                    h.update(inp.as_bytes());
                } else if ctx
                    .producer
                    .get(inp.as_str())
                    .map(|p| members.contains_key(p))
                    .unwrap_or(false)
                {
                    h.update(b"internal");
                } else {
                    h.update(b"external");
                }
            }
            u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
        })
        .collect();
    for _ in 0..region.len() {
        let mut next = Vec::with_capacity(region.len());
        for (i, &n) in region.iter().enumerate() {
            let mut in_colors: Vec<(usize, u64)> = Vec::new();
            for (port, inp) in ctx.g.nodes[n].inputs.iter().enumerate() {
                if let Some(&p) = ctx.producer.get(inp.as_str()) {
                    if let Some(&j) = members.get(&p) {
                        in_colors.push((port, colors[j]));
                    }
                }
            }
            in_colors.sort_unstable();
            let mut out_colors: Vec<(usize, u64)> = Vec::new();
            if let Some(list) = ctx.consumers.get(ctx.g.nodes[n].output()) {
                for &(c, port) in list {
                    if let Some(&j) = members.get(&c) {
                        out_colors.push((port, colors[j]));
                    }
                }
            }
            out_colors.sort_unstable();
            let mut h = Sha256::new();
            h.update(colors[i].to_le_bytes());
            for (p, c) in &in_colors {
                h.update((*p as u64).to_le_bytes());
                h.update(c.to_le_bytes());
            }
            h.update(b"|");
            for (p, c) in &out_colors {
                h.update((*p as u64).to_le_bytes());
                h.update(c.to_le_bytes());
            }
            next.push(u64::from_le_bytes(h.finalize()[..8].try_into().unwrap()));
        }
        if next == colors {
            break;
        }
        colors = next;
    }
    let mut sorted = colors;
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for c in sorted {
        h.update(c.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Find maximal weight-sharing isomorphic regions. Zero regions is a valid
/// outcome (no sharing), not an error.
pub fn detect_repeats(g: &Graph) -> Result<RepeatDetection, GraphError> {
    let ctx = Ctx::new(g)?;

    // seed groups: consumers of a fanned-out weight, bucketed by signature
    // and port, one prospective copy each
    let mut seed_groups: Vec<(String, Vec<usize>)> = Vec::new();
    for wname in g.weights.keys() {
        if let Some(list) = ctx.consumers.get(wname.as_str()) {
            if list.len() < 2 {
                continue;
            }
            let mut buckets: BTreeMap<(u64, u64, usize), Vec<usize>> = BTreeMap::new();
            for &(n, port) in list {
                let s = ctx.sig(n);
                buckets.entry((s.0, s.1, port)).or_default().push(n);
            }
            for ((_, _, port), members) in buckets {
                if members.len() >= 2 {
                    seed_groups.push((format!("{wname}#{port}"), members));
                }
            }
        }
    }
    if seed_groups.is_empty() {
        return Ok(RepeatDetection {
            regions: Vec::new(),
            shared_weights: Vec::new(),
            diagnostics: vec!["no weight tensor has fan-out > 1".into()],
        });
    }
    seed_groups.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.0.cmp(&b.0)));

    // grow every seed group, retrying recorded agreeing subsets
    let mut pending: VecDeque<Vec<usize>> = seed_groups.iter().map(|(_, m)| m.clone()).collect();
    let mut tried: HashSet<Vec<usize>> = HashSet::new();
    let mut best: Option<GrowOutcome> = None;
    let mut all_notes: Vec<String> = Vec::new();
    let mut rounds = 0;
    while let Some(seeds) = pending.pop_front() {
        rounds += 1;
        if rounds > 256 {
            break;
        }
        let mut key = seeds.clone();
        key.sort_unstable();
        if !tried.insert(key) {
            continue;
        }
        let outcome = grow(&ctx, &seeds);
        all_notes.extend(outcome.notes.iter().cloned());
        for subset in &outcome.mismatch_subsets {
            let sub_seeds: Vec<usize> = subset.iter().map(|&r| seeds[r]).collect();
            if sub_seeds.len() >= 2 {
                pending.push_back(sub_seeds);
            }
        }
        if outcome.regions.len() < 2 || has_inter_region_edge(&ctx, &outcome.regions) {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => {
                let cand = (outcome.regions[0].len(), outcome.regions.len());
                let cur = (b.regions[0].len(), b.regions.len());
                cand > cur
            }
        };
        if better {
            best = Some(outcome);
        }
    }

    let Some(winner) = best else {
        return Ok(RepeatDetection {
            regions: Vec::new(),
            shared_weights: Vec::new(),
            diagnostics: all_notes,
        });
    };

    // verify pairwise isomorphism via canonical labeling
    let hashes: Vec<u64> = winner
        .regions
        .iter()
        .map(|r| wl_region_hash(&ctx, r))
        .collect();
    if hashes.iter().any(|&h| h != hashes[0]) {
        return Err(GraphError::DetectionInconsistent(
            "grown regions are not canonically isomorphic".into(),
        ));
    }

    // order regions topologically: the last node of each copy depends on
    // the whole chain before it, so max position gives the unroll order
    let mut order: Vec<usize> = (0..winner.regions.len()).collect();
    order.sort_by_key(|&r| {
        winner.regions[r]
            .iter()
            .map(|n| ctx.topo_pos[n])
            .max()
            .unwrap()
    });

    let in_any: HashSet<usize> = winner.regions.iter().flatten().copied().collect();
    let mut regions = Vec::with_capacity(winner.regions.len());
    for &r in &order {
        let mut nodes: Vec<usize> = winner.regions[r].clone();
        nodes.sort_by_key(|n| ctx.topo_pos[n]);
        let node_set: HashSet<usize> = nodes.iter().copied().collect();
        let mut outputs = Vec::new();
        for &n in &nodes {
            let out = g.nodes[n].output();
            let consumed_outside = ctx
                .consumers
                .get(out)
                .map(|l| l.iter().any(|(c, _)| !node_set.contains(c)))
                .unwrap_or(false);
            if consumed_outside || g.outputs.iter().any(|o| o == out) {
                outputs.push(out.to_string());
            }
        }
        regions.push(CopyRegion {
            nodes: nodes.iter().map(|&n| g.nodes[n].id.clone()).collect(),
            boundary_inputs: winner.boundary.iter().map(|e| e[r].clone()).collect(),
            outputs,
        });
    }

    // diagnostics: weights outside the regions that look like forked clones
    // of a shared weight (same shape, same consuming op kind and port)
    let mut diagnostics = Vec::new();
    for (wname, payload) in &g.weights {
        if winner.shared_weights.contains(wname) {
            continue;
        }
        let Some(consumers) = ctx.consumers.get(wname.as_str()) else {
            continue;
        };
        if consumers.iter().any(|(n, _)| in_any.contains(n)) {
            continue;
        }
        for shared in &winner.shared_weights {
            if g.weights[shared].shape != payload.shape {
                continue;
            }
            let shared_use: HashSet<(u64, usize)> = ctx.consumers[shared.as_str()]
                .iter()
                .map(|&(n, port)| (ctx.sig(n).0, port))
                .collect();
            let matches: Vec<String> = consumers
                .iter()
                .filter(|&&(n, port)| shared_use.contains(&(ctx.sig(n).0, port)))
                .map(|&(n, _)| g.nodes[n].id.clone())
                .collect();
            if !matches.is_empty() {
                diagnostics.push(format!(
                    "weight '{wname}' matches shared weight '{shared}' in shape and usage but is \
                     consumed outside all detected regions (nodes: {})",
                    matches.join(", ")
                ));
            }
        }
    }

    Ok(RepeatDetection {
        regions,
        shared_weights: winner.shared_weights.into_iter().collect(),
        diagnostics,
    })
}
