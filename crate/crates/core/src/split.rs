//! Subject-grouped, label-stratified partitions of a scan manifest.
//!
//! A partition is valid when every part is non-empty and each part's
//! glaucoma scan proportion is within 2 percentage points of the
//! manifest's. Problems whose per-class subset-sum tables fit a size budget
//! are solved exactly; larger ones by a class-wise greedy fill followed by
//! local search with seeded restarts.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub subject_id: String,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    /// Checks that paths are unique, labels binary and each subject's scans
    /// share one label.
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut paths = BTreeMap::new();
        let mut subjects: BTreeMap<&str, u8> = BTreeMap::new();
        for (i, r) in rows.iter().enumerate() {
            if r.label > 1 {
                return Err(Error::Data(format!("row {i}: label {} is not 0 or 1", r.label)));
            }
            if let Some(j) = paths.insert(r.path.as_str(), i) {
                return Err(Error::Data(format!("rows {j} and {i} share path {}", r.path)));
            }
            if let Some(&l) = subjects.get(r.subject_id.as_str()) {
                if l != r.label {
                    return Err(Error::Data(format!(
                        "subject {} has scans with both labels",
                        r.subject_id
                    )));
                }
            }
            subjects.insert(&r.subject_id, r.label);
        }
        Ok(DatasetManifest { rows })
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Sub-manifest of the given rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> DatasetManifest {
        DatasetManifest {
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Row indices grouped by subject, in order of first appearance.
    pub fn subjects(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut pos: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            match pos.get(r.subject_id.as_str()) {
                Some(&k) => order[k].1.push(i),
                None => {
                    pos.insert(&r.subject_id, order.len());
                    order.push((r.subject_id.clone(), vec![i]));
                }
            }
        }
        order
    }
}

/// Largest deviation allowed between a part's glaucoma proportion and the
/// global one, as `1 / STRAT_DENOM` (2 percentage points).
const STRAT_DENOM: i64 = 50;
/// Largest per-class subset-sum table for the exact search.
const EXACT_STATE_LIMIT: f64 = 4_000_000.0;
/// Largest table size times subject count for the exact search.
const EXACT_WORK_LIMIT: f64 = 200_000_000.0;
const RESTARTS: u64 = 32;

#[derive(Clone, Copy, Debug)]
struct Subject {
    scans: i64,
    label: u8,
}

struct Problem {
    subjects: Vec<Subject>,
    targets: Vec<f64>,
    total: i64,
    glaucoma: i64,
}

#[derive(Clone, Debug, PartialEq)]
struct Tally {
    scans: Vec<i64>,
    glaucoma: Vec<i64>,
}

impl Problem {
    fn tally(&self, assign: &[usize]) -> Tally {
        let k = self.targets.len();
        let mut t = Tally {
            scans: vec![0; k],
            glaucoma: vec![0; k],
        };
        for (s, &p) in self.subjects.iter().zip(assign) {
            t.scans[p] += s.scans;
            t.glaucoma[p] += s.scans * s.label as i64;
        }
        t
    }

    /// How far part `j` is outside the band, in exact integer units
    /// (`50·|g·N − G·n| − n·N`, positive when violated).
    fn excess(&self, scans: i64, glaucoma: i64) -> i64 {
        if scans == 0 {
            return self.total * self.total;
        }
        STRAT_DENOM * (glaucoma * self.total - self.glaucoma * scans).abs() - scans * self.total
    }

    fn violation(&self, t: &Tally) -> i64 {
        t.scans
            .iter()
            .zip(&t.glaucoma)
            .map(|(&n, &g)| self.excess(n, g).max(0))
            .sum()
    }

    fn size_deviation(&self, t: &Tally) -> f64 {
        t.scans
            .iter()
            .zip(&self.targets)
            .map(|(&n, &target)| (n as f64 - target).abs())
            .sum()
    }

    /// Exact search. For each class a subset-sum table over per-part scan
    /// totals records which totals are reachable; glaucoma and healthy totals
    /// are then paired part by part under the band constraint, keeping the
    /// pairing closest to the target sizes. `None` when the tables would
    /// exceed [`EXACT_STATE_LIMIT`] states.
    fn exact(&self) -> Option<Option<Vec<usize>>> {
        let k = self.targets.len();
        let classes: Vec<Vec<usize>> = [1u8, 0]
            .iter()
            .map(|&c| (0..self.subjects.len()).filter(|&i| self.subjects[i].label == c).collect())
            .collect();
        let totals: Vec<i64> = classes
            .iter()
            .map(|m| m.iter().map(|&i| self.subjects[i].scans).sum())
            .collect();
        for (&t, m) in totals.iter().zip(&classes) {
            let states = num_traits::Float::powi((t + 1) as f64, k as i32 - 1);
            if states > EXACT_STATE_LIMIT || states * m.len() as f64 > EXACT_WORK_LIMIT {
                return None;
            }
        }
        let tables: Vec<Reach> = classes
            .iter()
            .zip(&totals)
            .map(|(m, &t)| Reach::build(m.iter().map(|&i| self.subjects[i].scans), t, k))
            .collect();
        let h_total = totals[1];
        let mut best: Option<(f64, usize, usize)> = None;
        let mut hv = vec![0i64; k];
        for gs in 0..tables[0].len() {
            if !tables[0].reachable(gs) {
                continue;
            }
            let gv = tables[0].totals(gs);
            // allowed healthy totals per part given its glaucoma total
            let ranges: Option<Vec<(i64, i64)>> = gv.iter().map(|&g| self.healthy_range(g, h_total)).collect();
            let Some(ranges) = ranges else { continue };
            self.pair_search(&tables[1], &gv, &ranges, 0, 0, &mut hv, gs, &mut best);
        }
        let Some((_, gs, hs)) = best else {
            return Some(None);
        };
        let mut assign = vec![0usize; self.subjects.len()];
        for (table, (members, state)) in tables.iter().zip(classes.iter().zip([gs, hs])) {
            for (pos, part) in table.backtrack(state).into_iter().enumerate() {
                assign[members[pos]] = part;
            }
        }
        Some(Some(assign))
    }

    /// Healthy totals `h` for which a part with `g` glaucoma scans is in the
    /// band, clipped to `[0, h_total]`.
    fn healthy_range(&self, g: i64, h_total: i64) -> Option<(i64, i64)> {
        let (nn, gg) = (self.total, self.glaucoma);
        // 50·|g·N − G·(g+h)| ≤ (g+h)·N, solved for integer h
        let ok = |h: i64| {
            let n = g + h;
            n > 0 && STRAT_DENOM * (g * nn - gg * n).abs() <= n * nn
        };
        // the set of valid n is an interval; scan from its analytic center
        let center = if gg > 0 { (g * nn) as f64 / gg as f64 - g as f64 } else { 0.0 };
        let c = (num_traits::Float::round(center) as i64).clamp(0, h_total);
        let mut probe = None;
        for d in 0..=h_total.max(1) {
            for h in [c - d, c + d] {
                if (0..=h_total).contains(&h) && ok(h) {
                    probe = Some(h);
                    break;
                }
            }
            if probe.is_some() || (c - d < 0 && c + d > h_total) {
                break;
            }
        }
        let h0 = probe?;
        let (mut lo, mut hi) = (h0, h0);
        while lo > 0 && ok(lo - 1) {
            lo -= 1;
        }
        while hi < h_total && ok(hi + 1) {
            hi += 1;
        }
        Some((lo, hi))
    }

    #[allow(clippy::too_many_arguments)]
    fn pair_search(
        &self,
        healthy: &Reach,
        gv: &[i64],
        ranges: &[(i64, i64)],
        part: usize,
        used: i64,
        hv: &mut Vec<i64>,
        gs: usize,
        best: &mut Option<(f64, usize, usize)>,
    ) {
        let k = gv.len();
        let h_total = healthy.total;
        if part == k - 1 {
            let last = h_total - used;
            if last < ranges[k - 1].0 || last > ranges[k - 1].1 {
                return;
            }
            hv[k - 1] = last;
            let hs = healthy.state(hv);
            if !healthy.reachable(hs) {
                return;
            }
            let dev: f64 = gv
                .iter()
                .zip(hv.iter())
                .zip(&self.targets)
                .map(|((g, h), t)| ((g + h) as f64 - t).abs())
                .sum();
            if best.as_ref().is_none_or(|(d, _, _)| dev < *d - 1e-9) {
                *best = Some((dev, gs, hs));
            }
            return;
        }
        let (lo, hi) = ranges[part];
        for h in lo..=hi.min(h_total - used) {
            hv[part] = h;
            self.pair_search(healthy, gv, ranges, part + 1, used + h, hv, gs, best);
        }
    }

    /// Fills each class separately, largest subjects first, into the part
    /// with the largest remaining per-class deficit.
    fn greedy(&self, order: &[usize]) -> Vec<usize> {
        let k = self.targets.len();
        let mut assign = vec![0usize; self.subjects.len()];
        for class in [1u8, 0] {
            let class_total: i64 = self
                .subjects
                .iter()
                .filter(|s| s.label == class)
                .map(|s| s.scans)
                .sum();
            let share: f64 = self.targets.iter().sum::<f64>();
            let goal: Vec<f64> = self
                .targets
                .iter()
                .map(|t| t / share * class_total as f64)
                .collect();
            let mut have = vec![0i64; k];
            let mut members: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&i| self.subjects[i].label == class)
                .collect();
            members.sort_by_key(|&i| core::cmp::Reverse(self.subjects[i].scans));
            for i in members {
                let j = (0..k)
                    .max_by(|&a, &b| {
                        let da = goal[a] - have[a] as f64;
                        let db = goal[b] - have[b] as f64;
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                assign[i] = j;
                have[j] += self.subjects[i].scans;
            }
        }
        assign
    }

    fn cost(&self, t: &Tally) -> (i64, f64) {
        (self.violation(t), self.size_deviation(t))
    }

    /// First-improvement descent over single moves and same-class swaps.
    fn local_search(&self, assign: &mut [usize]) {
        let k = self.targets.len();
        let n = self.subjects.len();
        let better = |a: (i64, f64), b: (i64, f64)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1 - 1e-9);
        let mut t = self.tally(assign);
        let mut cur = self.cost(&t);
        'outer: loop {
            for i in 0..n {
                let s = self.subjects[i];
                let from = assign[i];
                for to in 0..k {
                    if to == from {
                        continue;
                    }
                    apply_move(&mut t, s, from, to);
                    let c = self.cost(&t);
                    if better(c, cur) {
                        assign[i] = to;
                        cur = c;
                        continue 'outer;
                    }
                    apply_move(&mut t, s, to, from);
                }
            }
            for i in 0..n {
                for j in i + 1..n {
                    let (a, b) = (self.subjects[i], self.subjects[j]);
                    let (pa, pb) = (assign[i], assign[j]);
                    if pa == pb || (a.label == b.label && a.scans == b.scans) {
                        continue;
                    }
                    apply_move(&mut t, a, pa, pb);
                    apply_move(&mut t, b, pb, pa);
                    let c = self.cost(&t);
                    if better(c, cur) {
                        assign.swap(i, j);
                        cur = c;
                        continue 'outer;
                    }
                    apply_move(&mut t, a, pb, pa);
                    apply_move(&mut t, b, pa, pb);
                }
            }
            return;
        }
    }

    fn solve(&self, seed: u64) -> Option<Vec<usize>> {
        let (n, k) = (self.subjects.len(), self.targets.len());
        if n < k {
            return None;
        }
        if let Some(found) = self.exact() {
            return found;
        }
        let mut best: Option<((i64, f64), Vec<usize>)> = None;
        for r in 0..RESTARTS {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seed::rng(seed, &[0x5b11, r]));
            let mut assign = self.greedy(&order);
            self.local_search(&mut assign);
            let c = self.cost(&self.tally(&assign));
            if best.as_ref().is_none_or(|(b, _)| c.0 < b.0 || (c.0 == b.0 && c.1 < b.1)) {
                best = Some((c, assign));
            }
        }
        best.filter(|(c, _)| c.0 == 0).map(|(_, a)| a)
    }
}

/// Reachable per-part scan totals of one class. A state encodes the totals
/// of the first `k − 1` parts in base `total + 1`; the last part takes the
/// rest. `first[s]` is the first subject after which state `s` is
/// reachable, with the part it joined.
struct Reach {
    total: i64,
    parts: usize,
    sizes: Vec<i64>,
    first: Vec<(u32, u8)>,
}

const UNREACHED: u32 = u32::MAX;
/// Marker for the empty assignment, reachable before any subject.
const START: u32 = u32::MAX - 1;

impl Reach {
    fn build(sizes: impl Iterator<Item = i64>, total: i64, parts: usize) -> Self {
        let sizes: Vec<i64> = sizes.collect();
        let len = ((total + 1) as usize).pow(parts as u32 - 1);
        let mut first = vec![(UNREACHED, 0u8); len];
        first[0] = (START, 0);
        let base = (total + 1) as usize;
        for (i, &sz) in sizes.iter().enumerate() {
            let sz = sz as usize;
            // placing subject i in the last part keeps every state, so only
            // the other parts add states; states first reached at i are
            // skipped so i is used once
            for s in (0..len).rev() {
                let f = first[s].0;
                if f == UNREACHED || (f != START && f as usize >= i) {
                    continue;
                }
                let mut stride = 1usize;
                for p in 0..parts - 1 {
                    let digit = (s / stride) % base;
                    if digit + sz < base {
                        let t = s + sz * stride;
                        if first[t].0 == UNREACHED {
                            first[t] = (i as u32, p as u8);
                        }
                    }
                    stride *= base;
                }
            }
        }
        Reach {
            total,
            parts,
            sizes,
            first,
        }
    }

    fn len(&self) -> usize {
        self.first.len()
    }

    fn reachable(&self, s: usize) -> bool {
        self.first[s].0 != UNREACHED
    }

    /// Per-part totals of state `s`, last part included.
    fn totals(&self, s: usize) -> Vec<i64> {
        let base = (self.total + 1) as usize;
        let mut v = Vec::with_capacity(self.parts);
        let mut rest = s;
        for _ in 0..self.parts - 1 {
            v.push((rest % base) as i64);
            rest /= base;
        }
        let used: i64 = v.iter().sum();
        v.push(self.total - used);
        v
    }

    fn state(&self, totals: &[i64]) -> usize {
        let base = (self.total + 1) as usize;
        totals[..self.parts - 1]
            .iter()
            .rev()
            .fold(0usize, |acc, &t| acc * base + t as usize)
    }

    /// Part of each subject for reachable state `s`.
    fn backtrack(&self, mut s: usize) -> Vec<usize> {
        let last = self.parts - 1;
        let mut assign = vec![last; self.sizes.len()];
        let base = (self.total + 1) as usize;
        while self.first[s].0 != START {
            let (i, p) = self.first[s];
            let (i, p) = (i as usize, p as usize);
            assign[i] = p;
            s -= self.sizes[i] as usize * base.pow(p as u32);
        }
        assign
    }
}

fn apply_move(t: &mut Tally, s: Subject, from: usize, to: usize) {
    t.scans[from] -= s.scans;
    t.glaucoma[from] -= s.scans * s.label as i64;
    t.scans[to] += s.scans;
    t.glaucoma[to] += s.scans * s.label as i64;
}

/// Whether a part with `scans` scans of which `glaucoma` are glaucomatous
/// is within ±2 percentage points of `global_glaucoma / global_scans`.
pub fn within_band(scans: usize, glaucoma: usize, global_scans: usize, global_glaucoma: usize) -> bool {
    let (n, g, nn, gg) = (scans as i64, glaucoma as i64, global_scans as i64, global_glaucoma as i64);
    n > 0 && STRAT_DENOM * (g * nn - gg * n).abs() <= n * nn
}

/// Row indices of each part. Subjects are never split across parts.
pub fn split_indices(manifest: &DatasetManifest, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.len() < 2 {
        return Err(Error::Split("need at least two parts".into()));
    }
    if fractions.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
        return Err(Error::Split(format!("fractions must be positive, got {fractions:?}")));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("fractions sum to {sum}, not 1")));
    }
    let groups = manifest.subjects();
    let subjects: Vec<Subject> = groups
        .iter()
        .map(|(_, rows)| Subject {
            scans: rows.len() as i64,
            label: manifest.rows[rows[0]].label,
        })
        .collect();
    let total = manifest.len() as i64;
    let glaucoma = manifest.rows.iter().filter(|r| r.label == 1).count() as i64;
    if glaucoma == 0 || glaucoma == total {
        return Err(Error::Split("both classes must be present".into()));
    }
    // seeded subject order so ties resolve differently per seed
    let mut perm: Vec<usize> = (0..subjects.len()).collect();
    perm.shuffle(&mut seed::rng(seed, &[0x5b1d]));
    let problem = Problem {
        subjects: perm.iter().map(|&i| subjects[i]).collect(),
        targets: fractions.iter().map(|f| f * total as f64).collect(),
        total,
        glaucoma,
    };
    let assign = problem.solve(seed).ok_or_else(|| {
        Error::Split(format!(
            "cannot place {} subjects ({} scans, {} glaucoma) into {} parts within ±2 pp",
            subjects.len(),
            total,
            glaucoma,
            fractions.len()
        ))
    })?;
    let mut parts = vec![Vec::new(); fractions.len()];
    for (&p, &s) in assign.iter().zip(&perm) {
        parts[p].extend_from_slice(&groups[s].1);
    }
    for part in &mut parts {
        part.sort_unstable();
    }
    Ok(parts)
}

/// Splits by subject into parts of the given scan fractions, e.g.
/// `[0.70, 0.15, 0.15]` for train/validation/test.
pub fn split_grouped(manifest: &DatasetManifest, fractions: &[f64], seed: u64) -> Result<Vec<DatasetManifest>> {
    Ok(split_indices(manifest, fractions, seed)?
        .iter()
        .map(|idx| manifest.select(idx))
        .collect())
}

/// `k` grouped, stratified folds of equal target size, as row indices.
pub fn fold_indices(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Split(format!("need k ≥ 2 folds, got {k}")));
    }
    let mut fractions = vec![1.0 / k as f64; k];
    // make the sum exactly representable as 1
    let rest: f64 = fractions[1..].iter().sum();
    fractions[0] = 1.0 - rest;
    split_indices(manifest, &fractions, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn manifest(spec: &[(usize, u8)]) -> DatasetManifest {
        let mut rows = Vec::new();
        for (s, &(scans, label)) in spec.iter().enumerate() {
            for k in 0..scans {
                rows.push(ManifestRow {
                    path: format!("s{s}_{k}.onhv"),
                    subject_id: format!("S{s}"),
                    label,
                });
            }
        }
        DatasetManifest::new(rows).unwrap()
    }

    #[test]
    fn manifest_validation() {
        let row = |p: &str, s: &str, l| ManifestRow {
            path: p.into(),
            subject_id: s.into(),
            label: l,
        };
        assert!(DatasetManifest::new(vec![row("a", "1", 0), row("a", "2", 0)]).is_err());
        assert!(DatasetManifest::new(vec![row("a", "1", 0), row("b", "1", 1)]).is_err());
        assert!(DatasetManifest::new(vec![row("a", "1", 2)]).is_err());
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let m = manifest(&[(1, 0), (1, 1), (1, 0)]);
        assert!(matches!(split_indices(&m, &[0.7, 0.2, 0.2], 0), Err(Error::Split(_))));
        assert!(matches!(split_indices(&m, &[1.0], 0), Err(Error::Split(_))));
    }

    #[test]
    fn single_subject_cannot_be_split() {
        let m = manifest(&[(2, 1)]);
        assert!(matches!(split_indices(&m, &[0.7, 0.15, 0.15], 0), Err(Error::Split(_))));
    }

    #[test]
    fn two_scan_subjects_stay_together() {
        let spec: Vec<(usize, u8)> = (0..60).map(|i| (1 + i % 2, (i % 5 == 0) as u8)).collect();
        let m = manifest(&spec);
        let parts = split_indices(&m, &[0.7, 0.15, 0.15], 3).unwrap();
        let mut owner = BTreeMap::new();
        for (p, idx) in parts.iter().enumerate() {
            for &i in idx {
                let prev = owner.insert(m.rows()[i].subject_id.clone(), p);
                assert!(prev.is_none_or(|q| q == p));
            }
        }
    }

    #[test]
    fn band_is_inclusive() {
        // 30% globally; 28/100 is exactly 2 pp away
        assert!(within_band(100, 28, 1000, 300));
        assert!(!within_band(100, 27, 1000, 300));
        assert!(!within_band(0, 0, 1000, 300));
    }
}
