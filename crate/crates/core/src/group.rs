//! Enumerated finite permutation groups.
//!
//! Groups are small (at most `6! = 720` elements), so everything is stored
//! explicitly: the element list in lexicographic order of one-line notation,
//! a full Cayley table and an inverse table. Subgroups are sorted index sets
//! into that element list.
//!
//! Composition is right-to-left: `(g·h)(i) = g(h(i))`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest degree accepted by [`symmetric_group`].
pub const MAX_DEGREE: usize = 6;
/// Largest group order accepted by [`subgroup_classes`].
pub const MAX_ENUMERATION_ORDER: usize = 120;

/// Config form of a group, e.g. `{"type": "symmetric", "n": 3}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum GroupSpec {
    Symmetric { n: usize },
}

impl GroupSpec {
    pub fn build(&self) -> Result<FiniteGroup> {
        match self {
            GroupSpec::Symmetric { n } => symmetric_group(*n),
        }
    }
}

/// A permutation of `{0..n-1}` in one-line notation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Perm(Vec<usize>);

impl Perm {
    pub fn new(image: Vec<usize>) -> Result<Self> {
        let n = image.len();
        let mut seen = vec![false; n];
        for &i in &image {
            if i >= n || seen[i] {
                return Err(Error::invariant(format!("{image:?} is not a bijection")));
            }
            seen[i] = true;
        }
        Ok(Perm(image))
    }

    pub fn identity(n: usize) -> Self {
        Perm((0..n).collect())
    }

    pub fn degree(&self) -> usize {
        self.0.len()
    }

    pub fn image(&self) -> &[usize] {
        &self.0
    }

    pub fn apply(&self, i: usize) -> usize {
        self.0[i]
    }

    /// `self ∘ other`, i.e. apply `other` first.
    pub fn compose(&self, other: &Perm) -> Perm {
        Perm(other.0.iter().map(|&i| self.0[i]).collect())
    }

    pub fn inverse(&self) -> Perm {
        let mut inv = vec![0; self.0.len()];
        for (i, &j) in self.0.iter().enumerate() {
            inv[j] = i;
        }
        Perm(inv)
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &j)| i == j)
    }

    /// Number of fixed points.
    pub fn fixed_points(&self) -> usize {
        self.0.iter().enumerate().filter(|(i, &j)| *i == j).count()
    }
}

impl fmt::Display for Perm {
    /// Cycle notation, e.g. `(0 1)(2 3)`; the identity prints as `()`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut seen = vec![false; self.0.len()];
        let mut wrote = false;
        for start in 0..self.0.len() {
            if seen[start] || self.0[start] == start {
                continue;
            }
            write!(f, "(")?;
            let mut i = start;
            let mut first = true;
            while !seen[i] {
                seen[i] = true;
                if !first {
                    write!(f, " ")?;
                }
                write!(f, "{i}")?;
                first = false;
                i = self.0[i];
            }
            write!(f, ")")?;
            wrote = true;
        }
        if !wrote {
            write!(f, "()")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FiniteGroup {
    degree: usize,
    elements: Vec<Perm>,
    cayley: Vec<Vec<usize>>,
    inv: Vec<usize>,
    identity: usize,
}

impl PartialEq for FiniteGroup {
    fn eq(&self, other: &Self) -> bool {
        self.degree == other.degree && self.elements == other.elements
    }
}

impl FiniteGroup {
    /// Builds a group from an explicit element list, which is sorted into
    /// canonical order. Fails unless the list is closed under composition.
    pub fn from_elements(degree: usize, mut elements: Vec<Perm>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::config("a group needs at least one element"));
        }
        if elements.iter().any(|p| p.degree() != degree) {
            return Err(Error::config("all elements must share one degree"));
        }
        elements.sort();
        elements.dedup();
        let index: HashMap<&Perm, usize> = elements.iter().enumerate().map(|(i, p)| (p, i)).collect();
        let identity = *index
            .get(&Perm::identity(degree))
            .ok_or_else(|| Error::invariant("element list lacks the identity"))?;

        let n = elements.len();
        let mut cayley = vec![vec![0; n]; n];
        for (a, ga) in elements.iter().enumerate() {
            for (b, gb) in elements.iter().enumerate() {
                let prod = ga.compose(gb);
                cayley[a][b] = *index
                    .get(&prod)
                    .ok_or_else(|| Error::invariant("element list is not closed under composition"))?;
            }
        }
        let mut inv = vec![usize::MAX; n];
        for a in 0..n {
            inv[a] = (0..n)
                .find(|&b| cayley[a][b] == identity)
                .ok_or_else(|| Error::invariant("element without inverse"))?;
        }
        Ok(Self {
            degree,
            elements,
            cayley,
            inv,
            identity,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[Perm] {
        &self.elements
    }

    pub fn element(&self, i: usize) -> &Perm {
        &self.elements[i]
    }

    pub fn identity(&self) -> usize {
        self.identity
    }

    pub fn mul(&self, a: usize, b: usize) -> usize {
        self.cayley[a][b]
    }

    pub fn inv(&self, a: usize) -> usize {
        self.inv[a]
    }

    pub fn index_of(&self, p: &Perm) -> Option<usize> {
        self.elements.binary_search(p).ok()
    }

    /// `g·s·g⁻¹`
    pub fn conjugate(&self, g: usize, s: usize) -> usize {
        self.mul(self.mul(g, s), self.inv(g))
    }

    /// Conjugacy classes of elements, each sorted, ordered by least member.
    pub fn element_classes(&self) -> Vec<Vec<usize>> {
        let mut assigned = vec![false; self.order()];
        let mut classes = Vec::new();
        for a in 0..self.order() {
            if assigned[a] {
                continue;
            }
            let mut class: Vec<usize> = (0..self.order()).map(|g| self.conjugate(g, a)).collect();
            class.sort_unstable();
            class.dedup();
            for &c in &class {
                assigned[c] = true;
            }
            classes.push(class);
        }
        classes
    }

    pub fn trivial_subgroup(&self) -> Subgroup {
        Subgroup {
            members: vec![self.identity],
        }
    }

    pub fn whole(&self) -> Subgroup {
        Subgroup {
            members: (0..self.order()).collect(),
        }
    }

    /// Checks the group axioms against the stored tables.
    pub fn verify(&self) -> Result<()> {
        let n = self.order();
        for a in 0..n {
            if self.mul(a, self.identity) != a || self.mul(self.identity, a) != a {
                return Err(Error::invariant("identity is not two-sided"));
            }
            if self.mul(a, self.inv(a)) != self.identity || self.mul(self.inv(a), a) != self.identity {
                return Err(Error::invariant("inverse law fails"));
            }
            for b in 0..n {
                if self.inv(self.mul(a, b)) != self.mul(self.inv(b), self.inv(a)) {
                    return Err(Error::invariant("inv(ab) != inv(b)inv(a)"));
                }
            }
        }
        Ok(())
    }
}

/// The symmetric group on `n` points, elements in lexicographic order.
pub fn symmetric_group(n: usize) -> Result<FiniteGroup> {
    if !(1..=MAX_DEGREE).contains(&n) {
        return Err(Error::config(format!(
            "symmetric group degree must be in 1..={MAX_DEGREE}, got {n}"
        )));
    }
    let mut elements = Vec::new();
    let mut current: Vec<usize> = (0..n).collect();
    loop {
        elements.push(Perm(current.clone()));
        if !next_permutation(&mut current) {
            break;
        }
    }
    let g = FiniteGroup::from_elements(n, elements)?;
    g.verify()?;
    Ok(g)
}

fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// A subgroup as a sorted set of element indices of its parent group.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Subgroup {
    members: Vec<usize>,
}

impl Subgroup {
    /// Wraps an index set after checking it is a subgroup of `g`.
    pub fn new(g: &FiniteGroup, mut members: Vec<usize>) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        if members.iter().any(|&m| m >= g.order()) {
            return Err(Error::invariant("subgroup index out of range"));
        }
        let s = Subgroup { members };
        if !s.contains(g.identity()) {
            return Err(Error::invariant("subset lacks the identity"));
        }
        for &a in &s.members {
            if !s.contains(g.inv(a)) {
                return Err(Error::invariant("subset not closed under inverse"));
            }
            for &b in &s.members {
                if !s.contains(g.mul(a, b)) {
                    return Err(Error::invariant("subset not closed under composition"));
                }
            }
        }
        Ok(s)
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn order(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, a: usize) -> bool {
        self.members.binary_search(&a).is_ok()
    }

    /// `g·S·g⁻¹`
    pub fn conjugate_by(&self, grp: &FiniteGroup, g: usize) -> Subgroup {
        let mut members: Vec<usize> = self.members.iter().map(|&s| grp.conjugate(g, s)).collect();
        members.sort_unstable();
        Subgroup { members }
    }

    pub fn is_subset_of(&self, other: &Subgroup) -> bool {
        self.members.iter().all(|&m| other.contains(m))
    }
}

#[derive(Clone, Debug)]
pub struct SubgroupClass {
    /// Lexicographically least member of the class.
    pub representative: Subgroup,
    /// Every member of the class, sorted; includes the representative.
    pub conjugates: Vec<Subgroup>,
}

impl SubgroupClass {
    pub fn subgroup_order(&self) -> usize {
        self.representative.order()
    }

    pub fn contains(&self, s: &Subgroup) -> bool {
        self.conjugates.binary_search(s).is_ok()
    }
}

/// Smallest subgroup containing `generators` (breadth-first closure).
pub fn generated_subgroup(g: &FiniteGroup, generators: &[usize]) -> Subgroup {
    let mut seen = vec![false; g.order()];
    let mut queue = VecDeque::from([g.identity()]);
    seen[g.identity()] = true;
    while let Some(a) = queue.pop_front() {
        for &s in generators {
            let b = g.mul(a, s);
            if !seen[b] {
                seen[b] = true;
                queue.push_back(b);
            }
        }
    }
    Subgroup {
        members: (0..g.order()).filter(|&i| seen[i]).collect(),
    }
}

/// All subgroups of `g`, grouped into conjugacy classes.
///
/// Enumerates cyclic subgroups and closes the set under pairwise joins; every
/// subgroup is a join of its cyclic subgroups, so the fixpoint is complete.
pub fn subgroup_classes(g: &FiniteGroup) -> Result<Vec<SubgroupClass>> {
    if g.order() > MAX_ENUMERATION_ORDER {
        return Err(Error::Resource {
            what: format!("subgroup enumeration for a group of order {}", g.order()),
            cap: MAX_ENUMERATION_ORDER,
        });
    }
    let mask_of = |s: &Subgroup| s.members.iter().fold(0u128, |m, &i| m | (1u128 << i));

    // (mask, generators)
    let mut subgroups: Vec<(u128, Vec<usize>)> = Vec::new();
    let mut seen: HashSet<u128> = HashSet::new();
    for a in 0..g.order() {
        let s = generated_subgroup(g, &[a]);
        let m = mask_of(&s);
        if seen.insert(m) {
            subgroups.push((m, vec![a]));
        }
    }
    let mut frontier_start = 0;
    loop {
        let len = subgroups.len();
        let mut fresh = Vec::new();
        for i in 0..len {
            for j in frontier_start.max(i + 1)..len {
                let (ma, mb) = (subgroups[i].0, subgroups[j].0);
                if ma & mb == ma || ma & mb == mb {
                    continue;
                }
                let mut gens = subgroups[i].1.clone();
                gens.extend_from_slice(&subgroups[j].1);
                let joined = generated_subgroup(g, &gens);
                let m = mask_of(&joined);
                if seen.insert(m) {
                    fresh.push((m, gens));
                }
            }
        }
        if fresh.is_empty() {
            break;
        }
        frontier_start = len;
        subgroups.extend(fresh);
    }

    let all: Vec<Subgroup> = subgroups
        .iter()
        .map(|(m, _)| Subgroup {
            members: (0..g.order()).filter(|&i| m >> i & 1 == 1).collect(),
        })
        .collect();

    let mut classified: HashSet<Subgroup> = HashSet::new();
    let mut classes = Vec::new();
    for s in &all {
        if classified.contains(s) {
            continue;
        }
        let mut conjugates: Vec<Subgroup> = (0..g.order()).map(|x| s.conjugate_by(g, x)).collect();
        conjugates.sort();
        conjugates.dedup();
        for c in &conjugates {
            classified.insert(c.clone());
        }
        classes.push(SubgroupClass {
            representative: conjugates[0].clone(),
            conjugates,
        });
    }
    classes.sort_by(|a, b| {
        (a.subgroup_order(), &a.representative).cmp(&(b.subgroup_order(), &b.representative))
    });
    Ok(classes)
}

/// Index of the class containing `s`, if any.
pub fn class_index(classes: &[SubgroupClass], s: &Subgroup) -> Option<usize> {
    classes.iter().position(|c| c.contains(s))
}

/// Left cosets `gS` of a subgroup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cosets {
    /// Each coset as a sorted index list; cosets ordered by representative.
    pub cosets: Vec<Vec<usize>>,
    /// Least element index of each coset. The identity coset comes first.
    pub representatives: Vec<usize>,
    /// `coset_of[g]` is the coset containing element `g`.
    pub coset_of: Vec<usize>,
}

pub fn left_cosets(g: &FiniteGroup, s: &Subgroup) -> Result<Cosets> {
    let s = Subgroup::new(g, s.members.clone())?;
    let mut coset_of = vec![usize::MAX; g.order()];
    let mut cosets = Vec::new();
    let mut representatives = Vec::new();
    // elements are scanned in index order, so the first unassigned one is the least
    for a in 0..g.order() {
        if coset_of[a] != usize::MAX {
            continue;
        }
        let mut coset: Vec<usize> = s.members.iter().map(|&x| g.mul(a, x)).collect();
        coset.sort_unstable();
        for &c in &coset {
            coset_of[c] = cosets.len();
        }
        representatives.push(a);
        cosets.push(coset);
    }
    debug_assert_eq!(cosets.len() * s.order(), g.order());
    Ok(Cosets {
        cosets,
        representatives,
        coset_of,
    })
}

/// Verifies that `action[g]` (a permutation of points per group element) is a
/// homomorphism: `action[g·h] = action[g] ∘ action[h]` and identity acts trivially.
pub fn check_action(g: &FiniteGroup, action: &[Vec<usize>]) -> Result<()> {
    if action.len() != g.order() {
        return Err(Error::invariant(format!(
            "action has {} maps for a group of order {}",
            action.len(),
            g.order()
        )));
    }
    let dim = action[0].len();
    for map in action {
        Perm::new(map.clone())?;
        if map.len() != dim {
            return Err(Error::invariant("action maps of differing length"));
        }
    }
    if action[g.identity()].iter().enumerate().any(|(i, &j)| i != j) {
        return Err(Error::invariant("identity does not act trivially"));
    }
    for a in 0..g.order() {
        for b in 0..g.order() {
            let ab = &action[g.mul(a, b)];
            for i in 0..dim {
                if ab[i] != action[a][action[b][i]] {
                    return Err(Error::invariant(format!(
                        "action is not a homomorphism at ({a}, {b})"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// All group elements fixing `point` under `action`.
pub fn stabilizer(g: &FiniteGroup, action: &[Vec<usize>], point: usize) -> Result<Subgroup> {
    check_action(g, action)?;
    Ok(stabilizer_unchecked(g, action, point))
}

pub(crate) fn stabilizer_unchecked(g: &FiniteGroup, action: &[Vec<usize>], point: usize) -> Subgroup {
    Subgroup {
        members: (0..g.order()).filter(|&a| action[a][point] == point).collect(),
    }
}

/// Orbit of `point` under `action`, sorted.
pub fn orbit(action: &[Vec<usize>], point: usize) -> Vec<usize> {
    let mut o: Vec<usize> = action.iter().map(|m| m[point]).collect();
    o.sort_unstable();
    o.dedup();
    o
}
