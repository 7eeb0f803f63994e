//! Permutation representations and layer layouts.
//!
//! A representation is stored as one index permutation per group element:
//! `action[g][i]` is the basis vector that `g` sends `e_i` to. The matrix of
//! `g` is therefore `P(g) e_i = e_{action[g][i]}`, and `P(g·h) = P(g) P(h)`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{self, check_action, left_cosets, subgroup_classes, FiniteGroup, Subgroup};

/// Which representation a block carries, as written in configs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rep", rename_all = "lowercase")]
pub enum PrepSpec {
    Trivial,
    Natural,
    Regular,
    /// Coset action on `G/S` for the representative of subgroup class `class`
    /// (classes indexed as returned by [`group::subgroup_classes`]).
    Coset { class: usize },
    /// Explicit action table, `action[g][i]` for every group element `g`.
    Explicit { action: Vec<Vec<usize>> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RepKind {
    Trivial,
    Natural,
    Regular,
    Coset(Subgroup),
    /// Anything else, e.g. a layout flattened into one representation.
    Other,
}

#[derive(Clone, Debug)]
pub struct PermRep {
    group: Arc<FiniteGroup>,
    kind: RepKind,
    action: Vec<Vec<usize>>,
}

impl PermRep {
    /// Wraps an explicit action table after checking the homomorphism property
    /// on all `|G|²` pairs.
    pub fn from_action(group: Arc<FiniteGroup>, action: Vec<Vec<usize>>, kind: RepKind) -> Result<Self> {
        check_action(&group, &action)?;
        Ok(Self { group, kind, action })
    }

    pub fn trivial(group: Arc<FiniteGroup>) -> Self {
        let action = vec![vec![0]; group.order()];
        Self {
            group,
            kind: RepKind::Trivial,
            action,
        }
    }

    pub fn natural(group: Arc<FiniteGroup>) -> Self {
        let action = group.elements().iter().map(|p| p.image().to_vec()).collect();
        Self {
            group,
            kind: RepKind::Natural,
            action,
        }
    }

    /// Left-multiplication action on the group itself.
    pub fn regular(group: Arc<FiniteGroup>) -> Self {
        let n = group.order();
        let action = (0..n).map(|a| (0..n).map(|b| group.mul(a, b)).collect()).collect();
        Self {
            group,
            kind: RepKind::Regular,
            action,
        }
    }

    /// Action of `G` on the left cosets `G/S`; basis vector `p` is the coset of
    /// the `p`-th smallest representative, so `g` sends `p` to `q` when
    /// `g·g_p ∈ g_q S`.
    pub fn coset(group: Arc<FiniteGroup>, subgroup: &Subgroup) -> Result<Self> {
        let cosets = left_cosets(&group, subgroup)?;
        let action = (0..group.order())
            .map(|a| {
                cosets
                    .representatives
                    .iter()
                    .map(|&r| cosets.coset_of[group.mul(a, r)])
                    .collect()
            })
            .collect();
        Self::from_action(group, action, RepKind::Coset(subgroup.clone()))
    }

    pub fn group(&self) -> &Arc<FiniteGroup> {
        &self.group
    }

    pub fn kind(&self) -> &RepKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.action[0].len()
    }

    pub fn action(&self) -> &[Vec<usize>] {
        &self.action
    }

    /// Image of basis index `i` under element `g`.
    pub fn apply(&self, g: usize, i: usize) -> usize {
        self.action[g][i]
    }

    /// Dense permutation matrix of element `g`.
    pub fn matrix(&self, g: usize) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for (i, &j) in self.action[g].iter().enumerate() {
            m[(j, i)] = 1.0;
        }
        m
    }

    pub fn fix_count(&self, g: usize) -> usize {
        self.action[g].iter().enumerate().filter(|(i, &j)| *i == j).count()
    }

    /// Basis orbits, each sorted, ordered by least member.
    pub fn orbits(&self) -> Vec<Vec<usize>> {
        let d = self.dim();
        let mut label = vec![usize::MAX; d];
        let mut orbits = Vec::new();
        for i in 0..d {
            if label[i] != usize::MAX {
                continue;
            }
            let o = group::orbit(&self.action, i);
            for &j in &o {
                label[j] = orbits.len();
            }
            orbits.push(o);
        }
        orbits
    }

    /// True iff the action has a single orbit; also returns the orbit partition.
    pub fn is_transitive(&self) -> (bool, Vec<Vec<usize>>) {
        let orbits = self.orbits();
        (orbits.len() == 1, orbits)
    }

    pub fn stabilizer(&self, point: usize) -> Subgroup {
        group::stabilizer_unchecked(&self.group, &self.action, point)
    }

    /// Isomorphism of transitive p-reps: the point stabilizers are conjugate.
    pub fn is_isomorphic(&self, other: &PermRep) -> Result<bool> {
        if *self.group != *other.group {
            return Err(Error::config("representations over different groups"));
        }
        if !self.is_transitive().0 || !other.is_transitive().0 {
            return Err(Error::config("isomorphism test needs transitive representations"));
        }
        if self.dim() != other.dim() {
            return Ok(false);
        }
        let (a, b) = (self.stabilizer(0), other.stabilizer(0));
        Ok((0..self.group.order()).any(|g| a.conjugate_by(&self.group, g) == b))
    }

    pub fn label(&self) -> String {
        match &self.kind {
            RepKind::Trivial => "trivial".into(),
            RepKind::Natural => format!("natural({})", self.dim()),
            RepKind::Regular => format!("regular({})", self.dim()),
            RepKind::Coset(s) => format!("coset(|S|={}, dim {})", s.order(), self.dim()),
            RepKind::Other => format!("rep(dim {})", self.dim()),
        }
    }
}

pub fn build_prep(group: &Arc<FiniteGroup>, spec: &PrepSpec) -> Result<PermRep> {
    match spec {
        PrepSpec::Trivial => Ok(PermRep::trivial(group.clone())),
        PrepSpec::Natural => Ok(PermRep::natural(group.clone())),
        PrepSpec::Regular => Ok(PermRep::regular(group.clone())),
        PrepSpec::Coset { class } => {
            let classes = subgroup_classes(group)?;
            let c = classes.get(*class).ok_or_else(|| {
                Error::config(format!(
                    "subgroup class {class} out of range ({} classes)",
                    classes.len()
                ))
            })?;
            PermRep::coset(group.clone(), &c.representative)
        }
        PrepSpec::Explicit { action } => {
            if action.len() != group.order() {
                return Err(Error::config(format!(
                    "explicit action has {} rows, group has {} elements",
                    action.len(),
                    group.order()
                )));
            }
            PermRep::from_action(group.clone(), action.clone(), RepKind::Other).map_err(|e| match e {
                Error::Invariant(m) => Error::config(format!("explicit action: {m}")),
                other => other,
            })
        }
    }
}

/// One transitive p-rep per conjugacy class of subgroups, in class order.
pub fn transitive_preps(group: &Arc<FiniteGroup>) -> Result<Vec<PermRep>> {
    subgroup_classes(group)?
        .iter()
        .map(|c| PermRep::coset(group.clone(), &c.representative))
        .collect()
}

/// An ordered direct sum of blocks, the layout of one network layer.
#[derive(Clone, Debug)]
pub struct RepLayout {
    blocks: Vec<PermRep>,
    offsets: Vec<usize>,
    total_dim: usize,
}

impl RepLayout {
    pub fn new(blocks: Vec<PermRep>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::config("a layout needs at least one block"))?;
        if blocks.iter().any(|b| *b.group != *first.group) {
            return Err(Error::config("all blocks of a layout must share one group"));
        }
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut total_dim = 0;
        for b in &blocks {
            offsets.push(total_dim);
            total_dim += b.dim();
        }
        Ok(Self {
            blocks,
            offsets,
            total_dim,
        })
    }

    pub fn from_specs(group: &Arc<FiniteGroup>, specs: &[PrepSpec]) -> Result<Self> {
        Self::new(specs.iter().map(|s| build_prep(group, s)).collect::<Result<_>>()?)
    }

    pub fn group(&self) -> &Arc<FiniteGroup> {
        self.blocks[0].group()
    }

    pub fn blocks(&self) -> &[PermRep] {
        &self.blocks
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Global index range of block `b`.
    pub fn range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b] + self.blocks[b].dim()
    }

    /// Block containing global index `i`, with the local index.
    pub fn locate(&self, i: usize) -> (usize, usize) {
        let b = self.offsets.partition_point(|&o| o <= i) - 1;
        (b, i - self.offsets[b])
    }

    /// Action of element `g` on the whole layout.
    pub fn action(&self, g: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_dim);
        for (b, rep) in self.blocks.iter().enumerate() {
            out.extend(rep.action()[g].iter().map(|&j| j + self.offsets[b]));
        }
        out
    }

    pub fn fix_count(&self, g: usize) -> usize {
        self.blocks.iter().map(|b| b.fix_count(g)).sum()
    }

    pub fn matrix(&self, g: usize) -> DMatrix<f64> {
        let d = self.total_dim;
        let mut m = DMatrix::zeros(d, d);
        for (i, j) in self.action(g).into_iter().enumerate() {
            m[(j, i)] = 1.0;
        }
        m
    }

    /// The whole layout viewed as a single (generally intransitive) representation.
    pub fn as_rep(&self) -> PermRep {
        let action = (0..self.group().order()).map(|g| self.action(g)).collect();
        PermRep {
            group: self.group().clone(),
            kind: RepKind::Other,
            action,
        }
    }

    /// Config form of every block. One-point blocks are written as trivial;
    /// coset blocks whose subgroup is not a class representative are written
    /// as explicit action tables.
    pub fn to_specs(&self) -> Result<Vec<PrepSpec>> {
        let classes = match self.blocks.iter().any(|b| matches!(b.kind, RepKind::Coset(_))) {
            true => subgroup_classes(self.group())?,
            false => Vec::new(),
        };
        Ok(self
            .blocks
            .iter()
            .map(|b| match &b.kind {
                _ if b.dim() == 1 => PrepSpec::Trivial,
                RepKind::Trivial => PrepSpec::Trivial,
                RepKind::Natural => PrepSpec::Natural,
                RepKind::Regular => PrepSpec::Regular,
                RepKind::Coset(s) => match classes.iter().position(|c| c.representative == *s) {
                    Some(class) => PrepSpec::Coset { class },
                    None => PrepSpec::Explicit {
                        action: b.action.clone(),
                    },
                },
                RepKind::Other => PrepSpec::Explicit {
                    action: b.action.clone(),
                },
            })
            .collect())
    }

    pub fn describe(&self) -> String {
        self.blocks
            .iter()
            .map(|b| b.label())
            .collect::<Vec<_>>()
            .join(" ⊕ ")
    }
}
