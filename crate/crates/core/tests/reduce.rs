use std::sync::Arc;

use equiscope::equiv::{equivariant_basis, BasisMode};
use equiscope::group::{subgroup_classes, symmetric_group, FiniteGroup, Subgroup};
use equiscope::loss::Activation;
use equiscope::prep::{PermRep, PrepSpec, RepLayout};
use equiscope::reduce::*;
use equiscope::rng::PortableRng;
use equiscope::Error;
use nalgebra::DMatrix;

fn s3() -> Arc<FiniteGroup> {
    Arc::new(symmetric_group(3).unwrap())
}

fn a3(g: &FiniteGroup) -> Subgroup {
    subgroup_classes(g)
        .unwrap()
        .into_iter()
        .find(|c| c.representative.order() == 3)
        .unwrap()
        .representative
}

fn input(g: &Arc<FiniteGroup>) -> RepLayout {
    RepLayout::from_specs(g, &[PrepSpec::Natural, PrepSpec::Coset { class: 2 }, PrepSpec::Trivial]).unwrap()
}

fn output(g: &Arc<FiniteGroup>) -> RepLayout {
    RepLayout::from_specs(g, &[PrepSpec::Trivial, PrepSpec::Natural]).unwrap()
}

/// Stacks blocks built from seeded rows; `symmetry[b]` forces equal rows.
fn net(g: &Arc<FiniteGroup>, blocks: Vec<PermRep>, seeds: &[Vec<f64>], symmetry: &[Subgroup], useed: u64) -> GeneralNet {
    let lin = input(g);
    let lout = output(g);
    let hidden = RepLayout::new(blocks.clone()).unwrap();
    let mut w = DMatrix::zeros(hidden.total_dim(), lin.total_dim());
    for (b, rep) in blocks.iter().enumerate() {
        let rows = block_rows_from_seed(&lin, rep, 0, &seeds[b], &symmetry[b]).unwrap();
        w.rows_mut(hidden.offsets()[b], rep.dim()).copy_from(&rows);
    }
    let bu = equivariant_basis(&hidden, &lout, BasisMode::Raw).unwrap();
    let mut rng = PortableRng::new(useed);
    let u = bu.coeffs_to_weights(&rng.normal_vec(bu.len())).unwrap();
    GeneralNet::new(lin, hidden, lout, w, u, Activation::Relu).unwrap()
}

fn seed_row(seed: u64) -> Vec<f64> {
    PortableRng::new(seed).normal_vec(6)
}

#[test]
fn regular_block_constant_on_a3_cosets_shrinks_to_two() {
    let g = s3();
    let a = a3(&g);
    let n = net(&g, vec![PermRep::regular(g.clone())], &[seed_row(1)], &[a.clone()], 2);
    assert!(n.constraint_residual() < 1e-12);
    let wit = find_reducible(&n, ROW_TOL);
    let (k, k2) = wit
        .iter()
        .find_map(|w| match *w {
            Witness::DuplicateRows { block: 0, k, k2 } => Some((k, k2)),
            _ => None,
        })
        .unwrap();
    let (red, rep) = reduce_transitive_block(&n, 0, (k, k2), ROW_TOL).unwrap();
    let block = &red.layout_hidden.blocks()[0];
    assert_eq!(block.dim(), 2);
    assert!(block.is_transitive().0);
    assert_eq!(6 % block.dim(), 0);
    assert!(rep.equivalence_residual < 1e-10);
    assert!(verify_equivalence(&n, &red, 1000, 9).unwrap() < 1e-10);
    match rep.kind {
        ReductionKind::ShrinkBlock { new_dim, ref subgroup, .. } => {
            assert_eq!(new_dim, 2);
            assert_eq!(subgroup.as_slice(), a.members());
        }
        ref other => panic!("unexpected {other:?}"),
    }
    // the reduced block has distinct rows again
    assert!(find_reducible(&red, ROW_TOL).is_empty());
}

#[test]
fn reduction_dims_divide() {
    let g = s3();
    let classes = subgroup_classes(&g).unwrap();
    for (i, c) in classes.iter().enumerate() {
        let n = net(&g, vec![PermRep::regular(g.clone())], &[seed_row(10 + i as u64)], &[c.representative.clone()], 3);
        for w in find_reducible(&n, ROW_TOL) {
            if let Witness::DuplicateRows { block, k, k2 } = w {
                let (red, rep) = reduce_transitive_block(&n, block, (k, k2), ROW_TOL).unwrap();
                let d = red.layout_hidden.blocks()[0].dim();
                assert!(d < 6 && 6 % d == 0);
                assert_eq!(d, 6 / c.representative.order());
                assert!(rep.equivalence_residual < 1e-10);
            }
        }
    }
}

#[test]
fn duplicate_natural_rows_reported() {
    let g = s3();
    let mut n = net(&g, vec![PermRep::natural(g.clone())], &[seed_row(4)], &[g.trivial_subgroup()], 1);
    assert!(find_reducible(&n, ROW_TOL).is_empty());
    let r0: Vec<f64> = n.w.row(0).iter().copied().collect();
    for (c, v) in r0.into_iter().enumerate() {
        n.w[(1, c)] = v;
    }
    assert!(find_reducible(&n, ROW_TOL).contains(&Witness::DuplicateRows { block: 0, k: 0, k2: 1 }));
}

#[test]
fn zero_outgoing_regular_block_fully_reported() {
    let g = s3();
    let mut n = net(
        &g,
        vec![PermRep::regular(g.clone()), PermRep::natural(g.clone())],
        &[seed_row(5), seed_row(6)],
        &[g.trivial_subgroup(), g.trivial_subgroup()],
        7,
    );
    // zero the outgoing coefficients of the regular block
    for o in 0..n.u.nrows() {
        for j in 0..6 {
            n.u[(o, j)] = 0.0;
        }
    }
    assert!(n.constraint_residual() < 1e-12);
    let zero: Vec<usize> = find_reducible(&n, ROW_TOL)
        .into_iter()
        .filter_map(|w| match w {
            Witness::ZeroOutgoing { block: 0, k } => Some(k),
            _ => None,
        })
        .collect();
    assert_eq!(zero, (0..6).collect::<Vec<_>>());
    let (red, rep) = eliminate_block(&n, 0, ROW_TOL).unwrap();
    assert_eq!(red.layout_hidden.total_dim(), 3);
    assert!(rep.equivalence_residual < 1e-10);
}

#[test]
fn merge_duplicate_natural_blocks() {
    let g = s3();
    let t = g.trivial_subgroup();
    let n = net(
        &g,
        vec![PermRep::natural(g.clone()), PermRep::natural(g.clone())],
        &[seed_row(8), seed_row(8)],
        &[t.clone(), t],
        11,
    );
    let (red, rep) = merge_blocks(&n, 0, 1, (0, 0), ROW_TOL).unwrap();
    assert_eq!(red.layout_hidden.total_dim(), 3);
    for o in 0..n.u.nrows() {
        for j in 0..3 {
            assert!((red.u[(o, j)] - n.u[(o, j)] - n.u[(o, 3 + j)]).abs() < 1e-15);
        }
    }
    assert!(rep.equivalence_residual < 1e-10);
}

#[test]
fn merge_after_row_alignment() {
    let g = s3();
    let classes = subgroup_classes(&g).unwrap();
    let c1 = classes.iter().position(|c| c.representative.order() == 2).unwrap();
    let conj = classes[c1].conjugates.last().unwrap();
    let coset = PermRep::coset(g.clone(), conj).unwrap();
    let nat = PermRep::natural(g.clone());
    // find natural point and coset point with the same stabilizer
    let (kn, kc) = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .find(|&(i, j)| i != j && nat.stabilizer(i) == coset.stabilizer(j))
        .unwrap();
    let lin = input(&g);
    let t = g.trivial_subgroup();
    let row = seed_row(12);
    let w1 = block_rows_from_seed(&lin, &nat, kn, &row, &t).unwrap();
    let w2 = block_rows_from_seed(&lin, &coset, kc, &row, &t).unwrap();
    assert_ne!(w1, w2, "rows should be genuinely permuted");
    let hidden = RepLayout::new(vec![nat, coset]).unwrap();
    let mut w = DMatrix::zeros(6, lin.total_dim());
    w.rows_mut(0, 3).copy_from(&w1);
    w.rows_mut(3, 3).copy_from(&w2);
    let lout = output(&g);
    let bu = equivariant_basis(&hidden, &lout, BasisMode::Raw).unwrap();
    let u = bu.coeffs_to_weights(&PortableRng::new(13).normal_vec(bu.len())).unwrap();
    let n = GeneralNet::new(lin, hidden, lout, w, u, Activation::Erf).unwrap();
    let shared = find_reducible(&n, ROW_TOL)
        .into_iter()
        .find_map(|w| match w {
            Witness::SharedAcrossBlocks { block1: 0, k, block2: 1, k2 } => Some((k, k2)),
            _ => None,
        })
        .unwrap();
    let (red, rep) = merge_blocks(&n, 0, 1, shared, ROW_TOL).unwrap();
    assert_eq!(red.layout_hidden.total_dim(), 3);
    assert!(rep.equivalence_residual < 1e-10);
    assert!(verify_equivalence(&n, &red, 1000, 5).unwrap() < 1e-10);
}

#[test]
fn merge_of_non_isomorphic_blocks_rejected() {
    let g = s3();
    let lin = input(&g);
    let nat = PermRep::natural(g.clone());
    let sign = PermRep::coset(g.clone(), &a3(&g)).unwrap();
    // a shared row value must be fixed by both stabilizers, i.e. S3-invariant
    let whole = g.whole();
    let row = seed_row(14);
    let w1 = block_rows_from_seed(&lin, &nat, 0, &row, &whole).unwrap();
    let w2 = block_rows_from_seed(&lin, &sign, 0, &row, &whole).unwrap();
    let hidden = RepLayout::new(vec![nat, sign]).unwrap();
    let mut w = DMatrix::zeros(5, lin.total_dim());
    w.rows_mut(0, 3).copy_from(&w1);
    w.rows_mut(3, 2).copy_from(&w2);
    let lout = output(&g);
    let bu = equivariant_basis(&hidden, &lout, BasisMode::Raw).unwrap();
    let u = bu.coeffs_to_weights(&PortableRng::new(15).normal_vec(bu.len())).unwrap();
    let n = GeneralNet::new(lin, hidden, lout, w, u, Activation::Relu).unwrap();
    let err = merge_blocks(&n, 0, 1, (0, 0), ROW_TOL).unwrap_err();
    assert!(matches!(err, Error::NotReducible(_)), "{err:?}");
}

#[test]
fn reduced_net_json_round_trip() {
    let g = s3();
    let n = net(&g, vec![PermRep::regular(g.clone())], &[seed_row(1)], &[a3(&g)], 2);
    let wit = find_reducible(&n, ROW_TOL);
    let (red, _) = apply_witness(&n, &wit[0], ROW_TOL).unwrap();
    let spec = red.to_spec(equiscope::group::GroupSpec::Symmetric { n: 3 }).unwrap();
    let back = spec.build().unwrap();
    assert_eq!(back.w, red.w);
    assert_eq!(back.u, red.u);
    assert_eq!(verify_equivalence(&red, &back, 50, 0).unwrap(), 0.0);
}
