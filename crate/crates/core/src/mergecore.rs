//! Bipartite src→dst matching, group merging and unmerging.
//!
//! Every src token is assigned to the dst token with the highest cosine
//! similarity (ties go to the lowest dst index). Salient tokens take no part
//! in matching. Merging replaces each dst row by the mean of its group and
//! drops the src rows; unmerging copies each group's row back to every member
//! position, restoring the full sequence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{cosine_from_parts, dot_f64, gemm, l2_norm, Matrix, Operand, Real};
use crate::partitioner::MergeRule;
use crate::tokenmodel::{Partition, TokenSequence};

/// Approximate similarities within this margin of the row maximum are
/// rescored exactly. Far above the rounding error of a 32-bit dot product of
/// unit vectors.
const SHORTLIST_MARGIN: Real = 1e-3;

/// src rows scored per similarity block.
const MATCH_CHUNK: usize = 512;

/// Invertible record of one merge step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeMap {
    n_tokens: usize,
    /// `(src, dst)` pairs in ascending src order.
    pub assignment: Vec<(usize, usize)>,
    /// `(dst, group size)` in ascending dst order; size counts the dst itself.
    pub groups: Vec<(usize, usize)>,
    /// Surviving tokens (salient ∪ dst) in ascending order; row `i` of the
    /// reduced matrix is token `kept_order[i]`.
    pub kept_order: Vec<usize>,
    /// Reduced-matrix row that carries each token after merging.
    #[serde(skip)]
    slot: Vec<usize>,
}

impl MergeMap {
    /// Map that merges nothing.
    pub fn identity(n_tokens: usize) -> Self {
        Self {
            n_tokens,
            assignment: Vec::new(),
            groups: Vec::new(),
            kept_order: (0..n_tokens).collect(),
            slot: (0..n_tokens).collect(),
        }
    }

    /// Builds a map from a partition and an explicit src→dst assignment
    /// (parallel to `partition.src`).
    pub fn from_assignment(partition: &Partition, targets: &[usize]) -> Result<Self> {
        let n = partition.n_tokens();
        partition.validate(n)?;
        if targets.len() != partition.src.len() {
            return Err(Error::Partition(format!(
                "{} targets for {} src tokens",
                targets.len(),
                partition.src.len()
            )));
        }
        let mut kept_order: Vec<usize> = partition
            .salient
            .iter()
            .chain(&partition.dst)
            .copied()
            .collect();
        kept_order.sort_unstable();

        let mut slot = vec![usize::MAX; n];
        for (row, &tok) in kept_order.iter().enumerate() {
            slot[tok] = row;
        }
        let mut sizes = vec![0usize; n];
        for &d in &partition.dst {
            sizes[d] = 1;
        }
        let mut assignment = Vec::with_capacity(targets.len());
        for (&s, &d) in partition.src.iter().zip(targets) {
            if d >= n || sizes[d] == 0 {
                return Err(Error::Partition(format!("src {s} assigned to non-dst {d}")));
            }
            sizes[d] += 1;
            slot[s] = slot[d];
            assignment.push((s, d));
        }
        let groups = partition.dst.iter().map(|&d| (d, sizes[d])).collect();
        Ok(Self {
            n_tokens: n,
            assignment,
            groups,
            kept_order,
            slot,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_kept(&self) -> usize {
        self.kept_order.len()
    }

    pub fn n_merged(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_identity(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Reduced row holding token `i`.
    pub fn slot_of(&self, i: usize) -> usize {
        self.slot[i]
    }

    /// Members of each reduced row (the kept token first, then its src in
    /// ascending order).
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut members: Vec<Vec<usize>> = self.kept_order.iter().map(|&t| vec![t]).collect();
        for &(s, _) in &self.assignment {
            members[self.slot[s]].push(s);
        }
        members
    }

    /// JSON with the assignment pairs, group sizes and kept order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Assigns every src token to its most similar dst token.
pub fn match_tokens(seq: &TokenSequence, partition: &Partition) -> Result<MergeMap> {
    match_tokens_with(seq.features(), partition, false)
}

/// [`match_tokens`] over raw features, optionally splitting src rows across
/// threads. Results do not depend on `parallel`.
pub fn match_tokens_with(
    features: &Matrix,
    partition: &Partition,
    parallel: bool,
) -> Result<MergeMap> {
    let n = features.rows();
    partition.validate(n)?;
    if partition.src.is_empty() {
        return MergeMap::from_assignment(partition, &[]);
    }
    if partition.dst.is_empty() {
        return Err(Error::Partition(format!(
            "{} src tokens but no dst token",
            partition.src.len()
        )));
    }

    let dim = features.cols();
    let dst_norms: Vec<f64> = partition
        .dst
        .iter()
        .map(|&d| l2_norm(features.row(d)))
        .collect();
    let dst_unit = unit_rows(features, &partition.dst, &dst_norms);

    let chunks: Vec<&[usize]> = partition.src.chunks(MATCH_CHUNK).collect();
    let score = |src: &[usize]| -> (Vec<usize>, u64) {
        let (targets, flops) = crate::numkernel::flops::measure(|| {
            best_dst_for_chunk(features, src, partition, &dst_unit, &dst_norms, dim)
        });
        (targets, flops)
    };
    let mut results: Vec<(Vec<usize>, u64)> = Vec::new();
    if parallel {
        crate::numkernel::flops::credit_parallel(|| {
            results = chunks.par_iter().map(|c| score(c)).collect();
            results.iter().map(|r| r.1).sum()
        });
    } else {
        results = chunks.iter().map(|c| score(c)).collect();
    }
    let targets: Vec<usize> = results.into_iter().flat_map(|r| r.0).collect();
    MergeMap::from_assignment(partition, &targets)
}

/// Rows scaled to unit length (zero rows stay zero).
fn unit_rows(features: &Matrix, rows: &[usize], norms: &[f64]) -> Vec<Real> {
    let dim = features.cols();
    let mut out = Vec::with_capacity(rows.len() * dim);
    for (&r, &norm) in rows.iter().zip(norms) {
        let inv = if norm < crate::numkernel::DEGENERATE_NORM {
            0.0
        } else {
            1.0 / norm
        };
        out.extend(features.row(r).iter().map(|&v| (v as f64 * inv) as Real));
    }
    out
}

fn best_dst_for_chunk(
    features: &Matrix,
    src: &[usize],
    partition: &Partition,
    dst_unit: &[Real],
    dst_norms: &[f64],
    dim: usize,
) -> Vec<usize> {
    let n_dst = partition.dst.len();
    let src_norms: Vec<f64> = src.iter().map(|&s| l2_norm(features.row(s))).collect();
    let src_unit = unit_rows(features, src, &src_norms);
    let mut approx = vec![0.0 as Real; src.len() * n_dst];
    gemm(
        src.len(),
        dim,
        n_dst,
        1.0,
        Operand::row_major(&src_unit, dim),
        Operand::transposed(dst_unit, dim),
        0.0,
        &mut approx,
        n_dst,
    );

    src.iter()
        .enumerate()
        .map(|(i, &s)| {
            let row = &approx[i * n_dst..(i + 1) * n_dst];
            let top = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let xs = features.row(s);
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for (j, &a) in row.iter().enumerate() {
                if a < top - SHORTLIST_MARGIN {
                    continue;
                }
                let d = partition.dst[j];
                let sim =
                    cosine_from_parts(dot_f64(xs, features.row(d)), src_norms[i], dst_norms[j]);
                // dst is ascending, so strict `>` keeps the lowest index on ties.
                if sim > best.0 {
                    best = (sim, d);
                }
            }
            best.1
        })
        .collect()
}

/// Reduced matrix: one row per kept token, each dst row replaced by its
/// group mean (or the sequential pairwise average under
/// [`MergeRule::Sequential`]). Rows of singleton groups are copied bit for bit.
pub fn merge(features: &Matrix, map: &MergeMap, rule: MergeRule) -> Result<Matrix> {
    if features.rows() != map.n_tokens() {
        return Err(Error::Shape(format!(
            "{} feature rows for a map over {} tokens",
            features.rows(),
            map.n_tokens()
        )));
    }
    if map.is_identity() {
        return Ok(features.clone());
    }
    let dim = features.cols();
    let mut out = features.select_rows(&map.kept_order)?;
    let mut acc = vec![0.0f64; dim];
    for (row, members) in map.members().into_iter().enumerate() {
        if members.len() == 1 {
            continue;
        }
        match rule {
            MergeRule::Uniform => {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for &m in &members {
                    for (a, &v) in acc.iter_mut().zip(features.row(m)) {
                        *a += v as f64;
                    }
                }
                let inv = 1.0 / members.len() as f64;
                for (o, a) in out.row_mut(row).iter_mut().zip(&acc) {
                    *o = (a * inv) as Real;
                }
            }
            MergeRule::Sequential => {
                for (a, &v) in acc.iter_mut().zip(features.row(members[0])) {
                    *a = v as f64;
                }
                for &m in &members[1..] {
                    for (a, &v) in acc.iter_mut().zip(features.row(m)) {
                        *a = (*a + v as f64) * 0.5;
                    }
                }
                for (o, a) in out.row_mut(row).iter_mut().zip(&acc) {
                    *o = *a as Real;
                }
            }
        }
    }
    Ok(out)
}

/// Restores `N` rows: every token receives the row of the group it belongs to.
pub fn unmerge(reduced: &Matrix, map: &MergeMap) -> Result<Matrix> {
    if reduced.rows() != map.n_kept() {
        return Err(Error::Shape(format!(
            "{} reduced rows for {} kept tokens",
            reduced.rows(),
            map.n_kept()
        )));
    }
    if map.is_identity() {
        return Ok(reduced.clone());
    }
    let dim = reduced.cols();
    let mut out = Matrix::zeros(map.n_tokens(), dim);
    for i in 0..map.n_tokens() {
        out.row_mut(i).copy_from_slice(reduced.row(map.slot[i]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::prng_matrix;
    use crate::partitioner::partition_random;
    use crate::tokenmodel::FrameLayout;
    use proptest::prelude::*;

    fn flat_seq(features: Matrix) -> TokenSequence {
        let n = features.rows();
        TokenSequence::new(FrameLayout::patch_only(n).unwrap(), 1, features).unwrap()
    }

    /// Exhaustive argmax, lowest dst index on ties, in 64-bit arithmetic.
    fn brute_force(features: &Matrix, p: &Partition) -> Vec<usize> {
        p.src
            .iter()
            .map(|&s| {
                let xs = features.row(s);
                let ns: f64 = xs.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for &d in &p.dst {
                    let xd = features.row(d);
                    let nd: f64 = xd.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    let dot: f64 = xs.iter().zip(xd).map(|(&a, &b)| a as f64 * b as f64).sum();
                    let sim = if ns < 1e-12 || nd < 1e-12 {
                        0.0
                    } else {
                        dot / (ns * nd)
                    };
                    if sim > best.0 {
                        best = (sim, d);
                    }
                }
                best.1
            })
            .collect()
    }

    fn p(salient: &[usize], dst: &[usize], src: &[usize]) -> Partition {
        Partition {
            salient: salient.to_vec(),
            dst: dst.to_vec(),
            src: src.to_vec(),
        }
    }

    #[test]
    fn identical_src_goes_to_its_twin() {
        let f = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let map = match_tokens(&flat_seq(f), &p(&[], &[0, 1], &[2])).unwrap();
        assert_eq!(map.assignment, vec![(2, 1)]);
    }

    #[test]
    fn three_by_four_fixture_matches_oracle() {
        let f = prng_matrix(7, 6, 21);
        let part = p(&[], &[0, 2, 4, 6], &[1, 3, 5]);
        let map = match_tokens(&flat_seq(f.clone()), &part).unwrap();
        let got: Vec<usize> = map.assignment.iter().map(|&(_, d)| d).collect();
        assert_eq!(got, brute_force(&f, &part));
    }

    #[test]
    fn ties_go_to_lowest_dst() {
        let f = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 0.0]])
            .unwrap();
        let map = match_tokens(&flat_seq(f), &p(&[], &[0, 1, 2], &[3, 4])).unwrap();
        // 3 ties between dst 1 and 2; 4 is degenerate and ties everywhere at 0.
        assert_eq!(map.assignment, vec![(3, 1), (4, 0)]);
    }

    #[test]
    fn empty_src_is_identity() {
        let f = prng_matrix(5, 3, 1);
        let map = match_tokens(&flat_seq(f.clone()), &p(&[1], &[0, 2, 3, 4], &[])).unwrap();
        assert!(map.assignment.is_empty());
        assert_eq!(map.kept_order, vec![0, 1, 2, 3, 4]);
        let merged = merge(&f, &map, MergeRule::Uniform).unwrap();
        assert!(merged.bitwise_eq(&f));
        assert!(unmerge(&merged, &map).unwrap().bitwise_eq(&f));
    }

    #[test]
    fn no_dst_is_an_error() {
        let f = prng_matrix(3, 2, 1);
        assert!(matches!(
            match_tokens(&flat_seq(f), &p(&[], &[], &[0, 1, 2])),
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn salient_tokens_never_match() {
        let f = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.9, 0.1]]).unwrap();
        let map = match_tokens(&flat_seq(f), &p(&[0], &[1], &[2])).unwrap();
        assert_eq!(map.assignment, vec![(2, 1)]);
        assert_eq!(map.kept_order, vec![0, 1]);
    }

    #[test]
    fn pairwise_merge_example() {
        let f = Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap();
        let part = p(&[], &[0], &[1]);
        let map = MergeMap::from_assignment(&part, &[0]).unwrap();
        let m = merge(&f, &map, MergeRule::Uniform).unwrap();
        assert_eq!(m.data(), &[1.0, 1.0]);
    }

    #[test]
    fn group_mean_versus_sequential() {
        let f = Matrix::from_rows(&[[3.0, 3.0], [0.0, 0.0], [3.0, 3.0]]).unwrap();
        let part = p(&[], &[0], &[1, 2]);
        let map = MergeMap::from_assignment(&part, &[0, 0]).unwrap();
        assert_eq!(map.groups, vec![(0, 3)]);
        let u = merge(&f, &map, MergeRule::Uniform).unwrap();
        assert_eq!(u.data(), &[2.0, 2.0]);
        let s = merge(&f, &map, MergeRule::Sequential).unwrap();
        assert_eq!(s.data(), &[2.25, 2.25]);
    }

    #[test]
    fn unassigned_dst_is_bitwise_unchanged() {
        let f = prng_matrix(4, 5, 8);
        let part = p(&[], &[0, 1], &[2, 3]);
        let map = MergeMap::from_assignment(&part, &[0, 0]).unwrap();
        let m = merge(&f, &map, MergeRule::Uniform).unwrap();
        assert_eq!(m.row(1), f.row(1));
    }

    #[test]
    fn unmerge_replicates_group_rows() {
        let reduced = Matrix::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap();
        let part = p(&[], &[0, 1], &[2]);
        let map = MergeMap::from_assignment(&part, &[0]).unwrap();
        let out = unmerge(&reduced, &map).unwrap();
        assert_eq!(out.row(0), out.row(2));
        assert_eq!(out.row(1), &[7.0, 8.0]);
        assert!(matches!(
            unmerge(&Matrix::zeros(3, 2), &map),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn unmerge_of_merge_gives_group_means() {
        let f = prng_matrix(40, 6, 2);
        let seq = flat_seq(f.clone());
        let part = partition_random(&seq, 0.6, 3);
        let map = match_tokens(&seq, &part).unwrap();
        let full = unmerge(&merge(&f, &map, MergeRule::Uniform).unwrap(), &map).unwrap();
        for members in map.members() {
            for &m in &members {
                for c in 0..6 {
                    let mean: f64 = members.iter().map(|&x| f.get(x, c) as f64).sum::<f64>()
                        / members.len() as f64;
                    assert!((full.get(m, c) as f64 - mean).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn json_export_has_pairs_and_groups() {
        let part = p(&[], &[0], &[1]);
        let map = MergeMap::from_assignment(&part, &[0]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&map.to_json()).unwrap();
        assert_eq!(v["assignment"][0], serde_json::json!([1, 0]));
        assert_eq!(v["groups"][0], serde_json::json!([0, 2]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matching_equals_oracle(n in 2usize..120, ratio in 0.05f64..0.95, seed in any::<u64>()) {
            let f = prng_matrix(n, 8, seed);
            let seq = flat_seq(f.clone());
            let part = partition_random(&seq, ratio, seed ^ 1);
            prop_assume!(!part.dst.is_empty());
            let map = match_tokens(&seq, &part).unwrap();
            let got: Vec<usize> = map.assignment.iter().map(|&(_, d)| d).collect();
            prop_assert_eq!(got, brute_force(&f, &part));
            let par = match_tokens_with(&f, &part, true).unwrap();
            prop_assert_eq!(par, map);
        }

        #[test]
        fn group_rows_are_member_means(n in 2usize..80, seed in any::<u64>()) {
            let f = prng_matrix(n, 5, seed);
            let seq = flat_seq(f.clone());
            let part = partition_random(&seq, 0.7, seed);
            prop_assume!(!part.dst.is_empty());
            let map = match_tokens(&seq, &part).unwrap();
            let merged = merge(&f, &map, MergeRule::Uniform).unwrap();
            prop_assert_eq!(merged.rows(), n - part.src.len());
            let sizes: usize = map.groups.iter().map(|&(_, s)| s - 1).sum();
            prop_assert_eq!(sizes, part.src.len());
            for (row, members) in map.members().iter().enumerate() {
                for c in 0..5 {
                    let mean: f64 = members.iter().map(|&m| f.get(m, c) as f64).sum::<f64>()
                        / members.len() as f64;
                    prop_assert!((merged.get(row, c) as f64 - mean).abs() <= 1e-6 * mean.abs().max(1.0));
                }
            }
        }

        #[test]
        fn src_order_does_not_change_merged_rows(seed in any::<u64>()) {
            // Swap the features of two src tokens that share a dst.
            let f = prng_matrix(30, 4, seed);
            let part = p(&[], &[0, 1], &(2..30).collect::<Vec<_>>());
            let targets: Vec<usize> = (2..30).map(|i| i % 2).collect();
            let map = MergeMap::from_assignment(&part, &targets).unwrap();
            let mut g = f.clone();
            let (a, b) = (2usize, 28usize);
            let ra = f.row(a).to_vec();
            g.row_mut(a).copy_from_slice(f.row(b));
            g.row_mut(b).copy_from_slice(&ra);
            let m1 = merge(&f, &map, MergeRule::Uniform).unwrap();
            let m2 = merge(&g, &map, MergeRule::Uniform).unwrap();
            for (x, y) in m1.data().iter().zip(m2.data()) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}
