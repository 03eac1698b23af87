//! Logical parallel grids and their mapping onto physical ranks.
//!
//! Every module owns a `(TP, CP, PP, DP)` grid placed on a contiguous rank
//! range starting at `rank_offset`. Ranks are enumerated with TP fastest,
//! then CP, then DP, then PP:
//!
//! ```text
//! rank = offset + (((pp * dp_size + dp) * cp_size + cp) * tp_size + tp)
//! ```
//!
//! so each TP/CP group of one DP shard on one stage is a contiguous block.

use std::fmt;
use std::ops::Range;

use thiserror::Error;

/// Global rank id in the simulated world.
pub type Rank = usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GridError {
    #[error("module `{module}`: every parallel size must be >= 1 (got {field} = 0)")]
    ZeroSize { module: String, field: &'static str },
    #[error("rank {rank} is outside module `{module}` ranks [{start}, {end})")]
    RankOutOfModule {
        rank: Rank,
        module: String,
        start: Rank,
        end: Rank,
    },
    #[error("coordinate {coord} is out of bounds for module `{module}` ({bounds})")]
    CoordOutOfBounds {
        module: String,
        coord: GridCoord,
        bounds: String,
    },
    #[error("global batch {batch} is not divisible by dp {dp}")]
    IndivisibleBatch { batch: usize, dp: usize },
    #[error("modules `{a}` [{a_start}, {a_end}) and `{b}` [{b_start}, {b_end}) partially overlap")]
    PartialOverlap {
        a: String,
        a_start: Rank,
        a_end: Rank,
        b: String,
        b_start: Rank,
        b_end: Rank,
    },
}

/// A module's logical layout and physical rank placement.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModuleLayout {
    pub name: String,
    pub tp: usize,
    pub cp: usize,
    pub pp: usize,
    pub dp: usize,
    pub rank_offset: Rank,
}

/// Position of a rank inside its module grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct GridCoord {
    pub tp: usize,
    pub cp: usize,
    pub pp: usize,
    pub dp: usize,
}

impl GridCoord {
    pub fn new(tp: usize, cp: usize, pp: usize, dp: usize) -> Self {
        Self { tp, cp, pp, dp }
    }
}

impl fmt::Display for GridCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(tp={}, cp={}, pp={}, dp={})", self.tp, self.cp, self.pp, self.dp)
    }
}

impl ModuleLayout {
    pub fn new(
        name: impl Into<String>,
        tp: usize,
        cp: usize,
        pp: usize,
        dp: usize,
        rank_offset: Rank,
    ) -> Result<Self, GridError> {
        let name = name.into();
        for (field, value) in [("tp", tp), ("cp", cp), ("pp", pp), ("dp", dp)] {
            if value == 0 {
                return Err(GridError::ZeroSize { module: name, field });
            }
        }
        Ok(Self {
            name,
            tp,
            cp,
            pp,
            dp,
            rank_offset,
        })
    }

    pub fn world_size(&self) -> usize {
        self.tp * self.cp * self.pp * self.dp
    }

    pub fn rank_range(&self) -> Range<Rank> {
        self.rank_offset..self.rank_offset + self.world_size()
    }

    pub fn contains(&self, rank: Rank) -> bool {
        self.rank_range().contains(&rank)
    }

    pub fn coord_of_rank(&self, rank: Rank) -> Result<GridCoord, GridError> {
        if !self.contains(rank) {
            let range = self.rank_range();
            return Err(GridError::RankOutOfModule {
                rank,
                module: self.name.clone(),
                start: range.start,
                end: range.end,
            });
        }
        let mut local = rank - self.rank_offset;
        let tp = local % self.tp;
        local /= self.tp;
        let cp = local % self.cp;
        local /= self.cp;
        let dp = local % self.dp;
        let pp = local / self.dp;
        Ok(GridCoord { tp, cp, pp, dp })
    }

    pub fn rank_of_coord(&self, coord: GridCoord) -> Result<Rank, GridError> {
        if coord.tp >= self.tp || coord.cp >= self.cp || coord.pp >= self.pp || coord.dp >= self.dp {
            return Err(GridError::CoordOutOfBounds {
                module: self.name.clone(),
                coord,
                bounds: format!("tp<{}, cp<{}, pp<{}, dp<{}", self.tp, self.cp, self.pp, self.dp),
            });
        }
        let linear = ((coord.pp * self.dp + coord.dp) * self.cp + coord.cp) * self.tp + coord.tp;
        Ok(self.rank_offset + linear)
    }

    /// The boundary leader of DP shard `dp_idx` on stage `pp_idx`: the rank
    /// with canonical (tp = 0, cp = 0) coordinates.
    pub fn leader_rank(&self, pp_idx: usize, dp_idx: usize) -> Result<Rank, GridError> {
        self.rank_of_coord(GridCoord::new(0, 0, pp_idx, dp_idx))
    }

    /// All TP x CP ranks holding DP shard `dp_idx` on stage `pp_idx`, ascending.
    pub fn shard_ranks(&self, pp_idx: usize, dp_idx: usize) -> Result<Vec<Rank>, GridError> {
        let leader = self.leader_rank(pp_idx, dp_idx)?;
        Ok((leader..leader + self.tp * self.cp).collect())
    }

    /// All ranks of one pipeline stage, ascending.
    pub fn stage_ranks(&self, pp_idx: usize) -> Result<Vec<Rank>, GridError> {
        let first = self.rank_of_coord(GridCoord::new(0, 0, pp_idx, 0))?;
        Ok((first..first + self.tp * self.cp * self.dp).collect())
    }

    /// The TP group containing `coord`.
    pub fn tp_group(&self, coord: GridCoord) -> Vec<Rank> {
        (0..self.tp)
            .map(|tp| self.rank_unchecked(GridCoord { tp, ..coord }))
            .collect()
    }

    /// The CP group containing `coord`.
    pub fn cp_group(&self, coord: GridCoord) -> Vec<Rank> {
        (0..self.cp)
            .map(|cp| self.rank_unchecked(GridCoord { cp, ..coord }))
            .collect()
    }

    /// Ranks sharing `coord`'s TP and PP position across every DP and CP
    /// index; parameter gradients are reduced over this group.
    pub fn dp_cp_group(&self, coord: GridCoord) -> Vec<Rank> {
        let mut ranks: Vec<Rank> = (0..self.dp)
            .flat_map(|dp| (0..self.cp).map(move |cp| (dp, cp)))
            .map(|(dp, cp)| self.rank_unchecked(GridCoord { dp, cp, ..coord }))
            .collect();
        ranks.sort_unstable();
        ranks
    }

    /// Every coordinate of the grid in rank order.
    pub fn coords(&self) -> impl Iterator<Item = GridCoord> + '_ {
        self.rank_range()
            .map(move |rank| self.coord_of_rank(rank).expect("rank in range"))
    }

    fn rank_unchecked(&self, coord: GridCoord) -> Rank {
        self.rank_of_coord(coord).expect("coordinate derived from a valid one")
    }
}

impl fmt::Display for ModuleLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let range = self.rank_range();
        write!(
            f,
            "{} tp={} cp={} pp={} dp={} ranks [{}, {})",
            self.name, self.tp, self.cp, self.pp, self.dp, range.start, range.end
        )
    }
}

/// A half-open interval of global sample indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BatchInterval {
    pub start: usize,
    pub len: usize,
}

impl BatchInterval {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, other: &BatchInterval) -> bool {
        self.start <= other.start && other.end() <= self.end()
    }

    pub fn intersect(&self, other: &BatchInterval) -> Option<BatchInterval> {
        let start = self.start.max(other.start);
        let end = self.end().min(other.end());
        (start < end).then(|| BatchInterval::new(start, end - start))
    }
}

impl fmt::Display for BatchInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end())
    }
}

/// Splits `batch` samples into `dp` equal contiguous shards ordered by DP index.
pub fn partition_batch(batch: usize, dp: usize) -> Result<Vec<BatchInterval>, GridError> {
    if dp == 0 || batch % dp != 0 || batch == 0 {
        return Err(GridError::IndivisibleBatch { batch, dp });
    }
    let len = batch / dp;
    Ok((0..dp).map(|i| BatchInterval::new(i * len, len)).collect())
}

/// An activation edge between two modules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub source: ModuleLayout,
    pub dest: ModuleLayout,
    /// Samples crossing the edge per microbatch.
    pub global_batch: usize,
    /// Payload elements per sample.
    pub feature_width: usize,
}

impl BoundaryEdge {
    pub fn new(source: ModuleLayout, dest: ModuleLayout, global_batch: usize, feature_width: usize) -> Self {
        Self {
            source,
            dest,
            global_batch,
            feature_width,
        }
    }

    pub fn label(&self) -> String {
        format!("{}->{}", self.source.name, self.dest.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    Colocated,
    NonColocated,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Colocated => "colocated",
            Placement::NonColocated => "non-colocated",
        })
    }
}

/// Classifies the physical placement of two modules.
pub fn placement_of(a: &ModuleLayout, b: &ModuleLayout) -> Result<Placement, GridError> {
    let (ra, rb) = (a.rank_range(), b.rank_range());
    if ra == rb {
        Ok(Placement::Colocated)
    } else if ra.end <= rb.start || rb.end <= ra.start {
        Ok(Placement::NonColocated)
    } else {
        Err(GridError::PartialOverlap {
            a: a.name.clone(),
            a_start: ra.start,
            a_end: ra.end,
            b: b.name.clone(),
            b_start: rb.start,
            b_end: rb.end,
        })
    }
}

pub fn placement_of_edge(edge: &BoundaryEdge) -> Result<Placement, GridError> {
    placement_of(&edge.source, &edge.dest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(tp: usize, cp: usize, pp: usize, dp: usize, offset: usize) -> ModuleLayout {
        ModuleLayout::new("m", tp, cp, pp, dp, offset).unwrap()
    }

    /// Enumerates coordinates in the declared order (pp slowest, tp fastest).
    fn enumerate(l: &ModuleLayout) -> Vec<GridCoord> {
        let mut out = Vec::new();
        for pp in 0..l.pp {
            for dp in 0..l.dp {
                for cp in 0..l.cp {
                    for tp in 0..l.tp {
                        out.push(GridCoord { tp, cp, pp, dp });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn singleton_grid() {
        let l = layout(1, 1, 1, 1, 0);
        assert_eq!(l.coord_of_rank(0).unwrap(), GridCoord::default());
        assert_eq!(l.rank_of_coord(GridCoord::default()).unwrap(), 0);
        let shifted = layout(1, 1, 1, 1, 5);
        assert_eq!(shifted.rank_of_coord(GridCoord::default()).unwrap(), 5);
    }

    #[test]
    fn coord_of_rank_matches_enumeration() {
        let l = layout(2, 1, 2, 2, 0);
        let coords = enumerate(&l);
        assert_eq!(l.coord_of_rank(5).unwrap(), coords[5]);
        assert_eq!(coords[5], GridCoord::new(1, 0, 1, 0));
    }

    #[test]
    fn rank_below_offset_is_rejected() {
        let l = layout(4, 1, 1, 2, 8);
        assert!(matches!(
            l.coord_of_rank(7),
            Err(GridError::RankOutOfModule { rank: 7, .. })
        ));
    }

    #[test]
    fn bijection_without_collision() {
        let l = layout(2, 1, 1, 4, 0);
        let mut ranks: Vec<Rank> = enumerate(&l).into_iter().map(|c| l.rank_of_coord(c).unwrap()).collect();
        ranks.sort_unstable();
        assert_eq!(ranks, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn out_of_bounds_coord() {
        let l = layout(2, 1, 1, 1, 0);
        assert!(matches!(
            l.rank_of_coord(GridCoord::new(2, 0, 0, 0)),
            Err(GridError::CoordOutOfBounds { .. })
        ));
    }

    #[test]
    fn exhaustive_inverse_up_to_64() {
        for tp in [1, 2, 4] {
            for cp in [1, 2] {
                for pp in [1, 2, 4] {
                    for dp in [1, 2, 4] {
                        let l = layout(tp, cp, pp, dp, 3);
                        if l.world_size() > 64 {
                            continue;
                        }
                        for (i, c) in enumerate(&l).into_iter().enumerate() {
                            let r = l.rank_of_coord(c).unwrap();
                            assert_eq!(r, 3 + i);
                            assert_eq!(l.coord_of_rank(r).unwrap(), c);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition_batch(8, 1).unwrap(), vec![BatchInterval::new(0, 8)]);
        // sample j goes to shard floor(j * dp / B)
        let parts = partition_batch(8, 4).unwrap();
        for j in 0..8 {
            let shard = j * 4 / 8;
            assert!(parts[shard].start <= j && j < parts[shard].end());
        }
        assert_eq!(
            parts,
            vec![
                BatchInterval::new(0, 2),
                BatchInterval::new(2, 2),
                BatchInterval::new(4, 2),
                BatchInterval::new(6, 2)
            ]
        );
        assert!(matches!(
            partition_batch(10, 4),
            Err(GridError::IndivisibleBatch { batch: 10, dp: 4 })
        ));
    }

    #[test]
    fn leaders() {
        let l = layout(1, 1, 2, 3, 0);
        for pp in 0..2 {
            for dp in 0..3 {
                let ranks = l.shard_ranks(pp, dp).unwrap();
                assert_eq!(ranks, vec![l.leader_rank(pp, dp).unwrap()]);
            }
        }
        let l = layout(2, 2, 1, 2, 0);
        let oracle: Vec<Rank> = enumerate(&l)
            .into_iter()
            .enumerate()
            .filter(|(_, c)| c.tp == 0 && c.cp == 0)
            .map(|(r, _)| r)
            .collect();
        let leaders: Vec<Rank> = (0..2).map(|dp| l.leader_rank(0, dp).unwrap()).collect();
        assert_eq!(leaders, oracle);
        assert_eq!(leaders, vec![0, 4]);
        let shifted = layout(2, 2, 1, 2, 8);
        for dp in 0..2 {
            assert_eq!(shifted.leader_rank(0, dp).unwrap(), l.leader_rank(0, dp).unwrap() + 8);
        }
    }

    #[test]
    fn placements() {
        let a = ModuleLayout::new("language", 2, 1, 2, 2, 0).unwrap();
        let b = ModuleLayout::new("images", 1, 1, 1, 8, 0).unwrap();
        assert_eq!(placement_of(&a, &b).unwrap(), Placement::Colocated);
        let llm = ModuleLayout::new("language", 2, 1, 2, 1, 0).unwrap();
        let enc = ModuleLayout::new("images", 1, 1, 1, 4, 4).unwrap();
        assert_eq!(placement_of(&llm, &enc).unwrap(), Placement::NonColocated);
        assert_eq!(placement_of(&enc, &llm).unwrap(), Placement::NonColocated);
        let x = ModuleLayout::new("x", 6, 1, 1, 1, 0).unwrap();
        let y = ModuleLayout::new("y", 4, 1, 1, 1, 4).unwrap();
        assert!(matches!(placement_of(&x, &y), Err(GridError::PartialOverlap { .. })));
    }

    #[test]
    fn groups() {
        let l = layout(2, 2, 1, 2, 0);
        let c = l.coord_of_rank(5).unwrap();
        assert_eq!(l.tp_group(c), vec![4, 5]);
        assert_eq!(l.cp_group(c), vec![5, 7]);
        assert_eq!(l.dp_cp_group(c), vec![1, 3, 5, 7]);
        assert!(ModuleLayout::new("z", 0, 1, 1, 1, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partition_is_ordered_cover(len in 1usize..16, dp in 1usize..9) {
                let b = len * dp;
                let parts = partition_batch(b, dp).unwrap();
                prop_assert_eq!(parts.len(), dp);
                let mut next = 0;
                for p in &parts {
                    prop_assert_eq!(p.start, next);
                    next = p.end();
                }
                prop_assert_eq!(next, b);
            }

            #[test]
            fn leaders_are_canonical(tp in 1usize..4, cp in 1usize..3, pp in 1usize..3, dp in 1usize..4, off in 0usize..10) {
                let l = layout(tp, cp, pp, dp, off);
                for p in 0..pp {
                    let mut seen = std::collections::BTreeSet::new();
                    for d in 0..dp {
                        let r = l.leader_rank(p, d).unwrap();
                        let c = l.coord_of_rank(r).unwrap();
                        prop_assert_eq!((c.tp, c.cp, c.pp, c.dp), (0, 0, p, d));
                        seen.insert(r);
                    }
                    prop_assert_eq!(seen.len(), dp);
                }
            }

            #[test]
            fn placement_is_symmetric(a_len in 1usize..8, a_off in 0usize..8, b_len in 1usize..8, b_off in 0usize..8) {
                let a = layout(a_len, 1, 1, 1, a_off);
                let b = layout(b_len, 1, 1, 1, b_off);
                match (placement_of(&a, &b), placement_of(&b, &a)) {
                    (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
                    (Err(_), Err(_)) => {}
                    _ => prop_assert!(false, "asymmetric placement"),
                }
            }
        }
    }
}
