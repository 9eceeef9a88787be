use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive range of layers recomputed by the receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerGroup {
    pub start: usize,
    pub end: usize,
}

impl LayerGroup {
    pub fn new(start: usize, end: usize) -> Self {
        LayerGroup { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start..=self.end).contains(&layer)
    }
}

/// Sorted, disjoint, non-adjacent layer groups to recompute; every other
/// layer reuses the sender's KV cache.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct RecomputeConfig {
    groups: Vec<LayerGroup>,
}

impl RecomputeConfig {
    /// Full reuse: nothing recomputed.
    pub fn empty() -> Self {
        RecomputeConfig::default()
    }

    pub fn recompute_all(n_layers: usize) -> Self {
        RecomputeConfig {
            groups: vec![LayerGroup::new(0, n_layers - 1)],
        }
    }

    pub fn single(start: usize, end: usize) -> Result<Self> {
        Self::from_ranges([(start, end)])
    }

    /// Sorts the ranges and merges overlapping or touching ones.
    pub fn from_ranges(ranges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut groups: Vec<LayerGroup> = Vec::new();
        let mut input: Vec<(usize, usize)> = ranges.into_iter().collect();
        for &(a, b) in &input {
            if a > b {
                return Err(Error::InvalidRecomputeConfig(format!("range [{a},{b}] is reversed")));
            }
        }
        input.sort_unstable();
        for (a, b) in input {
            match groups.last_mut() {
                Some(last) if a <= last.end + 1 => last.end = last.end.max(b),
                _ => groups.push(LayerGroup::new(a, b)),
            }
        }
        Ok(RecomputeConfig { groups })
    }

    /// Checks every range lies within `0..n_layers`.
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if let Some(g) = self.groups.iter().find(|g| g.end >= n_layers) {
            return Err(Error::InvalidRecomputeConfig(format!(
                "range [{},{}] exceeds layer count {n_layers}",
                g.start, g.end
            )));
        }
        Ok(())
    }

    pub fn groups(&self) -> &[LayerGroup] {
        &self.groups
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn recomputed_layer_count(&self) -> usize {
        self.groups.iter().map(LayerGroup::len).sum()
    }

    pub fn is_recomputed(&self, layer: usize) -> bool {
        self.groups.iter().any(|g| g.contains(layer))
    }

    pub fn group_of(&self, layer: usize) -> Option<LayerGroup> {
        self.groups.iter().copied().find(|g| g.contains(layer))
    }

    /// Group starts above layer 0: the layers that need the sender's E cache.
    pub fn transition_layers(&self) -> Vec<usize> {
        self.groups.iter().filter(|g| g.start > 0).map(|g| g.start).collect()
    }

    /// Layers outside every group, ascending.
    pub fn reused_layers(&self, n_layers: usize) -> Vec<usize> {
        (0..n_layers).filter(|&l| !self.is_recomputed(l)).collect()
    }

    pub fn is_recompute_all(&self, n_layers: usize) -> bool {
        self.recomputed_layer_count() == n_layers && self.groups.first().map(|g| g.start) == Some(0)
    }
}

impl TryFrom<Vec<(usize, usize)>> for RecomputeConfig {
    type Error = Error;

    fn try_from(ranges: Vec<(usize, usize)>) -> Result<Self> {
        Self::from_ranges(ranges)
    }
}

impl From<RecomputeConfig> for Vec<(usize, usize)> {
    fn from(config: RecomputeConfig) -> Self {
        config.groups.iter().map(|g| (g.start, g.end)).collect()
    }
}

impl fmt::Display for RecomputeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, g) in self.groups.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "[{},{}]", g.start, g.end)?;
        }
        f.write_str("]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn merges_touching_ranges() {
        let c = RecomputeConfig::from_ranges([(5, 6), (0, 1), (2, 3)]).unwrap();
        assert_eq!(c.groups(), &[LayerGroup::new(0, 3), LayerGroup::new(5, 6)]);
        assert_eq!(c.recomputed_layer_count(), 6);
        assert_eq!(c.transition_layers(), vec![5]);
        assert_eq!(c.reused_layers(8), vec![4, 7]);
        assert_eq!(c.to_string(), "[[0,3],[5,6]]");
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(RecomputeConfig::from_ranges([(3, 2)]).is_err());
        let c = RecomputeConfig::single(4, 8).unwrap();
        assert!(c.validate(8).is_err());
        assert!(c.validate(9).is_ok());
    }

    #[test]
    fn recompute_all_detection() {
        assert!(RecomputeConfig::recompute_all(8).is_recompute_all(8));
        assert!(RecomputeConfig::from_ranges([(0, 3), (4, 7)])
            .unwrap()
            .is_recompute_all(8));
        assert!(!RecomputeConfig::single(1, 7).unwrap().is_recompute_all(8));
        assert!(!RecomputeConfig::empty().is_recompute_all(8));
    }

    proptest! {
        #[test]
        fn normalized_groups_are_sorted_disjoint_nonadjacent(
            ranges in prop::collection::vec((0usize..20, 0usize..5), 0..8)
        ) {
            let ranges: Vec<(usize, usize)> = ranges.into_iter().map(|(a, w)| (a, a + w)).collect();
            let c = RecomputeConfig::from_ranges(ranges.clone()).unwrap();
            for pair in c.groups().windows(2) {
                prop_assert!(pair[0].end + 1 < pair[1].start);
            }
            for layer in 0..30 {
                let covered = ranges.iter().any(|&(a, b)| (a..=b).contains(&layer));
                prop_assert_eq!(covered, c.is_recomputed(layer));
            }
            let json = serde_json::to_string(&c).unwrap();
            let back: RecomputeConfig = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
