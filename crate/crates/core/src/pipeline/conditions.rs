use crate::codec::SemanticVector;
use crate::model::{ConditionSet, Phase};
use crate::sphere_grid::{NeighborSet, PatchCoord, TokenGrid};

/// Condition sequence for a patch: `semantic` first, then the tokens of
/// every neighbor in `set` for which `available` holds. Neighbor tokens keep
/// their true lattice coordinates, so a neighbor reached across the seam
/// sits at its own `x` in `[0, w)`.
pub fn build_conditions(
    grid: &TokenGrid,
    set: &NeighborSet,
    phase: Phase,
    semantic: &[SemanticVector],
    available: impl Fn(PatchCoord) -> bool,
) -> ConditionSet {
    let spec = grid.spec();
    let mut tokens = Vec::with_capacity(set.len() * spec.tokens_per_patch());
    let mut coords = Vec::with_capacity(tokens.capacity());
    for patch in set.patches().filter(|&p| available(p)) {
        tokens.extend(grid.patch_tokens(patch));
        coords.extend(spec.patch_coords(patch));
    }
    ConditionSet {
        semantic: semantic.to_vec(),
        tokens,
        coords,
        phase,
    }
}

/// Largest condition length any regime can produce for a grid with `p x p`
/// patches and up to four semantic vectors.
pub fn max_condition_len(tokens_per_patch: usize) -> usize {
    8 * tokens_per_patch + 4
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere_grid::{GridSpec, TokenCoord};

    #[test]
    fn seam_neighbors_keep_true_coordinates() {
        let spec = GridSpec::new(2, 3, 2, 16).unwrap();
        let tokens: Vec<u16> = (0..spec.width() * spec.height()).map(|v| (v % 16) as u16).collect();
        let grid = TokenGrid::from_tokens(spec, tokens).unwrap();
        let patch = PatchCoord::new(0, 2);
        let set = spec.sphere_neighbors_ys(patch);
        let c = build_conditions(&grid, &set, Phase::Pass2, &[], |_| true);
        assert_eq!(c.tokens.len(), set.len() * 4);
        // Right neighbor across the seam is column 0: x in 0..2.
        let order: Vec<_> = set.patches().collect();
        let k = order.iter().position(|p| *p == PatchCoord::new(0, 0)).unwrap();
        assert_eq!(c.coords[4 * k], TokenCoord::new(0, 0));
        assert_eq!(c.tokens[4 * k], grid.get(0, 0));
        assert_eq!(c.coords[4 * k + 3], TokenCoord::new(1, 1));
    }

    #[test]
    fn unavailable_neighbors_are_skipped() {
        let spec = GridSpec::new(2, 3, 2, 16).unwrap();
        let grid = TokenGrid::filled(spec, 3);
        let patch = PatchCoord::new(1, 1);
        let set = spec.window_neighbors_yw(patch);
        assert_eq!(set.len(), 3);
        let c = build_conditions(&grid, &set, Phase::Pass1, &[], |p| p.j == 1);
        assert_eq!(c.tokens.len(), 4);
        assert!(c.coords.iter().all(|t| (2..4).contains(&t.x) && t.y < 2));
    }
}
