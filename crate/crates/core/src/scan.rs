//! Prefix sums used to compile merge index maps.

/// Exclusive prefix sum: `out[i] = values[0] + ... + values[i - 1]`.
/// Returns the prefix array and the grand total.
pub fn exclusive_scan(values: &[u32]) -> (Vec<u32>, u32) {
    let mut out = Vec::with_capacity(values.len());
    let mut running = 0u32;
    for &v in values {
        out.push(running);
        running += v;
    }
    (out, running)
}

/// Exclusive scan in place over fixed-size tiles: each tile is reduced, the
/// tile totals are scanned, and the offsets are pushed back into every tile.
/// Produces the same result as [`exclusive_scan`]; this is the shape a
/// device-wide scan takes when tiles run concurrently.
pub fn exclusive_scan_tiled(values: &mut [u32], tile: usize) -> u32 {
    assert!(tile > 0);
    let totals: Vec<u32> = values.chunks(tile).map(|c| c.iter().sum()).collect();
    let (offsets, total) = exclusive_scan(&totals);
    for (chunk, offset) in values.chunks_mut(tile).zip(offsets) {
        let mut running = offset;
        for v in chunk.iter_mut() {
            let x = *v;
            *v = running;
            running += x;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_cases() {
        assert_eq!(exclusive_scan(&[]), (vec![], 0));
        assert_eq!(exclusive_scan(&[3, 1, 4]), (vec![0, 3, 4], 8));
    }

    proptest! {
        #[test]
        fn tiled_matches_sequential(v in prop::collection::vec(0u32..8, 0..300), tile in 1usize..40) {
            let (expect, total) = exclusive_scan(&v);
            let mut w = v.clone();
            prop_assert_eq!(exclusive_scan_tiled(&mut w, tile), total);
            prop_assert_eq!(w, expect);
        }
    }
}
