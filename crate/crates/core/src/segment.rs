//! Fixed-cardinality patch segmentation.
//!
//! Two producers: ground-truth ownership from the simulator, and a
//! deterministic color-quantization + connected-components segmenter. Both
//! are normalized to exactly `N` slots ordered by descending size (ties by
//! the smallest patch index a slot contains), so slot positions are stable
//! and independent of raw label ids.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::imaging::{Image, PatchGeometry};

/// Hard partition of the `K` patches into `n_slots` slots (slots may be empty).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    n_slots: usize,
    assignment: Vec<usize>,
    counts: Vec<usize>,
}

impl MaskSet {
    pub fn new(n_slots: usize, assignment: Vec<usize>) -> Result<Self> {
        if n_slots == 0 {
            return Err(Error::Parameter("mask set needs at least one slot".into()));
        }
        let mut counts = vec![0; n_slots];
        for &s in &assignment {
            if s >= n_slots {
                return Err(Error::Parameter(format!("slot {s} out of range for {n_slots} slots")));
            }
            counts[s] += 1;
        }
        Ok(Self {
            n_slots,
            assignment,
            counts,
        })
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    pub fn k(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn non_empty(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn members(&self, slot: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&k| self.assignment[k] == slot).collect()
    }
}

/// Blends each patch toward a per-slot color and outlines slot borders.
pub fn overlay_masks(img: &Image, geom: &PatchGeometry, masks: &MaskSet) -> Result<Image> {
    if masks.k() != geom.k() {
        return Err(Error::Shape(format!("{} mask patches for a {}-patch grid", masks.k(), geom.k())));
    }
    const PALETTE: [[f64; 3]; 8] = [
        [0.9, 0.1, 0.1],
        [0.1, 0.7, 0.1],
        [0.1, 0.3, 0.9],
        [0.9, 0.8, 0.1],
        [0.8, 0.2, 0.8],
        [0.1, 0.8, 0.8],
        [0.95, 0.5, 0.1],
        [0.5, 0.5, 0.5],
    ];
    let mut out = img.clone();
    let ps = geom.patch_size;
    for k in 0..geom.k() {
        let p = geom.unflat(k);
        let slot = masks.assignment()[k];
        let tint = PALETTE[slot % PALETTE.len()];
        let right = p.col + 1 < geom.grid_w && masks.assignment()[k + 1] != slot;
        let below = p.row + 1 < geom.grid_h && masks.assignment()[k + geom.grid_w] != slot;
        for dv in 0..ps {
            for du in 0..ps {
                let (u, v) = (p.col * ps + du, p.row * ps + dv);
                let border = (right && du == ps - 1) || (below && dv == ps - 1);
                let px = img.pixel(u, v);
                let c = if border {
                    [0.0; 3]
                } else {
                    [0, 1, 2].map(|i| 0.6 * px[i] + 0.4 * tint[i])
                };
                out.set_pixel(u, v, c);
            }
        }
    }
    Ok(out)
}

/// Relabels parts to `0..M` by first appearance in patch order.
fn compact(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut map = HashMap::new();
    let mut originals = Vec::new();
    let compacted = labels
        .iter()
        .map(|&l| {
            *map.entry(l).or_insert_with(|| {
                originals.push(l);
                originals.len() - 1
            })
        })
        .collect();
    (compacted, originals)
}

/// Normalizes a raw partition (arbitrary label per patch) to exactly `n`
/// slots. `colors`, when given, maps a raw label to its quantized color and
/// steers merges toward same-colored neighbors.
pub fn normalize_slots(
    labels: &[usize],
    geom: &PatchGeometry,
    colors: Option<&HashMap<usize, u32>>,
    n: usize,
) -> Result<MaskSet> {
    if labels.len() != geom.k() {
        return Err(Error::Shape(format!("{} labels for {} patches", labels.len(), geom.k())));
    }
    if labels.is_empty() {
        return Err(Error::Parameter("empty partition".into()));
    }
    if n == 0 {
        return Err(Error::Parameter("slot count must be positive".into()));
    }
    let (mut part, originals) = compact(labels);
    let m = originals.len();
    let part_color: Vec<Option<u32>> = originals
        .iter()
        .map(|l| colors.and_then(|c| c.get(l).copied()))
        .collect();
    // alive[p]: part p still exists; merged parts point to their absorber.
    let mut alive = vec![true; m];
    let mut size = vec![0usize; m];
    let mut first = vec![usize::MAX; m];
    for (k, &p) in part.iter().enumerate() {
        size[p] += 1;
        first[p] = first[p].min(k);
    }
    let key = |p: usize, size: &[usize], first: &[usize]| (size[p], first[p]);
    let mut live = m;
    while live > n {
        let smallest = (0..m)
            .filter(|&p| alive[p])
            .min_by_key(|&p| key(p, &size, &first))
            .unwrap();
        let mut neighbors: Vec<usize> = Vec::new();
        for k in 0..part.len() {
            if part[k] != smallest {
                continue;
            }
            let pi = geom.unflat(k);
            let mut adj = Vec::with_capacity(4);
            if pi.row > 0 {
                adj.push(k - geom.grid_w);
            }
            if pi.row + 1 < geom.grid_h {
                adj.push(k + geom.grid_w);
            }
            if pi.col > 0 {
                adj.push(k - 1);
            }
            if pi.col + 1 < geom.grid_w {
                adj.push(k + 1);
            }
            for a in adj {
                let q = part[a];
                if q != smallest && !neighbors.contains(&q) {
                    neighbors.push(q);
                }
            }
        }
        let same_color = |q: &usize| part_color[smallest].is_some() && part_color[*q] == part_color[smallest];
        let absorber = neighbors
            .iter()
            .copied()
            .filter(same_color)
            .max_by(|&a, &b| size[a].cmp(&size[b]).then(first[b].cmp(&first[a])))
            .unwrap_or_else(|| {
                // Fallback: merge the two globally smallest parts.
                (0..m)
                    .filter(|&p| alive[p] && p != smallest)
                    .min_by_key(|&p| key(p, &size, &first))
                    .unwrap()
            });
        for p in part.iter_mut() {
            if *p == smallest {
                *p = absorber;
            }
        }
        size[absorber] += size[smallest];
        first[absorber] = first[absorber].min(first[smallest]);
        alive[smallest] = false;
        live -= 1;
    }
    let mut order: Vec<usize> = (0..m).filter(|&p| alive[p]).collect();
    order.sort_by(|&a, &b| size[b].cmp(&size[a]).then(first[a].cmp(&first[b])));
    let mut slot_of = vec![usize::MAX; m];
    for (slot, &p) in order.iter().enumerate() {
        slot_of[p] = slot;
    }
    MaskSet::new(n, part.iter().map(|&p| slot_of[p]).collect())
}

/// Ground-truth ownership normalized to `n` slots.
pub fn segment_oracle(gt: &MaskSet, geom: &PatchGeometry, n: usize) -> Result<MaskSet> {
    normalize_slots(gt.assignment(), geom, None, n)
}

/// 4 levels per channel.
pub fn quantize_rgb(rgb: [f64; 3]) -> u32 {
    let q = |x: f64| ((x * 255.0).round() as u32 >> 6).min(3);
    q(rgb[0]) * 16 + q(rgb[1]) * 4 + q(rgb[2])
}

/// Dominant quantized color per patch (ties to the smaller code).
pub fn dominant_colors(img: &Image, geom: &PatchGeometry) -> Result<Vec<u32>> {
    if img.height() != geom.height() || img.width() != geom.width() {
        return Err(Error::Shape("image does not match patch geometry".into()));
    }
    let ps = geom.patch_size;
    let mut out = Vec::with_capacity(geom.k());
    let mut hist = [0usize; 64];
    for k in 0..geom.k() {
        let p = geom.unflat(k);
        hist.iter_mut().for_each(|h| *h = 0);
        for v in p.row * ps..(p.row + 1) * ps {
            for u in p.col * ps..(p.col + 1) * ps {
                hist[quantize_rgb(img.pixel(u, v)) as usize] += 1;
            }
        }
        let mut best = 0;
        for (c, &h) in hist.iter().enumerate() {
            if h > hist[best] {
                best = c;
            }
        }
        out.push(best as u32);
    }
    Ok(out)
}

/// 4-connected components of equal values on the patch grid; labels by
/// first appearance in row-major order.
pub fn connected_components(values: &[u32], geom: &PatchGeometry) -> Vec<usize> {
    let mut label = vec![usize::MAX; values.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..values.len() {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        stack.push(start);
        while let Some(k) = stack.pop() {
            let p = geom.unflat(k);
            let mut visit = |q: usize| {
                if label[q] == usize::MAX && values[q] == values[k] {
                    label[q] = next;
                    stack.push(q);
                }
            };
            if p.row > 0 {
                visit(k - geom.grid_w);
            }
            if p.row + 1 < geom.grid_h {
                visit(k + geom.grid_w);
            }
            if p.col > 0 {
                visit(k - 1);
            }
            if p.col + 1 < geom.grid_w {
                visit(k + 1);
            }
        }
        next += 1;
    }
    label
}

pub fn segment_unsupervised(img: &Image, geom: &PatchGeometry, n: usize) -> Result<MaskSet> {
    let colors = dominant_colors(img, geom)?;
    let comps = connected_components(&colors, geom);
    let mut comp_color = HashMap::new();
    for (k, &c) in comps.iter().enumerate() {
        comp_color.entry(c).or_insert(colors[k]);
    }
    normalize_slots(&comps, geom, Some(&comp_color), n)
}

/// Fraction of patches covered by the best one-to-one matching between the
/// slots of `a` and `b` (exact assignment by subset dynamic programming).
pub fn mask_agreement(a: &MaskSet, b: &MaskSet) -> Result<f64> {
    if a.k() != b.k() {
        return Err(Error::Shape(format!("{} vs {} patches", a.k(), b.k())));
    }
    let (na, nb) = (a.n_slots(), b.n_slots());
    let (rows, cols, transpose) = if na >= nb { (na, nb, false) } else { (nb, na, true) };
    if cols > 20 {
        return Err(Error::Parameter("too many slots for exact matching".into()));
    }
    let mut overlap = vec![vec![0usize; cols]; rows];
    for k in 0..a.k() {
        let (i, j) = (a.assignment()[k], b.assignment()[k]);
        let (r, c) = if transpose { (j, i) } else { (i, j) };
        overlap[r][c] += 1;
    }
    // best[mask] over processed rows: max overlap using the column set `mask`.
    let full = 1usize << cols;
    let mut best = vec![i64::MIN; full];
    best[0] = 0;
    for row in &overlap {
        let mut next = best.clone();
        for mask in 0..full {
            if best[mask] == i64::MIN {
                continue;
            }
            for (c, &o) in row.iter().enumerate() {
                if mask & (1 << c) == 0 {
                    let m2 = mask | (1 << c);
                    next[m2] = next[m2].max(best[mask] + o as i64);
                }
            }
        }
        best = next;
    }
    let total = best.into_iter().max().unwrap_or(0);
    Ok(total as f64 / a.k() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render, sample_task};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom8() -> PatchGeometry {
        PatchGeometry::new(112, 112, 14).unwrap()
    }

    #[test]
    fn identity_when_counts_match() {
        let g = PatchGeometry::new(4, 4, 2).unwrap();
        let m = normalize_slots(&[0, 0, 1, 2], &g, None, 3).unwrap();
        assert_eq!(m.assignment(), &[0, 0, 1, 2]);
    }

    #[test]
    fn single_part_pads() {
        let g = geom8();
        let m = normalize_slots(&vec![4; 64], &g, None, 7).unwrap();
        assert_eq!(m.counts(), &[64, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn nine_parts_to_seven() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = PatchGeometry::new(12, 12, 2).unwrap();
        for _ in 0..200 {
            let labels: Vec<usize> = (0..g.k()).map(|k| if k < 9 { k } else { rng.gen_range(0..9) }).collect();
            let m = normalize_slots(&labels, &g, None, 7).unwrap();
            assert_eq!(m.n_slots(), 7);
            assert_eq!(m.counts().iter().sum::<usize>(), g.k());
            assert_eq!(m.non_empty(), 7);
            // Never splits a part.
            for a in 0..g.k() {
                for b in 0..g.k() {
                    if labels[a] == labels[b] {
                        assert_eq!(m.assignment()[a], m.assignment()[b]);
                    }
                }
            }
            // Canonical ordering.
            for w in m.counts().windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn same_color_neighbor_absorbs() {
        let g = PatchGeometry::new(2, 8, 2).unwrap();
        // Smallest part 0 (patch 2, color 5) touches the larger 2 (color 9)
        // and the same-colored 1 (color 5).
        let labels = [2, 2, 0, 1];
        let colors: HashMap<usize, u32> = [(0, 5), (1, 5), (2, 9)].into_iter().collect();
        let m = normalize_slots(&labels, &g, Some(&colors), 2).unwrap();
        assert_eq!(m.assignment()[2], m.assignment()[3]);
        assert_ne!(m.assignment()[1], m.assignment()[2]);
    }

    #[test]
    fn solid_image_single_slot() {
        let img = Image::new(112, 112, vec![0.3; 112 * 112 * 3]).unwrap();
        let m = segment_unsupervised(&img, &geom8(), 7).unwrap();
        assert_eq!(m.non_empty(), 1);
    }

    #[test]
    fn disjoint_same_color_squares_are_two_components() {
        let mut img = Image::new(112, 112, vec![0.9; 112 * 112 * 3]).unwrap();
        for (r0, c0) in [(0, 0), (56, 56)] {
            for v in r0..r0 + 28 {
                for u in c0..c0 + 28 {
                    img.set_pixel(u, v, [0.1, 0.1, 0.8]);
                }
            }
        }
        let m = segment_unsupervised(&img, &geom8(), 7).unwrap();
        assert_eq!(m.non_empty(), 3);
        assert_eq!(m.counts()[0], 64 - 8);
        assert_eq!(&m.counts()[1..3], &[4, 4]);
    }

    #[test]
    fn oracle_counts() {
        let (s, _) = sample_task(4);
        let r = render(&s).unwrap();
        let m = segment_oracle(&r.masks, &geom8(), 7).unwrap();
        assert_eq!(m.counts().iter().sum::<usize>(), 64);
        assert_eq!(m.non_empty(), r.masks.non_empty());
    }

    fn brute_agreement(a: &MaskSet, b: &MaskSet) -> f64 {
        fn perms(n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in 0..n {
                if !cur.contains(&i) {
                    cur.push(i);
                    perms(n, k, cur, out);
                    cur.pop();
                }
            }
        }
        let (small, large, flip) = if a.n_slots() <= b.n_slots() { (a, b, false) } else { (b, a, true) };
        let mut all = Vec::new();
        perms(large.n_slots(), small.n_slots(), &mut Vec::new(), &mut all);
        let mut best = 0;
        for p in all {
            let hits = (0..a.k())
                .filter(|&k| {
                    let (s, l) = if flip {
                        (b.assignment()[k], a.assignment()[k])
                    } else {
                        (a.assignment()[k], b.assignment()[k])
                    };
                    p[s] == l
                })
                .count();
            best = best.max(hits);
        }
        best as f64 / a.k() as f64
    }

    #[test]
    fn agreement_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let k = 20;
            let na = rng.gen_range(1..=5);
            let nb = rng.gen_range(1..=6);
            let a = MaskSet::new(na, (0..k).map(|_| rng.gen_range(0..na)).collect()).unwrap();
            let b = MaskSet::new(nb, (0..k).map(|_| rng.gen_range(0..nb)).collect()).unwrap();
            let fast = mask_agreement(&a, &b).unwrap();
            assert!((fast - brute_agreement(&a, &b)).abs() < 1e-12);
            assert!((mask_agreement(&b, &a).unwrap() - fast).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn always_a_partition(labels in proptest::collection::vec(0usize..12, 36), n in 1usize..10) {
                let g = PatchGeometry::new(12, 12, 2).unwrap();
                let m = normalize_slots(&labels, &g, None, n).unwrap();
                prop_assert_eq!(m.n_slots(), n);
                prop_assert_eq!(m.counts().iter().sum::<usize>(), 36);
            }

            #[test]
            fn label_permutation_invariant(labels in proptest::collection::vec(0usize..9, 36), shift in 1usize..50) {
                let g = PatchGeometry::new(12, 12, 2).unwrap();
                let permuted: Vec<usize> = labels.iter().map(|l| (l * 7 + shift) % 97).collect();
                let a = normalize_slots(&labels, &g, None, 5).unwrap();
                let b = normalize_slots(&permuted, &g, None, 5).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
