use super::{extract_polygons, rasterize_pixels, BinaryMask, Polygon};

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        DisjointSets {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller index stays the root so group order is stable
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Cascades polygons whose rasterized footprints share a pixel, transitively,
/// and retraces each group from its combined mask. Groups come out ordered by
/// their lowest input index.
pub fn merge_intersecting(polygons: &[Polygon], height: usize, width: usize) -> Vec<Polygon> {
    let pixels: Vec<Vec<u32>> = polygons
        .iter()
        .map(|p| rasterize_pixels(p, height, width))
        .collect();
    let mut owner = vec![u32::MAX; height * width];
    let mut sets = DisjointSets::new(polygons.len());
    for (i, px) in pixels.iter().enumerate() {
        for &p in px {
            let slot = &mut owner[p as usize];
            if *slot == u32::MAX {
                *slot = i as u32;
            } else {
                sets.union(*slot as usize, i);
            }
        }
    }

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of_root = vec![usize::MAX; polygons.len()];
    for i in 0..polygons.len() {
        let root = sets.find(i);
        if group_of_root[root] == usize::MAX {
            group_of_root[root] = groups.len();
            groups.push(Vec::new());
        }
        groups[group_of_root[root]].push(i);
    }

    let mut out = Vec::new();
    for members in groups {
        let flat: Vec<u32> = members.iter().flat_map(|&i| pixels[i].iter().copied()).collect();
        if flat.is_empty() {
            continue;
        }
        // trace inside the group's bounding box only
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for &p in &flat {
            let (r, c) = (p as usize / width, p as usize % width);
            r0 = r0.min(r);
            r1 = r1.max(r + 1);
            c0 = c0.min(c);
            c1 = c1.max(c + 1);
        }
        let (bh, bw) = (r1 - r0, c1 - c0);
        let mut local = BinaryMask::new(bh, bw);
        for &p in &flat {
            let (r, c) = (p as usize / width, p as usize % width);
            local.set(r - r0, c - c0, true);
        }
        out.extend(
            extract_polygons(&local)
                .into_iter()
                .map(|poly| poly.translate(c0 as f64, r0 as f64)),
        );
    }
    out
}
