//! Mask-to-polygon conversion by tracing pixel-edge boundaries of
//! 8-connected components.

use std::collections::HashMap;

use super::{ring_signed_area, BinaryMask, Point, Polygon};

/// Labels 8-connected foreground components in raster-scan order of their
/// first pixel. Background is `u32::MAX`.
pub(crate) fn label_components(mask: &BinaryMask) -> (Vec<u32>, usize) {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![u32::MAX; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.bits()[start] || labels[start] != u32::MAX {
            continue;
        }
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if mask.bits()[j] && labels[j] == u32::MAX {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
        next += 1;
    }
    (labels, next as usize)
}

#[derive(Clone, Copy)]
struct Edge {
    from: (u32, u32),
    to: (u32, u32),
    /// Flat index of the foreground pixel this edge bounds.
    owner: u32,
}

/// One polygon per 8-connected foreground component. Rings follow pixel
/// edges; where two foreground pixels touch only at a corner the boundary
/// passes through that corner so the component stays a single polygon.
pub fn extract_polygons(mask: &BinaryMask) -> Vec<Polygon> {
    let (h, w) = (mask.height(), mask.width());
    let (labels, n_components) = label_components(mask);
    if n_components == 0 {
        return Vec::new();
    }
    let fg = |r: isize, c: isize| -> bool {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask.get(r as usize, c as usize)
    };

    // Boundary edges, oriented clockwise on screen around each pixel.
    let mut edges: Vec<Edge> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            let (x, y) = (c as u32, r as u32);
            let owner = (r * w + c) as u32;
            if !fg(ri - 1, ci) {
                edges.push(Edge { from: (x, y), to: (x + 1, y), owner });
            }
            if !fg(ri, ci + 1) {
                edges.push(Edge { from: (x + 1, y), to: (x + 1, y + 1), owner });
            }
            if !fg(ri + 1, ci) {
                edges.push(Edge { from: (x + 1, y + 1), to: (x, y + 1), owner });
            }
            if !fg(ri, ci - 1) {
                edges.push(Edge { from: (x, y + 1), to: (x, y), owner });
            }
        }
    }

    let mut outgoing: HashMap<(u32, u32), Vec<usize>> = HashMap::with_capacity(edges.len());
    for (i, e) in edges.iter().enumerate() {
        outgoing.entry(e.from).or_default().push(i);
    }

    let mut used = vec![false; edges.len()];
    let mut rings: Vec<Vec<Vec<Point>>> = vec![Vec::new(); n_components];
    for start in 0..edges.len() {
        if used[start] {
            continue;
        }
        let mut ring: Vec<(u32, u32)> = vec![edges[start].from];
        let mut cur = start;
        loop {
            used[cur] = true;
            let e = edges[cur];
            ring.push(e.to);
            let cands = &outgoing[&e.to];
            let next = if cands.len() == 1 {
                cands[0]
            } else {
                // Corner contact: continue along the diagonal neighbour.
                *cands
                    .iter()
                    .find(|&&i| edges[i].owner != e.owner && !used[i])
                    .or_else(|| cands.iter().find(|&&i| !used[i]))
                    .unwrap_or(&cands[0])
            };
            if next == start || used[next] {
                break;
            }
            cur = next;
        }
        let comp = labels[edges[start].owner as usize] as usize;
        rings[comp].push(simplify(&ring));
    }

    rings
        .into_iter()
        .filter(|r| !r.is_empty())
        .map(|mut comp_rings| {
            let outer = comp_rings
                .iter()
                .enumerate()
                .max_by(|a, b| ring_signed_area(a.1).total_cmp(&ring_signed_area(b.1)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let exterior = comp_rings.swap_remove(outer);
            Polygon::new(exterior, comp_rings).expect("traced rings are closed")
        })
        .collect()
}

/// Drops vertices that lie on a straight run. The ring is closed on input and output.
fn simplify(ring: &[(u32, u32)]) -> Vec<Point> {
    let pts = &ring[..ring.len() - 1];
    let n = pts.len();
    let dir = |a: (u32, u32), b: (u32, u32)| {
        (
            (b.0 as i64 - a.0 as i64).signum(),
            (b.1 as i64 - a.1 as i64).signum(),
        )
    };
    let mut kept: Vec<Point> = Vec::with_capacity(n + 1);
    for i in 0..n {
        let prev = pts[(i + n - 1) % n];
        let next = pts[(i + 1) % n];
        if dir(prev, pts[i]) != dir(pts[i], next) {
            kept.push((pts[i].0 as f64, pts[i].1 as f64));
        }
    }
    kept.push(kept[0]);
    kept
}
