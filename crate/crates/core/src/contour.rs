//! Marching-squares iso-contours on a rectilinear scalar grid.

use std::collections::HashMap;

pub type Point = [f64; 2];

/// Scalar field sampled at `(xs[i], ys[j])`, stored as `values[j * xs.len() + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid<'a> {
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    pub values: &'a [f64],
}

impl ScalarGrid<'_> {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.xs.len() + i]
    }
}

fn lerp(a: Point, b: Point, va: f64, vb: f64, level: f64) -> Point {
    let t = if vb == va { 0.5 } else { ((level - va) / (vb - va)).clamp(0.0, 1.0) };
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Edge identifiers, used to stitch segments from neighbouring cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Edge {
    /// Horizontal edge from node `(i, j)` to `(i + 1, j)`.
    H(usize, usize),
    /// Vertical edge from node `(i, j)` to `(i, j + 1)`.
    V(usize, usize),
}

/// Extracts the `level` iso-lines as polylines. A node counts as "above"
/// when its value is `≥ level`; saddle cells are disambiguated by the cell
/// centre average. Non-finite nodes suppress their cells.
pub fn marching_squares(grid: &ScalarGrid<'_>, level: f64) -> Vec<Vec<Point>> {
    let (nx, ny) = (grid.xs.len(), grid.ys.len());
    if nx < 2 || ny < 2 || grid.values.len() != nx * ny {
        return Vec::new();
    }
    let mut points: HashMap<Edge, Point> = HashMap::new();
    let mut segments: Vec<(Edge, Edge)> = Vec::new();
    let mut point_on = |e: Edge| -> Edge {
        points.entry(e).or_insert_with(|| {
            let (a, b, va, vb) = match e {
                Edge::H(i, j) => (
                    [grid.xs[i], grid.ys[j]],
                    [grid.xs[i + 1], grid.ys[j]],
                    grid.at(i, j),
                    grid.at(i + 1, j),
                ),
                Edge::V(i, j) => (
                    [grid.xs[i], grid.ys[j]],
                    [grid.xs[i], grid.ys[j + 1]],
                    grid.at(i, j),
                    grid.at(i, j + 1),
                ),
            };
            lerp(a, b, va, vb, level)
        });
        e
    };
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let v = [grid.at(i, j), grid.at(i + 1, j), grid.at(i + 1, j + 1), grid.at(i, j + 1)];
            if v.iter().any(|x| !x.is_finite()) {
                continue;
            }
            let case = v
                .iter()
                .enumerate()
                .fold(0u8, |acc, (k, &x)| acc | (u8::from(x >= level) << k));
            let bottom = Edge::H(i, j);
            let right = Edge::V(i + 1, j);
            let top = Edge::H(i, j + 1);
            let left = Edge::V(i, j);
            let centre_above = v.iter().sum::<f64>() / 4.0 >= level;
            let segs: &[(Edge, Edge)] = match case {
                0 | 15 => &[],
                1 | 14 => &[(left, bottom)],
                2 | 13 => &[(bottom, right)],
                3 | 12 => &[(left, right)],
                4 | 11 => &[(right, top)],
                6 | 9 => &[(bottom, top)],
                7 | 8 => &[(left, top)],
                5 => {
                    if centre_above {
                        &[(left, top), (bottom, right)]
                    } else {
                        &[(left, bottom), (right, top)]
                    }
                }
                10 => {
                    if centre_above {
                        &[(left, bottom), (right, top)]
                    } else {
                        &[(left, top), (bottom, right)]
                    }
                }
                _ => unreachable!(),
            };
            for &(a, b) in segs {
                segments.push((point_on(a), point_on(b)));
            }
        }
    }
    stitch(&segments, &points)
}

fn stitch(segments: &[(Edge, Edge)], points: &HashMap<Edge, Point>) -> Vec<Vec<Point>> {
    let mut adjacency: HashMap<Edge, Vec<usize>> = HashMap::new();
    for (s, &(a, b)) in segments.iter().enumerate() {
        adjacency.entry(a).or_default().push(s);
        adjacency.entry(b).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    let other = |s: usize, e: Edge| if segments[s].0 == e { segments[s].1 } else { segments[s].0 };
    // Open chains start at edges with a single segment; closed loops follow.
    let mut seeds: Vec<usize> = (0..segments.len())
        .filter(|&s| adjacency[&segments[s].0].len() == 1 || adjacency[&segments[s].1].len() == 1)
        .collect();
    seeds.extend(0..segments.len());
    for s0 in seeds {
        if used[s0] {
            continue;
        }
        let (a, b) = segments[s0];
        let start = if adjacency[&a].len() == 1 { a } else if adjacency[&b].len() == 1 { b } else { a };
        used[s0] = true;
        let mut chain = vec![start, other(s0, start)];
        loop {
            let tail = *chain.last().expect("nonempty");
            let next = adjacency[&tail].iter().copied().find(|&s| !used[s]);
            match next {
                Some(s) => {
                    used[s] = true;
                    chain.push(other(s, tail));
                }
                None => break,
            }
        }
        lines.push(chain.iter().map(|e| points[e]).collect());
    }
    lines
}
