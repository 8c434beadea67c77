//! 2D-mesh topology: tiles, directed links, minimal-path enumeration.
//!
//! Tile ids are `(x, y)` coordinates with row-major integer encoding
//! (`id = y * width + x`), so id 0 is the corner `(0, 0)` and ids grow
//! eastward first. Trace and task-graph files use these integer ids.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// One tile (router + PE) position in the mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tile {
    pub x: u16,
    pub y: u16,
}

impl Tile {
    pub fn new(x: u16, y: u16) -> Self {
        Tile { x, y }
    }

    pub fn id(&self, width: u16) -> usize {
        self.y as usize * width as usize + self.x as usize
    }

    pub fn from_id(id: usize, width: u16) -> Self {
        Tile { x: (id % width as usize) as u16, y: (id / width as usize) as u16 }
    }

    /// Manhattan distance.
    pub fn dist(&self, other: Tile) -> u32 {
        self.x.abs_diff(other.x) as u32 + self.y.abs_diff(other.y) as u32
    }
}

impl fmt::Display for Tile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// Port directions. `y` grows northward, `x` grows eastward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    North,
    East,
    South,
    West,
    Local,
}

pub const CARDINALS: [Direction; 4] =
    [Direction::North, Direction::East, Direction::South, Direction::West];

impl Direction {
    pub fn opposite(self) -> Direction {
        match self {
            Direction::North => Direction::South,
            Direction::East => Direction::West,
            Direction::South => Direction::North,
            Direction::West => Direction::East,
            Direction::Local => Direction::Local,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Direction::North => 0,
            Direction::East => 1,
            Direction::South => 2,
            Direction::West => 3,
            Direction::Local => 4,
        }
    }

    pub fn from_index(i: usize) -> Direction {
        match i {
            0 => Direction::North,
            1 => Direction::East,
            2 => Direction::South,
            3 => Direction::West,
            _ => Direction::Local,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Direction::North => 'N',
            Direction::East => 'E',
            Direction::South => 'S',
            Direction::West => 'W',
            Direction::Local => 'L',
        };
        write!(f, "{c}")
    }
}

/// A directed link identifier. Inter-router links connect adjacent tiles;
/// every tile also has a local injection (PE -> router) and ejection
/// (router -> PE) link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LinkId {
    Internal { from: Tile, to: Tile },
    Injection(Tile),
    Ejection(Tile),
}

impl LinkId {
    pub fn is_internal(&self) -> bool {
        matches!(self, LinkId::Internal { .. })
    }

    /// The router at the receiving end of this link (owner of its buffer).
    pub fn sink(&self) -> Tile {
        match *self {
            LinkId::Internal { to, .. } => to,
            LinkId::Injection(t) | LinkId::Ejection(t) => t,
        }
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkId::Internal { from, to } => write!(f, "{from}->{to}"),
            LinkId::Injection(t) => write!(f, "inj{t}"),
            LinkId::Ejection(t) => write!(f, "ej{t}"),
        }
    }
}

/// A `width x height` mesh with uniform link capacity in bits/second.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshTopology {
    pub width: u16,
    pub height: u16,
    pub link_capacity: f64,
}

impl MeshTopology {
    /// Build a mesh. Both dimensions must be at least 2.
    pub fn new(width: u16, height: u16, link_capacity: f64) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::Config(format!(
                "mesh dimensions must be >= 2, got {width}x{height}"
            )));
        }
        if link_capacity <= 0.0 {
            return Err(Error::Config("link capacity must be positive".into()));
        }
        Ok(MeshTopology { width, height, link_capacity })
    }

    pub fn num_tiles(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn contains(&self, t: Tile) -> bool {
        t.x < self.width && t.y < self.height
    }

    pub fn tiles(&self) -> impl Iterator<Item = Tile> + '_ {
        (0..self.num_tiles()).map(|id| Tile::from_id(id, self.width))
    }

    pub fn neighbor(&self, t: Tile, dir: Direction) -> Option<Tile> {
        let (x, y) = (t.x as i32, t.y as i32);
        let (nx, ny) = match dir {
            Direction::North => (x, y + 1),
            Direction::East => (x + 1, y),
            Direction::South => (x, y - 1),
            Direction::West => (x - 1, y),
            Direction::Local => return None,
        };
        if nx < 0 || ny < 0 || nx >= self.width as i32 || ny >= self.height as i32 {
            None
        } else {
            Some(Tile::new(nx as u16, ny as u16))
        }
    }

    /// Direction of `to` as seen from `from`; the tiles must be adjacent.
    pub fn direction_of(&self, from: Tile, to: Tile) -> Direction {
        if to.x == from.x + 1 && to.y == from.y {
            Direction::East
        } else if from.x == to.x + 1 && to.y == from.y {
            Direction::West
        } else if to.y == from.y + 1 && to.x == from.x {
            Direction::North
        } else if from.y == to.y + 1 && to.x == from.x {
            Direction::South
        } else {
            Direction::Local
        }
    }

    /// All directed inter-router links, in a stable order.
    pub fn internal_links(&self) -> Vec<LinkId> {
        let mut out = Vec::new();
        for t in self.tiles() {
            for dir in CARDINALS {
                if let Some(n) = self.neighbor(t, dir) {
                    out.push(LinkId::Internal { from: t, to: n });
                }
            }
        }
        out
    }

    /// Count of directed inter-router links: `2 * (2*w*h - w - h)`.
    pub fn internal_link_count(&self) -> usize {
        let (w, h) = (self.width as usize, self.height as usize);
        2 * (2 * w * h - w - h)
    }

    /// Number of monotone minimal paths between two tiles: C(d, dx).
    pub fn minimal_path_count(&self, s: Tile, d: Tile) -> u64 {
        let dx = s.x.abs_diff(d.x) as u64;
        let dy = s.y.abs_diff(d.y) as u64;
        binomial(dx + dy, dx)
    }

    /// Enumerate all monotone minimal paths from `s` to `d` as tile
    /// sequences (inclusive of both endpoints). The order is stable:
    /// at every branch the x-step is explored before the y-step.
    pub fn enumerate_minimal_paths(&self, s: Tile, d: Tile) -> Vec<Vec<Tile>> {
        assert!(self.contains(s) && self.contains(d), "tiles outside mesh");
        let mut out = Vec::new();
        let mut cur = vec![s];
        collect_paths(s, d, &mut cur, &mut out);
        out
    }

    /// Links traversed by a tile path, with the injection link prepended.
    /// The ejection link is excluded: destinations consume instantly.
    pub fn path_links(&self, path: &[Tile]) -> Vec<LinkId> {
        let mut links = Vec::with_capacity(path.len());
        if let Some(&first) = path.first() {
            links.push(LinkId::Injection(first));
        }
        for w in path.windows(2) {
            links.push(LinkId::Internal { from: w[0], to: w[1] });
        }
        links
    }
}

fn collect_paths(cur: Tile, d: Tile, acc: &mut Vec<Tile>, out: &mut Vec<Vec<Tile>>) {
    if cur == d {
        out.push(acc.clone());
        return;
    }
    let step = |next: Tile, acc: &mut Vec<Tile>, out: &mut Vec<Vec<Tile>>| {
        acc.push(next);
        collect_paths(next, d, acc, out);
        acc.pop();
    };
    if cur.x != d.x {
        let nx = if d.x > cur.x { cur.x + 1 } else { cur.x - 1 };
        step(Tile::new(nx, cur.y), acc, out);
    }
    if cur.y != d.y {
        let ny = if d.y > cur.y { cur.y + 1 } else { cur.y - 1 };
        step(Tile::new(cur.x, ny), acc, out);
    }
}

/// Dimension-ordered (X then Y) route between two tiles.
pub fn xy_path(s: Tile, d: Tile) -> Vec<Tile> {
    let mut path = vec![s];
    let mut cur = s;
    while cur.x != d.x {
        cur.x = if d.x > cur.x { cur.x + 1 } else { cur.x - 1 };
        path.push(cur);
    }
    while cur.y != d.y {
        cur.y = if d.y > cur.y { cur.y + 1 } else { cur.y - 1 };
        path.push(cur);
    }
    path
}

pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_2x2_has_8_internal_links() {
        let m = MeshTopology::new(2, 2, 1e9).unwrap();
        assert_eq!(m.internal_links().len(), 8);
        assert_eq!(m.internal_link_count(), 8);
    }

    #[test]
    fn mesh_3x3_has_24_internal_links() {
        // 12 undirected mesh edges, doubled.
        let m = MeshTopology::new(3, 3, 1e9).unwrap();
        let links = m.internal_links();
        assert_eq!(links.len(), 24);
        assert_eq!(m.internal_link_count(), 24);
        // enumerate undirected edges independently
        let mut undirected = std::collections::BTreeSet::new();
        for l in &links {
            if let LinkId::Internal { from, to } = l {
                let (a, b) = (from.id(3).min(to.id(3)), from.id(3).max(to.id(3)));
                undirected.insert((a, b));
            }
        }
        assert_eq!(undirected.len(), 12);
    }

    #[test]
    fn degenerate_mesh_rejected() {
        assert!(MeshTopology::new(1, 4, 1e9).is_err());
        assert!(MeshTopology::new(4, 1, 1e9).is_err());
        assert!(MeshTopology::new(4, 4, 0.0).is_err());
    }

    #[test]
    fn minimal_paths_count_and_shape() {
        let m = MeshTopology::new(4, 4, 1e9).unwrap();
        let s = Tile::new(0, 0);
        let d = Tile::new(2, 1);
        let paths = m.enumerate_minimal_paths(s, d);
        assert_eq!(paths.len(), 3); // C(3,2) = 3
        for p in &paths {
            assert_eq!(p.len() as u32, s.dist(d) + 1);
            assert_eq!(*p.first().unwrap(), s);
            assert_eq!(*p.last().unwrap(), d);
        }
        // stable order: x-first exploration
        assert_eq!(paths[0], vec![s, Tile::new(1, 0), Tile::new(2, 0), d]);
    }

    #[test]
    fn minimal_paths_degenerate_and_single_dim() {
        let m = MeshTopology::new(4, 4, 1e9).unwrap();
        let p = m.enumerate_minimal_paths(Tile::new(0, 0), Tile::new(0, 0));
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].len(), 1);
        let p = m.enumerate_minimal_paths(Tile::new(0, 0), Tile::new(3, 0));
        assert_eq!(p.len(), 1); // C(3,0) = 1
    }

    #[test]
    fn path_count_matches_enumeration_exhaustively() {
        let m = MeshTopology::new(5, 4, 1e9).unwrap();
        for s in m.tiles() {
            for d in m.tiles() {
                let n = m.enumerate_minimal_paths(s, d).len() as u64;
                assert_eq!(n, m.minimal_path_count(s, d), "{s}->{d}");
            }
        }
    }

    #[test]
    fn path_links_include_injection() {
        let m = MeshTopology::new(3, 3, 1e9).unwrap();
        let path = vec![Tile::new(0, 0), Tile::new(1, 0), Tile::new(1, 1)];
        let links = m.path_links(&path);
        assert_eq!(links.len(), 3);
        assert_eq!(links[0], LinkId::Injection(Tile::new(0, 0)));
        assert!(links[1..].iter().all(|l| l.is_internal()));
    }
}
