//! P1 triangle meshes: a snapped structured triangulation of a structure with
//! an optional coarse buffer annulus, plus a text ingest/export format.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{shapes::dist, Structure, Void};

use super::FemError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeTag {
    None,
    /// On the mesh outer boundary when no buffer is present.
    Outer,
    /// On the outermost boundary of the buffer annulus.
    BufferOuter,
    /// Snapped onto a pore or macro feature curve.
    Pore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Fine,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct TriMesh {
    pub nodes: Vec<[f64; 2]>,
    /// Positively oriented node index triples.
    pub triangles: Vec<[usize; 3]>,
    pub node_tags: Vec<NodeTag>,
    pub region: Vec<Region>,
    /// Fine-region grid spacing the mesh was built with.
    pub h: f64,
}

impl TriMesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (p, q, r) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]))
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t];
        let (p, q, r) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        [(p[0] + q[0] + r[0]) / 3.0, (p[1] + q[1] + r[1]) / 3.0]
    }

    pub fn bbox(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::MAX; 2];
        let mut hi = [f64::MIN; 2];
        for n in &self.nodes {
            for k in 0..2 {
                lo[k] = lo[k].min(n[k]);
                hi[k] = hi[k].max(n[k]);
            }
        }
        (lo, hi)
    }

    /// Nodes carrying the tag where displacement BCs are applied: the buffer
    /// outer boundary when a buffer exists, the plain outer boundary
    /// otherwise.
    pub fn bc_boundary_tag(&self) -> NodeTag {
        if self.node_tags.iter().any(|&t| t == NodeTag::BufferOuter) {
            NodeTag::BufferOuter
        } else {
            NodeTag::Outer
        }
    }

    fn validate(&self) -> Result<(), FemError> {
        let n = self.nodes.len();
        let mut used = vec![false; n];
        for (t, tri) in self.triangles.iter().enumerate() {
            for &i in tri {
                if i >= n {
                    return Err(FemError::Validation(format!(
                        "triangle {t} references node {i} out of range {n}"
                    )));
                }
                used[i] = true;
            }
            let a = self.signed_area(t);
            if a <= 0.0 {
                return Err(FemError::Validation(format!("triangle {t} not positively oriented")));
            }
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(FemError::Validation(format!("dangling node {i}")));
        }
        Ok(())
    }
}

/// Mesh construction parameters beyond the spec-level (h, buffer_factor)
/// pair. `fine_margin` extends the fine region past the structure domain so
/// patch margins sample well-resolved stress; `refine_levels` red-green
/// refines a band around pore curves (background spacing stays h) so P1
/// resolves the boundary stress concentration.
#[derive(Clone, Copy, Debug)]
pub struct MeshParams {
    pub h: f64,
    pub buffer_factor: f64,
    pub fine_margin: f64,
    pub refine_levels: usize,
}

impl MeshParams {
    pub fn new(h: f64, buffer_factor: f64) -> Self {
        Self { h, buffer_factor, fine_margin: 0.0, refine_levels: 2 }
    }
}

pub fn build_mesh(structure: &Structure, h: f64, buffer_factor: f64) -> Result<TriMesh, FemError> {
    build_mesh_with(structure, &MeshParams::new(h, buffer_factor))
}

pub fn build_mesh_with(structure: &Structure, params: &MeshParams) -> Result<TriMesh, FemError> {
    let (w, dh) = structure.domain();
    let r = structure.spec.micro_radius;
    if params.h > r / 3.0 + 1e-12 {
        return Err(FemError::Validation(format!(
            "fine spacing h = {} exceeds R/3 = {}",
            params.h,
            r / 3.0
        )));
    }
    let m = params.fine_margin;
    let (x_fine_lo, x_fine_hi) = (-m, w + m);
    let (y_fine_lo, y_fine_hi) = (-m, dh + m);

    let mut xs = fine_coords(x_fine_lo, x_fine_hi, params.h);
    let mut ys = fine_coords(y_fine_lo, y_fine_hi, params.h);
    let hx = xs[1] - xs[0];
    let hy = ys[1] - ys[0];

    let buffered = params.buffer_factor > 1.0 + 1e-12;
    if buffered {
        let pad_x = 0.5 * (params.buffer_factor - 1.0) * (x_fine_hi - x_fine_lo);
        let pad_y = 0.5 * (params.buffer_factor - 1.0) * (y_fine_hi - y_fine_lo);
        let steps_x = buffer_steps(pad_x, params.h);
        let steps_y = buffer_steps(pad_y, params.h);
        for &s in &steps_x {
            xs.insert(0, xs[0] - s);
            xs.push(*xs.last().unwrap() + s);
        }
        for &s in &steps_y {
            ys.insert(0, ys[0] - s);
            ys.push(*ys.last().unwrap() + s);
        }
    }

    let nx = xs.len();
    let ny = ys.len();
    let mut nodes: Vec<[f64; 2]> = Vec::with_capacity(nx * ny);
    for y in &ys {
        for x in &xs {
            nodes.push([*x, *y]);
        }
    }

    let mut tags = vec![NodeTag::None; nodes.len()];
    let outer_tag = if buffered { NodeTag::BufferOuter } else { NodeTag::Outer };
    for j in 0..ny {
        for i in 0..nx {
            if i == 0 || i == nx - 1 || j == 0 || j == ny - 1 {
                tags[j * nx + i] = outer_tag;
            }
        }
    }

    // Triangulate cells with alternating diagonals.
    let voids: Vec<Void> = structure.voids().collect();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    let mut region: Vec<Region> = Vec::new();
    let id = |i: usize, j: usize| j * nx + i;
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let bl = id(i, j);
            let br = id(i + 1, j);
            let tl = id(i, j + 1);
            let tr = id(i + 1, j + 1);
            let tris: [[usize; 3]; 2] = if (i + j) % 2 == 0 {
                [[bl, br, tr], [bl, tr, tl]]
            } else {
                [[bl, br, tl], [br, tr, tl]]
            };
            let cell_fine = {
                let cx = 0.5 * (xs[i] + xs[i + 1]);
                let cy = 0.5 * (ys[j] + ys[j + 1]);
                cx >= x_fine_lo - 1e-12
                    && cx <= x_fine_hi + 1e-12
                    && cy >= y_fine_lo - 1e-12
                    && cy <= y_fine_hi + 1e-12
            };
            for tri in tris {
                triangles.push(tri);
                region.push(if cell_fine { Region::Fine } else { Region::Buffer });
            }
        }
    }

    let mut data = MeshData { nodes, tags, triangles, region };
    let base_h = hx.min(hy);
    snap_and_clean(&mut data, &voids, 0.5 * base_h);
    for level in 1..=params.refine_levels {
        let h_level = base_h / (1u32 << (level - 1)) as f64;
        refine_near_curves(&mut data, &voids, 1.5 * h_level);
        snap_and_clean(&mut data, &voids, 0.25 * h_level);
    }

    let mesh = TriMesh {
        nodes: data.nodes,
        triangles: data.triangles,
        node_tags: data.tags,
        region: data.region,
        h: params.h,
    };
    let local_h = base_h / (1u32 << params.refine_levels) as f64;
    let min_area = 1e-6 * local_h * local_h;
    for t in 0..mesh.n_triangles() {
        let a = mesh.signed_area(t);
        if a.abs() < min_area {
            return Err(FemError::MeshDegenerate { triangle: t, area: a.abs() });
        }
    }
    mesh.validate()?;
    Ok(mesh)
}

struct MeshData {
    nodes: Vec<[f64; 2]>,
    tags: Vec<NodeTag>,
    triangles: Vec<[usize; 3]>,
    region: Vec<Region>,
}

/// Carves the voids out of the triangulation and fits the exposed boundary
/// to the curves:
///
/// 1. delete triangles whose centroid lies inside a void (staircase cut on
///    the unsnapped mesh, so no material notches appear),
/// 2. snap surviving nodes that are inside a void or within `band` of its
///    curve onto the curve,
/// 3. drop the void-side chord slivers the snapping may have produced
///    (all-on-curve triangles whose centroid falls inside),
/// 4. compact node numbering.
fn snap_and_clean(data: &mut MeshData, voids: &[Void], band: f64) {
    if voids.is_empty() {
        return;
    }
    delete_centroid_inside(data, voids);

    // Node -> incident triangles, to guard snaps against fan inversion.
    let mut fans: Vec<Vec<u32>> = vec![Vec::new(); data.nodes.len()];
    for (t, tri) in data.triangles.iter().enumerate() {
        for &i in tri {
            fans[i].push(t as u32);
        }
    }
    // A snap may neither invert nor collapse an incident triangle.
    let min_area2 = 2e-4 * band * band;
    let area_ok = move |data: &MeshData, t: usize, moved: usize, pos: [f64; 2]| -> bool {
        let tri = data.triangles[t];
        let pt = |i: usize| if i == moved { pos } else { data.nodes[i] };
        let (a, b, c) = (pt(tri[0]), pt(tri[1]), pt(tri[2]));
        (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]) > min_area2
    };

    // The deletion staircase exposes boundary edges; every endpoint of an
    // exposed edge must land on its curve or the hole keeps corners.
    let mut exposed = vec![false; data.nodes.len()];
    {
        use std::collections::HashMap;
        let mut edge_count: HashMap<(usize, usize), u8> = HashMap::new();
        for tri in &data.triangles {
            for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        for (&(a, b), &n) in &edge_count {
            if n == 1 {
                let on_outer = |i: usize| {
                    matches!(data.tags[i], NodeTag::Outer | NodeTag::BufferOuter)
                };
                if !(on_outer(a) && on_outer(b)) {
                    exposed[a] = true;
                    exposed[b] = true;
                }
            }
        }
    }

    for idx in 0..data.nodes.len() {
        if data.tags[idx] == NodeTag::Pore || fans[idx].is_empty() {
            continue;
        }
        if matches!(data.tags[idx], NodeTag::Outer | NodeTag::BufferOuter) {
            continue;
        }
        let p = data.nodes[idx];
        for v in voids {
            let d = v.signed_distance(p);
            if d < band || (exposed[idx] && d < 4.0 * band) {
                let q = v.snap_target(p);
                // Largest step toward the curve that keeps the fan valid.
                let mut alpha = 1.0f64;
                for _ in 0..5 {
                    let pos = [p[0] + alpha * (q[0] - p[0]), p[1] + alpha * (q[1] - p[1])];
                    if fans[idx].iter().all(|&t| area_ok(data, t as usize, idx, pos)) {
                        data.nodes[idx] = pos;
                        if alpha == 1.0 {
                            data.tags[idx] = NodeTag::Pore;
                        }
                        break;
                    }
                    alpha *= 0.5;
                }
                break;
            }
        }
    }

    delete_centroid_inside(data, voids);
    compact(data);
}

fn delete_centroid_inside(data: &mut MeshData, voids: &[Void]) {
    let mut kept_tris = Vec::with_capacity(data.triangles.len());
    let mut kept_region = Vec::with_capacity(data.region.len());
    for (tri, reg) in data.triangles.iter().zip(&data.region) {
        let c = [
            (data.nodes[tri[0]][0] + data.nodes[tri[1]][0] + data.nodes[tri[2]][0]) / 3.0,
            (data.nodes[tri[0]][1] + data.nodes[tri[1]][1] + data.nodes[tri[2]][1]) / 3.0,
        ];
        if !voids.iter().any(|v| v.contains(c)) {
            kept_tris.push(*tri);
            kept_region.push(*reg);
        }
    }
    data.triangles = kept_tris;
    data.region = kept_region;
}

fn compact(data: &mut MeshData) {
    let mut remap = vec![usize::MAX; data.nodes.len()];
    let mut new_nodes = Vec::new();
    let mut new_tags = Vec::new();
    for tri in &mut data.triangles {
        for idx in tri.iter_mut() {
            if remap[*idx] == usize::MAX {
                remap[*idx] = new_nodes.len();
                new_nodes.push(data.nodes[*idx]);
                new_tags.push(data.tags[*idx]);
            }
            *idx = remap[*idx];
        }
    }
    data.nodes = new_nodes;
    data.tags = new_tags;
}

/// Red-green refinement of the band around void curves: marked triangles
/// split four ways through edge midpoints; neighbors with split edges get
/// closure splits so the mesh stays conforming.
fn refine_near_curves(data: &mut MeshData, voids: &[Void], band: f64) {
    use std::collections::HashMap;
    let n_tris = data.triangles.len();
    let mut marked = vec![false; n_tris];
    for (t, tri) in data.triangles.iter().enumerate() {
        let near = tri.iter().any(|&i| {
            let d = voids.iter().map(|v| v.signed_distance(data.nodes[i]).abs()).fold(f64::MAX, f64::min);
            d <= band
        });
        if near {
            marked[t] = true;
        }
    }

    // Closure: a triangle with two or more split edges becomes red too.
    let edge_key = |a: usize, b: usize| -> (usize, usize) { (a.min(b), a.max(b)) };
    let mut split_edges: std::collections::HashSet<(usize, usize)> = Default::default();
    loop {
        split_edges.clear();
        for (t, tri) in data.triangles.iter().enumerate() {
            if marked[t] {
                split_edges.insert(edge_key(tri[0], tri[1]));
                split_edges.insert(edge_key(tri[1], tri[2]));
                split_edges.insert(edge_key(tri[2], tri[0]));
            }
        }
        let mut changed = false;
        for (t, tri) in data.triangles.iter().enumerate() {
            if marked[t] {
                continue;
            }
            let n_split = [
                edge_key(tri[0], tri[1]),
                edge_key(tri[1], tri[2]),
                edge_key(tri[2], tri[0]),
            ]
            .iter()
            .filter(|k| split_edges.contains(*k))
            .count();
            if n_split >= 2 {
                marked[t] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mid = |a: usize, b: usize,
                   nodes: &mut Vec<[f64; 2]>,
                   tags: &mut Vec<NodeTag>|
     -> usize {
        let key = edge_key(a, b);
        if let Some(&m) = midpoint.get(&key) {
            return m;
        }
        let p = [
            0.5 * (nodes[a][0] + nodes[b][0]),
            0.5 * (nodes[a][1] + nodes[b][1]),
        ];
        nodes.push(p);
        // Midpoints of boundary edges stay on that boundary.
        let tag = match (tags[a], tags[b]) {
            (NodeTag::Outer, NodeTag::Outer) => NodeTag::Outer,
            (NodeTag::BufferOuter, NodeTag::BufferOuter) => NodeTag::BufferOuter,
            _ => NodeTag::None,
        };
        tags.push(tag);
        let m = nodes.len() - 1;
        midpoint.insert(key, m);
        m
    };

    let mut out_tris = Vec::with_capacity(data.triangles.len() * 2);
    let mut out_region = Vec::with_capacity(data.region.len() * 2);
    for (t, tri) in data.triangles.clone().iter().enumerate() {
        let [a, b, c] = *tri;
        let reg = data.region[t];
        if marked[t] {
            let mab = mid(a, b, &mut data.nodes, &mut data.tags);
            let mbc = mid(b, c, &mut data.nodes, &mut data.tags);
            let mca = mid(c, a, &mut data.nodes, &mut data.tags);
            for child in [[a, mab, mca], [mab, b, mbc], [mca, mbc, c], [mab, mbc, mca]] {
                out_tris.push(child);
                out_region.push(reg);
            }
        } else {
            // Green closure: at most one split edge by construction.
            let splits = [
                (edge_key(a, b), (a, b, c)),
                (edge_key(b, c), (b, c, a)),
                (edge_key(c, a), (c, a, b)),
            ];
            let mut done = false;
            for (key, (p, q, o)) in splits {
                if split_edges.contains(&key) {
                    let m = mid(p, q, &mut data.nodes, &mut data.tags);
                    out_tris.push([p, m, o]);
                    out_tris.push([m, q, o]);
                    out_region.push(reg);
                    out_region.push(reg);
                    done = true;
                    break;
                }
            }
            if !done {
                out_tris.push([a, b, c]);
                out_region.push(reg);
            }
        }
    }
    data.triangles = out_tris;
    data.region = out_region;
}

fn fine_coords(lo: f64, hi: f64, h: f64) -> Vec<f64> {
    let n = ((hi - lo) / h).ceil().max(1.0) as usize;
    let step = (hi - lo) / n as f64;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

/// Geometrically growing buffer steps landing exactly on the requested
/// extent. Growth starts at twice the fine spacing and reaches the coarse
/// target within a few rings, keeping the interface conforming and well
/// conditioned.
fn buffer_steps(pad: f64, fine_h: f64) -> Vec<f64> {
    if pad <= 0.0 {
        return Vec::new();
    }
    let first = 2.0 * fine_h;
    if pad <= first {
        return vec![pad];
    }
    let mut steps = Vec::new();
    let mut cum = 0.0;
    let mut s = first;
    while cum + s < pad {
        steps.push(s);
        cum += s;
        s *= 1.6;
    }
    // Fold the remainder into the last ring so sizes stay monotone outward.
    let last = pad - cum;
    match steps.last_mut() {
        Some(prev) if last < *prev => *prev += last,
        _ => steps.push(last),
    }
    steps
}

/// Text format: header `nodes N triangles M`, then N lines `x y tag`, then
/// M lines `i j k region`.
pub fn write_mesh(mesh: &TriMesh) -> String {
    let mut out = String::new();
    writeln!(out, "nodes {} triangles {}", mesh.n_nodes(), mesh.n_triangles()).unwrap();
    for (p, t) in mesh.nodes.iter().zip(&mesh.node_tags) {
        let tag = match t {
            NodeTag::None => "-",
            NodeTag::Outer => "outer",
            NodeTag::BufferOuter => "buffer_outer",
            NodeTag::Pore => "pore",
        };
        writeln!(out, "{:.17e} {:.17e} {}", p[0], p[1], tag).unwrap();
    }
    for (tri, r) in mesh.triangles.iter().zip(&mesh.region) {
        let reg = match r {
            Region::Fine => "fine",
            Region::Buffer => "buffer",
        };
        writeln!(out, "{} {} {} {}", tri[0], tri[1], tri[2], reg).unwrap();
    }
    out
}

pub fn ingest_mesh(text: &str) -> Result<TriMesh, FemError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| FemError::Parse("empty mesh file".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "nodes" || parts[2] != "triangles" {
        return Err(FemError::Parse(format!("bad header: {header:?}")));
    }
    let n: usize = parts[1].parse().map_err(|_| FemError::Parse("bad node count".into()))?;
    let m: usize = parts[3].parse().map_err(|_| FemError::Parse("bad triangle count".into()))?;

    let mut nodes = Vec::with_capacity(n);
    let mut node_tags = Vec::with_capacity(n);
    for k in 0..n {
        let line = lines.next().ok_or_else(|| FemError::Parse(format!("missing node {k}")))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(FemError::Parse(format!("node line {k}: {line:?}")));
        }
        let x: f64 = f[0].parse().map_err(|_| FemError::Parse(format!("node {k} x")))?;
        let y: f64 = f[1].parse().map_err(|_| FemError::Parse(format!("node {k} y")))?;
        let tag = match f[2] {
            "-" => NodeTag::None,
            "outer" => NodeTag::Outer,
            "buffer_outer" => NodeTag::BufferOuter,
            "pore" => NodeTag::Pore,
            other => return Err(FemError::Parse(format!("unknown node tag {other:?}"))),
        };
        nodes.push([x, y]);
        node_tags.push(tag);
    }

    let mut triangles = Vec::with_capacity(m);
    let mut region = Vec::with_capacity(m);
    for k in 0..m {
        let line = lines.next().ok_or_else(|| FemError::Parse(format!("missing triangle {k}")))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(FemError::Parse(format!("triangle line {k}: {line:?}")));
        }
        let mut tri = [0usize; 3];
        for (slot, tok) in tri.iter_mut().zip(&f[..3]) {
            *slot = tok.parse().map_err(|_| FemError::Parse(format!("triangle {k} index")))?;
        }
        let reg = match f[3] {
            "fine" => Region::Fine,
            "buffer" => Region::Buffer,
            other => return Err(FemError::Parse(format!("unknown region {other:?}"))),
        };
        triangles.push(tri);
        region.push(reg);
    }

    // Index bounds come first; orientation math would read out of range.
    for (k, tri) in triangles.iter().enumerate() {
        for &i in tri {
            if i >= nodes.len() {
                return Err(FemError::Validation(format!(
                    "triangle {k} references node {i} out of range {}",
                    nodes.len()
                )));
            }
        }
    }
    let mut mesh = TriMesh { nodes, triangles, node_tags, region, h: 0.0 };
    // Fix up clockwise triangles before validating.
    for t in 0..mesh.n_triangles() {
        if mesh.signed_area(t) < 0.0 {
            mesh.triangles[t].swap(1, 2);
        }
    }
    // Estimate h from the smallest edge for downstream consumers.
    let mut h = f64::MAX;
    for tri in &mesh.triangles {
        for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
            h = h.min(dist(mesh.nodes[a], mesh.nodes[b]));
        }
    }
    mesh.h = h;
    for t in 0..mesh.n_triangles() {
        if mesh.signed_area(t) <= 0.0 {
            return Err(FemError::Validation(format!("triangle {t} degenerate")));
        }
    }
    mesh.validate()?;
    Ok(mesh)
}
