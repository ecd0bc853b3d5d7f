//! Conforming 2D triangulations with newest vertex bisection.
//!
//! Elements store their vertices so that the *refinement edge* is the edge
//! opposite the first local vertex; the first local vertex is the newest
//! vertex. Bisection inserts the midpoint of the refinement edge and keeps
//! that convention for both children, which bounds the number of similarity
//! classes and hence the shape regularity of every refinement.
//!
//! Meshes are immutable: [`Mesh::refine`] returns a new mesh carrying a
//! genealogy link (parent elements and midpoint parents) used for
//! prolongation between nested P1 spaces.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quad::{signed_area, Point};

/// Sorted pair of vertex indices identifying an edge.
type EdgeKey = (usize, usize);

fn edge_key(a: usize, b: usize) -> EdgeKey {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Position of an element in the binary forest over the initial mesh.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Default)]
pub struct BisectionPath {
    len: u32,
    words: Vec<u64>,
}

impl BisectionPath {
    pub fn root() -> Self {
        Self::default()
    }

    pub fn generation(&self) -> u32 {
        self.len
    }

    fn push(&mut self, right: bool) {
        let word = (self.len / 64) as usize;
        if word == self.words.len() {
            self.words.push(0);
        }
        if right {
            self.words[word] |= 1u64 << (self.len % 64);
        }
        self.len += 1;
    }

    fn child(&self, right: bool) -> Self {
        let mut c = self.clone();
        c.push(right);
        c
    }

    fn bit(&self, i: u32) -> bool {
        (self.words[(i / 64) as usize] >> (i % 64)) & 1 == 1
    }
}

/// Root element plus bisection path.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Ancestry {
    pub root: usize,
    pub path: BisectionPath,
}

/// Link from a refined mesh to the mesh it was produced from.
#[derive(Clone, Debug)]
pub struct Genealogy {
    parent_fingerprint: u64,
    prev_vertex_count: usize,
    /// For every element of the new mesh, the index of its parent element
    /// (or of itself, if it was not refined) in the previous mesh.
    parent_elements: Vec<usize>,
    /// Endpoints (in the previous mesh) of the edge whose midpoint created
    /// each new vertex, aligned with `vertices[prev_vertex_count..]`.
    new_vertex_parents: Vec<(usize, usize)>,
    /// Previous-mesh indices of the elements that were actually bisected.
    refined_parents: Vec<usize>,
}

impl Genealogy {
    pub fn parent_fingerprint(&self) -> u64 {
        self.parent_fingerprint
    }
    pub fn prev_vertex_count(&self) -> usize {
        self.prev_vertex_count
    }
    pub fn parent_element(&self, new_element: usize) -> usize {
        self.parent_elements[new_element]
    }
    pub fn new_vertex_parents(&self) -> &[(usize, usize)] {
        &self.new_vertex_parents
    }
    pub fn refined_parent_count(&self) -> usize {
        self.refined_parents.len()
    }
    pub fn refined_parents(&self) -> &[usize] {
        &self.refined_parents
    }
}

/// Geometry of the initial mesh, shared by every refinement of it.
#[derive(Debug)]
struct InitialData {
    vertices: Vec<Point>,
    elements: Vec<[usize; 3]>,
    boundary: Vec<[bool; 3]>,
    fingerprint: u64,
}

/// A set of element indices to be refined.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MarkSet {
    indices: std::collections::BTreeSet<usize>,
}

impl MarkSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn all(n_elements: usize) -> Self {
        MarkSet {
            indices: (0..n_elements).collect(),
        }
    }

    pub fn insert(&mut self, element: usize) {
        self.indices.insert(element);
    }

    pub fn contains(&self, element: usize) -> bool {
        self.indices.contains(&element)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }
}

impl FromIterator<usize> for MarkSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        MarkSet {
            indices: iter.into_iter().collect(),
        }
    }
}

/// Conforming triangulation. Immutable after construction.
#[derive(Clone, Debug)]
pub struct Mesh {
    vertices: Vec<Point>,
    /// Vertex triples; the refinement edge is opposite local vertex 0.
    elements: Vec<[usize; 3]>,
    /// Per element: edge `i` (opposite local vertex `i`) lies on the domain
    /// boundary.
    boundary: Vec<[bool; 3]>,
    ancestry: Vec<Ancestry>,
    /// Per element and local edge: the element on the other side.
    neighbors: Vec<[Option<(usize, u8)>; 3]>,
    is_boundary_vertex: Vec<bool>,
    genealogy: Option<Genealogy>,
    initial: Arc<InitialData>,
    fingerprint: u64,
}

/// One problem found by [`Mesh::validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum MeshIssue {
    NonPositiveArea {
        element: usize,
        area: f64,
    },
    EdgeSharedByMoreThanTwo {
        edge: (usize, usize),
        count: usize,
    },
    SharedEdgeFlaggedBoundary {
        edge: (usize, usize),
    },
    UnsharedEdgeFlaggedInterior {
        edge: (usize, usize),
        element: usize,
    },
    HangingNode {
        vertex: usize,
        edge: (usize, usize),
    },
    IndexOutOfRange {
        element: usize,
    },
}

/// Diagnostics report; empty on a valid mesh.
#[derive(Clone, Debug, Default)]
pub struct MeshDiagnostics {
    pub issues: Vec<MeshIssue>,
}

impl MeshDiagnostics {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

fn fnv1a(data: impl IntoIterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for word in data {
        for byte in word.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn mesh_fingerprint(vertices: &[Point], elements: &[[usize; 3]], boundary: &[[bool; 3]]) -> u64 {
    let words = std::iter::once(vertices.len() as u64)
        .chain(
            vertices
                .iter()
                .flat_map(|p| [p[0].to_bits(), p[1].to_bits()]),
        )
        .chain(std::iter::once(elements.len() as u64))
        .chain(elements.iter().flat_map(|e| e.map(|v| v as u64)))
        .chain(
            boundary
                .iter()
                .map(|b| (b[0] as u64) | ((b[1] as u64) << 1) | ((b[2] as u64) << 2)),
        );
    fnv1a(words)
}

impl Mesh {
    // ----- constructors ---------------------------------------------------

    /// Build an initial mesh from positively oriented (or auto-corrected)
    /// triangles. Boundary flags are derived from edge counts and refinement
    /// edges are assigned by the longest-edge rule, ties broken towards the
    /// smallest opposite vertex index.
    pub fn from_triangles(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for p in &vertices {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::input("non-finite vertex coordinate"));
            }
        }
        let mut elements = Vec::with_capacity(triangles.len());
        for (i, t) in triangles.into_iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(Error::input(format!(
                    "triangle {i} has a vertex index out of range"
                )));
            }
            let mut t = t;
            let area = signed_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
            if area == 0.0 {
                return Err(Error::input(format!("triangle {i} is degenerate")));
            }
            if area < 0.0 {
                t.swap(1, 2);
            }
            // Longest edge (opposite vertex with the smallest index on ties)
            // becomes the refinement edge, i.e. rotates to position 0.
            let mut best = 0usize;
            let mut best_len = -1.0f64;
            for local in 0..3 {
                let a = vertices[t[(local + 1) % 3]];
                let b = vertices[t[(local + 2) % 3]];
                let len = (a[0] - b[0]).hypot(a[1] - b[1]);
                let better = len > best_len || (len == best_len && t[local] < t[best]);
                if better {
                    best = local;
                    best_len = len;
                }
            }
            t.rotate_left(best);
            elements.push(t);
        }
        // Boundary flags by edge count.
        let mut counts: HashMap<EdgeKey, usize> = HashMap::new();
        for t in &elements {
            for local in 0..3 {
                *counts
                    .entry(edge_key(t[(local + 1) % 3], t[(local + 2) % 3]))
                    .or_insert(0) += 1;
            }
        }
        let boundary: Vec<[bool; 3]> = elements
            .iter()
            .map(|t| {
                [0, 1, 2]
                    .map(|local| counts[&edge_key(t[(local + 1) % 3], t[(local + 2) % 3])] == 1)
            })
            .collect();
        Self::from_parts(vertices, elements, boundary)
    }

    /// Build an initial mesh from fully specified parts. Elements must be
    /// positively oriented with the refinement edge opposite local vertex 0.
    fn from_parts(
        vertices: Vec<Point>,
        elements: Vec<[usize; 3]>,
        boundary: Vec<[bool; 3]>,
    ) -> Result<Self> {
        let fingerprint = mesh_fingerprint(&vertices, &elements, &boundary);
        let ancestry = (0..elements.len())
            .map(|root| Ancestry {
                root,
                path: BisectionPath::root(),
            })
            .collect();
        let initial = Arc::new(InitialData {
            vertices: vertices.clone(),
            elements: elements.clone(),
            boundary: boundary.clone(),
            fingerprint,
        });
        Ok(Self::assemble(
            vertices, elements, boundary, ancestry, None, initial,
        ))
    }

    fn assemble(
        vertices: Vec<Point>,
        elements: Vec<[usize; 3]>,
        boundary: Vec<[bool; 3]>,
        ancestry: Vec<Ancestry>,
        genealogy: Option<Genealogy>,
        initial: Arc<InitialData>,
    ) -> Self {
        let mut adjacency: HashMap<EdgeKey, [(usize, u8); 2]> = HashMap::new();
        let mut adjacency_len: HashMap<EdgeKey, u8> = HashMap::new();
        for (e, t) in elements.iter().enumerate() {
            for local in 0..3u8 {
                let key = edge_key(t[(local as usize + 1) % 3], t[(local as usize + 2) % 3]);
                let slot = adjacency.entry(key).or_insert([(usize::MAX, 0); 2]);
                let len = adjacency_len.entry(key).or_insert(0);
                if *len < 2 {
                    slot[*len as usize] = (e, local);
                }
                *len += 1;
            }
        }
        let mut neighbors = vec![[None; 3]; elements.len()];
        for (key, len) in &adjacency_len {
            if *len == 2 {
                let [a, b] = adjacency[key];
                neighbors[a.0][a.1 as usize] = Some(b);
                neighbors[b.0][b.1 as usize] = Some(a);
            }
        }
        let mut is_boundary_vertex = vec![false; vertices.len()];
        for (e, t) in elements.iter().enumerate() {
            for local in 0..3 {
                if boundary[e][local] {
                    is_boundary_vertex[t[(local + 1) % 3]] = true;
                    is_boundary_vertex[t[(local + 2) % 3]] = true;
                }
            }
        }
        let fingerprint = mesh_fingerprint(&vertices, &elements, &boundary);
        Mesh {
            vertices,
            elements,
            boundary,
            ancestry,
            neighbors,
            is_boundary_vertex,
            genealogy,
            initial,
            fingerprint,
        }
    }

    /// Unit square split along the (0,0)-(1,1) diagonal into two triangles;
    /// the diagonal is the refinement edge of both.
    pub fn unit_square() -> Self {
        let vertices = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        Mesh::from_triangles(vertices, vec![[0, 1, 2], [0, 2, 3]]).expect("static mesh")
    }

    /// Uniform criss-cross triangulation of the L-shaped domain
    /// `(-1,1)^2 \ [0,1]x[-1,0]` with mesh width 1/4: 48 square cells, four
    /// triangles each, 192 elements in total.
    pub fn initial_lshape() -> Self {
        let h = 0.25;
        let mut vertices: Vec<Point> = Vec::new();
        let mut index: HashMap<(i64, i64), usize> = HashMap::new();
        // Coordinates are multiples of h/2 = 1/8; key by eighths.
        let mut vid = |x: f64, y: f64, vertices: &mut Vec<Point>| -> usize {
            let key = ((x * 8.0).round() as i64, (y * 8.0).round() as i64);
            *index.entry(key).or_insert_with(|| {
                vertices.push([x, y]);
                vertices.len() - 1
            })
        };
        let mut triangles = Vec::new();
        for j in 0..8 {
            for i in 0..8 {
                let x0 = -1.0 + h * i as f64;
                let y0 = -1.0 + h * j as f64;
                // Skip cells inside the removed quadrant [0,1] x [-1,0].
                if x0 >= -1e-12 && y0 <= -h + 1e-12 {
                    continue;
                }
                let bl = vid(x0, y0, &mut vertices);
                let br = vid(x0 + h, y0, &mut vertices);
                let tr = vid(x0 + h, y0 + h, &mut vertices);
                let tl = vid(x0, y0 + h, &mut vertices);
                let c = vid(x0 + 0.5 * h, y0 + 0.5 * h, &mut vertices);
                triangles.push([c, bl, br]);
                triangles.push([c, br, tr]);
                triangles.push([c, tr, tl]);
                triangles.push([c, tl, bl]);
            }
        }
        Mesh::from_triangles(vertices, triangles).expect("static mesh")
    }

    // ----- accessors ------------------------------------------------------

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn vertex(&self, v: usize) -> Point {
        self.vertices[v]
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn element(&self, e: usize) -> [usize; 3] {
        self.elements[e]
    }

    pub fn element_points(&self, e: usize) -> [Point; 3] {
        self.elements[e].map(|v| self.vertices[v])
    }

    pub fn boundary_flags(&self, e: usize) -> [bool; 3] {
        self.boundary[e]
    }

    pub fn neighbor(&self, e: usize, local_edge: u8) -> Option<(usize, u8)> {
        self.neighbors[e][local_edge as usize]
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.is_boundary_vertex[v]
    }

    pub fn area(&self, e: usize) -> f64 {
        let [a, b, c] = self.element_points(e);
        signed_area(a, b, c)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_elements()).map(|e| self.area(e)).sum()
    }

    /// Bisection depth of the element.
    pub fn generation(&self, e: usize) -> u32 {
        self.ancestry[e].path.generation()
    }

    pub fn ancestry(&self, e: usize) -> &Ancestry {
        &self.ancestry[e]
    }

    pub fn genealogy(&self) -> Option<&Genealogy> {
        self.genealogy.as_ref()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn initial_fingerprint(&self) -> u64 {
        self.initial.fingerprint
    }

    /// Interior angles of an element, in radians.
    pub fn angles(&self, e: usize) -> [f64; 3] {
        let p = self.element_points(e);
        [0, 1, 2].map(|i| {
            let a = p[i];
            let b = p[(i + 1) % 3];
            let c = p[(i + 2) % 3];
            let u = [b[0] - a[0], b[1] - a[1]];
            let v = [c[0] - a[0], c[1] - a[1]];
            let dot = u[0] * v[0] + u[1] * v[1];
            let cross = u[0] * v[1] - u[1] * v[0];
            cross.abs().atan2(dot)
        })
    }

    /// Do the two meshes partition the domain into the same elements
    /// (as leaves of the bisection forest), regardless of ordering?
    pub fn same_refinement(&self, other: &Mesh) -> bool {
        if self.initial.fingerprint != other.initial.fingerprint
            || self.n_elements() != other.n_elements()
        {
            return false;
        }
        let mine: std::collections::HashSet<&Ancestry> = self.ancestry.iter().collect();
        other.ancestry.iter().all(|a| mine.contains(a))
    }

    // ----- refinement -----------------------------------------------------

    /// Newest-vertex bisection of all marked elements plus the minimal
    /// closure needed for conformity. Every marked element is split into
    /// 2 to 4 children within this single call.
    pub fn refine(&self, marked: &MarkSet) -> Result<Mesh> {
        if let Some(bad) = marked.iter().find(|&e| e >= self.n_elements()) {
            return Err(Error::input(format!(
                "marked element {bad} out of range (mesh has {} elements)",
                self.n_elements()
            )));
        }

        // Least fixed point of: an element with any marked edge has a marked
        // refinement edge.
        let mut edge_marked: std::collections::HashSet<EdgeKey> = std::collections::HashSet::new();
        let mut stack: Vec<usize> = Vec::new();
        let refedge = |t: &[usize; 3]| edge_key(t[1], t[2]);
        for e in marked.iter() {
            let key = refedge(&self.elements[e]);
            if edge_marked.insert(key) {
                stack.push(e);
                if let Some((n, _)) = self.neighbors[e][0] {
                    stack.push(n);
                }
            }
        }
        while let Some(e) = stack.pop() {
            let t = &self.elements[e];
            let any = (0..3).any(|local| {
                edge_marked.contains(&edge_key(t[(local + 1) % 3], t[(local + 2) % 3]))
            });
            let key0 = refedge(t);
            if any && !edge_marked.contains(&key0) {
                edge_marked.insert(key0);
                stack.push(e);
                if let Some((n, _)) = self.neighbors[e][0] {
                    stack.push(n);
                }
            }
        }

        // Bisect. Children replace the parent in place, extras are appended;
        // midpoint vertices are appended in creation order.
        let prev_vertex_count = self.vertices.len();
        let mut vertices = self.vertices.clone();
        let mut midpoints: HashMap<EdgeKey, usize> = HashMap::new();
        let mut new_vertex_parents: Vec<(usize, usize)> = Vec::new();
        let mut elements: Vec<[usize; 3]> = Vec::with_capacity(self.elements.len());
        let mut boundary: Vec<[bool; 3]> = Vec::with_capacity(self.elements.len());
        let mut ancestry: Vec<Ancestry> = Vec::with_capacity(self.elements.len());
        let mut parent_elements: Vec<usize> = Vec::with_capacity(self.elements.len());
        let mut refined_parents: Vec<usize> = Vec::new();

        // Emitted leaves of one parent's local bisection tree.
        struct Leaf {
            tri: [usize; 3],
            flags: [bool; 3],
            path: BisectionPath,
        }

        for e in 0..self.elements.len() {
            let t = self.elements[e];
            let flags = self.boundary[e];
            let path = self.ancestry[e].path.clone();
            if !edge_marked.contains(&refedge(&t)) {
                elements.push(t);
                boundary.push(flags);
                ancestry.push(self.ancestry[e].clone());
                parent_elements.push(e);
                continue;
            }
            refined_parents.push(e);
            // Recursion depth is at most two: a child's refinement edge is
            // an original edge of the parent and may itself be marked;
            // grandchildren refinement edges are newly created and never are.
            let mut leaves: Vec<Leaf> = Vec::with_capacity(4);
            bisect_into(
                t,
                flags,
                path,
                &edge_marked,
                &mut vertices,
                &mut midpoints,
                &mut new_vertex_parents,
                &mut |tri, flags, path| leaves.push(Leaf { tri, flags, path }),
            );
            debug_assert!(leaves.len() >= 2 && leaves.len() <= 4);
            for leaf in leaves {
                elements.push(leaf.tri);
                boundary.push(leaf.flags);
                ancestry.push(Ancestry {
                    root: self.ancestry[e].root,
                    path: leaf.path,
                });
                parent_elements.push(e);
            }
        }

        // Move each parent's first child into the parent's slot: the loop
        // above produced children grouped after untouched predecessors, so
        // reorder to "replace in place, append extras".
        let reordered = reorder_in_place(
            elements,
            boundary,
            ancestry,
            parent_elements,
            self.elements.len(),
        );
        let (elements, boundary, ancestry, parent_elements) = reordered;

        let genealogy = Genealogy {
            parent_fingerprint: self.fingerprint,
            prev_vertex_count,
            parent_elements,
            new_vertex_parents,
            refined_parents,
        };
        Ok(Mesh::assemble(
            vertices,
            elements,
            boundary,
            ancestry,
            Some(genealogy),
            Arc::clone(&self.initial),
        ))
    }

    /// Refine every element at least once.
    pub fn uniform_refine(&self) -> Mesh {
        self.refine(&MarkSet::all(self.n_elements()))
            .expect("all-elements mark set is always valid")
    }

    /// Coarsest common refinement of two meshes generated from the same
    /// initial mesh.
    pub fn overlay(&self, other: &Mesh) -> Result<Mesh> {
        if self.initial.fingerprint != other.initial.fingerprint {
            return Err(Error::input(
                "overlay requires meshes refined from the same initial mesh",
            ));
        }
        let n_roots = self.initial.elements.len();
        let mut tries: Vec<TrieNode> = (0..n_roots).map(|_| TrieNode::default()).collect();
        for a in self.ancestry.iter().chain(other.ancestry.iter()) {
            tries[a.root].insert(&a.path, 0);
        }

        let mut vertices = self.initial.vertices.clone();
        let mut midpoints: HashMap<EdgeKey, usize> = HashMap::new();
        let mut elements = Vec::new();
        let mut boundary = Vec::new();
        let mut ancestry = Vec::new();
        #[allow(clippy::needless_range_loop)]
        for root in 0..n_roots {
            rebuild(
                root,
                self.initial.elements[root],
                self.initial.boundary[root],
                BisectionPath::root(),
                &tries[root],
                &mut vertices,
                &mut midpoints,
                &mut elements,
                &mut boundary,
                &mut ancestry,
            );
        }
        Ok(Mesh::assemble(
            vertices,
            elements,
            boundary,
            ancestry,
            None,
            Arc::clone(&self.initial),
        ))
    }

    // ----- diagnostics ----------------------------------------------------

    /// Check conformity, orientation, and boundary-flag consistency.
    pub fn validate(&self) -> MeshDiagnostics {
        let mut issues = Vec::new();
        let n = self.vertices.len();
        for (e, t) in self.elements.iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                issues.push(MeshIssue::IndexOutOfRange { element: e });
                continue;
            }
            let area = self.area(e);
            if !(area > 0.0) {
                issues.push(MeshIssue::NonPositiveArea { element: e, area });
            }
        }
        // Edge occurrence counts and flags.
        let mut occurrences: HashMap<EdgeKey, Vec<(usize, usize)>> = HashMap::new();
        for (e, t) in self.elements.iter().enumerate() {
            for local in 0..3 {
                occurrences
                    .entry(edge_key(t[(local + 1) % 3], t[(local + 2) % 3]))
                    .or_default()
                    .push((e, local));
            }
        }
        let mut keys: Vec<&EdgeKey> = occurrences.keys().collect();
        keys.sort();
        for key in keys {
            let occ = &occurrences[key];
            match occ.len() {
                1 => {
                    let (e, local) = occ[0];
                    if !self.boundary[e][local] {
                        issues.push(MeshIssue::UnsharedEdgeFlaggedInterior {
                            edge: *key,
                            element: e,
                        });
                    }
                }
                2 => {
                    if occ.iter().any(|&(e, local)| self.boundary[e][local]) {
                        issues.push(MeshIssue::SharedEdgeFlaggedBoundary { edge: *key });
                    }
                }
                c => issues.push(MeshIssue::EdgeSharedByMoreThanTwo {
                    edge: *key,
                    count: c,
                }),
            }
        }
        // Hanging nodes: a vertex sitting exactly at an edge midpoint.
        let coord_index: HashMap<(u64, u64), usize> = self
            .vertices
            .iter()
            .enumerate()
            .map(|(v, p)| ((p[0].to_bits(), p[1].to_bits()), v))
            .collect();
        let mut seen = std::collections::HashSet::new();
        for t in &self.elements {
            for local in 0..3 {
                let key = edge_key(t[(local + 1) % 3], t[(local + 2) % 3]);
                if !seen.insert(key) {
                    continue;
                }
                let a = self.vertices[key.0];
                let b = self.vertices[key.1];
                let m = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
                if let Some(&v) = coord_index.get(&(m[0].to_bits(), m[1].to_bits())) {
                    if v != key.0 && v != key.1 {
                        issues.push(MeshIssue::HangingNode {
                            vertex: v,
                            edge: key,
                        });
                    }
                }
            }
        }
        MeshDiagnostics { issues }
    }

    // ----- plain-text exchange format --------------------------------------

    /// Serialize to the plain-text format:
    ///
    /// ```text
    /// vertices N elements M
    /// x y                      (N lines)
    /// i j k refedge b0 b1 b2   (M lines)
    /// ```
    ///
    /// Indices are 0-based; `refedge` is the local index of the refinement
    /// edge (always 0 on export since storage is normalized); `b0 b1 b2`
    /// flag the edges opposite local vertices 0, 1, 2 as boundary (1) or
    /// interior (0). Coordinates use shortest round-trip decimal rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "vertices {} elements {}",
            self.n_vertices(),
            self.n_elements()
        );
        for p in &self.vertices {
            let _ = writeln!(out, "{} {}", p[0], p[1]);
        }
        for (t, b) in self.elements.iter().zip(&self.boundary) {
            let _ = writeln!(
                out,
                "{} {} {} 0 {} {} {}",
                t[0], t[1], t[2], b[0] as u8, b[1] as u8, b[2] as u8
            );
        }
        out
    }

    /// Parse the plain-text format. The result is treated as a fresh initial
    /// mesh (ancestry and genealogy are not part of the format). Any
    /// `refedge` value is accepted; element vertices are rotated so that the
    /// refinement edge ends up opposite local vertex 0.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (line_no, header) = lines.next().ok_or_else(|| Error::MeshFormat {
            line: 1,
            message: "empty input".into(),
        })?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let bad_header = |line: usize| Error::MeshFormat {
            line: line + 1,
            message: "expected header `vertices N elements M`".into(),
        };
        if parts.len() != 4 || parts[0] != "vertices" || parts[2] != "elements" {
            return Err(bad_header(line_no));
        }
        let n: usize = parts[1].parse().map_err(|_| bad_header(line_no))?;
        let m: usize = parts[3].parse().map_err(|_| bad_header(line_no))?;
        let mut vertices = Vec::with_capacity(n);
        for _ in 0..n {
            let (line_no, line) = lines.next().ok_or_else(|| Error::MeshFormat {
                line: n + 2,
                message: "unexpected end of vertex list".into(),
            })?;
            let parse = || -> Option<Point> {
                let mut it = line.split_whitespace();
                let x = it.next()?.parse().ok()?;
                let y = it.next()?.parse().ok()?;
                if it.next().is_some() {
                    return None;
                }
                Some([x, y])
            };
            vertices.push(parse().ok_or_else(|| Error::MeshFormat {
                line: line_no + 1,
                message: "expected `x y`".into(),
            })?);
        }
        let mut elements = Vec::with_capacity(m);
        let mut boundary = Vec::with_capacity(m);
        for _ in 0..m {
            let (line_no, line) = lines.next().ok_or_else(|| Error::MeshFormat {
                line: n + m + 2,
                message: "unexpected end of element list".into(),
            })?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: &str| Error::MeshFormat {
                line: line_no + 1,
                message: msg.into(),
            };
            if fields.len() != 7 {
                return Err(err("expected `i j k refedge b0 b1 b2`"));
            }
            let idx: Vec<usize> = fields[..4]
                .iter()
                .map(|s| s.parse().map_err(|_| err("bad integer field")))
                .collect::<Result<_>>()?;
            let flags: Vec<u8> = fields[4..]
                .iter()
                .map(|s| s.parse().map_err(|_| err("bad boundary flag")))
                .collect::<Result<_>>()?;
            let refedge = idx[3];
            if refedge > 2 {
                return Err(err("refedge must be 0, 1 or 2"));
            }
            if flags.iter().any(|&f| f > 1) {
                return Err(err("boundary flags must be 0 or 1"));
            }
            let mut t = [idx[0], idx[1], idx[2]];
            let mut b = [flags[0] == 1, flags[1] == 1, flags[2] == 1];
            t.rotate_left(refedge);
            b.rotate_left(refedge);
            if t.iter().any(|&v| v >= n) {
                return Err(err("vertex index out of range"));
            }
            elements.push(t);
            boundary.push(b);
        }
        Self::from_parts(vertices, elements, boundary)
    }
}

/// Recursive bisection of one element, guarded by the marked-edge set.
/// Recursion depth is at most two: grandchildren refinement edges are newly
/// created and can never be marked.
#[allow(clippy::too_many_arguments)]
fn bisect_into(
    tri: [usize; 3],
    flags: [bool; 3],
    path: BisectionPath,
    edge_marked: &std::collections::HashSet<EdgeKey>,
    vertices: &mut Vec<Point>,
    midpoints: &mut HashMap<EdgeKey, usize>,
    new_vertex_parents: &mut Vec<(usize, usize)>,
    emit: &mut impl FnMut([usize; 3], [bool; 3], BisectionPath),
) {
    let key = edge_key(tri[1], tri[2]);
    if !edge_marked.contains(&key) {
        emit(tri, flags, path);
        return;
    }
    let m = *midpoints.entry(key).or_insert_with(|| {
        let a = vertices[key.0];
        let b = vertices[key.1];
        vertices.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
        new_vertex_parents.push(key);
        vertices.len() - 1
    });
    let [v0, v1, v2] = tri;
    let [b0, b1, b2] = flags;
    // Left child keeps edge 1 of the parent as its refinement edge,
    // right child keeps edge 2.
    bisect_into(
        [m, v2, v0],
        [b1, false, b0],
        path.child(false),
        edge_marked,
        vertices,
        midpoints,
        new_vertex_parents,
        emit,
    );
    bisect_into(
        [m, v0, v1],
        [b2, b0, false],
        path.child(true),
        edge_marked,
        vertices,
        midpoints,
        new_vertex_parents,
        emit,
    );
}

type Reordered = (Vec<[usize; 3]>, Vec<[bool; 3]>, Vec<Ancestry>, Vec<usize>);

/// Rearrange the contiguous child groups produced by `refine` so that each
/// refined parent's first child occupies the parent's old slot and the
/// remaining children move to the tail, preserving creation order.
fn reorder_in_place(
    elements: Vec<[usize; 3]>,
    boundary: Vec<[bool; 3]>,
    ancestry: Vec<Ancestry>,
    parent_elements: Vec<usize>,
    n_old: usize,
) -> Reordered {
    let total = elements.len();
    let mut order: Vec<usize> = Vec::with_capacity(total);
    let mut extras: Vec<usize> = Vec::with_capacity(total - n_old);
    let mut k = 0usize;
    for parent in 0..n_old {
        debug_assert_eq!(parent_elements[k], parent);
        order.push(k);
        k += 1;
        while k < total && parent_elements[k] == parent {
            extras.push(k);
            k += 1;
        }
    }
    order.extend(extras);
    let elements = order.iter().map(|&i| elements[i]).collect();
    let boundary = order.iter().map(|&i| boundary[i]).collect();
    let ancestry_out = order.iter().map(|&i| ancestry[i].clone()).collect();
    let parents = order.iter().map(|&i| parent_elements[i]).collect();
    (elements, boundary, ancestry_out, parents)
}

/// Binary trie over bisection paths, used by `overlay`.
#[derive(Default)]
struct TrieNode {
    children: Option<Box<[TrieNode; 2]>>,
}

impl TrieNode {
    fn insert(&mut self, path: &BisectionPath, depth: u32) {
        if depth == path.generation() {
            return;
        }
        let children = self
            .children
            .get_or_insert_with(|| Box::new([TrieNode::default(), TrieNode::default()]));
        let side = path.bit(depth) as usize;
        children[side].insert(path, depth + 1);
    }
}

#[allow(clippy::too_many_arguments)]
fn rebuild(
    root: usize,
    tri: [usize; 3],
    flags: [bool; 3],
    path: BisectionPath,
    node: &TrieNode,
    vertices: &mut Vec<Point>,
    midpoints: &mut HashMap<EdgeKey, usize>,
    elements: &mut Vec<[usize; 3]>,
    boundary: &mut Vec<[bool; 3]>,
    ancestry: &mut Vec<Ancestry>,
) {
    let Some(children) = &node.children else {
        elements.push(tri);
        boundary.push(flags);
        ancestry.push(Ancestry { root, path });
        return;
    };
    let key = edge_key(tri[1], tri[2]);
    let m = *midpoints.entry(key).or_insert_with(|| {
        let a = vertices[key.0];
        let b = vertices[key.1];
        vertices.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
        vertices.len() - 1
    });
    let [v0, v1, v2] = tri;
    let [b0, b1, b2] = flags;
    rebuild(
        root,
        [m, v2, v0],
        [b1, false, b0],
        path.child(false),
        &children[0],
        vertices,
        midpoints,
        elements,
        boundary,
        ancestry,
    );
    rebuild(
        root,
        [m, v0, v1],
        [b2, b0, false],
        path.child(true),
        &children[1],
        vertices,
        midpoints,
        elements,
        boundary,
        ancestry,
    );
}
