//! Synthetic pixel grids with nested polygon partitions.
//!
//! [`make_world`] builds three nested partitions of a rectangular grid that
//! stand in for administrative levels 1-3: every level-(k+1) polygon lies
//! inside exactly one level-k polygon, every polygon is an edge-connected
//! pixel set, and average polygon size shrinks as the level increases.
//! With `irregularity = 0` the polygons are exact rectangular blocks from
//! recursive bisection; with `irregularity > 0` they come from seeded
//! competitive region growing inside each parent, with the parameter
//! setting how often the growth frontier is consumed in random order.
//!
//! Adjacency is shared-pixel-edge (4-connectivity); corner contact does
//! not make two polygons adjacent.

use std::collections::BTreeSet;
use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kv::{join_comma, KvFile};
use crate::raster::{GridSpec, Mask, Raster};
use crate::seed::{derive_seed, rng_from};

/// One complete partition of the grid into edge-connected polygons.
#[derive(Debug, Clone, PartialEq)]
pub struct PolygonPartition {
    pub level: u8,
    pub grid: GridSpec,
    labels: Vec<u32>,
    n_polygons: usize,
    adjacency: Vec<Vec<u32>>,
    areas: Vec<u32>,
}

impl PolygonPartition {
    /// Build from a label raster; derives areas and adjacency and checks
    /// that ids form a gap-free range with full pixel coverage.
    pub fn from_labels(level: u8, grid: GridSpec, labels: Vec<u32>) -> Result<Self> {
        grid.validate()?;
        if labels.len() != grid.n_pixels() {
            return Err(Error::Argument(format!(
                "label raster length {} does not match grid ({} pixels)",
                labels.len(),
                grid.n_pixels()
            )));
        }
        let n_polygons = labels.iter().max().map_or(0, |&m| m as usize + 1);
        if n_polygons == 0 {
            return Err(Error::Argument("empty partition".into()));
        }
        let mut areas = vec![0u32; n_polygons];
        for &l in &labels {
            areas[l as usize] += 1;
        }
        if let Some(id) = areas.iter().position(|&a| a == 0) {
            return Err(Error::Data(format!(
                "polygon id {id} labels no pixel (ids must form a gap-free range)"
            )));
        }
        let mut adjacency: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n_polygons];
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let a = labels[grid.index(ix, iy)];
                if ix + 1 < grid.nx {
                    let b = labels[grid.index(ix + 1, iy)];
                    if a != b {
                        adjacency[a as usize].insert(b);
                        adjacency[b as usize].insert(a);
                    }
                }
                if iy + 1 < grid.ny {
                    let b = labels[grid.index(ix, iy + 1)];
                    if a != b {
                        adjacency[a as usize].insert(b);
                        adjacency[b as usize].insert(a);
                    }
                }
            }
        }
        Ok(PolygonPartition {
            level,
            grid,
            labels,
            n_polygons,
            adjacency: adjacency
                .into_iter()
                .map(|s| s.into_iter().collect())
                .collect(),
            areas,
        })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label_at(&self, ix: usize, iy: usize) -> u32 {
        self.labels[self.grid.index(ix, iy)]
    }

    pub fn n_polygons(&self) -> usize {
        self.n_polygons
    }

    pub fn areas(&self) -> &[u32] {
        &self.areas
    }

    /// Sorted ids of polygons sharing a pixel edge with `id`.
    pub fn neighbors(&self, id: u32) -> &[u32] {
        &self.adjacency[id as usize]
    }

    /// Pixel indices belonging to polygon `id`, in raster order.
    pub fn pixels_of(&self, id: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == id).then_some(i))
            .collect()
    }

    /// Verify every polygon is a single edge-connected component.
    pub fn validate_connected(&self) -> Result<()> {
        for id in 0..self.n_polygons as u32 {
            let pixels = self.pixels_of(id);
            let reached = flood_fill_count(&self.grid, &self.labels, pixels[0], id, usize::MAX);
            if reached != pixels.len() {
                return Err(Error::Data(format!(
                    "polygon {id} is disconnected ({reached} of {} pixels reachable)",
                    pixels.len()
                )));
            }
        }
        Ok(())
    }

    /// Label raster as floats, for persistence through the grid formats.
    pub fn to_raster(&self) -> Raster {
        Raster::from_vec(self.grid, self.labels.iter().map(|&l| l as f64).collect())
            .expect("label raster length matches grid")
    }
}

/// Count pixels of `label` reachable from `start` by 4-connectivity,
/// skipping `exclude` (pass `usize::MAX` for none).
fn flood_fill_count(
    grid: &GridSpec,
    labels: &[u32],
    start: usize,
    label: u32,
    exclude: usize,
) -> usize {
    let mut seen = vec![false; labels.len()];
    let mut queue = VecDeque::new();
    seen[start] = true;
    queue.push_back(start);
    let mut count = 0;
    while let Some(px) = queue.pop_front() {
        count += 1;
        for nb in neighbors4(grid, px) {
            if !seen[nb] && nb != exclude && labels[nb] == label {
                seen[nb] = true;
                queue.push_back(nb);
            }
        }
    }
    count
}

fn neighbors4(grid: &GridSpec, px: usize) -> impl Iterator<Item = usize> {
    let nx = grid.nx;
    let ny = grid.ny;
    let ix = px % nx;
    let iy = px / nx;
    let mut out = [usize::MAX; 4];
    let mut n = 0;
    if ix > 0 {
        out[n] = px - 1;
        n += 1;
    }
    if ix + 1 < nx {
        out[n] = px + 1;
        n += 1;
    }
    if iy > 0 {
        out[n] = px - nx;
        n += 1;
    }
    if iy + 1 < ny {
        out[n] = px + nx;
        n += 1;
    }
    out.into_iter().take(n)
}

/// Geometry bundle: grid, one partition per admin level 1-3, and
/// child-to-parent maps between consecutive levels.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub grid: GridSpec,
    partitions: Vec<PolygonPartition>,
    /// `nesting[0][l2_id] = l1_id`, `nesting[1][l3_id] = l2_id`.
    nesting: Vec<Vec<u32>>,
}

impl World {
    pub fn partition(&self, level: u8) -> Result<&PolygonPartition> {
        if !(1..=3).contains(&level) {
            return Err(Error::Argument(format!(
                "admin level must be 1, 2 or 3, got {level}"
            )));
        }
        Ok(&self.partitions[level as usize - 1])
    }

    pub fn partitions(&self) -> &[PolygonPartition] {
        &self.partitions
    }

    /// Parent id at `level` of polygon `child` at `level + 1`.
    pub fn parent_of(&self, level: u8, child: u32) -> Result<u32> {
        if !(1..=2).contains(&level) {
            return Err(Error::Argument(format!(
                "nesting is defined between levels (1,2) and (2,3), got level {level}"
            )));
        }
        let map = &self.nesting[level as usize - 1];
        map.get(child as usize).copied().ok_or_else(|| {
            Error::Argument(format!("no polygon {child} at level {}", level + 1))
        })
    }

    pub fn nesting(&self) -> &[Vec<u32>] {
        &self.nesting
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = KvFile::new();
        meta.set("nx", self.grid.nx);
        meta.set("ny", self.grid.ny);
        meta.set("pixel_size", self.grid.pixel_size);
        meta.set("origin_x", self.grid.origin_x);
        meta.set("origin_y", self.grid.origin_y);
        meta.set("levels", self.partitions.len());
        for p in &self.partitions {
            meta.set(&format!("shape.{}", p.level), p.n_polygons());
        }
        meta.set("nest.2to1", join_comma(self.nesting[0].iter()));
        meta.set("nest.3to2", join_comma(self.nesting[1].iter()));
        meta.write(dir.join("world.meta"))?;
        for p in &self.partitions {
            p.to_raster()
                .write_text(dir.join(format!("labels{}.asc", p.level)))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<World> {
        let dir = dir.as_ref();
        let meta = KvFile::read(dir.join("world.meta"))?;
        let grid = GridSpec {
            nx: meta.parse_value("nx")?,
            ny: meta.parse_value("ny")?,
            pixel_size: meta.parse_value("pixel_size")?,
            origin_x: meta.parse_value("origin_x")?,
            origin_y: meta.parse_value("origin_y")?,
        };
        let levels: usize = meta.parse_value("levels")?;
        if levels != 3 {
            return Err(Error::Data(format!("expected 3 levels, found {levels}")));
        }
        let mut partitions = Vec::new();
        for level in 1..=3u8 {
            let raster = Raster::read(dir.join(format!("labels{level}.asc")))?;
            if raster.grid != grid {
                return Err(Error::Data(format!(
                    "labels{level}.asc grid does not match world.meta"
                )));
            }
            let labels = raster
                .data()
                .iter()
                .map(|&v| {
                    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as u32)
                    } else {
                        Err(Error::Data(format!(
                            "labels{level}.asc holds non-integer label {v}"
                        )))
                    }
                })
                .collect::<Result<Vec<u32>>>()?;
            let part = PolygonPartition::from_labels(level, grid, labels)?;
            part.validate_connected()?;
            partitions.push(part);
        }
        let nesting = vec![
            meta.parse_list::<u32>("nest.2to1")?,
            meta.parse_list::<u32>("nest.3to2")?,
        ];
        let world = World {
            grid,
            partitions,
            nesting,
        };
        world.validate_nesting()?;
        Ok(world)
    }

    /// Check the child-to-parent maps against the label rasters.
    pub fn validate_nesting(&self) -> Result<()> {
        for k in 0..2 {
            let parent = &self.partitions[k];
            let child = &self.partitions[k + 1];
            let map = &self.nesting[k];
            if map.len() != child.n_polygons() {
                return Err(Error::Data(format!(
                    "nesting map between levels {} and {} has wrong length",
                    k + 1,
                    k + 2
                )));
            }
            for (px, &c) in child.labels().iter().enumerate() {
                if parent.labels()[px] != map[c as usize] {
                    return Err(Error::Data(format!(
                        "polygon {c} at level {} crosses parent boundaries",
                        k + 2
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Build a synthetic world with the given polygon counts per level.
///
/// Deterministic for a given `(spec, level_shapes, irregularity, seed)`.
pub fn make_world(
    spec: GridSpec,
    level_shapes: [usize; 3],
    irregularity: f64,
    seed: u64,
) -> Result<World> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&irregularity) {
        return Err(Error::Config(format!(
            "irregularity must lie in [0, 1], got {irregularity}"
        )));
    }
    if level_shapes[0] < 1 || level_shapes[0] >= level_shapes[1] || level_shapes[1] >= level_shapes[2]
    {
        return Err(Error::Config(format!(
            "level shapes must strictly increase, got {level_shapes:?}"
        )));
    }
    if level_shapes[2] > spec.n_pixels() {
        return Err(Error::Config(format!(
            "{} level-3 polygons exceed the {} pixels available",
            level_shapes[2],
            spec.n_pixels()
        )));
    }

    let n = spec.n_pixels();
    let mut parent_labels: Vec<u32> = vec![0; n];
    let mut parent_count = 1usize;
    let mut partitions: Vec<PolygonPartition> = Vec::new();
    let mut nesting: Vec<Vec<u32>> = Vec::new();

    for (li, &target) in level_shapes.iter().enumerate() {
        let level = li as u8 + 1;
        let mut parent_areas = vec![0usize; parent_count];
        for &l in &parent_labels {
            parent_areas[l as usize] += 1;
        }
        let child_counts = apportion(target, &parent_areas)?;

        let mut labels = vec![u32::MAX; n];
        let mut parent_of_child: Vec<u32> = Vec::with_capacity(target);
        let mut next_id = 0u32;
        for parent in 0..parent_count {
            let m = child_counts[parent];
            let pixels: Vec<usize> = (0..n)
                .filter(|&px| parent_labels[px] == parent as u32)
                .collect();
            let rng_seed = derive_seed(seed, &[level as u64, parent as u64]);
            let local = split_region(&spec, &pixels, m, irregularity, rng_seed)?;
            for (&px, &l) in pixels.iter().zip(&local) {
                labels[px] = next_id + l;
            }
            parent_of_child.extend(std::iter::repeat(parent as u32).take(m));
            next_id += m as u32;
        }
        let part = PolygonPartition::from_labels(level, spec, labels)?;
        debug_assert!(part.validate_connected().is_ok());
        if li > 0 {
            nesting.push(parent_of_child);
        }
        parent_labels = part.labels().to_vec();
        parent_count = target;
        partitions.push(part);
    }

    Ok(World {
        grid: spec,
        partitions,
        nesting,
    })
}

/// Build a single free-standing partition (used by tests and tooling that
/// need one level only).
pub fn make_partition(
    spec: GridSpec,
    count: usize,
    irregularity: f64,
    seed: u64,
) -> Result<PolygonPartition> {
    spec.validate()?;
    if count < 1 || count > spec.n_pixels() {
        return Err(Error::Config(format!(
            "cannot split {} pixels into {count} polygons",
            spec.n_pixels()
        )));
    }
    let pixels: Vec<usize> = (0..spec.n_pixels()).collect();
    let local = split_region(&spec, &pixels, count, irregularity, seed)?;
    PolygonPartition::from_labels(1, spec, local)
}

/// Distribute `target` children over parents proportionally to area
/// (iterative highest-quotient rule), each parent getting at least one
/// child and at most one child per pixel.
fn apportion(target: usize, areas: &[usize]) -> Result<Vec<usize>> {
    let parents = areas.len();
    if target < parents {
        return Err(Error::Config(format!(
            "cannot assign {target} children to {parents} parents"
        )));
    }
    let mut counts = vec![1usize; parents];
    for _ in 0..target - parents {
        let mut best: Option<(f64, usize)> = None;
        for (p, (&a, &c)) in areas.iter().zip(&counts).enumerate() {
            if c >= a {
                continue; // a child needs at least one pixel
            }
            let quotient = a as f64 / (c as f64 + 1.0);
            let better = match best {
                None => true,
                Some((bq, _)) => quotient > bq,
            };
            if better {
                best = Some((quotient, p));
            }
        }
        match best {
            Some((_, p)) => counts[p] += 1,
            None => {
                return Err(Error::Config(
                    "more polygons requested than pixels available".into(),
                ))
            }
        }
    }
    Ok(counts)
}

/// Split a connected pixel region into `m` connected parts. Returns local
/// part ids aligned with `pixels`.
fn split_region(
    grid: &GridSpec,
    pixels: &[usize],
    m: usize,
    irregularity: f64,
    seed: u64,
) -> Result<Vec<u32>> {
    if m == 0 || m > pixels.len() {
        return Err(Error::Config(format!(
            "cannot split {} pixels into {m} parts",
            pixels.len()
        )));
    }
    if m == 1 {
        return Ok(vec![0; pixels.len()]);
    }
    if irregularity == 0.0 {
        split_blocks(grid, pixels, m)
    } else {
        grow_parts(grid, pixels, m, irregularity, seed)
    }
}

/// Recursive bisection of a rectangular region into `m` rectangles with
/// near-proportional pixel counts. At irregularity 0 every parent stays a
/// rectangle, so this is exact at all levels.
fn split_blocks(grid: &GridSpec, pixels: &[usize], m: usize) -> Result<Vec<u32>> {
    let (x0, y0, w, h) = bounding_box(grid, pixels);
    if w * h != pixels.len() {
        // Only reachable if a caller mixes irregular parents with
        // irregularity 0 for the child level.
        return Err(Error::Config(
            "block splitting requires rectangular parent regions".into(),
        ));
    }
    let mut assign = vec![0u32; grid.n_pixels()];
    let mut next = 0u32;
    bisect_rect(grid, x0, y0, w, h, m, &mut next, &mut assign);
    Ok(pixels.iter().map(|&px| assign[px]).collect())
}

fn bounding_box(grid: &GridSpec, pixels: &[usize]) -> (usize, usize, usize, usize) {
    let mut min_x = usize::MAX;
    let mut max_x = 0;
    let mut min_y = usize::MAX;
    let mut max_y = 0;
    for &px in pixels {
        let ix = px % grid.nx;
        let iy = px / grid.nx;
        min_x = min_x.min(ix);
        max_x = max_x.max(ix);
        min_y = min_y.min(iy);
        max_y = max_y.max(iy);
    }
    (min_x, min_y, max_x - min_x + 1, max_y - min_y + 1)
}

fn bisect_rect(
    grid: &GridSpec,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    m: usize,
    next: &mut u32,
    assign: &mut [u32],
) {
    if m == 1 {
        let id = *next;
        *next += 1;
        for iy in y0..y0 + h {
            for ix in x0..x0 + w {
                assign[grid.index(ix, iy)] = id;
            }
        }
        return;
    }
    let m1 = m / 2;
    let m2 = m - m1;
    let frac = m1 as f64 / m as f64;
    if w >= h {
        let cut = ((w as f64 * frac).round() as usize).clamp(1, w - 1);
        bisect_rect(grid, x0, y0, cut, h, m1, next, assign);
        bisect_rect(grid, x0 + cut, y0, w - cut, h, m2, next, assign);
    } else {
        let cut = ((h as f64 * frac).round() as usize).clamp(1, h - 1);
        bisect_rect(grid, x0, y0, w, cut, m1, next, assign);
        bisect_rect(grid, x0, y0 + cut, w, h - cut, m2, next, assign);
    }
}

/// Competitive seeded region growing: seeds from farthest-point sampling,
/// then parts take turns (smallest first) consuming their frontiers.
/// `irregularity` is the probability that a part consumes a random
/// frontier pixel instead of the oldest one.
fn grow_parts(
    grid: &GridSpec,
    pixels: &[usize],
    m: usize,
    irregularity: f64,
    seed: u64,
) -> Result<Vec<u32>> {
    let mut rng = rng_from(seed);
    let n = grid.n_pixels();
    let mut in_region = vec![false; n];
    for &px in pixels {
        in_region[px] = true;
    }

    let seeds = farthest_point_seeds(grid, pixels, &in_region, m, &mut rng);

    const UNASSIGNED: u32 = u32::MAX;
    let mut assign = vec![UNASSIGNED; n];
    let mut frontiers: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut sizes = vec![0usize; m];
    let mut assigned_total = 0usize;
    for (p, &s) in seeds.iter().enumerate() {
        assign[s] = p as u32;
        sizes[p] += 1;
        assigned_total += 1;
        for nb in neighbors4(grid, s) {
            if in_region[nb] && assign[nb] == UNASSIGNED {
                frontiers[p].push(nb);
            }
        }
    }

    while assigned_total < pixels.len() {
        // smallest active part moves next; ties break toward lower id
        let mut chosen: Option<usize> = None;
        for p in 0..m {
            if frontiers[p].is_empty() {
                continue;
            }
            if chosen.map_or(true, |c| sizes[p] < sizes[c]) {
                chosen = Some(p);
            }
        }
        let Some(p) = chosen else {
            // Single connected region always exposes a frontier somewhere.
            return Err(Error::Config("region growing stalled; region disconnected".into()));
        };
        // pop one candidate, possibly random under high irregularity
        let px = loop {
            if frontiers[p].is_empty() {
                break None;
            }
            let idx = if rng.random::<f64>() < irregularity {
                rng.random_range(0..frontiers[p].len())
            } else {
                0
            };
            let candidate = frontiers[p].remove(idx);
            if assign[candidate] == UNASSIGNED {
                break Some(candidate);
            }
        };
        let Some(px) = px else { continue };
        assign[px] = p as u32;
        sizes[p] += 1;
        assigned_total += 1;
        for nb in neighbors4(grid, px) {
            if in_region[nb] && assign[nb] == UNASSIGNED {
                frontiers[p].push(nb);
            }
        }
    }

    Ok(pixels.iter().map(|&px| assign[px]).collect())
}

/// Farthest-point seed placement inside a region; first seed random, each
/// following seed maximizes BFS distance to the existing seeds.
fn farthest_point_seeds(
    grid: &GridSpec,
    pixels: &[usize],
    in_region: &[bool],
    m: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let n = grid.n_pixels();
    let mut seeds = Vec::with_capacity(m);
    let first = pixels[rng.random_range(0..pixels.len())];
    seeds.push(first);
    let mut min_dist = vec![u32::MAX; n];
    bfs_update_distances(grid, in_region, first, &mut min_dist);
    for _ in 1..m {
        let mut best_px = usize::MAX;
        let mut best_d = 0u32;
        for &px in pixels {
            let d = min_dist[px];
            if d != u32::MAX && (d > best_d || best_px == usize::MAX) {
                best_d = d;
                best_px = px;
            }
        }
        seeds.push(best_px);
        bfs_update_distances(grid, in_region, best_px, &mut min_dist);
    }
    seeds
}

fn bfs_update_distances(grid: &GridSpec, in_region: &[bool], from: usize, min_dist: &mut [u32]) {
    let mut queue = VecDeque::new();
    let mut dist = vec![u32::MAX; in_region.len()];
    dist[from] = 0;
    queue.push_back(from);
    while let Some(px) = queue.pop_front() {
        min_dist[px] = min_dist[px].min(dist[px]);
        for nb in neighbors4(grid, px) {
            if in_region[nb] && dist[nb] == u32::MAX {
                dist[nb] = dist[px] + 1;
                queue.push_back(nb);
            }
        }
    }
}

/// Sample `n` polygon ids whose union is connected under shared-edge
/// adjacency, by uniform random frontier growth from a random start.
pub fn sample_contiguous(partition: &PolygonPartition, n: usize, seed: u64) -> Result<Vec<u32>> {
    let p = partition.n_polygons();
    if n < 1 || n > p {
        return Err(Error::Argument(format!(
            "cannot sample {n} polygons from a partition of {p}"
        )));
    }
    const MAX_RESTARTS: u64 = 64;
    let mut best_reached = 0;
    for attempt in 0..MAX_RESTARTS {
        let mut rng = rng_from(derive_seed(seed, &[attempt]));
        let start = rng.random_range(0..p) as u32;
        let mut selected: BTreeSet<u32> = BTreeSet::new();
        let mut frontier: BTreeSet<u32> = BTreeSet::new();
        selected.insert(start);
        frontier.extend(partition.neighbors(start).iter().copied());
        while selected.len() < n {
            if frontier.is_empty() {
                break;
            }
            let idx = rng.random_range(0..frontier.len());
            let &chosen = frontier.iter().nth(idx).expect("index within frontier");
            frontier.remove(&chosen);
            selected.insert(chosen);
            for &nb in partition.neighbors(chosen) {
                if !selected.contains(&nb) {
                    frontier.insert(nb);
                }
            }
        }
        if selected.len() == n {
            return Ok(selected.into_iter().collect());
        }
        best_reached = best_reached.max(selected.len());
    }
    Err(Error::GrowthStuck {
        wanted: n,
        reached: best_reached,
    })
}

/// Boolean raster marking pixels whose polygon id is in `ids`.
pub fn polygon_mask(partition: &PolygonPartition, ids: &[u32]) -> Result<Mask> {
    let p = partition.n_polygons() as u32;
    if let Some(&bad) = ids.iter().find(|&&id| id >= p) {
        return Err(Error::Argument(format!(
            "unknown polygon id {bad} (partition has {p} polygons)"
        )));
    }
    let mut member = vec![false; p as usize];
    for &id in ids {
        member[id as usize] = true;
    }
    let data = partition
        .labels()
        .iter()
        .map(|&l| member[l as usize])
        .collect();
    Mask::from_vec(partition.grid, data)
}
