//! Scene representation, voxelization, and ground-truth offset/center
//! computation.
//!
//! A [`Scene`] is a labeled point cloud; [`voxelize`] aggregates it into a
//! [`VoxelScene`] whose per-voxel ground-truth offsets point at the center
//! of the owning instance. Centers are means of member voxel coordinates
//! (selectable to median or bounding-box center for ablations).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::linalg::Matrix;
use crate::{Error, Result};

/// One labeled point: position in meters, RGB color in [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub coord: [f64; 3],
    pub color: [f64; 3],
}

/// Raw labeled point cloud. `instance_label[i] == -1` marks background;
/// foreground instance labels form the contiguous range `0..G`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<Point>,
    pub instance_label: Vec<i32>,
    pub semantic_label: Vec<i32>,
    /// Number of semantic classes S; foreground semantics are in `[0, S)`.
    pub num_classes: usize,
}

impl Scene {
    /// Validates the invariants: nonempty, contiguous instance ids, one
    /// semantic class per instance, labels in range.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = self.points.len();
        if self.instance_label.len() != n || self.semantic_label.len() != n {
            return Err(Error::ShapeMismatch {
                context: "scene labels",
                expected: format!("{n}"),
                got: format!(
                    "{} / {}",
                    self.instance_label.len(),
                    self.semantic_label.len()
                ),
            });
        }
        let mut seen: BTreeMap<i32, i32> = BTreeMap::new();
        for i in 0..n {
            let inst = self.instance_label[i];
            let sem = self.semantic_label[i];
            if inst < 0 {
                if sem != -1 {
                    return Err(Error::InvalidConfig(format!(
                        "background point {i} must have semantic -1, got {sem}"
                    )));
                }
                continue;
            }
            if sem < 0 || sem as usize >= self.num_classes {
                return Err(Error::InvalidConfig(format!(
                    "point {i}: semantic {sem} out of range 0..{}",
                    self.num_classes
                )));
            }
            match seen.get(&inst) {
                Some(&s) if s != sem => {
                    return Err(Error::InvalidConfig(format!(
                        "instance {inst} has conflicting semantics {s} and {sem}"
                    )));
                }
                Some(_) => {}
                None => {
                    seen.insert(inst, sem);
                }
            }
            if !self.points[i].coord.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { context: "scene coords" });
            }
        }
        let g = seen.len() as i32;
        for (&id, _) in &seen {
            if id >= g {
                return Err(Error::InvalidConfig(format!(
                    "instance ids must be contiguous 0..{g}, found {id}"
                )));
            }
        }
        Ok(())
    }

    pub fn num_instances(&self) -> usize {
        self.instance_label
            .iter()
            .filter(|&&l| l >= 0)
            .map(|&l| l + 1)
            .max()
            .unwrap_or(0) as usize
    }

    /// Axis-aligned bounding box (min, max) over all points.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p.coord[a]);
                hi[a] = hi[a].max(p.coord[a]);
            }
        }
        (lo, hi)
    }
}

/// Ground-truth center definition. The paper's ablation compares the mean
/// of member coordinates against the per-axis median and the bounding-box
/// center; average performs best and is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    Average,
    Median,
    Box,
}

impl Default for CenterMode {
    fn default() -> Self {
        CenterMode::Average
    }
}

/// Voxelized scene: per-voxel mean coordinates, input features, ground
/// truth offsets/labels, and the foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelScene {
    /// M x 3 voxel coordinates (mean of member points), meters.
    pub coords: Matrix,
    /// M x 6 input features: bbox-normalized mean coordinate + mean color.
    pub feats_in: Matrix,
    /// M x 3 ground-truth offsets to the instance center (zero for background).
    pub gt_offsets: Matrix,
    pub fg_mask: Vec<bool>,
    pub gt_instance: Vec<i32>,
    pub gt_semantic: Vec<i32>,
    pub voxel_size: f64,
    pub num_classes: usize,
}

impl VoxelScene {
    pub fn num_voxels(&self) -> usize {
        self.coords.rows()
    }

    /// Binary mask over voxels for one instance id.
    pub fn instance_mask(&self, id: i32) -> Vec<bool> {
        self.gt_instance.iter().map(|&l| l == id).collect()
    }
}

/// One ground-truth instance at voxel resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub id: i32,
    pub semantic: i32,
    pub voxel_ids: Vec<usize>,
    pub center: [f64; 3],
}

fn center_of(coords: &Matrix, ids: &[usize], mode: CenterMode) -> [f64; 3] {
    let mut c = [0.0; 3];
    match mode {
        CenterMode::Average => {
            for &i in ids {
                for a in 0..3 {
                    c[a] += coords.get(i, a);
                }
            }
            for v in &mut c {
                *v /= ids.len() as f64;
            }
        }
        CenterMode::Median => {
            for (a, v) in c.iter_mut().enumerate() {
                let mut vals: Vec<f64> = ids.iter().map(|&i| coords.get(i, a)).collect();
                vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
                let mid = vals.len() / 2;
                *v = if vals.len() % 2 == 1 {
                    vals[mid]
                } else {
                    0.5 * (vals[mid - 1] + vals[mid])
                };
            }
        }
        CenterMode::Box => {
            for (a, v) in c.iter_mut().enumerate() {
                let lo = ids
                    .iter()
                    .map(|&i| coords.get(i, a))
                    .fold(f64::INFINITY, f64::min);
                let hi = ids
                    .iter()
                    .map(|&i| coords.get(i, a))
                    .fold(f64::NEG_INFINITY, f64::max);
                *v = 0.5 * (lo + hi);
            }
        }
    }
    c
}

/// Voxelize with the default (average) center definition.
pub fn voxelize(scene: &Scene, voxel_size: f64) -> Result<VoxelScene> {
    voxelize_with_centers(scene, voxel_size, CenterMode::Average)
}

/// Voxelize a scene. Each voxel takes the mean coordinate and color of its
/// member points; the instance label is the majority among members (ties
/// go to the lowest label id, background loses to any foreground).
pub fn voxelize_with_centers(
    scene: &Scene,
    voxel_size: f64,
    mode: CenterMode,
) -> Result<VoxelScene> {
    if scene.points.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(voxel_size.is_finite() && voxel_size > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "voxel_size must be positive, got {voxel_size}"
        )));
    }
    scene.validate()?;

    // Semantic class per instance (validated unique above).
    let mut sem_of: BTreeMap<i32, i32> = BTreeMap::new();
    for (i, &l) in scene.instance_label.iter().enumerate() {
        if l >= 0 {
            sem_of.entry(l).or_insert(scene.semantic_label[i]);
        }
    }

    // Deterministic voxel ordering via sorted integer grid keys.
    let mut cells: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in scene.points.iter().enumerate() {
        let key = (
            (p.coord[0] / voxel_size).floor() as i64,
            (p.coord[1] / voxel_size).floor() as i64,
            (p.coord[2] / voxel_size).floor() as i64,
        );
        cells.entry(key).or_default().push(i);
    }

    let m = cells.len();
    let mut coords = Matrix::zeros(m, 3);
    let mut colors = Matrix::zeros(m, 3);
    let mut gt_instance = vec![-1i32; m];
    let mut gt_semantic = vec![-1i32; m];

    for (v, members) in cells.values().enumerate() {
        let inv = 1.0 / members.len() as f64;
        for &i in members {
            for a in 0..3 {
                coords.set(v, a, coords.get(v, a) + scene.points[i].coord[a] * inv);
                colors.set(v, a, colors.get(v, a) + scene.points[i].color[a] * inv);
            }
        }
        // Majority vote; ties to lowest id; background only if no foreground.
        let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
        for &i in members {
            *counts.entry(scene.instance_label[i]).or_insert(0) += 1;
        }
        let winner = counts
            .iter()
            .filter(|(&l, _)| l >= 0)
            .max_by(|(la, ca), (lb, cb)| ca.cmp(cb).then(lb.cmp(la)))
            .map(|(&l, _)| l);
        if let Some(label) = winner {
            gt_instance[v] = label;
            gt_semantic[v] = sem_of[&label];
        }
    }

    let fg_mask: Vec<bool> = gt_instance.iter().map(|&l| l >= 0).collect();

    // Instance centers over member voxel coordinates.
    let mut members_of: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (v, &l) in gt_instance.iter().enumerate() {
        if l >= 0 {
            members_of.entry(l).or_default().push(v);
        }
    }
    let mut gt_offsets = Matrix::zeros(m, 3);
    for ids in members_of.values() {
        let c = center_of(&coords, ids, mode);
        for &v in ids {
            for a in 0..3 {
                gt_offsets.set(v, a, c[a] - coords.get(v, a));
            }
        }
    }

    // Input features: bbox-normalized mean coordinate plus mean color.
    let (lo, hi) = scene.bounds();
    let mut feats_in = Matrix::zeros(m, 6);
    for v in 0..m {
        for a in 0..3 {
            let span = (hi[a] - lo[a]).max(1e-9);
            feats_in.set(v, a, (coords.get(v, a) - lo[a]) / span);
            feats_in.set(v, 3 + a, colors.get(v, a));
        }
    }

    Ok(VoxelScene {
        coords,
        feats_in,
        gt_offsets,
        fg_mask,
        gt_instance,
        gt_semantic,
        voxel_size,
        num_classes: scene.num_classes,
    })
}

/// One record per distinct foreground instance present in the voxel scene;
/// the center is the arithmetic mean of member voxel coordinates.
pub fn gt_centers(vs: &VoxelScene) -> Vec<GroundTruthInstance> {
    let mut members_of: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (v, &l) in vs.gt_instance.iter().enumerate() {
        if l >= 0 {
            members_of.entry(l).or_default().push(v);
        }
    }
    members_of
        .into_iter()
        .map(|(id, voxel_ids)| {
            let center = center_of(&vs.coords, &voxel_ids, CenterMode::Average);
            let semantic = vs.gt_semantic[voxel_ids[0]];
            GroundTruthInstance {
                id,
                semantic,
                voxel_ids,
                center,
            }
        })
        .collect()
}

/// Instance centers implied by the stored offsets (`C + O*` of any member
/// voxel). These honor the center mode the scene was voxelized with.
pub fn centers_from_offsets(vs: &VoxelScene) -> Vec<GroundTruthInstance> {
    let mut members_of: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (v, &l) in vs.gt_instance.iter().enumerate() {
        if l >= 0 {
            members_of.entry(l).or_default().push(v);
        }
    }
    members_of
        .into_iter()
        .map(|(id, voxel_ids)| {
            let v0 = voxel_ids[0];
            let center = [
                vs.coords.get(v0, 0) + vs.gt_offsets.get(v0, 0),
                vs.coords.get(v0, 1) + vs.gt_offsets.get(v0, 1),
                vs.coords.get(v0, 2) + vs.gt_offsets.get(v0, 2),
            ];
            GroundTruthInstance {
                id,
                semantic: vs.gt_semantic[v0],
                voxel_ids,
                center,
            }
        })
        .collect()
}

// --- scene file format -----------------------------------------------------
//
// Line-oriented text: header `N S G`, then N lines `x y z r g b inst sem`.
// Floats print in shortest round-trip form, so save -> load -> save is
// byte-identical.

pub fn scene_to_string(scene: &Scene) -> String {
    let mut out = String::new();
    let g = scene.num_instances();
    let _ = writeln!(out, "{} {} {}", scene.points.len(), scene.num_classes, g);
    for (i, p) in scene.points.iter().enumerate() {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            p.coord[0],
            p.coord[1],
            p.coord[2],
            p.color[0],
            p.color[1],
            p.color[2],
            scene.instance_label[i],
            scene.semantic_label[i]
        );
    }
    out
}

pub fn scene_from_str(text: &str) -> Result<Scene> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyInput)?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 3 {
        return Err(Error::Format(format!("bad scene header: {header:?}")));
    }
    let n: usize = head[0]
        .parse()
        .map_err(|_| Error::Format("bad N in header".into()))?;
    let s: usize = head[1]
        .parse()
        .map_err(|_| Error::Format("bad S in header".into()))?;
    let _g: usize = head[2]
        .parse()
        .map_err(|_| Error::Format("bad G in header".into()))?;

    let mut scene = Scene {
        points: Vec::with_capacity(n),
        instance_label: Vec::with_capacity(n),
        semantic_label: Vec::with_capacity(n),
        num_classes: s,
    };
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(Error::Format(format!(
                "line {}: expected 8 fields, got {}",
                lineno + 2,
                f.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("line {}: bad float {s:?}", lineno + 2)))
        };
        scene.points.push(Point {
            coord: [parse(f[0])?, parse(f[1])?, parse(f[2])?],
            color: [parse(f[3])?, parse(f[4])?, parse(f[5])?],
        });
        scene.instance_label.push(
            f[6].parse()
                .map_err(|_| Error::Format(format!("line {}: bad label", lineno + 2)))?,
        );
        scene.semantic_label.push(
            f[7].parse()
                .map_err(|_| Error::Format(format!("line {}: bad label", lineno + 2)))?,
        );
    }
    if scene.points.len() != n {
        return Err(Error::Format(format!(
            "expected {n} points, got {}",
            scene.points.len()
        )));
    }
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_string(scene))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    scene_from_str(&std::fs::read_to_string(path)?)
}
