//! Connected components of predicted masks and the keypoint-refinement loop
//! that nudges neighbours of a dragged keypoint until the mask reconnects.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::{KeypointId, KeypointSchema, Point, Pose};
use crate::error::{Error, Result};
use crate::raster::Mask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

/// Labels are `1..=count` in row-major order of each component's first
/// pixel; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabeling {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: usize,
    /// `sizes[i]` is the pixel count of label `i + 1`.
    pub sizes: Vec<usize>,
    /// `keypoints[i]` lists keypoints lying on label `i + 1`.
    pub keypoints: Vec<Vec<KeypointId>>,
}

impl ComponentLabeling {
    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn foreground(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Components at or above `speck_frac` of the foreground.
    pub fn significant(&self, speck_frac: f64) -> usize {
        let threshold = speck_frac * self.foreground() as f64;
        self.sizes.iter().filter(|&&s| s as f64 >= threshold).count()
    }

    pub fn is_connected(&self, speck_frac: f64) -> bool {
        self.significant(speck_frac) == 1
    }

    /// Record which component each keypoint falls on (nearest pixel).
    pub fn attach_keypoints<'a>(&mut self, positions: impl IntoIterator<Item = (KeypointId, Point)>) {
        for k in &mut self.keypoints {
            k.clear();
        }
        for (id, [x, y]) in positions {
            let (px, py) = (x.round(), y.round());
            if px < 0.0 || py < 0.0 || px as usize >= self.width || py as usize >= self.height {
                continue;
            }
            let l = self.label_at(px as usize, py as usize);
            if l > 0 {
                self.keypoints[l as usize - 1].push(id);
            }
        }
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let ra = find(parent, a);
    let rb = find(parent, b);
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labeling.
pub fn label_components(mask: &Mask, connectivity: Connectivity) -> ComponentLabeling {
    let (w, h) = mask.dims();
    let mut provisional = vec![0u32; w * h];
    // parent[0] is the background sentinel
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            let mut push = |l: u32| {
                if l != 0 {
                    neighbours[n] = l;
                    n += 1;
                }
            };
            if x > 0 {
                push(provisional[y * w + x - 1]);
            }
            if y > 0 {
                push(provisional[(y - 1) * w + x]);
                if connectivity == Connectivity::Eight {
                    if x > 0 {
                        push(provisional[(y - 1) * w + x - 1]);
                    }
                    if x + 1 < w {
                        push(provisional[(y - 1) * w + x + 1]);
                    }
                }
            }
            let label = if n == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let first = neighbours[0];
                for &other in &neighbours[1..n] {
                    union(&mut parent, first, other);
                }
                first
            };
            provisional[y * w + x] = label;
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut labels = vec![0u32; w * h];
    let mut sizes: Vec<usize> = Vec::new();
    for i in 0..w * h {
        let p = provisional[i];
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p);
        if remap[root as usize] == 0 {
            sizes.push(0);
            remap[root as usize] = sizes.len() as u32;
        }
        let l = remap[root as usize];
        labels[i] = l;
        sizes[l as usize - 1] += 1;
    }
    ComponentLabeling {
        width: w,
        height: h,
        labels,
        count: sizes.len(),
        keypoints: vec![Vec::new(); sizes.len()],
        sizes,
    }
}

/// Anything that can predict a foreground mask for a pose.
pub trait MaskPredictor {
    fn predict_mask(&mut self, pose: &Pose) -> Result<Mask>;
}

impl<F: FnMut(&Pose) -> Result<Mask>> MaskPredictor for F {
    fn predict_mask(&mut self, pose: &Pose) -> Result<Mask> {
        self(pose)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Fraction of the user's displacement applied to each neighbour.
    pub delta: f64,
    pub max_iters: usize,
    pub connectivity: Connectivity,
    /// Components below this fraction of the foreground are ignored.
    pub speck_frac: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            max_iters: 5,
            connectivity: Connectivity::Four,
            speck_frac: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointMove {
    pub keypoint: KeypointId,
    pub displacement: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementResult {
    pub pose: Pose,
    /// Number of automatic keypoint moves performed.
    pub iterations: usize,
    pub moves: Vec<KeypointMove>,
    pub converged: bool,
    /// Number of mask predictions made.
    pub evaluations: usize,
}

/// Repeatedly predict a mask; while it is disconnected, move the keypoint
/// nearest to the most recently moved one by `delta * move_vec`.
///
/// The user's keypoint is never moved, nor is any keypoint moved twice in
/// one call. Moves that would leave the canvas are skipped.
pub fn refine_pose<P: MaskPredictor + ?Sized>(
    predictor: &mut P,
    schema: &KeypointSchema,
    pose: &Pose,
    moved_kp: KeypointId,
    move_vec: [f64; 2],
    cfg: &RefineConfig,
) -> Result<RefinementResult> {
    if !(0.0..=1.0).contains(&cfg.delta) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in [0, 1], got {}",
            cfg.delta
        )));
    }
    if pose.position(moved_kp).is_none() {
        return Err(Error::Pose {
            keypoint: moved_kp,
            reason: "moved keypoint has no position".into(),
            context: None,
        });
    }
    let (w, h) = schema.reference_resolution;
    let step = [cfg.delta * move_vec[0], cfg.delta * move_vec[1]];

    let mut current = pose.clone();
    let mut moves = Vec::new();
    let mut excluded = BTreeSet::from([moved_kp]);
    let mut anchor = moved_kp;
    let mut evaluations = 0;

    loop {
        let mask = predictor.predict_mask(&current)?;
        evaluations += 1;
        if label_components(&mask, cfg.connectivity).is_connected(cfg.speck_frac) {
            return Ok(RefinementResult {
                pose: current,
                iterations: moves.len(),
                moves,
                converged: true,
                evaluations,
            });
        }
        // delta = 0 is a fixed point: further evaluations would repeat this one.
        if moves.len() >= cfg.max_iters || cfg.delta == 0.0 {
            break;
        }
        let anchor_pos = current.position(anchor).expect("anchor is positioned");
        let mut candidates: Vec<(f64, KeypointId, Point)> = current
            .active(schema)
            .filter(|(k, _)| !excluded.contains(&k.id))
            .map(|(k, p)| {
                let d = (p[0] - anchor_pos[0]).hypot(p[1] - anchor_pos[1]);
                (d, k.id, p)
            })
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut chosen = None;
        for (_, id, p) in candidates {
            excluded.insert(id);
            let q = [p[0] + step[0], p[1] + step[1]];
            if q[0] >= 0.0 && q[1] >= 0.0 && q[0] < w as f64 && q[1] < h as f64 {
                chosen = Some((id, q));
                break;
            }
        }
        let Some((id, q)) = chosen else { break };
        current.positions.insert(id, q);
        moves.push(KeypointMove {
            keypoint: id,
            displacement: step,
        });
        anchor = id;
    }
    Ok(RefinementResult {
        pose: current,
        iterations: moves.len(),
        moves,
        converged: false,
        evaluations,
    })
}
