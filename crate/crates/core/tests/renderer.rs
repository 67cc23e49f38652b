mod common;

use chargan_core::dataset::{KeypointId, KeypointSchema, Pose};
use chargan_core::raster::Image;
use chargan_core::render::{render_layer, render_stack};
use proptest::prelude::*;

const SIZE: usize = 64;

/// Straight evaluation of the blob formula, one pixel at a time.
fn oracle_layer(pose: &Pose, schema: &KeypointSchema, layer: usize) -> Vec<f32> {
    let (w, h) = schema.reference_resolution;
    let mut out = vec![0f32; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            let mut kps: Vec<_> = schema.keypoints.iter().filter(|k| k.layer_index == layer).collect();
            kps.sort_by_key(|k| k.id);
            for k in kps {
                let [cx, cy] = pose.positions[&k.id];
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let d2 = dx * dx + dy * dy;
                if d2 <= k.radius * k.radius {
                    let g = (-d2 / (2.0 * k.sigma * k.sigma)).exp();
                    for c in 0..3 {
                        acc[c] += k.color[c] as f64 * g;
                    }
                }
            }
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = acc[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

// positions on a 1/8 pixel lattice keep translated coordinates exact
fn lattice_pose(margin: f64) -> impl Strategy<Value = Pose> {
    let lo = (margin * 8.0) as i64;
    let hi = ((SIZE as f64 - 1.0 - margin) * 8.0) as i64;
    prop::collection::vec((lo..=hi, lo..=hi), 6).prop_map(|v| {
        let pts: Vec<(u32, [f64; 2])> = v
            .into_iter()
            .enumerate()
            .map(|(i, (x, y))| (i as u32, [x as f64 / 8.0, y as f64 / 8.0]))
            .collect();
        common::pose(&pts)
    })
}

fn px(img: &Image, x: usize, y: usize) -> [f32; 3] {
    img.get(x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layers_match_the_formula(pose in lattice_pose(0.0)) {
        let schema = common::three_layer_schema(SIZE);
        for l in 0..3 {
            let img = render_layer(&pose, &schema, l, (SIZE, SIZE)).unwrap();
            prop_assert_eq!(img.as_raw(), &oracle_layer(&pose, &schema, l)[..]);
        }
    }

    #[test]
    fn combined_is_clamped_layer_sum(pose in lattice_pose(0.0)) {
        let schema = common::three_layer_schema(SIZE);
        let stack = render_stack(&pose, &schema, (SIZE, SIZE)).unwrap();
        for (i, &v) in stack.combined_map.as_raw().iter().enumerate() {
            let sum: f64 = stack.layer_maps.iter().map(|m| m.as_raw()[i] as f64).sum();
            prop_assert_eq!(v, sum.min(1.0) as f32);
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let again = render_stack(&pose, &schema, (SIZE, SIZE)).unwrap();
        prop_assert_eq!(stack, again);
    }

    #[test]
    fn translation_equivariance(pose in lattice_pose(12.0), dx in -10i64..=10, dy in -10i64..=10) {
        let schema = common::three_layer_schema(SIZE);
        let moved = pose.translated(dx as f64, dy as f64);
        for l in 0..3 {
            let a = render_layer(&pose, &schema, l, (SIZE, SIZE)).unwrap();
            let b = render_layer(&moved, &schema, l, (SIZE, SIZE)).unwrap();
            for y in 0..SIZE as i64 {
                for x in 0..SIZE as i64 {
                    let (tx, ty) = (x + dx, y + dy);
                    if tx < 0 || ty < 0 || tx >= SIZE as i64 || ty >= SIZE as i64 {
                        continue;
                    }
                    prop_assert_eq!(px(&a, x as usize, y as usize), px(&b, tx as usize, ty as usize));
                }
            }
        }
    }

    #[test]
    fn moving_one_keypoint_is_local(pose in lattice_pose(0.0), k in 0u32..6, nx in 0.0..63.0f64, ny in 0.0..63.0f64) {
        let schema = common::three_layer_schema(SIZE);
        let mut moved = pose.clone();
        let old = pose.positions[&KeypointId(k)];
        moved.positions.insert(KeypointId(k), [nx, ny]);
        let def = schema.keypoint(KeypointId(k)).unwrap();
        let a = render_stack(&pose, &schema, (SIZE, SIZE)).unwrap();
        let b = render_stack(&moved, &schema, (SIZE, SIZE)).unwrap();
        let r2 = def.radius * def.radius;
        for y in 0..SIZE {
            for x in 0..SIZE {
                let near = |p: [f64; 2]| (x as f64 - p[0]).powi(2) + (y as f64 - p[1]).powi(2) <= r2;
                if near(old) || near([nx, ny]) {
                    continue;
                }
                for l in 0..3 {
                    prop_assert_eq!(px(&a.layer_maps[l], x, y), px(&b.layer_maps[l], x, y));
                }
            }
        }
    }
}

#[test]
fn summation_order_does_not_matter() {
    let kps = [
        (0, 0, [0.6, 0.1, 0.0], 3.0, 9.0),
        (1, 0, [0.0, 0.7, 0.2], 4.0, 12.0),
        (2, 0, [0.3, 0.0, 0.9], 2.0, 6.0),
    ];
    let mut reversed = kps;
    reversed.reverse();
    let a = common::schema(&kps, 1, (32, 32));
    let b = common::schema(&reversed, 1, (32, 32));
    let pose = common::pose(&[(0, [15.0, 15.0]), (1, [16.5, 14.25]), (2, [14.0, 17.0])]);
    let ra = render_layer(&pose, &a, 0, (32, 32)).unwrap();
    let rb = render_layer(&pose, &b, 0, (32, 32)).unwrap();
    assert_eq!(ra.as_raw(), rb.as_raw());
}

#[test]
fn inactive_state_members_draw_nothing() {
    use chargan_core::dataset::{KeypointEntry, SchemaFile};
    let entry = |id, layer, color, group| KeypointEntry {
        id,
        name: format!("k{id}"),
        layer,
        color: Some(color),
        sigma: Some(2.0),
        radius: Some(6.0),
        state_group: group,
    };
    let schema = KeypointSchema::from_file(
        &SchemaFile {
            name: None,
            layer_count: 1,
            reference_resolution: [32, 32],
            background: None,
            color_seed: None,
            keypoints: vec![
                entry(0, 0, [1.0, 0.0, 0.0], None),
                entry(1, 0, [0.0, 1.0, 0.0], Some(7)),
                entry(2, 0, [0.0, 0.0, 1.0], Some(7)),
            ],
            skeleton: vec![],
        },
        None,
    )
    .unwrap();
    let mut pose = common::pose(&[(0, [5.0, 5.0]), (1, [20.0, 20.0]), (2, [25.0, 10.0])]);
    pose.active_states.insert(7, KeypointId(1));
    pose.validate(&schema).unwrap();
    let img = render_layer(&pose, &schema, 0, (32, 32)).unwrap();
    assert_eq!(img.get(20, 20), [0.0, 1.0, 0.0]);
    assert_eq!(img.get(25, 10), [0.0, 0.0, 0.0]);

    pose.active_states.insert(7, KeypointId(2));
    let img = render_layer(&pose, &schema, 0, (32, 32)).unwrap();
    assert_eq!(img.get(20, 20), [0.0, 0.0, 0.0]);
    assert_eq!(img.get(25, 10), [0.0, 0.0, 1.0]);
}

#[test]
fn layer_out_of_range_is_rejected() {
    let schema = common::three_layer_schema(SIZE);
    let pose = common::pose(&(0..6).map(|i| (i, [10.0, 10.0])).collect::<Vec<_>>());
    assert!(render_layer(&pose, &schema, 3, (SIZE, SIZE)).is_err());
}
