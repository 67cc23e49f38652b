#![allow(dead_code)]

use chargan_core::dataset::{KeypointEntry, KeypointId, KeypointSchema, Pose, SchemaFile};

/// `(id, layer, color, sigma, radius)`
pub type Kp = (u32, usize, [f32; 3], f64, f64);

pub fn schema(kps: &[Kp], layers: usize, size: (usize, usize)) -> KeypointSchema {
    KeypointSchema::from_file(
        &SchemaFile {
            name: Some("test".into()),
            layer_count: layers,
            reference_resolution: [size.0, size.1],
            background: None,
            color_seed: None,
            keypoints: kps
                .iter()
                .map(|&(id, layer, color, sigma, radius)| KeypointEntry {
                    id,
                    name: format!("k{id}"),
                    layer,
                    color: Some(color),
                    sigma: Some(sigma),
                    radius: Some(radius),
                    state_group: None,
                })
                .collect(),
            skeleton: vec![],
        },
        None,
    )
    .unwrap()
}

pub fn pose(points: &[(u32, [f64; 2])]) -> Pose {
    Pose {
        positions: points.iter().map(|&(id, p)| (KeypointId(id), p)).collect(),
        active_states: Default::default(),
    }
}

/// Six keypoints spread over three layers with well separated colors.
pub fn three_layer_schema(size: usize) -> KeypointSchema {
    schema(
        &[
            (0, 0, [1.0, 0.0, 0.0], 3.0, 9.0),
            (1, 0, [0.0, 1.0, 0.0], 2.5, 7.0),
            (2, 1, [0.0, 0.0, 1.0], 3.0, 9.0),
            (3, 1, [1.0, 1.0, 0.0], 2.0, 6.0),
            (4, 2, [1.0, 0.0, 1.0], 3.5, 10.0),
            (5, 2, [0.0, 1.0, 1.0], 3.0, 8.0),
        ],
        3,
        (size, size),
    )
}
