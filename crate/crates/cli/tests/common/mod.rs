use std::sync::{Arc, OnceLock};

use outview::ar::{ArConfig, ArModel};
use outview::codebook::fit_codebook;
use outview::geometry::{CameraIntrinsics, Pose};
use outview::pipeline::Generator;
use outview::world::{raycast_render, RoomSpec};

/// Small untrained generator: enough to exercise outpainting paths.
pub fn generator() -> Arc<Generator> {
    static G: OnceLock<Arc<Generator>> = OnceLock::new();
    G.get_or_init(|| {
        let k = CameraIntrinsics::desk();
        let images: Vec<_> = RoomSpec::fixtures()
            .iter()
            .flat_map(|room| {
                (0..4).map(move |i| {
                    let pose = Pose::from_translation(room.default_camera_position())
                        .compose(&Pose::from_yaw_pitch(i as f64 * 90.0, 0.0));
                    raycast_render(room, &k, &pose).unwrap().0
                })
            })
            .collect();
        let codebook = fit_codebook(&images, 16, 4, 5).unwrap();
        let model = ArModel::new(
            ArConfig {
                vocab: 16,
                embed_dim: 8,
                layers: 2,
                kernel: 3,
                channels: 16,
            },
            11,
        )
        .unwrap();
        Arc::new(Generator::new(codebook, model).unwrap())
    })
    .clone()
}
