#![no_main]
use libfuzzer_sys::fuzz_target;
use voxfuse::geometry::{poses_from_json, project, ray_for_pixel};

fuzz_target!(|data: &[u8]| {
    let Ok(poses) = poses_from_json(data) else { return };
    for pose in &poses {
        let center = nalgebra::Vector2::new(pose.width() as f64 / 2.0, pose.height() as f64 / 2.0);
        if let Ok(ray) = ray_for_pixel(pose, center) {
            let _ = project(pose, ray.point_at(1.0));
        }
        let _ = pose.to_record();
    }
});
