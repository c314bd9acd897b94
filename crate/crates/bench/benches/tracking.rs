use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fidunav::fusion::{fuse_distances, fuse_rotations, DistanceEstimate};
use fidunav::pipeline::{ObservationFrame, Tracker};
use fidunav::simulator::{preset_guidance_demo, preset_localization_study, simulate};
use fidunav::{estimate_tag_pose, Point3Mm, Rotation, Vec3};

fn solver(c: &mut Criterion) {
    let scenario = preset_localization_study();
    let rig = scenario.rig.clone();
    let frame = simulate(scenario).unwrap().next().unwrap();
    let obs = frame.observations[0];
    let k = rig.camera(obs.camera_id).unwrap().intrinsics;
    let marker = rig.marker(obs.tag_id).unwrap().1.marker;
    c.bench_function("estimate_tag_pose", |b| b.iter(|| estimate_tag_pose(&k, &marker, black_box(&obs)).unwrap()));
}

fn fusion(c: &mut Criterion) {
    let distances: Vec<DistanceEstimate> = (0..3)
        .map(|j| DistanceEstimate {
            camera_id: j,
            distance: 700.0 + j as f64,
            sigma: 0.5 + 0.1 * j as f64,
            translation: Point3Mm::new(0.0, 0.0, 700.0),
        })
        .collect();
    c.bench_function("fuse_distances_3", |b| b.iter(|| fuse_distances(black_box(&distances)).unwrap()));

    let rotations: Vec<(Rotation, f64)> = (0..3)
        .map(|j| (Rotation::from_axis_angle_deg(Vec3::new(1.0, 0.2, 0.1), 30.0 + j as f64), 1.0 + j as f64))
        .collect();
    c.bench_function("fuse_rotations_3", |b| b.iter(|| fuse_rotations(black_box(&rotations)).unwrap()));
}

fn frame_pipeline(c: &mut Criterion) {
    let scenario = preset_guidance_demo();
    let rig = scenario.rig.clone();
    let frames: Vec<ObservationFrame> = simulate(scenario).unwrap().take(32).map(Into::into).collect();
    c.bench_function("tracker_process_32_frames", |b| {
        b.iter_batched(
            || Tracker::new(rig.clone()),
            |mut tracker| {
                for f in &frames {
                    black_box(tracker.process(f));
                }
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, solver, fusion, frame_pipeline);
criterion_main!(benches);
