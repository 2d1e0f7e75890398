mod common;

use std::sync::Arc;
use std::thread;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{json, Value};

use outview::geometry::{CameraIntrinsics, Pose};
use outview::grid::Image;
use outview::pipeline::Strategy;
use outview::world::{raycast_render, RoomSpec};
use outview_cli::service::{CreateSession, ErrorCode, Frame, Service, ServiceError};

fn service(dir: &std::path::Path, capacity: usize) -> Service {
    Service::new(dir, capacity, Some(common::generator())).unwrap()
}

fn fixture_session(svc: &Service, strategy: Strategy, seed: u64) -> String {
    let samples = json!({ "samples": 2 });
    svc.create_session(CreateSession {
        fixture: Some(2),
        heading: 30.0,
        strategy,
        seed,
        config: Some(serde_json::from_value(samples).unwrap()),
        ..Default::default()
    })
    .unwrap()
    .session
}

fn frame_image(f: &Frame) -> Image {
    Image::decode_png(&BASE64.decode(&f.png).unwrap()).unwrap()
}

fn max_diff(a: &Image, b: &Image) -> f32 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs()))
        .fold(0.0, f32::max)
}

fn no_events(_: Value) {}

#[test]
fn first_look_reproduces_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), 4);
    let id = fixture_session(&svc, Strategy::SupportFirst, 0);
    let frame = svc.look(&id, 0.0, 0.0, 0.0).unwrap();
    assert_eq!(frame.revision, 1);
    assert!(!frame.outpainted);
    let room = RoomSpec::random(2);
    let pose = Pose::from_translation(room.default_camera_position()).compose(&Pose::from_yaw_pitch(30.0, 0.0));
    let (input, _) = raycast_render(&room, &CameraIntrinsics::desk(), &pose).unwrap();
    assert!(max_diff(&frame_image(&frame), &input) <= 1.0 / 255.0 + 1e-6);
    assert_eq!(frame.coverage.hole_fraction, 0.0);
}

#[test]
fn identical_looks_differ_only_in_revision() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), 4);
    let id = fixture_session(&svc, Strategy::SupportFirst, 0);
    svc.support(&id, 20.0, -10.0).unwrap();
    let a = svc.look(&id, 5.0, -3.0, 0.1).unwrap();
    let b = svc.look(&id, 5.0, -3.0, 0.1).unwrap();
    assert_eq!(b.revision, a.revision + 1);
    assert_eq!(Frame { revision: a.revision, ..b }, a);
}

#[test]
fn unknown_session_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), 4);
    for id in ["s999999", "nonsense", "../etc"] {
        assert_eq!(svc.look(id, 0.0, 0.0, 0.0).unwrap_err().code, ErrorCode::NoSession);
    }
    let err = svc.handle_value(json!({ "op": "stats", "session": "s000042" }), &mut no_events).unwrap_err();
    assert_eq!(err.code, ErrorCode::NoSession);
}

#[test]
fn needs_support_before_panorama_and_not_after() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), 4);
    let id = fixture_session(&svc, Strategy::SupportFirst, 1);
    let err = svc.look(&id, 40.0, 0.0, 0.0).unwrap_err();
    assert_eq!(err.code, ErrorCode::NeedsSupport);
    assert_eq!(err.nearest_direction.as_deref(), Some("right"));
    assert!(err.hole_fraction.unwrap() > 0.02);
    let err = svc.look(&id, 0.0, 30.0, 0.0).unwrap_err();
    assert_eq!(err.nearest_direction.as_deref(), Some("up"));

    let mut events = Vec::new();
    let pano = svc
        .handle_value(json!({ "op": "panorama", "session": id }), &mut |e| events.push(e))
        .unwrap();
    assert_eq!(events.len(), 8);
    let directions: Vec<&str> = events.iter().map(|e| e["direction"].as_str().unwrap()).collect();
    assert_eq!(directions, ["up", "left", "down", "right", "up-left", "up-right", "down-left", "down-right"]);
    assert_eq!(events[7]["completed"], 8);
    assert_eq!(pano["scene_revision"], 2);
    let frame = svc.look(&id, 40.0, 0.0, 0.0).unwrap();
    assert_eq!(frame.scene_revision, 2);
    assert!(frame.coverage.hole_fraction <= 0.02);
    svc.look(&id, -25.0, 10.0, 0.0).unwrap();
}

#[test]
fn repeated_panorama_outpaints_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), 4);
    for strategy in [Strategy::SupportFirst, Strategy::NoAccumulation] {
        let id = fixture_session(&svc, strategy, 2);
        let first = svc.panorama(&id, Some(30.0), Some(10.0), &mut |_| {}).unwrap();
        assert!(first.steps.iter().any(|s| s.report.sampled), "{strategy}");
        let stats = svc.stats(&id, 0.0, 0.0).unwrap();
        let second = svc.panorama(&id, Some(30.0), Some(10.0), &mut |_| {}).unwrap();
        assert!(second.steps.iter().all(|s| !s.report.sampled && s.report.new_points == 0), "{strategy}");
        assert_eq!(second.scene_revision, first.scene_revision);
        let after = svc.stats(&id, 0.0, 0.0).unwrap();
        assert_eq!(after.supports.len(), stats.supports.len());
        assert_eq!((after.points, after.detached_points), (stats.points, stats.detached_points));
    }
}

#[test]
fn strategy_switch_changes_rendering() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), 4);
    let id = fixture_session(&svc, Strategy::SupportFirst, 3);
    assert_eq!(svc.look(&id, 40.0, 0.0, 0.0).unwrap_err().code, ErrorCode::NeedsSupport);
    let info = svc.set_strategy(&id, Strategy::NoAccumulation).unwrap();
    assert_eq!(info.scene_revision, 2);
    let frame = svc.look(&id, 40.0, 0.0, 0.0).unwrap();
    assert!(frame.outpainted);
    assert_eq!(svc.set_strategy(&id, Strategy::NoAccumulation).unwrap().scene_revision, 2);
    let support = svc.support(&id, 40.0, 0.0).unwrap();
    assert!(support.report.new_points > 0);
    let detached = svc.stats(&id, 0.0, 0.0).unwrap();
    assert_eq!(detached.detached_points, support.report.new_points);
    let back = svc.set_strategy(&id, Strategy::SupportFirst).unwrap();
    assert_eq!(back.points, detached.points + support.report.new_points);
    assert!(!svc.look(&id, 40.0, 0.0, 0.0).unwrap().outpainted);
}

#[test]
fn saved_session_loads_with_identical_frames() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), 4);
    let id = fixture_session(&svc, Strategy::SupportFirst, 4);
    svc.panorama(&id, Some(30.0), Some(10.0), &mut |_| {}).unwrap();
    let path = svc.save(&id, Some("saved")).unwrap();
    assert_eq!(path, dir.path().join("scenes").join("saved"));
    let loaded = svc.load("saved").unwrap();
    assert_ne!(loaded.session, id);
    for (yaw, pitch, step) in [(0.0, 0.0, 0.0), (25.0, 5.0, 0.0), (-20.0, -8.0, 0.3)] {
        let a = svc.look(&id, yaw, pitch, step).unwrap();
        let b = svc.look(&loaded.session, yaw, pitch, step).unwrap();
        assert_eq!(a.png, b.png);
        assert_eq!(a.coverage_png, b.coverage_png);
    }
    let abs = dir.path().join("absolute");
    svc.save(&id, abs.to_str()).unwrap();
    assert!(abs.join("manifest.json").exists());
    let err = svc.load("missing").unwrap_err();
    assert_eq!(err.code, ErrorCode::BadRequest);
}

#[test]
fn eviction_persists_and_restores_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), 2);
    let a = fixture_session(&svc, Strategy::SupportFirst, 5);
    svc.support(&a, 30.0, 0.0).unwrap();
    let before = svc.look(&a, 20.0, 0.0, 0.0).unwrap();
    let b = fixture_session(&svc, Strategy::SupportFirst, 6);
    svc.look(&b, 0.0, 0.0, 0.0).unwrap();
    let c = fixture_session(&svc, Strategy::SupportFirst, 7);
    assert_eq!(svc.live_sessions(), 2);
    assert!(dir.path().join("sessions").join(&a).join("session.json").exists());
    let after = svc.look(&a, 20.0, 0.0, 0.0).unwrap();
    assert_eq!(after.png, before.png);
    assert_eq!(after.revision, before.revision + 1);
    assert_eq!(after.scene_revision, before.scene_revision);
    assert_eq!(svc.live_sessions(), 2);
    // b was the least recently used when a came back.
    assert!(dir.path().join("sessions").join(&b).exists());
    svc.look(&c, 0.0, 0.0, 0.0).unwrap();

    // A new service over the same directory continues ids and can restore.
    let svc2 = service(dir.path(), 2);
    let d = fixture_session(&svc2, Strategy::SupportFirst, 8);
    assert!(![&a, &b, &c].contains(&&d), "{d}");
    assert_eq!(svc2.look(&b, 0.0, 0.0, 0.0).unwrap().revision, 2);
    svc2.close(&b).unwrap();
    assert_eq!(svc2.look(&b, 0.0, 0.0, 0.0).unwrap_err().code, ErrorCode::NoSession);
}

#[test]
fn concurrent_looks_share_one_scene_revision() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(service(dir.path(), 4));
    let id = fixture_session(&svc, Strategy::SupportFirst, 9);
    svc.support(&id, 30.0, 0.0).unwrap();
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let svc = svc.clone();
            let id = id.clone();
            thread::spawn(move || (0..5).map(|_| svc.look(&id, 10.0, 0.0, 0.0).unwrap()).collect::<Vec<_>>())
        })
        .collect();
    let frames: Vec<Frame> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    let mut revisions: Vec<u64> = frames.iter().map(|f| f.revision).collect();
    revisions.sort();
    assert_eq!(revisions, (1..=20).collect::<Vec<_>>());
    assert!(frames.iter().all(|f| f.png == frames[0].png && f.scene_revision == 2));
}

#[test]
fn sessions_from_uploaded_images() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), 4);
    let room = RoomSpec::random(4);
    let k = CameraIntrinsics::desk();
    let (image, depth) = raycast_render(&room, &k, &Pose::from_translation(room.default_camera_position())).unwrap();
    let request = json!({
        "op": "create_session",
        "image_png": BASE64.encode(image.encode_png().unwrap()),
        "depth_png": BASE64.encode(depth.encode_png_mm().unwrap()),
        "intrinsics": k,
        "strategy": "sequential",
    });
    let info = svc.handle_value(request.clone(), &mut no_events).unwrap();
    assert_eq!(info["strategy"], "sequential");
    let id = info["session"].as_str().unwrap();
    let frame = svc.look(id, 0.0, 0.0, 0.0).unwrap();
    assert!(max_diff(&frame_image(&frame), &image) <= 1.0 / 255.0 + 1e-6);

    let small = Image::from_fn(32, 32, |_, _| [0.5; 3]);
    let mut bad = request.clone();
    bad["image_png"] = json!(BASE64.encode(small.encode_png().unwrap()));
    let err = svc.handle_value(bad, &mut no_events).unwrap_err();
    assert_eq!(err.code, ErrorCode::BadRequest);
    assert!(err.message.contains("32x32"), "{}", err.message);
    let mut partial = request;
    partial.as_object_mut().unwrap().remove("depth_png");
    assert_eq!(svc.handle_value(partial, &mut no_events).unwrap_err().code, ErrorCode::BadRequest);
}

#[test]
fn stats_report_points_supports_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), 4);
    let id = fixture_session(&svc, Strategy::SupportFirst, 10);
    let stats = svc.stats(&id, 0.0, 0.0).unwrap();
    assert_eq!(stats.points, 64 * 64);
    assert!(stats.supports.is_empty());
    assert_eq!(stats.provenance.as_ref().unwrap().len(), 1);
    assert!(svc.stats(&id, 45.0, 0.0).unwrap().provenance.is_none());
    svc.panorama(&id, Some(30.0), Some(10.0), &mut |_| {}).unwrap();
    let stats = svc.stats(&id, 30.0, 0.0).unwrap();
    assert_eq!(stats.supports.len(), 8);
    let right = &stats.supports[3];
    assert!((right.yaw - 30.0).abs() < 1e-9 && right.pitch.abs() < 1e-9);
    let total: usize = stats.points_by_origin.iter().map(|o| o.points).sum();
    assert_eq!(total, stats.points);
    let provenance = stats.provenance.unwrap();
    assert!(provenance.len() >= 2);
    assert_eq!(provenance.iter().map(|p| p.pixels).sum::<usize>(), 64 * 64);
}

#[test]
fn malformed_requests_are_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), 4);
    for req in [
        json!({ "op": "fly" }),
        json!({ "session": "s000001" }),
        json!({ "op": "look" }),
        json!({ "op": "create_session", "fixture": 99 }),
        json!({ "op": "set_strategy", "session": "s000001", "strategy": "best" }),
    ] {
        let err: ServiceError = svc.handle_value(req.clone(), &mut no_events).unwrap_err();
        assert_eq!(err.code, ErrorCode::BadRequest, "{req}");
    }
}

#[test]
fn missing_generator_is_reported_on_outpaint() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::new(dir.path(), 4, None).unwrap();
    let id = fixture_session(&svc, Strategy::SupportFirst, 0);
    svc.look(&id, 0.0, 0.0, 0.0).unwrap();
    assert_eq!(svc.support(&id, 30.0, 0.0).unwrap_err().code, ErrorCode::NoGenerator);
}
