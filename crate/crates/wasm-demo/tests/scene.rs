use mavr_wasm_demo::{Scene, FRAMES, SIZE};

#[test]
fn render_flow_and_mask() {
    let mut s = Scene::render(2, 0, 11, false).unwrap();
    assert_eq!(s.rgb_frame(0).len(), SIZE * SIZE * 4);
    assert!(s.flow_frame(0).is_empty() && s.mask_frame(0).is_empty());
    s.extract_flow().unwrap();
    assert_eq!(s.flow().unwrap().shape(), &[2, FRAMES, SIZE, SIZE]);
    assert_eq!(s.flow_frame(5).len(), SIZE * SIZE * 4);
    assert_eq!(s.mean_flow(0), vec![0.0, 0.0]);
    let iou = s.extract_mask(0.2).unwrap();
    assert!(iou > 0.7, "iou {iou}");
    assert_eq!(s.mask_frame(3).len(), SIZE * SIZE * 4);
}

#[test]
fn bad_indices_are_reported() {
    assert!(Scene::render(4, 0, 0, false).err().unwrap().contains("class"));
    assert!(Scene::render(0, 3, 0, true).err().unwrap().contains("scale"));
}

#[test]
fn same_seed_same_frames() {
    let a = Scene::render(0, 1, 3, true).unwrap();
    let b = Scene::render(0, 1, 3, true).unwrap();
    assert_eq!(a.rgb_frame(7), b.rgb_frame(7));
}
