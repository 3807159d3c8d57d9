use xattnres_demo::{attention_weights, resize_plane, Scene};

#[test]
fn scene_buffers_match_the_canvas_size() {
    let s = Scene::new(3, 7, 0.1).unwrap();
    assert_eq!(s.image_rgba().len(), 64 * 64 * 4);
    assert_eq!(s.mask_rgba().len(), 64 * 64 * 4);
    assert_eq!(Scene::new(3, 7, 0.1).unwrap().image(), s.image());
}

#[test]
fn resize_pools_down_and_interpolates_up() {
    let plane = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(resize_plane(&plane, 2, 2, 1, 1).unwrap(), vec![4.0]);
    let up = resize_plane(&plane, 2, 2, 4, 4).unwrap();
    assert_eq!(up[0], 1.0);
    assert_eq!(up[15], 4.0);
    assert_eq!(up[1], 1.25);
}

#[test]
fn zero_query_is_uniform_and_scaling_sharpens() {
    let w0 = attention_weights(3, 0.0, 1).unwrap();
    assert_eq!(w0.len(), 4);
    assert!(w0.iter().all(|w| (w - 0.25).abs() < 1e-12));
    let spread = |w: &[f64]| w.iter().copied().fold(f64::MIN, f64::max) - w.iter().copied().fold(f64::MAX, f64::min);
    let (a, b) = (attention_weights(3, 1.0, 1).unwrap(), attention_weights(3, 8.0, 1).unwrap());
    assert!(spread(&b) > spread(&a) && spread(&a) > 0.0);
    assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
