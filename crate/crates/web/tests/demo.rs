use photosplat_web::{disk_curves, SplatDemo, TerrainDemo};

#[test]
fn disk_curves_match_closed_forms() {
    let n = 7;
    let c = disk_curves(45.0, n);
    assert_eq!(c.len(), 3 * n);
    let (lambert, ls, ll) = (&c[..n], &c[n..2 * n], &c[2 * n..]);
    for k in 0..n {
        let inc = (90.0 * k as f64 / (n - 1) as f64).to_radians();
        assert!((lambert[k] - inc.cos().max(0.0)).abs() < 1e-12);
        let lo = lambert[k].min(ls[k]) - 1e-12;
        let hi = lambert[k].max(ls[k]) + 1e-12;
        assert!(ll[k] >= lo && ll[k] <= hi, "lunar-lambert outside the hull at {k}");
    }
    // incidence equals emission at index 3 (45°), where Lommel-Seeliger is 1
    assert!((ls[3] - 1.0).abs() < 1e-12);
    assert!(lambert[n - 1].abs() < 1e-12);
}

#[test]
fn terrain_render_fills_the_frame() {
    let t = TerrainDemo::new(2, 48).unwrap();
    assert_eq!(t.size(), 48);
    let px = t.render("lambert", 30.0, 60.0, 2.0).unwrap();
    assert_eq!(px.len(), 48 * 48 * 4);
    let lit = px.chunks(4).filter(|p| p[0] > 0).count();
    assert!(lit > 48 * 48 * 9 / 10, "only {lit} lit pixels");
    assert!(px.chunks(4).all(|p| p[3] == 255 && p[0] == p[1] && p[1] == p[2]));
    let ls = t.render("ls", 30.0, 60.0, 2.0).unwrap();
    assert_ne!(px, ls);
}

#[test]
fn splat_render_covers_the_cap() {
    let mut d = SplatDemo::new(1500, 64);
    assert_eq!(d.count(), 1500);
    let acc = d.render("lambert", "accumulation", 0.0, 90.0, 0.0).unwrap();
    let center = (32 * 64 + 32) * 4;
    assert!(acc[center] > 250, "center accumulation {}", acc[center]);
    assert_eq!(acc[0], 0);
    let lit = d.render("lunar-lambert", "intensity", 0.0, 90.0, 0.0).unwrap();
    assert!(lit[center] > 0);
    let normal = d.render("lambert", "normal", 0.0, 90.0, 0.0).unwrap();
    assert_eq!(normal.len(), 64 * 64 * 4);
    assert!(normal[center + 2] > 200, "cap top normal should point up");
}
