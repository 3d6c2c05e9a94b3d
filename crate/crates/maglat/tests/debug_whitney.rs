#[test]
fn debug_whitney_halfplane() {
    use maglat::grid::*;
    use maglat::czd::*;
    let h = 2.0 / 32.0;
    let g = make_grid(2, 32, h, Boundary::Dirichlet, &[-1.0, -1.0]).unwrap();
    let omega: Vec<bool> = g.nodes().map(|i| g.coord(i)[0] < 0.4).collect();
    let w = whitney(&g, &omega).unwrap();
    println!("cubes: {}", w.cubes.len());
    for (k, c) in w.cubes.iter().enumerate() {
        if w.violations.iter().any(|v| v.starts_with(&format!("cube {k}:"))) {
            println!("BAD cube {k}: level {} corner {:?}", c.level, c.corner);
        }
    }
    println!("violations: {:?}", w.violations.len());
}
