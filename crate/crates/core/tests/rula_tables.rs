use posture_fusion::ergonomics::{rula, table_a, table_b, table_c, Load, RulaContext};
use posture_fusion::kinematics::JointVector;

/// Cells read by hand off the published RULA worksheet.
/// `(upper arm, lower arm, wrist, wrist twist) → Table A`
const A_CELLS: [([u8; 4], u8); 9] = [
    ([1, 1, 1, 1], 1),
    ([1, 1, 1, 2], 2),
    ([1, 3, 4, 2], 4),
    ([2, 3, 4, 2], 5),
    ([3, 2, 2, 1], 4),
    ([4, 3, 2, 2], 5),
    ([5, 1, 4, 2], 7),
    ([5, 3, 4, 2], 8),
    ([6, 1, 1, 1], 7),
];
/// `(neck, trunk, legs) → Table B`
const B_CELLS: [([u8; 3], u8); 6] = [
    ([1, 1, 1], 1),
    ([1, 1, 2], 3),
    ([2, 3, 2], 5),
    ([3, 4, 2], 6),
    ([4, 2, 1], 5),
    ([6, 6, 2], 9),
];
/// `(wrist/arm score, neck/trunk/leg score) → Table C`
const C_CELLS: [([u8; 2], u8); 5] = [([1, 1], 1), ([4, 4], 4), ([5, 3], 4), ([2, 7], 5), ([8, 7], 7)];

#[test]
fn twenty_worksheet_cells() {
    for ([u, l, w, t], v) in A_CELLS {
        assert_eq!(table_a(u, l, w, t), v, "A({u},{l},{w},{t})");
    }
    for ([n, tr, lg], v) in B_CELLS {
        assert_eq!(table_b(n, tr, lg), v, "B({n},{tr},{lg})");
    }
    for ([a, b], v) in C_CELLS {
        assert_eq!(table_c(a, b), v, "C({a},{b})");
    }
    assert_eq!(A_CELLS.len() + B_CELLS.len() + C_CELLS.len(), 20);
}

#[test]
fn tables_are_monotone_in_every_argument() {
    for u in 1..=6 {
        for l in 1..=3 {
            for w in 1..=4 {
                for t in 1..=2 {
                    let v = table_a(u, l, w, t);
                    if u < 6 {
                        assert!(table_a(u + 1, l, w, t) >= v);
                    }
                    if l < 3 {
                        assert!(table_a(u, l + 1, w, t) >= v, "A lower arm at {u},{l},{w},{t}");
                    }
                    if w < 4 {
                        assert!(table_a(u, l, w + 1, t) >= v, "A wrist at {u},{l},{w},{t}");
                    }
                    if t < 2 {
                        assert!(table_a(u, l, w, t + 1) >= v);
                    }
                }
            }
        }
    }
    for n in 1..=6 {
        for tr in 1..=6 {
            for lg in 1..=2 {
                let v = table_b(n, tr, lg);
                if n < 6 {
                    assert!(table_b(n + 1, tr, lg) >= v);
                }
                if tr < 6 {
                    assert!(table_b(n, tr + 1, lg) >= v);
                }
                if lg < 2 {
                    assert!(table_b(n, tr, lg + 1) >= v);
                }
            }
        }
    }
    for a in 1..=12 {
        for b in 1..=10 {
            let v = table_c(a, b);
            assert!(table_c(a + 1, b) >= v && table_c(a, b + 1) >= v);
            assert!((1..=7).contains(&v));
        }
    }
}

fn deg(q: [f64; 10]) -> JointVector {
    JointVector::from_iterator(q.iter().map(|d| d.to_radians()))
}

/// Moving one joint further from neutral (in the direction the worksheet
/// scores as riskier) never lowers the grand score.
#[test]
fn grand_score_monotone_along_risk_directions() {
    let neutral = [0.0, 0.0, 0.0, 10.0, 10.0, 0.0, 80.0, 0.0, 0.0, 0.0];
    // (joint, start, end) sweeps in 0.5° steps
    let sweeps: [(usize, f64, f64); 8] = [(4, 0.0, 170.0), (3, 0.0, 120.0), (8, 0.0, 70.0), (8, 0.0, -70.0), (9, 0.0, 30.0), (9, 0.0, -25.0), (7, 0.0, 90.0), (7, 0.0, -85.0)];
    for load in [Load::Light, Load::Heavy] {
        for trunk_from_torso in [false, true] {
            let ctx = RulaContext {
                load,
                trunk_from_torso,
                ..RulaContext::default()
            };
            for &(j, a, b) in &sweeps {
                let steps = ((b - a) / 0.5).abs() as usize;
                let mut prev = 0;
                for s in 0..=steps {
                    let mut q = neutral;
                    q[j] = a + (b - a) * s as f64 / steps as f64;
                    let g = rula(&deg(q), &ctx).grand;
                    assert!(g >= prev, "joint {j} at {}° dropped {prev} -> {g}", q[j]);
                    prev = g;
                }
            }
            if trunk_from_torso {
                let mut prev = 0;
                for s in 0..=180 {
                    let mut q = neutral;
                    q[0] = s as f64 * 0.5;
                    let g = rula(&deg(q), &ctx).grand;
                    assert!(g >= prev);
                    prev = g;
                }
            }
        }
    }
}
