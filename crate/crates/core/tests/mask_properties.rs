use proptest::prelude::*;
use varl_core::maskprop::{propagate, seed_mask, Mask};
use varl_core::schedule::{builtin_schedule, Resolution, ScaleSchedule, Shape};

fn spell() -> ScaleSchedule {
    ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)]).unwrap()
}

/// Independent cell mapping: finest cell (a, b) lies in coarse cell
/// (floor(a·h/H), floor(b·w/W)).
fn ancestor(fine: Shape, coarse: Shape, a: usize, b: usize) -> (usize, usize) {
    (a * coarse.0 / fine.0, b * coarse.1 / fine.1)
}

#[test]
fn single_site_chain_matches_cell_mapping() {
    let s = spell();
    let pyramid = propagate(&s, &seed_mask((4, 4), &[(3, 3)]).unwrap()).unwrap();
    for t in 0..s.len() {
        let shape = s.shape(t);
        let want = ancestor((4, 4), shape, 3, 3);
        let m = pyramid.mask(t);
        assert_eq!(m.count(), 1, "step {t}");
        assert!(m.get(want.0, want.1), "step {t} expected {want:?}");
    }
    assert!(pyramid.mask(1).get(1, 1));
    assert!(pyramid.mask(0).get(0, 0));
}

fn schedules() -> impl Strategy<Value = ScaleSchedule> {
    prop_oneof![
        Just(spell()),
        Just(builtin_schedule(Resolution::R64)),
        Just(ScaleSchedule::new(vec![(1, 2), (2, 3), (3, 5), (5, 7)]).unwrap()),
    ]
}

fn mask_for(shape: Shape) -> impl Strategy<Value = Mask> {
    prop::collection::vec(prop::bool::weighted(0.2), shape.0 * shape.1)
        .prop_map(move |c| Mask::new(shape, c).unwrap())
}

fn case() -> impl Strategy<Value = (ScaleSchedule, Mask, (usize, usize))> {
    schedules().prop_flat_map(|s| {
        let f = s.finest();
        (Just(s), mask_for(f), (0..f.0, 0..f.1))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn monotone_covering_idempotent((s, m, extra) in case()) {
        let p = propagate(&s, &m).unwrap();
        let f = s.finest();

        // Coverage and exactness against the cell-mapping oracle.
        for t in 0..s.len() {
            let shape = s.shape(t);
            let mut want = vec![false; shape.0 * shape.1];
            for a in 0..f.0 {
                for b in 0..f.1 {
                    if m.get(a, b) {
                        let (i, j) = ancestor(f, shape, a, b);
                        want[i * shape.1 + j] = true;
                    }
                }
            }
            prop_assert_eq!(p.mask(t).cells(), &want[..]);
        }

        // Adding a site never clears a coarser site.
        let mut cells = m.cells().to_vec();
        cells[extra.0 * f.1 + extra.1] = true;
        let bigger = propagate(&s, &Mask::new(f, cells).unwrap()).unwrap();
        for t in 0..s.len() {
            for (x, y) in p.mask(t).cells().iter().zip(bigger.mask(t).cells()) {
                prop_assert!(!x || *y);
            }
        }

        // Re-propagating the finest grid reproduces the pyramid.
        let again = propagate(&s, p.finest()).unwrap();
        prop_assert_eq!(again.masks(), p.masks());
    }
}
