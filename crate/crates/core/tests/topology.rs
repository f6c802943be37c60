use std::collections::BTreeSet;

use modelpar::topology::{build_topology, GroupKind};
use proptest::prelude::*;

fn perms() -> Vec<&'static str> {
    vec!["DPT", "DTP", "PDT", "PTD", "TDP", "TPD"]
}

proptest! {
    #[test]
    fn groups_partition_the_world(
        pp in 1usize..=4,
        tp in 1usize..=4,
        rdp in 1usize..=4,
        p in 0usize..6,
    ) {
        let world = pp * tp * rdp;
        let t = build_topology(world, pp, tp, perms()[p], false).unwrap();
        prop_assert_eq!(world, t.pp_degree * t.tp_degree * t.rdp_degree);
        for kind in GroupKind::ALL {
            let groups = t.groups(kind);
            let mut all: Vec<usize> = groups.iter().flatten().copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..world).collect::<Vec<_>>());
            let expected = match kind {
                GroupKind::Pp => pp,
                GroupKind::Tp => tp,
                GroupKind::Dp => tp * rdp,
                GroupKind::Rdp => rdp,
            };
            prop_assert!(groups.iter().all(|g| g.len() == expected));
        }
        for r in 0..world {
            let dp: BTreeSet<usize> = t.group(GroupKind::Dp, r).into_iter().collect();
            prop_assert!(t.group(GroupKind::Tp, r).iter().all(|m| dp.contains(m)));
            prop_assert_eq!(t.group(GroupKind::Rdp, r).len() * tp, dp.len());
            let c = t.coords(r);
            prop_assert_eq!(t.rank_of(c.pp_rank, c.tp_rank, c.rdp_rank), r);
            prop_assert_eq!(c.dp_rank, c.rdp_rank * tp + c.tp_rank);
        }
    }

    #[test]
    fn aliases_match_their_letters(pp in 1usize..=3, tp in 1usize..=3, rdp in 1usize..=3) {
        let world = pp * tp * rdp;
        prop_assert_eq!(
            build_topology(world, pp, tp, "spread", false).unwrap(),
            build_topology(world, pp, tp, "TPD", false).unwrap()
        );
        prop_assert_eq!(
            build_topology(world, pp, tp, "cluster", false).unwrap(),
            build_topology(world, pp, tp, "DPT", false).unwrap()
        );
    }

    #[test]
    fn rightmost_letter_groups_neighbours(pp in 2usize..=3, tp in 2usize..=3, rdp in 2usize..=3, p in 0usize..6) {
        let placement = perms()[p];
        let t = build_topology(pp * tp * rdp, pp, tp, placement, false).unwrap();
        let kind = match placement.chars().last().unwrap() {
            'D' => GroupKind::Rdp,
            'P' => GroupKind::Pp,
            _ => GroupKind::Tp,
        };
        let g = t.group(kind, 0);
        prop_assert_eq!(g.clone(), (0..g.len()).collect::<Vec<_>>());
    }
}

#[test]
fn figure_one_degrees() {
    let t = build_topology(8, 2, 2, "cluster", false).unwrap();
    assert_eq!(t.dp_degree, 4);
    assert_eq!(t.rdp_degree, 2);
    assert_eq!(t.effective_dp_degree(), 4);
    assert!(t.group(GroupKind::Tp, 0).contains(&1));
}
