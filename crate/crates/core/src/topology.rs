//! Rank grid: pipeline, tensor and data-parallel coordinates and groups.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Pp,
    Tp,
    Dp,
    Rdp,
}

impl GroupKind {
    pub const ALL: [GroupKind; 4] = [GroupKind::Pp, GroupKind::Tp, GroupKind::Dp, GroupKind::Rdp];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RankCoords {
    pub rank: usize,
    pub pp_rank: usize,
    pub tp_rank: usize,
    pub rdp_rank: usize,
    pub dp_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Topology {
    pub world_size: usize,
    pub pp_degree: usize,
    pub tp_degree: usize,
    pub dp_degree: usize,
    pub rdp_degree: usize,
    /// Canonical three-letter placement, e.g. "DPT".
    pub placement: String,
    pub prescaled_batch: bool,
    pub ranks: Vec<RankCoords>,
}

/// Resolves "spread"/"cluster" aliases and checks for a permutation of "DPT".
pub fn canonical_placement(placement: &str) -> Result<String> {
    let p = match placement {
        "spread" => "TPD",
        "cluster" => "DPT",
        other => other,
    };
    let mut letters: Vec<char> = p.chars().collect();
    letters.sort_unstable();
    if letters != ['D', 'P', 'T'] {
        return Err(Error::Placement(placement.to_string()));
    }
    Ok(p.to_string())
}

pub fn build_topology(
    world_size: usize,
    pp_degree: usize,
    tp_degree: usize,
    placement: &str,
    prescaled_batch: bool,
) -> Result<Topology> {
    if pp_degree == 0 || tp_degree == 0 || world_size == 0 {
        return Err(Error::Degree(format!(
            "world {world_size}, pp {pp_degree}, tp {tp_degree} must all be positive"
        )));
    }
    let group = pp_degree * tp_degree;
    if !world_size.is_multiple_of(group) {
        return Err(Error::WorldSize {
            world: world_size,
            group,
        });
    }
    let placement = canonical_placement(placement)?;
    let dp_degree = world_size / pp_degree;
    let rdp_degree = dp_degree / tp_degree;

    let radix = |letter: char| match letter {
        'D' => rdp_degree,
        'P' => pp_degree,
        _ => tp_degree,
    };
    let letters: Vec<char> = placement.chars().collect();
    let ranks = (0..world_size)
        .map(|rank| {
            // Rightmost letter varies fastest.
            let mut rest = rank;
            let (mut pp_rank, mut tp_rank, mut rdp_rank) = (0, 0, 0);
            for &letter in letters.iter().rev() {
                let r = radix(letter);
                let digit = rest % r;
                rest /= r;
                match letter {
                    'D' => rdp_rank = digit,
                    'P' => pp_rank = digit,
                    _ => tp_rank = digit,
                }
            }
            RankCoords {
                rank,
                pp_rank,
                tp_rank,
                rdp_rank,
                dp_rank: rdp_rank * tp_degree + tp_rank,
            }
        })
        .collect();

    Ok(Topology {
        world_size,
        pp_degree,
        tp_degree,
        dp_degree,
        rdp_degree,
        placement,
        prescaled_batch,
        ranks,
    })
}

impl Topology {
    pub fn coords(&self, rank: usize) -> RankCoords {
        self.ranks[rank]
    }

    /// Global rank at the given coordinates.
    pub fn rank_of(&self, pp_rank: usize, tp_rank: usize, rdp_rank: usize) -> usize {
        self.placement.chars().fold(0, |acc, letter| match letter {
            'D' => acc * self.rdp_degree + rdp_rank,
            'P' => acc * self.pp_degree + pp_rank,
            _ => acc * self.tp_degree + tp_rank,
        })
    }

    /// Data-parallel degree seen by the input pipeline. Tensor-parallel ranks
    /// share their samples when the batch is prescaled.
    pub fn effective_dp_degree(&self) -> usize {
        if self.prescaled_batch {
            self.rdp_degree
        } else {
            self.dp_degree
        }
    }

    /// Ranks in the group of `kind` that contains `rank`, ascending.
    pub fn group(&self, kind: GroupKind, rank: usize) -> Vec<usize> {
        let me = self.ranks[rank];
        self.ranks
            .iter()
            .filter(|c| match kind {
                GroupKind::Pp => c.tp_rank == me.tp_rank && c.rdp_rank == me.rdp_rank,
                GroupKind::Tp => c.pp_rank == me.pp_rank && c.rdp_rank == me.rdp_rank,
                GroupKind::Dp => c.pp_rank == me.pp_rank,
                GroupKind::Rdp => c.pp_rank == me.pp_rank && c.tp_rank == me.tp_rank,
            })
            .map(|c| c.rank)
            .collect()
    }

    /// All groups of `kind`, ordered by their smallest member.
    pub fn groups(&self, kind: GroupKind) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.world_size];
        let mut out = Vec::new();
        for r in 0..self.world_size {
            if seen[r] {
                continue;
            }
            let g = self.group(kind, r);
            for &m in &g {
                seen[m] = true;
            }
            out.push(g);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }
}
