//! Brute-force attention-mask definitions.

use mtcolor_core::mask::*;

pub fn policies() -> Vec<MaskPolicy> {
    let mut out = Vec::new();
    for background in [BackgroundPolicy::SelfOnly, BackgroundPolicy::BackgroundRegion, BackgroundPolicy::AllOnes] {
        for overlap in [OverlapPolicy::Union, OverlapPolicy::FirstMatch] {
            out.push(MaskPolicy { background, overlap });
        }
    }
    out
}

/// Instances whose mask holds pixel `i` under the overlap rule.
pub fn owners(m: &MaskSet, i: usize, overlap: OverlapPolicy) -> Vec<usize> {
    let all: Vec<usize> = (0..m.len()).filter(|&k| m.get(k).bits()[i]).collect();
    match overlap {
        OverlapPolicy::Union => all,
        OverlapPolicy::FirstMatch => all.into_iter().take(1).collect(),
    }
}

pub fn uncovered(m: &MaskSet, i: usize) -> bool {
    (0..m.len()).all(|k| !m.get(k).bits()[i])
}

/// Cross-attention mask: a covered query sees the pixels of the instances
/// that own it; an uncovered query follows the background policy.
pub fn pixel_oracle(m: &MaskSet, p: MaskPolicy) -> Vec<bool> {
    let l = m.pixels();
    if m.is_empty() {
        return vec![true; l * l];
    }
    let mut out = Vec::with_capacity(l * l);
    for i in 0..l {
        let own = owners(m, i, p.overlap);
        for j in 0..l {
            let v = if own.is_empty() {
                match p.background {
                    BackgroundPolicy::SelfOnly => i == j,
                    BackgroundPolicy::BackgroundRegion => uncovered(m, j),
                    BackgroundPolicy::AllOnes => true,
                }
            } else {
                own.iter().any(|&k| m.get(k).bits()[j])
            };
            out.push(v);
        }
    }
    out
}

/// Latent self mask: two covered pixels attend iff they share an owner.
pub fn self_oracle(m: &MaskSet, p: MaskPolicy) -> Vec<bool> {
    let l = m.pixels();
    if m.is_empty() {
        return vec![true; l * l];
    }
    let mut out = Vec::with_capacity(l * l);
    for i in 0..l {
        for j in 0..l {
            let (ui, uj) = (uncovered(m, i), uncovered(m, j));
            let v = if !ui && !uj {
                let (a, b) = (owners(m, i, p.overlap), owners(m, j, p.overlap));
                a.iter().any(|k| b.contains(k))
            } else {
                match p.background {
                    BackgroundPolicy::SelfOnly => i == j && ui,
                    BackgroundPolicy::BackgroundRegion => ui && uj,
                    BackgroundPolicy::AllOnes => true,
                }
            };
            out.push(v);
        }
    }
    out
}

/// Latent-to-instance mask: row `i`, column `k` is set iff instance `k`
/// covers pixel `i`.
pub fn latent_oracle(m: &MaskSet) -> Vec<bool> {
    (0..m.pixels()).flat_map(|i| (0..m.len()).map(move |k| m.get(k).bits()[i])).collect()
}
