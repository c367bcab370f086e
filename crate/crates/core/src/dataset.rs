//! Groupwise ranking of generations and preference-pair construction.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::scoring::VideoScore;
use crate::{Error, Result};

/// Several generations for one prompt, all scored with one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationGroup {
    pub prompt_id: String,
    pub members: Vec<VideoScore>,
    pub config_hash: String,
}

impl GenerationGroup {
    pub fn new(prompt_id: impl Into<String>, config_hash: impl Into<String>, members: Vec<VideoScore>) -> Result<Self> {
        let prompt_id = prompt_id.into();
        if members.len() < 2 {
            return Err(Error::contract(format!("group {prompt_id} needs at least 2 members")));
        }
        let mut seen = BTreeSet::new();
        for m in &members {
            if !seen.insert(m.video_id.as_str()) {
                return Err(Error::contract(format!("group {prompt_id} repeats video {}", m.video_id)));
            }
        }
        Ok(Self {
            prompt_id,
            members,
            config_hash: config_hash.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// Fewer than two members left after dropping flagged or unscored ones.
    TooFewUnflagged,
}

/// A member that can take part in ranking: unflagged and scored.
fn rankable(v: &VideoScore) -> Option<f64> {
    if v.flags.any() {
        return None;
    }
    v.consistency_score.filter(|s| s.is_finite())
}

/// Members by descending consistency score, ties by video id. Flagged or
/// unscored members are left out.
pub fn rank_group(group: &GenerationGroup) -> core::result::Result<Vec<&VideoScore>, SkipReason> {
    let mut ranked: Vec<(&VideoScore, f64)> = group
        .members
        .iter()
        .filter_map(|m| rankable(m).map(|s| (m, s)))
        .collect();
    if ranked.len() < 2 {
        return Err(SkipReason::TooFewUnflagged);
    }
    ranked.sort_by(|(a, sa), (b, sb)| sb.total_cmp(sa).then_with(|| a.video_id.cmp(&b.video_id)));
    Ok(ranked.into_iter().map(|(m, _)| m).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub winner_id: String,
    pub loser_id: String,
    pub winner_score: f64,
    pub loser_score: f64,
    pub score_gap: f64,
}

impl PreferencePair {
    /// Re-check the filter predicates from the record alone.
    pub fn satisfies(&self, tau: f64, epsilon: f64) -> bool {
        self.winner_score - self.loser_score == self.score_gap && self.score_gap > tau && self.winner_score > epsilon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairFilter {
    /// Minimum score gap (exclusive).
    pub tau: f64,
    /// Minimum winner score (exclusive).
    pub epsilon: f64,
    /// Pairs per group. 1 emits only best vs worst; larger values take
    /// qualifying pairs in rank order.
    pub max_pairs_per_group: usize,
}

impl Default for PairFilter {
    fn default() -> Self {
        Self {
            tau: 0.05,
            epsilon: 0.5,
            max_pairs_per_group: 1,
        }
    }
}

impl PairFilter {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::contract(format!("tau must be non-negative, got {}", self.tau)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::contract(format!("epsilon must be in (0, 1), got {}", self.epsilon)));
        }
        if self.max_pairs_per_group == 0 {
            return Err(Error::contract("max_pairs_per_group must be at least 1"));
        }
        Ok(())
    }

    fn accepts(&self, winner: f64, loser: f64) -> bool {
        winner - loser > self.tau && winner > self.epsilon
    }
}

/// Outcome for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupOutcome {
    pub prompt_id: String,
    pub pairs: Vec<PreferencePair>,
    pub skipped: Option<SkipReason>,
}

/// Build preference pairs for every group. All groups must share a config
/// hash.
pub fn build_pairs(groups: &[GenerationGroup], filter: &PairFilter) -> Result<Vec<GroupOutcome>> {
    filter.validate()?;
    if let Some(first) = groups.first() {
        if let Some(other) = groups.iter().find(|g| g.config_hash != first.config_hash) {
            return Err(Error::contract(format!(
                "groups scored under different configs: {} has {}, {} has {}",
                first.prompt_id, first.config_hash, other.prompt_id, other.config_hash
            )));
        }
    }
    Ok(groups.iter().map(|g| group_pairs(g, filter)).collect())
}

fn group_pairs(group: &GenerationGroup, filter: &PairFilter) -> GroupOutcome {
    let ranked = match rank_group(group) {
        Ok(r) => r,
        Err(reason) => {
            return GroupOutcome {
                prompt_id: group.prompt_id.clone(),
                pairs: Vec::new(),
                skipped: Some(reason),
            }
        }
    };
    let score = |v: &VideoScore| v.consistency_score.unwrap_or(0.0);
    let make = |w: &VideoScore, l: &VideoScore| PreferencePair {
        prompt_id: group.prompt_id.clone(),
        winner_id: w.video_id.clone(),
        loser_id: l.video_id.clone(),
        winner_score: score(w),
        loser_score: score(l),
        score_gap: score(w) - score(l),
    };
    let mut pairs = Vec::new();
    if filter.max_pairs_per_group == 1 {
        let (best, worst) = (ranked[0], ranked[ranked.len() - 1]);
        if filter.accepts(score(best), score(worst)) {
            pairs.push(make(best, worst));
        }
    } else {
        'outer: for (a, w) in ranked.iter().enumerate() {
            for l in ranked[a + 1..].iter().rev() {
                if pairs.len() == filter.max_pairs_per_group {
                    break 'outer;
                }
                if filter.accepts(score(w), score(l)) {
                    pairs.push(make(w, l));
                }
            }
        }
    }
    GroupOutcome {
        prompt_id: group.prompt_id.clone(),
        pairs,
        skipped: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::VideoFlags;
    use alloc::string::ToString;
    use alloc::vec;
    use rand::Rng;

    fn video(id: &str, score: f64) -> VideoScore {
        VideoScore {
            video_id: id.into(),
            consistency_error: Some(1.0 / score - 1.0),
            consistency_score: Some(score),
            motion_level: Some(0.3),
            n_valid_pairs: 3,
            flags: VideoFlags::default(),
            pairs: Vec::new(),
        }
    }

    fn group(scores: &[(&str, f64)]) -> GenerationGroup {
        GenerationGroup::new("p", "h", scores.iter().map(|(id, s)| video(id, *s)).collect()).unwrap()
    }

    fn ids(r: &[&VideoScore]) -> Vec<String> {
        r.iter().map(|v| v.video_id.clone()).collect()
    }

    #[test]
    fn ranking_order() {
        let g = group(&[("a", 0.9), ("b", 0.5), ("c", 0.7)]);
        assert_eq!(ids(&rank_group(&g).unwrap()), ["a", "c", "b"]);
        let g = group(&[("b", 0.5), ("a", 0.5)]);
        assert_eq!(ids(&rank_group(&g).unwrap()), ["a", "b"]);
    }

    #[test]
    fn flagged_members_drop_out() {
        let mut g = group(&[("a", 0.9), ("b", 0.5)]);
        g.members[1].flags.near_static = true;
        assert_eq!(rank_group(&g), Err(SkipReason::TooFewUnflagged));
        let out = build_pairs(&[g], &PairFilter::default()).unwrap();
        assert_eq!(out[0].skipped, Some(SkipReason::TooFewUnflagged));
        assert!(out[0].pairs.is_empty());
    }

    #[test]
    fn group_validation() {
        assert!(GenerationGroup::new("p", "h", vec![video("a", 0.5)]).is_err());
        assert!(GenerationGroup::new("p", "h", vec![video("a", 0.5), video("a", 0.6)]).is_err());
    }

    #[test]
    fn filter_examples() {
        let f = PairFilter::default();
        let out = build_pairs(&[group(&[("x", 0.80), ("y", 0.72), ("z", 0.40)])], &f).unwrap();
        assert_eq!(out[0].pairs.len(), 1);
        let p = &out[0].pairs[0];
        assert_eq!((p.winner_id.as_str(), p.loser_id.as_str()), ("x", "z"));
        assert_eq!((p.winner_score, p.loser_score), (0.80, 0.40));
        assert!(p.satisfies(f.tau, f.epsilon));

        let out = build_pairs(&[group(&[("x", 0.52), ("y", 0.50)])], &f).unwrap();
        assert!(out[0].pairs.is_empty());
        let out = build_pairs(&[group(&[("x", 0.45), ("y", 0.10)])], &f).unwrap();
        assert!(out[0].pairs.is_empty());
    }

    #[test]
    fn mixed_hashes_are_rejected() {
        let a = group(&[("x", 0.8), ("y", 0.4)]);
        let mut b = a.clone();
        b.config_hash = "other".to_string();
        assert!(matches!(build_pairs(&[a, b], &PairFilter::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn several_pairs_per_group() {
        let f = PairFilter {
            max_pairs_per_group: 10,
            ..Default::default()
        };
        let out = build_pairs(&[group(&[("a", 0.9), ("b", 0.7), ("c", 0.68), ("d", 0.3)])], &f).unwrap();
        let got: Vec<_> = out[0].pairs.iter().map(|p| (p.winner_id.as_str(), p.loser_id.as_str())).collect();
        assert_eq!(got, [("a", "d"), ("a", "c"), ("a", "b"), ("b", "d"), ("c", "d")]);
    }

    #[test]
    fn emitted_pairs_revalidate_and_tau_is_monotone() {
        let mut rng = crate::seed::rng(11);
        let groups: Vec<_> = (0..200)
            .map(|g| {
                let n = rng.random_range(2..5);
                let members = (0..n)
                    .map(|k| {
                        let mut v = video(&format!("v{k}"), rng.random_range(0.01..1.0));
                        v.flags.insufficient_texture = rng.random_bool(0.1);
                        v
                    })
                    .collect();
                GenerationGroup::new(format!("g{g}"), "h", members).unwrap()
            })
            .collect();
        let mut last = usize::MAX;
        for tau in [0.0, 0.05, 0.1, 0.2, 0.5] {
            let f = PairFilter { tau, epsilon: 0.4, max_pairs_per_group: 1 };
            let out = build_pairs(&groups, &f).unwrap();
            let count: usize = out.iter().map(|o| o.pairs.len()).sum();
            for p in out.iter().flat_map(|o| &o.pairs) {
                assert!(p.satisfies(tau, 0.4));
            }
            assert!(count <= last);
            last = count;
        }
    }
}
