//! Stage 3: top aspects per product and weighted sampling of supporting
//! reviews under a cap.
//!
//! Sampling uses ChaCha8 seeded from a `u64`, so a fixed seed gives the same
//! selection on every platform. Within a bucket, reviews are ordered by
//! Efraimidis–Spirakis keys `ln(u) / w`, which yields a weighted sample
//! without replacement when read from the largest key down.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    Bucket, ExtractionResult, ProductAspectProfile, RankedAspect, Review, SelectionResult,
    Sentiment, SentimentCounts,
};

pub const DEFAULT_CAP: usize = 200;
pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_HALF_LIFE_DAYS: f64 = 180.0;

/// Counts reviews mentioning each (aspect, sentiment) pair.
pub fn build_profile(product_id: &str, results: &[ExtractionResult]) -> ProductAspectProfile {
    let mut profile = ProductAspectProfile {
        product_id: product_id.to_string(),
        ..Default::default()
    };
    for result in results {
        let pairs: BTreeSet<(&str, Sentiment)> = result
            .mentions
            .iter()
            .map(|m| (m.aspect.as_str(), m.sentiment))
            .collect();
        for (aspect, sentiment) in pairs {
            *profile
                .pair_counts
                .entry((aspect.to_string(), sentiment))
                .or_insert(0) += 1;
        }
        profile.review_count += 1;
    }
    profile
}

/// At most `k` aspects by total count, descending; ties by aspect name.
pub fn top_aspects(profile: &ProductAspectProfile, k: usize) -> Vec<RankedAspect> {
    let mut ranked: Vec<RankedAspect> = profile
        .aspect_counts()
        .into_iter()
        .map(|(aspect, counts)| RankedAspect {
            aspect: aspect.to_string(),
            counts: SentimentCounts::from_array(counts),
        })
        .collect();
    ranked.sort_by(|a, b| b.total().cmp(&a.total()).then_with(|| a.aspect.cmp(&b.aspect)));
    ranked.truncate(k);
    ranked
}

/// Hamilton apportionment of `cap` seats over `counts`.
///
/// Seats left after flooring go to the largest remainders; ties favour the
/// larger count, then the earlier index. Quotas sum to `cap` whenever any
/// count is positive.
pub fn largest_remainder(counts: &[u32], cap: u32) -> Vec<u32> {
    let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let cap = u64::from(cap);
    let mut quotas: Vec<u32> = counts
        .iter()
        .map(|&c| (cap * u64::from(c) / total) as u32)
        .collect();
    let assigned: u64 = quotas.iter().map(|&q| u64::from(q)).sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = cap * u64::from(counts[a]) % total;
        let rb = cap * u64::from(counts[b]) % total;
        rb.cmp(&ra)
            .then_with(|| counts[b].cmp(&counts[a]))
            .then_with(|| a.cmp(&b))
    });
    for &i in order.iter().take((cap - assigned) as usize) {
        quotas[i] += 1;
    }
    quotas
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightingMode {
    #[default]
    Uniform,
    Recency,
    RecencyVerified,
}

impl WeightingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightingMode::Uniform => "uniform",
            WeightingMode::Recency => "recency",
            WeightingMode::RecencyVerified => "recency+verified",
        }
    }
}

impl FromStr for WeightingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(WeightingMode::Uniform),
            "recency" => Ok(WeightingMode::Recency),
            "recency+verified" | "recency_verified" => Ok(WeightingMode::RecencyVerified),
            other => Err(format!("unknown sampling mode {other:?}")),
        }
    }
}

/// Per-review sampling weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Weighting {
    pub mode: WeightingMode,
    pub half_life_days: f64,
    /// Ages are measured from here.
    pub reference_time: DateTime<Utc>,
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::uniform()
    }
}

impl Weighting {
    pub fn uniform() -> Self {
        Weighting {
            mode: WeightingMode::Uniform,
            half_life_days: DEFAULT_HALF_LIFE_DAYS,
            reference_time: DateTime::<Utc>::UNIX_EPOCH,
        }
    }

    /// Always finite and strictly positive.
    pub fn weight(&self, review: &Review) -> f64 {
        let w = match self.mode {
            WeightingMode::Uniform => 1.0,
            WeightingMode::Recency | WeightingMode::RecencyVerified => {
                let age_days = (self.reference_time - review.created_at).num_milliseconds() as f64
                    / 86_400_000.0;
                let decay = (-age_days.max(0.0) / self.half_life_days).exp2();
                let boost = if self.mode == WeightingMode::RecencyVerified
                    && review.verified_purchaser == Some(true)
                {
                    2.0
                } else {
                    1.0
                };
                decay * boost
            }
        };
        if w.is_finite() && w > 0.0 {
            w
        } else {
            f64::MIN_POSITIVE
        }
    }
}

/// Parameters of [`select_reviews`].
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionParams {
    pub cap: usize,
    pub top_k: usize,
    pub weighting: Weighting,
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            cap: DEFAULT_CAP,
            top_k: DEFAULT_TOP_K,
            weighting: Weighting::uniform(),
        }
    }
}

/// Picks the top aspects and samples at most `cap` distinct reviews that
/// support them.
///
/// `results` are the product's consolidated extractions. If the eligible
/// reviews fit under the cap they are all taken; otherwise each
/// (aspect, sentiment) bucket draws its apportioned quota. A draw already
/// taken by an earlier bucket is skipped, and quota a bucket cannot fill
/// moves to the bucket with the most untaken candidates.
pub fn select_reviews(
    profile: &ProductAspectProfile,
    results: &[ExtractionResult],
    reviews: &[Review],
    params: &SelectionParams,
    seed: u64,
) -> SelectionResult {
    let selected_aspects = top_aspects(profile, params.top_k);
    let mut buckets: Vec<Bucket> = Vec::new();
    for ranked in &selected_aspects {
        for sentiment in Sentiment::ALL {
            let count = ranked.counts.get(sentiment);
            if count == 0 {
                continue;
            }
            let mut members: Vec<String> = results
                .iter()
                .filter(|r| r.mentions_pair(&ranked.aspect, Some(sentiment)))
                .map(|r| r.review_id.clone())
                .collect();
            members.sort();
            members.dedup();
            buckets.push(Bucket {
                aspect: ranked.aspect.clone(),
                sentiment,
                count,
                review_ids: members,
            });
        }
    }
    let eligible: BTreeSet<&str> = buckets
        .iter()
        .flat_map(|b| b.review_ids.iter().map(String::as_str))
        .collect();
    let mut result = SelectionResult {
        product_id: profile.product_id.clone(),
        selected_aspects,
        buckets: Vec::new(),
        selected_review_ids: Vec::new(),
        seed,
    };
    if eligible.len() <= params.cap {
        result.selected_review_ids = eligible.iter().map(|s| s.to_string()).collect();
        result.buckets = buckets;
        return result;
    }

    let by_id: HashMap<&str, &Review> = reviews.iter().map(|r| (r.review_id.as_str(), r)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let permutations: Vec<Vec<&str>> = buckets
        .iter()
        .map(|b| weighted_order(&b.review_ids, &by_id, &params.weighting, &mut rng))
        .collect();
    let sizes: Vec<u32> = buckets.iter().map(|b| b.review_ids.len() as u32).collect();
    let quotas = largest_remainder(&sizes, params.cap as u32);

    let mut state = DrawState {
        permutations: &permutations,
        cursors: vec![0; buckets.len()],
        drawn: vec![Vec::new(); buckets.len()],
        taken: BTreeSet::new(),
    };
    let mut residual = 0u32;
    for (i, &q) in quotas.iter().enumerate() {
        residual += state.draw(i, q);
    }
    while residual > 0 {
        let Some(target) = (0..buckets.len())
            .map(|i| (i, state.remaining(i)))
            .filter(|&(_, r)| r > 0)
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|(i, _)| i)
        else {
            break;
        };
        residual = state.draw(target, residual);
    }
    let drawn: Vec<Vec<String>> = state
        .drawn
        .into_iter()
        .map(|mut ids| {
            ids.sort_unstable();
            ids.into_iter().map(str::to_string).collect()
        })
        .collect();
    result.selected_review_ids = state.taken.into_iter().map(str::to_string).collect();
    drop(permutations);
    for (bucket, ids) in buckets.iter_mut().zip(drawn) {
        bucket.review_ids = ids;
    }
    result.buckets = buckets;
    result
}

struct DrawState<'p, 'a> {
    permutations: &'p [Vec<&'a str>],
    cursors: Vec<usize>,
    drawn: Vec<Vec<&'a str>>,
    taken: BTreeSet<&'a str>,
}

impl<'a> DrawState<'_, 'a> {
    /// Takes up to `want` untaken reviews from bucket `i`; returns the shortfall.
    fn draw(&mut self, i: usize, want: u32) -> u32 {
        let mut got = 0;
        let perm = &self.permutations[i];
        while got < want && self.cursors[i] < perm.len() {
            let id = perm[self.cursors[i]];
            self.cursors[i] += 1;
            if self.taken.insert(id) {
                self.drawn[i].push(id);
                got += 1;
            }
        }
        want - got
    }

    fn remaining(&self, i: usize) -> usize {
        self.permutations[i][self.cursors[i]..]
            .iter()
            .filter(|id| !self.taken.contains(*id))
            .count()
    }
}

/// Candidates in weighted random order. Missing reviews weigh 1.
fn weighted_order<'a>(
    candidates: &'a [String],
    by_id: &HashMap<&str, &Review>,
    weighting: &Weighting,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a str> {
    let mut keyed: Vec<(f64, &str)> = candidates
        .iter()
        .map(|id| {
            let w = by_id.get(id.as_str()).map_or(1.0, |r| weighting.weight(r));
            let u: f64 = 1.0 - rng.random::<f64>();
            (u.ln() / w, id.as_str())
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    keyed.into_iter().map(|(_, id)| id).collect()
}

/// Per-product seed derived from the configured seed.
pub fn product_seed(seed: u64, product_id: &str) -> u64 {
    seed ^ crate::exec::fnv1a64(product_id.as_bytes())
}

/// Selected reviews grouped by bucket, for prompt building.
pub fn bucket_reviews<'a>(
    selection: &SelectionResult,
    reviews: &'a [Review],
) -> BTreeMap<String, &'a Review> {
    let wanted: BTreeSet<&str> = selection
        .selected_review_ids
        .iter()
        .map(String::as_str)
        .collect();
    reviews
        .iter()
        .filter(|r| wanted.contains(r.review_id.as_str()))
        .map(|r| (r.review_id.clone(), r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap()
    }

    fn ext(id: &str, mentions: &[(&str, Sentiment)]) -> ExtractionResult {
        ExtractionResult::new(id, mentions.iter().copied(), "mock", t0())
    }

    fn review(id: &str) -> Review {
        Review::new(id, "p", "text", t0()).unwrap()
    }

    #[test]
    fn profile_counts_reviews() {
        use Sentiment::*;
        let results: Vec<_> = (0..3).map(|i| ext(&format!("r{i}"), &[("quality", Positive)])).collect();
        let p = build_profile("p", &results);
        assert_eq!(p.pair_counts, BTreeMap::from([(("quality".to_string(), Positive), 3)]));
        assert_eq!(p.review_count, 3);
        assert!(build_profile("p", &[]).is_empty());
    }

    #[test]
    fn top_aspects_ties_are_lexicographic() {
        use Sentiment::*;
        let mut p = ProductAspectProfile::default();
        for (a, n) in [("color", 10), ("size", 7), ("price", 7), ("style", 1)] {
            p.pair_counts.insert((a.to_string(), Positive), n);
        }
        let names: Vec<_> = top_aspects(&p, 3).into_iter().map(|r| r.aspect).collect();
        assert_eq!(names, ["color", "price", "size"]);
        assert_eq!(top_aspects(&p, 10).len(), 4);
    }

    #[test]
    fn apportionment_examples() {
        assert_eq!(largest_remainder(&[300, 100], 200), vec![150, 50]);
        assert_eq!(largest_remainder(&[5, 3, 3], 7), vec![3, 2, 2]);
        assert_eq!(largest_remainder(&[1, 1, 1], 2), vec![1, 1, 0]);
        assert_eq!(largest_remainder(&[], 5), Vec::<u32>::new());
        assert_eq!(largest_remainder(&[0, 0], 5), vec![0, 0]);
    }

    #[test]
    fn weights() {
        let mut w = Weighting {
            mode: WeightingMode::Uniform,
            half_life_days: 180.0,
            reference_time: t0() + Duration::days(180),
        };
        let r = review("a").verified(true);
        assert_eq!(w.weight(&r), 1.0);
        w.mode = WeightingMode::Recency;
        assert!((w.weight(&r) - 0.5).abs() < 1e-12);
        w.mode = WeightingMode::RecencyVerified;
        w.reference_time = t0();
        assert_eq!(w.weight(&r), 2.0);
        w.reference_time = t0() + Duration::days(1_000_000);
        assert_eq!(w.weight(&r), f64::MIN_POSITIVE);
        assert_eq!("recency+verified".parse::<WeightingMode>(), Ok(WeightingMode::RecencyVerified));
    }

    #[test]
    fn below_cap_takes_everything() {
        use Sentiment::*;
        let results: Vec<_> = (0..150)
            .map(|i| ext(&format!("r{i:03}"), &[("quality", if i % 2 == 0 { Positive } else { Negative })]))
            .collect();
        let reviews: Vec<_> = (0..150).map(|i| review(&format!("r{i:03}"))).collect();
        let p = build_profile("p", &results);
        let s = select_reviews(&p, &results, &reviews, &SelectionParams::default(), 1);
        assert_eq!(s.selected_review_ids.len(), 150);
    }

    #[test]
    fn above_cap_respects_quotas_and_overlap() {
        use Sentiment::*;
        // Every review mentions two aspects, so buckets overlap completely.
        let results: Vec<_> = (0..300)
            .map(|i| ext(&format!("r{i:03}"), &[("quality", Positive), ("price", Negative)]))
            .collect();
        let reviews: Vec<_> = (0..300).map(|i| review(&format!("r{i:03}"))).collect();
        let p = build_profile("p", &results);
        let s = select_reviews(&p, &results, &reviews, &SelectionParams::default(), 9);
        assert_eq!(s.selected_review_ids.len(), 200);
        let drawn: usize = s.buckets.iter().map(|b| b.review_ids.len()).sum();
        assert_eq!(drawn, 200);
        assert_eq!(s, select_reviews(&p, &results, &reviews, &SelectionParams::default(), 9));
        assert_ne!(
            s.selected_review_ids,
            select_reviews(&p, &results, &reviews, &SelectionParams::default(), 10).selected_review_ids
        );
    }

    #[test]
    fn product_seed_is_stable() {
        assert_eq!(product_seed(0, ""), 0xcbf2_9ce4_8422_2325);
        assert_ne!(product_seed(42, "a"), product_seed(42, "b"));
    }

    proptest! {
        #[test]
        fn selection_size_invariant(
            pairs in proptest::collection::vec((0usize..6, 0usize..3, 0usize..3), 1..400),
            cap in 1usize..250,
            seed in any::<u64>(),
        ) {
            let aspects = ["a", "b", "c", "d", "e", "f"];
            let results: Vec<_> = pairs.iter().enumerate().map(|(i, &(a, s, b))| {
                ext(&format!("r{i:04}"), &[(aspects[a], Sentiment::ALL[s]), (aspects[(a + b) % 6], Sentiment::ALL[s])])
            }).collect();
            let reviews: Vec<_> = (0..pairs.len()).map(|i| review(&format!("r{i:04}"))).collect();
            let p = build_profile("p", &results);
            let params = SelectionParams { cap, ..Default::default() };
            let s = select_reviews(&p, &results, &reviews, &params, seed);
            let eligible: BTreeSet<_> = s.buckets.iter().flat_map(|b| b.review_ids.clone()).collect();
            let eligible_all: BTreeSet<_> = results.iter()
                .filter(|r| r.mentions.iter().any(|m| s.selected_aspects.iter().any(|a| a.aspect == m.aspect)))
                .map(|r| r.review_id.clone()).collect();
            prop_assert_eq!(s.selected_review_ids.len(), cap.min(eligible_all.len()));
            prop_assert!(eligible.iter().all(|id| eligible_all.contains(id)));
            prop_assert_eq!(&s, &select_reviews(&p, &results, &reviews, &params, seed));
        }

        #[test]
        fn ranking_is_scale_invariant(counts in proptest::collection::vec(1u32..50, 1..12), k in 1usize..8, scale in 1u32..20) {
            let mut p = ProductAspectProfile::default();
            let mut q = ProductAspectProfile::default();
            for (i, c) in counts.iter().enumerate() {
                p.pair_counts.insert((format!("x{i}"), Sentiment::Positive), *c);
                q.pair_counts.insert((format!("x{i}"), Sentiment::Positive), c * scale);
            }
            let a: Vec<_> = top_aspects(&p, k).into_iter().map(|r| r.aspect).collect();
            let b: Vec<_> = top_aspects(&q, k).into_iter().map(|r| r.aspect).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn quotas_sum_to_cap(counts in proptest::collection::vec(0u32..500, 1..10), cap in 0u32..2000) {
            let q = largest_remainder(&counts, cap);
            let total: u32 = counts.iter().sum();
            if total > 0 {
                prop_assert_eq!(q.iter().sum::<u32>(), cap);
                if cap <= total {
                    for (qi, ci) in q.iter().zip(&counts) {
                        prop_assert!(qi <= ci);
                    }
                }
            }
        }
    }
}
