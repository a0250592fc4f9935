//! Splitting a plain-text story into per-panel scripts.

use serde::Serialize;
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};
use crate::EMPTY_CAPTION;

/// Instruction sent to LLM splitting clients. Not validated against any
/// reference prompt.
pub const SPLIT_PROMPT_TEMPLATE: &str = "Split the following story into exactly {k} consecutive \
script segments, one per manga panel, in reading order. Keep the original wording and sentence \
order; do not add, drop or rephrase text. Return one segment per line.\n\nStory:\n{story}";

/// Per-panel scripts; trailing entries may be the `EMPTY` sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScriptSet {
    pub scripts: Vec<String>,
    /// Number of real (non-pad) scripts.
    pub k: usize,
}

impl ScriptSet {
    pub fn len(&self) -> usize {
        self.scripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scripts.is_empty()
    }

    /// Pad flags aligned with `scripts`: true where the script is `EMPTY`.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.scripts.iter().map(|s| s == EMPTY_CAPTION).collect()
    }
}

/// An external segmenter (typically an LLM behind some transport).
pub trait StoryClient {
    /// Returns the story cut into `k` segments, or a transport error message.
    fn split(&self, story: &str, k: usize, prompt: &str) -> std::result::Result<Vec<String>, String>;
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Sentences by Unicode sentence boundaries, whitespace-normalized, empties dropped.
pub fn sentences(story: &str) -> Vec<String> {
    story
        .split_sentence_bounds()
        .map(normalize_ws)
        .filter(|s| !s.is_empty())
        .collect()
}

fn joined_len(lens: &[usize]) -> usize {
    lens.iter().sum::<usize>() + lens.len().saturating_sub(1)
}

/// Cut points for `k` contiguous groups minimizing the longest group, where a
/// group's length is its sentences joined by single spaces. Requires
/// `1 <= k <= lens.len()`. Returns group start indices.
pub fn balanced_partition(lens: &[usize], k: usize) -> Vec<usize> {
    let n = lens.len();
    assert!(k >= 1 && k <= n, "need 1 <= k <= n");
    // best[g][j]: minimal max-length splitting the first j sentences into g groups.
    let mut best = vec![vec![usize::MAX; n + 1]; k + 1];
    let mut from = vec![vec![0usize; n + 1]; k + 1];
    best[0][0] = 0;
    for g in 1..=k {
        for j in g..=n {
            for i in (g - 1)..j {
                if best[g - 1][i] == usize::MAX {
                    continue;
                }
                let cost = best[g - 1][i].max(joined_len(&lens[i..j]));
                if cost < best[g][j] {
                    best[g][j] = cost;
                    from[g][j] = i;
                }
            }
        }
    }
    let mut starts = vec![0; k];
    let mut j = n;
    for g in (1..=k).rev() {
        starts[g - 1] = from[g][j];
        j = from[g][j];
    }
    starts
}

/// Splits a story into `k` scripts. Returns the scripts and any warnings.
pub fn split_story(
    story: &str,
    k: usize,
    k_max: usize,
    client: Option<&dyn StoryClient>,
) -> Result<(ScriptSet, Vec<String>)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > k_max {
        return Err(Error::InvalidArgument(format!("k exceeds K_max: k={k}, K_max={k_max}")));
    }
    let normalized = normalize_ws(story);
    if normalized.is_empty() {
        return Err(Error::InvalidArgument("story is empty".into()));
    }
    let mut warnings = Vec::new();

    if let Some(client) = client {
        let prompt = SPLIT_PROMPT_TEMPLATE
            .replace("{k}", &k.to_string())
            .replace("{story}", story);
        let segs = client.split(story, k, &prompt).map_err(Error::Script)?;
        if segs.len() != k {
            return Err(Error::Protocol(format!(
                "client returned {} segments, expected {k}",
                segs.len()
            )));
        }
        let segs: Vec<String> = segs.iter().map(|s| normalize_ws(s)).collect();
        if segs.iter().any(|s| s.is_empty()) {
            return Err(Error::Protocol("client returned an empty segment".into()));
        }
        if segs.join(" ") != normalized {
            return Err(Error::Protocol(
                "client segments do not reproduce the story in order".into(),
            ));
        }
        return Ok((ScriptSet { scripts: segs, k }, warnings));
    }

    let sents = sentences(story);
    if sents.len() < k {
        warnings.push(format!(
            "story has {} sentences but {k} scripts were requested; padding with {EMPTY_CAPTION}",
            sents.len()
        ));
        let real = sents.len();
        let mut scripts = sents;
        scripts.resize(k, EMPTY_CAPTION.to_string());
        return Ok((ScriptSet { scripts, k: real }, warnings));
    }
    let lens: Vec<usize> = sents.iter().map(|s| s.chars().count()).collect();
    let starts = balanced_partition(&lens, k);
    let scripts = (0..k)
        .map(|g| {
            let end = starts.get(g + 1).copied().unwrap_or(sents.len());
            sents[starts[g]..end].join(" ")
        })
        .collect();
    Ok((ScriptSet { scripts, k }, warnings))
}

/// Pads to exactly `k_max` entries with the `EMPTY` sentinel.
pub fn pad_scripts(scripts: &[String], k_max: usize) -> Result<ScriptSet> {
    if scripts.len() > k_max {
        return Err(Error::InvalidArgument(format!(
            "{} scripts exceed K_max={k_max}",
            scripts.len()
        )));
    }
    let k = scripts.iter().filter(|s| s.as_str() != EMPTY_CAPTION).count();
    let mut out = scripts.to_vec();
    out.resize(k_max, EMPTY_CAPTION.to_string());
    Ok(ScriptSet { scripts: out, k })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_min_max(lens: &[usize], k: usize) -> usize {
        // Enumerate all (k-1)-subsets of the n-1 interior cut positions.
        let n = lens.len();
        let mut best = usize::MAX;
        for mask in 0u32..(1 << (n - 1)) {
            if mask.count_ones() as usize != k - 1 {
                continue;
            }
            let mut start = 0;
            let mut worst = 0;
            for pos in 1..=n {
                if pos == n || mask & (1 << (pos - 1)) != 0 {
                    worst = worst.max(joined_len(&lens[start..pos]));
                    start = pos;
                }
            }
            best = best.min(worst);
        }
        best
    }

    #[test]
    fn four_equal_sentences_into_two() {
        let story = "Aaaa bb. Cccc dd. Eeee ff. Gggg hh.";
        let (set, warnings) = split_story(story, 2, 8, None).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(set.scripts, vec!["Aaaa bb. Cccc dd.", "Eeee ff. Gggg hh."]);
        assert_eq!(set.k, 2);
    }

    #[test]
    fn k_one_returns_whole_story() {
        let story = "One thing happened.  Then   another!";
        let (set, _) = split_story(story, 1, 8, None).unwrap();
        assert_eq!(set.scripts, vec!["One thing happened. Then another!"]);
    }

    #[test]
    fn too_few_sentences_pad_with_warning() {
        let (set, warnings) = split_story("First. Second.", 4, 8, None).unwrap();
        assert_eq!(set.scripts, vec!["First.", "Second.", "EMPTY", "EMPTY"]);
        assert_eq!(set.k, 2);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn k_out_of_range() {
        assert!(split_story("A.", 0, 8, None).is_err());
        let err = split_story("A.", 9, 8, None).unwrap_err();
        assert!(err.to_string().contains("k exceeds K_max"));
        assert!(split_story("   ", 1, 8, None).is_err());
    }

    #[test]
    fn pad_three_to_eight() {
        let s: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let set = pad_scripts(&s, 8).unwrap();
        assert_eq!(set.scripts.len(), 8);
        assert!(set.scripts[3..].iter().all(|s| s == "EMPTY"));
        assert_eq!(set.k, 3);
        assert_eq!(set.pad_mask(), vec![false, false, false, true, true, true, true, true]);
    }

    #[test]
    fn pad_full_and_overfull() {
        let s: Vec<String> = (0..8).map(|i| i.to_string()).collect();
        assert_eq!(pad_scripts(&s, 8).unwrap().scripts, s);
        let s: Vec<String> = (0..9).map(|i| i.to_string()).collect();
        assert!(pad_scripts(&s, 8).is_err());
    }

    #[test]
    fn sentinel_is_case_sensitive() {
        let s = vec!["empty".to_string()];
        assert_eq!(pad_scripts(&s, 2).unwrap().k, 1);
    }

    struct FixedClient(Vec<&'static str>);
    impl StoryClient for FixedClient {
        fn split(&self, _: &str, _: usize, prompt: &str) -> std::result::Result<Vec<String>, String> {
            assert!(prompt.contains("exactly"));
            Ok(self.0.iter().map(|s| s.to_string()).collect())
        }
    }

    struct DownClient;
    impl StoryClient for DownClient {
        fn split(&self, _: &str, _: usize, _: &str) -> std::result::Result<Vec<String>, String> {
            Err("connection refused".into())
        }
    }

    #[test]
    fn client_segmentation_is_validated() {
        let story = "A met B. They talked. B left.";
        let ok = FixedClient(vec!["A met B. They talked.", "B left."]);
        let (set, _) = split_story(story, 2, 8, Some(&ok)).unwrap();
        assert_eq!(set.scripts[1], "B left.");

        let wrong_count = FixedClient(vec!["A met B.", "They talked.", "B left."]);
        assert!(matches!(
            split_story(story, 2, 8, Some(&wrong_count)),
            Err(Error::Protocol(_))
        ));
        let reordered = FixedClient(vec!["B left.", "A met B. They talked."]);
        assert!(matches!(
            split_story(story, 2, 8, Some(&reordered)),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            split_story(story, 2, 8, Some(&DownClient)),
            Err(Error::Script(_))
        ));
    }

    #[test]
    fn fallback_matches_brute_force_on_small_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let n = rng.random_range(1..=8);
            let lens: Vec<usize> = (0..n).map(|_| rng.random_range(1..40)).collect();
            let k = rng.random_range(1..=n);
            let starts = balanced_partition(&lens, k);
            assert_eq!(starts.len(), k);
            assert_eq!(starts[0], 0);
            let mut worst = 0;
            for g in 0..k {
                let end = starts.get(g + 1).copied().unwrap_or(n);
                assert!(end > starts[g]);
                worst = worst.max(joined_len(&lens[starts[g]..end]));
            }
            assert_eq!(worst, brute_force_min_max(&lens, k), "lens {lens:?} k {k}");
        }
    }

    #[test]
    fn fallback_preserves_text_and_order() {
        let story = "The cat woke up.\nIt was hungry! Where was the food? \
                     The kitchen was empty. It meowed loudly. Finally, breakfast came.";
        for k in 1..=6 {
            let (set, _) = split_story(story, k, 8, None).unwrap();
            assert_eq!(set.scripts.join(" "), sentences(story).join(" "));
        }
    }
}
