//! Combinatorial background-prompt engine.
//!
//! A prompt is one instruction, one background and one temporal fragment,
//! each drawn uniformly and independently from its configured list. The
//! rendered prompt goes to a captioner backend; its caption is rejected and
//! regenerated while it names any word from the avoid list.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{self, BackendError, Captioner};

/// Library shipped with the crate: 3 instructions, 18 backgrounds, 13 temporals.
pub const DEFAULT_LIBRARY_TOML: &str = include_str!("../assets/modality_sets.toml");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("invalid modality sets: {0}")]
    InvalidSets(String),
    #[error("invalid avoid word {0:?}: must be a non-empty lowercase token without whitespace")]
    InvalidAvoidWord(String),
    #[error("index out of bounds: {list}[{index}] (len {len})")]
    IndexOutOfBounds {
        list: &'static str,
        index: usize,
        len: usize,
    },
    #[error("caption still contained an avoid word after {attempts} attempts")]
    CaptionRejectedAfterRetries { attempts: u32 },
    #[error("max_retries must be at least 1")]
    ZeroRetries,
    #[error("cannot read prompt library {path}: {detail}")]
    Unreadable { path: String, detail: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// The instruction, background and temporal fragment lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySets {
    instructions: Vec<String>,
    backgrounds: Vec<String>,
    temporals: Vec<String>,
}

impl ModalitySets {
    pub fn new(
        instructions: Vec<String>,
        backgrounds: Vec<String>,
        temporals: Vec<String>,
    ) -> Result<Self, PromptError> {
        for (name, list) in [
            ("instructions", &instructions),
            ("backgrounds", &backgrounds),
            ("temporals", &temporals),
        ] {
            if list.is_empty() {
                return Err(PromptError::InvalidSets(format!("`{name}` is empty")));
            }
            let mut seen = BTreeSet::new();
            for entry in list {
                if entry.trim().is_empty() {
                    return Err(PromptError::InvalidSets(format!(
                        "`{name}` has an empty entry"
                    )));
                }
                if !seen.insert(entry.as_str()) {
                    return Err(PromptError::InvalidSets(format!(
                        "`{name}` repeats {entry:?}"
                    )));
                }
            }
        }
        Ok(Self {
            instructions,
            backgrounds,
            temporals,
        })
    }

    pub fn instructions(&self) -> &[String] {
        &self.instructions
    }

    pub fn backgrounds(&self) -> &[String] {
        &self.backgrounds
    }

    pub fn temporals(&self) -> &[String] {
        &self.temporals
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (
            self.instructions.len(),
            self.backgrounds.len(),
            self.temporals.len(),
        )
    }
}

/// Lowercase whole-word tokens that must never appear in a background caption.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvoidList {
    words: BTreeSet<String>,
}

impl AvoidList {
    pub fn new<I, S>(words: I) -> Result<Self, PromptError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = BTreeSet::new();
        for w in words {
            let w = w.into();
            let valid = !w.is_empty()
                && !w.chars().any(char::is_whitespace)
                && w.chars().all(|c| !c.is_uppercase());
            if !valid {
                return Err(PromptError::InvalidAvoidWord(w));
            }
            set.insert(w);
        }
        Ok(Self { words: set })
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }
}

/// Modality sets plus avoid list, as loaded from a library file.
///
/// File format (TOML, UTF-8):
///
/// ```toml
/// instructions = ["Describe a scene"]
/// backgrounds  = ["in a dense forest"]
/// temporals    = ["at dawn"]
/// avoid        = ["spider"]
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLibrary {
    pub sets: ModalitySets,
    pub avoid: AvoidList,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryFile {
    instructions: Vec<String>,
    backgrounds: Vec<String>,
    temporals: Vec<String>,
    #[serde(default)]
    avoid: Vec<String>,
}

impl PromptLibrary {
    pub fn from_toml_str(text: &str) -> Result<Self, PromptError> {
        let file: LibraryFile =
            toml::from_str(text).map_err(|e| PromptError::InvalidSets(e.to_string()))?;
        Ok(Self {
            sets: ModalitySets::new(file.instructions, file.backgrounds, file.temporals)?,
            avoid: AvoidList::new(file.avoid)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Unreadable {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn builtin() -> Self {
        Self::from_toml_str(DEFAULT_LIBRARY_TOML).expect("shipped prompt library is valid")
    }
}

/// One sampled fragment triple and its rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub instruction_idx: usize,
    pub background_idx: usize,
    pub temporal_idx: usize,
    pub rendered: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub caption: String,
    pub spec: PromptSpec,
    /// Number of captioner calls made, including the accepted one.
    pub attempts: u32,
}

/// Number of distinct prompts the sets can produce.
pub fn space_size(sets: &ModalitySets) -> u64 {
    let (i, b, t) = sets.sizes();
    i as u64 * b as u64 * t as u64
}

/// Draws each index uniformly and independently, then renders the prompt.
pub fn sample_spec<R: Rng + ?Sized>(
    rng: &mut R,
    sets: &ModalitySets,
    avoid: &AvoidList,
) -> PromptSpec {
    let (ni, nb, nt) = sets.sizes();
    let instruction_idx = rng.random_range(0..ni);
    let background_idx = rng.random_range(0..nb);
    let temporal_idx = rng.random_range(0..nt);
    let rendered = render_prompt((instruction_idx, background_idx, temporal_idx), sets, avoid)
        .expect("sampled indices are in bounds");
    PromptSpec {
        instruction_idx,
        background_idx,
        temporal_idx,
        rendered,
    }
}

/// Renders `"<instruction> <background> <temporal>."`, followed by
/// `" Avoid mentioning: w1, w2."` when the avoid list is non-empty.
pub fn render_prompt(
    (instruction_idx, background_idx, temporal_idx): (usize, usize, usize),
    sets: &ModalitySets,
    avoid: &AvoidList,
) -> Result<String, PromptError> {
    fn pick<'a>(
        list: &'a [String],
        name: &'static str,
        index: usize,
    ) -> Result<&'a str, PromptError> {
        list.get(index)
            .map(|s| s.trim())
            .ok_or(PromptError::IndexOutOfBounds {
                list: name,
                index,
                len: list.len(),
            })
    }
    let ins = pick(&sets.instructions, "instructions", instruction_idx)?;
    let bgr = pick(&sets.backgrounds, "backgrounds", background_idx)?;
    let tmp = pick(&sets.temporals, "temporals", temporal_idx)?;

    let mut out = format!("{ins} {bgr} {tmp}.");
    if !avoid.is_empty() {
        let words: Vec<&str> = avoid.iter().collect();
        out.push_str(" Avoid mentioning: ");
        out.push_str(&words.join(", "));
        out.push('.');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject { word: String },
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

/// Lowercased alphanumeric runs of `text`.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Rejects a caption iff some avoid word equals one of its tokens.
pub fn sanitize_caption(caption: &str, avoid: &AvoidList) -> Verdict {
    tokens(caption)
        .find(|t| avoid.contains(t))
        .map_or(Verdict::Accept, |word| Verdict::Reject { word })
}

/// Asks the captioner for a caption of `spec.rendered`, retrying with a new
/// nonce (0, 1, ...) while the caption is empty or names an avoid word.
pub fn obtain_caption(
    spec: &PromptSpec,
    captioner: &dyn Captioner,
    avoid: &AvoidList,
    max_retries: u32,
) -> Result<CaptionResult, PromptError> {
    if max_retries == 0 {
        return Err(PromptError::ZeroRetries);
    }
    for nonce in 0..max_retries {
        let caption = backends::caption(captioner, &spec.rendered, u64::from(nonce))?;
        match sanitize_caption(&caption, avoid) {
            Verdict::Accept if !caption.trim().is_empty() => {
                return Ok(CaptionResult {
                    caption,
                    spec: spec.clone(),
                    attempts: nonce + 1,
                })
            }
            Verdict::Accept => log::debug!("empty caption on attempt {}", nonce + 1),
            Verdict::Reject { word } => {
                log::debug!("caption attempt {} mentions {word:?}", nonce + 1)
            }
        }
    }
    Err(PromptError::CaptionRejectedAfterRetries {
        attempts: max_retries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{CaptionMode, MockCaptioner};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn forest() -> ModalitySets {
        ModalitySets::new(
            strings(&["Describe a scene"]),
            strings(&["in a dense forest"]),
            strings(&["at dawn"]),
        )
        .unwrap()
    }

    fn sized(i: usize, b: usize, t: usize) -> ModalitySets {
        let gen = |p: &str, n: usize| (0..n).map(|k| format!("{p}{k}")).collect();
        ModalitySets::new(gen("ins", i), gen("bgr", b), gen("tmp", t)).unwrap()
    }

    #[test]
    fn sets_validation() {
        assert!(ModalitySets::new(vec![], strings(&["a"]), strings(&["b"])).is_err());
        assert!(ModalitySets::new(strings(&["a", "a"]), strings(&["a"]), strings(&["b"])).is_err());
        assert!(ModalitySets::new(strings(&[" "]), strings(&["a"]), strings(&["b"])).is_err());
    }

    #[test]
    fn avoid_validation() {
        assert!(AvoidList::new(["spider"]).is_ok());
        assert!(AvoidList::new(["Spider"]).is_err());
        assert!(AvoidList::new(["water ouzel"]).is_err());
        assert!(AvoidList::new([""]).is_err());
    }

    #[test]
    fn space_sizes() {
        assert_eq!(space_size(&sized(1, 1, 1)), 1);
        assert_eq!(space_size(&sized(3, 18, 13)), 702);
        assert_eq!(space_size(&sized(2, 3, 4)), 24);
    }

    #[test]
    fn space_size_matches_enumeration() {
        let sets = sized(2, 3, 4);
        let mut count = 0;
        for _ in sets.instructions() {
            for _ in sets.backgrounds() {
                for _ in sets.temporals() {
                    count += 1;
                }
            }
        }
        assert_eq!(space_size(&sets), count);
    }

    #[test]
    fn builtin_library_sizes() {
        let lib = PromptLibrary::builtin();
        assert_eq!(lib.sets.sizes(), (3, 18, 13));
        assert!(lib.avoid.contains("spider"));
    }

    #[test]
    fn render_plain() {
        let s = render_prompt((0, 0, 0), &forest(), &AvoidList::default()).unwrap();
        assert_eq!(s, "Describe a scene in a dense forest at dawn.");
    }

    #[test]
    fn render_with_exclusions() {
        let avoid = AvoidList::new(["spider"]).unwrap();
        let s = render_prompt((0, 0, 0), &forest(), &avoid).unwrap();
        assert_eq!(
            s,
            "Describe a scene in a dense forest at dawn. Avoid mentioning: spider."
        );
    }

    #[test]
    fn render_out_of_bounds() {
        let err = render_prompt((0, 1, 0), &forest(), &AvoidList::default()).unwrap_err();
        assert!(matches!(
            err,
            PromptError::IndexOutOfBounds {
                list: "backgrounds",
                index: 1,
                len: 1
            }
        ));
    }

    #[test]
    fn single_triple_always_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let spec = sample_spec(&mut rng, &forest(), &AvoidList::default());
            assert_eq!(
                (spec.instruction_idx, spec.background_idx, spec.temporal_idx),
                (0, 0, 0)
            );
        }
    }

    #[test]
    fn sampling_is_seed_reproducible() {
        let sets = sized(3, 18, 13);
        let a = sample_spec(
            &mut ChaCha8Rng::seed_from_u64(0x5eed),
            &sets,
            &AvoidList::default(),
        );
        let b = sample_spec(
            &mut ChaCha8Rng::seed_from_u64(0x5eed),
            &sets,
            &AvoidList::default(),
        );
        assert_eq!(a, b);
    }

    // Regex-free scanner written independently of `tokens`.
    fn oracle_contains_token(text: &str, word: &str) -> bool {
        let lower: Vec<char> = text.to_lowercase().chars().collect();
        let w: Vec<char> = word.chars().collect();
        if w.len() > lower.len() {
            return false;
        }
        (0..=lower.len() - w.len()).any(|i| {
            lower[i..i + w.len()] == w[..]
                && (i == 0 || !lower[i - 1].is_alphanumeric())
                && lower.get(i + w.len()).is_none_or(|c| !c.is_alphanumeric())
        })
    }

    #[test]
    fn sanitize_examples() {
        let avoid = AvoidList::new(["spider"]).unwrap();
        assert!(sanitize_caption("a misty mountain lake at dusk", &avoid).is_accept());
        assert_eq!(
            sanitize_caption("a spider web across the trail", &avoid),
            Verdict::Reject {
                word: "spider".into()
            }
        );
        assert!(sanitize_caption("spiderweb patterns in frost", &avoid).is_accept());
        assert!(!oracle_contains_token(
            "spiderweb patterns in frost",
            "spider"
        ));
        assert!(!sanitize_caption("A SPIDER, at dusk", &avoid).is_accept());
        let cattle = AvoidList::new(["cattle"]).unwrap();
        assert!(sanitize_caption("rain over Seattle", &cattle).is_accept());
    }

    #[test]
    fn obtain_echo() {
        let spec = sample_spec(
            &mut ChaCha8Rng::seed_from_u64(1),
            &forest(),
            &AvoidList::default(),
        );
        let cap = MockCaptioner::new(CaptionMode::Echo);
        let res = obtain_caption(&spec, &cap, &AvoidList::default(), 3).unwrap();
        assert_eq!(res.caption, spec.rendered);
        assert_eq!(res.attempts, 1);
    }

    #[test]
    fn obtain_retries_until_clean() {
        let avoid = AvoidList::new(["spider"]).unwrap();
        let spec = sample_spec(&mut ChaCha8Rng::seed_from_u64(1), &forest(), &avoid);
        let cap = MockCaptioner::new(CaptionMode::Script(vec![
            "a spider on a log".into(),
            "a quiet forest floor".into(),
        ]));
        let res = obtain_caption(&spec, &cap, &avoid, 3).unwrap();
        assert_eq!(res.attempts, 2);
        assert_eq!(res.caption, "a quiet forest floor");
        assert_eq!(cap.calls(), 2);
    }

    #[test]
    fn obtain_gives_up_after_max_retries() {
        let avoid = AvoidList::new(["spider"]).unwrap();
        let spec = sample_spec(&mut ChaCha8Rng::seed_from_u64(1), &forest(), &avoid);
        let cap = MockCaptioner::new(CaptionMode::InjectAvoid {
            word: "spider".into(),
            probability: 1.0,
        });
        let err = obtain_caption(&spec, &cap, &avoid, 3).unwrap_err();
        assert!(matches!(
            err,
            PromptError::CaptionRejectedAfterRetries { attempts: 3 }
        ));
        assert_eq!(cap.calls(), 3);
        assert!(matches!(
            obtain_caption(&spec, &cap, &avoid, 0),
            Err(PromptError::ZeroRetries)
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use std::collections::HashSet;

        fn word_list(prefix: &'static str) -> impl Strategy<Value = Vec<String>> {
            prop::collection::btree_set("[a-z]{1,6}", 1..6)
                .prop_map(move |s| s.into_iter().map(|w| format!("{prefix}{w}")).collect())
        }

        proptest! {
            #[test]
            fn rendered_contains_fragments_in_order(
                ins in word_list("i"), bgr in word_list("b"), tmp in word_list("t"),
                seed in any::<u64>(),
            ) {
                let sets = ModalitySets::new(ins, bgr, tmp).unwrap();
                let spec = sample_spec(&mut ChaCha8Rng::seed_from_u64(seed), &sets, &AvoidList::default());
                let r = &spec.rendered;
                let a = r.find(sets.instructions()[spec.instruction_idx].as_str()).unwrap();
                let b = r[a..].find(sets.backgrounds()[spec.background_idx].as_str()).unwrap() + a;
                let c = r[b..].find(sets.temporals()[spec.temporal_idx].as_str());
                prop_assert!(a == 0 && b > a && c.is_some());
            }

            #[test]
            fn rendering_is_injective(ins in word_list("i"), bgr in word_list("b"), tmp in word_list("t")) {
                let sets = ModalitySets::new(ins, bgr, tmp).unwrap();
                let (ni, nb, nt) = sets.sizes();
                let mut seen = HashSet::new();
                for i in 0..ni { for b in 0..nb { for t in 0..nt {
                    seen.insert(render_prompt((i, b, t), &sets, &AvoidList::default()).unwrap());
                }}}
                prop_assert_eq!(seen.len() as u64, space_size(&sets));
            }

            #[test]
            fn sanitize_agrees_with_scanner(text in "[a-zA-Z ,.-]{0,40}", word in "[a-z]{1,4}") {
                let avoid = AvoidList::new([word.clone()]).unwrap();
                prop_assert_eq!(!sanitize_caption(&text, &avoid).is_accept(), oracle_contains_token(&text, &word));
            }
        }
    }
}
