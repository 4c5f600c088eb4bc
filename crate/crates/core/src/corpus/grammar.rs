//! Invertible instruction grammar.
//!
//! `<emotion clause> ; <action clause> [; <action clause>] .` where the emotion clause is
//! `<subject> <verb> <intensity adverb> <emotion>` and each action clause is
//! `<action phrase> <adverb>`. Neutral speech gets a single fixed relaxed-face clause.

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::face_model::Action;
use crate::trainkit::Rng;

use super::vocab::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emotion {
    Neutral,
    Calm,
    Happy,
    Sad,
    Angry,
    Fearful,
    Surprised,
    Disgusted,
}

impl Emotion {
    pub const ALL: [Emotion; 8] = [
        Emotion::Neutral,
        Emotion::Calm,
        Emotion::Happy,
        Emotion::Sad,
        Emotion::Angry,
        Emotion::Fearful,
        Emotion::Surprised,
        Emotion::Disgusted,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Emotion> {
        Emotion::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        self.synonyms()[0]
    }

    pub fn parse(s: &str) -> Option<Emotion> {
        Emotion::ALL.into_iter().find(|e| e.name() == s)
    }

    fn synonyms(self) -> &'static [&'static str] {
        match self {
            Emotion::Neutral => &["neutral", "composed", "indifferent"],
            Emotion::Calm => &["calm", "peaceful", "serene"],
            Emotion::Happy => &["happy", "joyful", "cheerful"],
            Emotion::Sad => &["sad", "sorrowful", "unhappy"],
            Emotion::Angry => &["angry", "furious", "irritated"],
            Emotion::Fearful => &["fearful", "afraid", "scared"],
            Emotion::Surprised => &["surprised", "astonished", "amazed"],
            Emotion::Disgusted => &["disgusted", "repulsed", "revolted"],
        }
    }

    /// Signed offsets on the labeled emotion channels at full intensity, in the order
    /// lip_corner_raise, brow_raise, brow_furrow, eye_widen, cheek_raise.
    pub fn channel_offsets(self) -> [f64; 5] {
        match self {
            Emotion::Neutral => [0.0, 0.0, 0.0, 0.0, 0.0],
            Emotion::Calm => [0.3, 0.0, 0.0, -0.8, 0.0],
            Emotion::Happy => [1.0, 0.0, 0.0, 0.1, 0.8],
            Emotion::Sad => [-0.9, 0.6, 0.2, -0.3, 0.0],
            Emotion::Angry => [-0.3, -0.2, 1.0, 0.4, 0.0],
            Emotion::Fearful => [-0.3, 0.4, 0.6, 0.9, 0.0],
            Emotion::Surprised => [0.0, 1.0, 0.0, 0.8, 0.0],
            Emotion::Disgusted => [-0.6, -0.2, 0.4, -0.3, 0.7],
        }
    }

    /// Action clauses an instruction for this emotion names.
    pub fn actions(self) -> &'static [ActionPhrase] {
        use ActionPhrase::*;
        match self {
            Emotion::Neutral => &[Relaxed],
            Emotion::Calm => &[EyesNarrow],
            Emotion::Happy => &[LipCornersUp, CheeksUp],
            Emotion::Sad => &[LipCornersDown, BrowsUp],
            Emotion::Angry => &[BrowsFurrow],
            Emotion::Fearful => &[EyesWiden, BrowsFurrow],
            Emotion::Surprised => &[BrowsUp, EyesWiden],
            Emotion::Disgusted => &[CheeksUp, LipCornersDown],
        }
    }
}

/// Labeled channels carrying the emotion offsets, aligned with
/// [`Emotion::channel_offsets`].
pub const EMOTION_CHANNELS: [Action; 5] =
    [Action::LipCornerRaise, Action::BrowRaise, Action::BrowFurrow, Action::EyeWiden, Action::CheekRaise];

/// A describable facial action: a labeled channel and a direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionPhrase {
    LipCornersUp,
    LipCornersDown,
    BrowsUp,
    BrowsFurrow,
    EyesWiden,
    EyesNarrow,
    CheeksUp,
    /// The neutral "face remains relaxed" class.
    Relaxed,
}

impl ActionPhrase {
    pub const ALL: [ActionPhrase; 8] = [
        ActionPhrase::LipCornersUp,
        ActionPhrase::LipCornersDown,
        ActionPhrase::BrowsUp,
        ActionPhrase::BrowsFurrow,
        ActionPhrase::EyesWiden,
        ActionPhrase::EyesNarrow,
        ActionPhrase::CheeksUp,
        ActionPhrase::Relaxed,
    ];

    /// Channel and sign this phrase asserts; `None` for the relaxed class.
    pub fn channel(self) -> Option<(Action, f64)> {
        match self {
            ActionPhrase::LipCornersUp => Some((Action::LipCornerRaise, 1.0)),
            ActionPhrase::LipCornersDown => Some((Action::LipCornerRaise, -1.0)),
            ActionPhrase::BrowsUp => Some((Action::BrowRaise, 1.0)),
            ActionPhrase::BrowsFurrow => Some((Action::BrowFurrow, 1.0)),
            ActionPhrase::EyesWiden => Some((Action::EyeWiden, 1.0)),
            ActionPhrase::EyesNarrow => Some((Action::EyeWiden, -1.0)),
            ActionPhrase::CheeksUp => Some((Action::CheekRaise, 1.0)),
            ActionPhrase::Relaxed => None,
        }
    }

    pub fn surface_forms(self) -> &'static [&'static str] {
        match self {
            ActionPhrase::LipCornersUp => &["lip corners are raised", "mouth corners are lifted", "the corners of the mouth turn up"],
            ActionPhrase::LipCornersDown => {
                &["lip corners are pulled down", "mouth corners are lowered", "the corners of the mouth turn down"]
            }
            ActionPhrase::BrowsUp => &["brows are raised", "eyebrows are lifted", "the brows go up"],
            ActionPhrase::BrowsFurrow => &["brows are furrowed", "eyebrows are knitted", "the brows draw together"],
            ActionPhrase::EyesWiden => &["eyes are widened", "eyes open wide", "the eyelids are pulled open"],
            ActionPhrase::EyesNarrow => &["eyelids are lowered", "eyes are narrowed", "the eyelids droop"],
            ActionPhrase::CheeksUp => &["cheeks are raised", "cheeks are lifted", "the cheeks push up"],
            ActionPhrase::Relaxed => &["the face remains relaxed", "the face stays at rest", "the features remain still"],
        }
    }

    pub fn canonical(self) -> &'static str {
        self.surface_forms()[0]
    }
}

const SUBJECTS: [&str; 3] = ["the speaker", "the person", "the talker"];
const VERBS: [&str; 3] = ["sounds", "seems", "appears"];

fn emotion_adverbs(intensity: u8) -> &'static [&'static str] {
    match intensity {
        1 => &["slightly", "mildly", "somewhat"],
        2 => &["moderately", "fairly", "quite"],
        _ => &["very", "strongly", "extremely"],
    }
}

fn action_adverbs(intensity: u8) -> &'static [&'static str] {
    match intensity {
        1 => &["slightly", "gently", "subtly"],
        2 => &["moderately", "noticeably", "clearly"],
        _ => &["strongly", "intensely", "markedly"],
    }
}

/// Every surface string the grammar can emit, for vocabulary construction.
pub fn grammar_phrases() -> Vec<&'static str> {
    let mut out: Vec<&'static str> = Vec::new();
    out.extend(SUBJECTS);
    out.extend(VERBS);
    for i in 1..=3 {
        out.extend(emotion_adverbs(i));
        out.extend(action_adverbs(i));
    }
    for e in Emotion::ALL {
        out.extend(e.synonyms());
    }
    for a in ActionPhrase::ALL {
        out.extend(a.surface_forms());
    }
    out.extend([";", "."]);
    out
}

fn pick<'a>(rng: &mut Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

/// Renders a tokenized sentence as display text: capitalized, punctuation attached.
pub fn detokenize(tokens: &[&str]) -> String {
    let mut s = String::new();
    for t in tokens {
        if !(s.is_empty() || *t == ";" || *t == "." || *t == ",") {
            s.push(' ');
        }
        s.push_str(t);
    }
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => s,
    }
}

/// Samples an instruction sentence for a speaking state. Action clause order and every
/// synonym slot are drawn from `rng`.
pub fn render_instruction(emotion: Emotion, intensity: u8, rng: &mut Rng) -> String {
    let mut parts = vec![format!(
        "{} {} {} {}",
        pick(rng, &SUBJECTS),
        pick(rng, &VERBS),
        pick(rng, emotion_adverbs(intensity)),
        pick(rng, emotion.synonyms())
    )];
    let mut actions = emotion.actions().to_vec();
    if actions.len() == 2 && rng.random_bool(0.5) {
        actions.swap(0, 1);
    }
    for a in actions {
        if a == ActionPhrase::Relaxed {
            parts.push(pick(rng, a.surface_forms()).to_string());
        } else {
            parts.push(format!("{} {}", pick(rng, a.surface_forms()), pick(rng, action_adverbs(intensity))));
        }
    }
    let joined = parts.join(" ; ") + " .";
    let toks = tokenize(&joined);
    detokenize(&toks.iter().map(String::as_str).collect::<Vec<_>>())
}

/// Factors recovered from an instruction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedInstruction {
    pub emotion: Emotion,
    /// From the emotion clause, or from the first action adverb when the clause has none.
    pub intensity: Option<u8>,
    pub actions: BTreeSet<ActionPhrase>,
}

fn strip_prefix<'a>(toks: &'a [String], phrase: &str) -> Option<&'a [String]> {
    let words: Vec<&str> = phrase.split(' ').collect();
    if toks.len() >= words.len() && toks.iter().zip(&words).all(|(a, b)| a == b) {
        Some(&toks[words.len()..])
    } else {
        None
    }
}

fn adverb_level(word: &str, table: fn(u8) -> &'static [&'static str]) -> Option<u8> {
    (1..=3).find(|&i| table(i).contains(&word))
}

/// Inverts [`render_instruction`]. Also accepts hand-written variants that omit the
/// emotion-clause adverb or some action clauses. Returns `None` when the text is outside
/// the grammar.
pub fn parse_instruction(text: &str) -> Option<ParsedInstruction> {
    let toks = tokenize(text);
    let clauses: Vec<&[String]> =
        toks.split(|t| t == ";" || t == ".").filter(|c| !c.is_empty()).collect();
    let (first, rest) = clauses.split_first()?;

    let after_subject = SUBJECTS.iter().find_map(|s| strip_prefix(first, s))?;
    let (verb, after_verb) = after_subject.split_first()?;
    if !VERBS.contains(&verb.as_str()) {
        return None;
    }
    let (intensity, adj) = match after_verb {
        [adv, adj] => (Some(adverb_level(adv, emotion_adverbs)?), adj),
        [adj] => (None, adj),
        _ => return None,
    };
    let emotion = Emotion::ALL.into_iter().find(|e| e.synonyms().contains(&adj.as_str()))?;

    let mut actions = BTreeSet::new();
    let mut action_level = None;
    for clause in rest {
        let mut matched = false;
        for a in ActionPhrase::ALL {
            for form in a.surface_forms() {
                let Some(tail) = strip_prefix(clause, form) else { continue };
                match (a, tail) {
                    (ActionPhrase::Relaxed, []) => {}
                    (ActionPhrase::Relaxed, _) => continue,
                    (_, [adv]) => {
                        let lvl = adverb_level(adv, action_adverbs)?;
                        action_level.get_or_insert(lvl);
                    }
                    (_, []) => {}
                    _ => continue,
                }
                actions.insert(a);
                matched = true;
                break;
            }
            if matched {
                break;
            }
        }
        if !matched {
            return None;
        }
    }
    Some(ParsedInstruction { emotion, intensity: intensity.or(action_level), actions })
}

/// Action set a well-formed instruction for `emotion` carries.
pub fn expected_actions(emotion: Emotion) -> BTreeSet<ActionPhrase> {
    emotion.actions().iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainkit::rng_from;

    #[test]
    fn every_cell_round_trips_through_the_parser() {
        for e in Emotion::ALL {
            for i in 1..=3u8 {
                for seed in 0..50 {
                    let mut rng = rng_from(seed * 31 + i as u64);
                    let text = render_instruction(e, i, &mut rng);
                    let p = parse_instruction(&text).unwrap_or_else(|| panic!("unparsable: {text}"));
                    assert_eq!(p, ParsedInstruction { emotion: e, intensity: Some(i), actions: expected_actions(e) }, "{text}");
                }
            }
        }
    }

    #[test]
    fn happy_strong_mentions_lip_corners_strongly() {
        let mut rng = rng_from(4);
        for _ in 0..20 {
            let text = render_instruction(Emotion::Happy, 3, &mut rng).to_lowercase();
            let clause = ActionPhrase::LipCornersUp
                .surface_forms()
                .iter()
                .flat_map(|f| action_adverbs(3).iter().map(move |a| format!("{f} {a}")))
                .any(|c| text.contains(&c));
            assert!(clause, "{text}");
        }
    }

    #[test]
    fn neutral_uses_relaxed_clause() {
        let mut rng = rng_from(9);
        for i in 1..=3 {
            let p = parse_instruction(&render_instruction(Emotion::Neutral, i, &mut rng)).unwrap();
            assert_eq!(p.actions, BTreeSet::from([ActionPhrase::Relaxed]));
        }
    }

    #[test]
    fn slots_have_three_surface_forms() {
        assert!(Emotion::ALL.iter().all(|e| e.synonyms().len() >= 3));
        assert!(ActionPhrase::ALL.iter().all(|a| a.surface_forms().len() >= 3));
        assert!((1..=3).all(|i| emotion_adverbs(i).len() >= 3 && action_adverbs(i).len() >= 3));
    }

    #[test]
    fn named_actions_follow_offset_signs() {
        for e in Emotion::ALL {
            let offs = e.channel_offsets();
            for a in e.actions() {
                let Some((ch, sign)) = a.channel() else { continue };
                let k = EMOTION_CHANNELS.iter().position(|c| *c == ch).unwrap();
                assert!(offs[k] * sign >= 0.5, "{e:?} {a:?}");
            }
        }
    }

    #[test]
    fn hand_written_override_parses() {
        let p = parse_instruction("The speaker sounds angry; brows are furrowed strongly.").unwrap();
        assert_eq!(p.emotion, Emotion::Angry);
        assert_eq!(p.intensity, Some(3));
        assert_eq!(p.actions, BTreeSet::from([ActionPhrase::BrowsFurrow]));
        assert!(parse_instruction("make the face purple").is_none());
        assert!(parse_instruction("").is_none());
    }
}
