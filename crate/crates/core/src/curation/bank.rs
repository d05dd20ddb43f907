//! Ranked per-emotion editing instructions.
//!
//! File format: `[emotion]` section headers followed by `rank<TAB>text`
//! lines. Blank lines and lines starting with `#` are ignored.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::manifest::write_atomic;
use crate::domain::EmotionLabel;
use crate::error::{Error, Result};
use crate::nn::rng_from;

pub const RETAINED_PER_EMOTION: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedInstruction {
    pub rank: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InstructionBank {
    entries: BTreeMap<EmotionLabel, Vec<RankedInstruction>>,
}

impl InstructionBank {
    /// Instructions for `emotion`, best rank first.
    pub fn instructions(&self, emotion: EmotionLabel) -> &[RankedInstruction] {
        self.entries.get(&emotion).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn all(&self) -> impl Iterator<Item = (EmotionLabel, &RankedInstruction)> {
        self.entries
            .iter()
            .flat_map(|(e, v)| v.iter().map(move |r| (*e, r)))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (emotion, list) in &self.entries {
            let _ = writeln!(out, "[{emotion}]");
            for r in list {
                let _ = writeln!(out, "{}\t{}", r.rank, r.text);
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    /// Reads a bank file as-is (no pruning).
    pub fn load(path: &Path) -> Result<Self> {
        let (raw, ranks) = read_ranked_file(path)?;
        let mut entries = BTreeMap::new();
        for (emotion, texts) in raw {
            let mut list: Vec<RankedInstruction> = texts
                .into_iter()
                .map(|t| RankedInstruction {
                    rank: ranks[&(emotion, t.clone())],
                    text: t,
                })
                .collect();
            list.sort_by(|a, b| a.rank.cmp(&b.rank).then_with(|| a.text.cmp(&b.text)));
            entries.insert(emotion, list);
        }
        let bank = Self { entries };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        for e in EmotionLabel::ALL {
            if self.instructions(e).is_empty() {
                return Err(Error::Validation(format!("instruction bank has no entry for `{e}`")));
            }
        }
        Ok(())
    }
}

pub type RawInstructions = BTreeMap<EmotionLabel, Vec<String>>;
pub type Rankings = HashMap<(EmotionLabel, String), u32>;

/// Parses a ranked instruction file into raw candidates plus their ranks.
pub fn read_ranked_file(path: &Path) -> Result<(RawInstructions, Rankings)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ranked(&text, path)
}

pub(crate) fn parse_ranked(text: &str, path: &Path) -> Result<(RawInstructions, Rankings)> {
    let mut raw = RawInstructions::new();
    let mut ranks = Rankings::new();
    let mut current: Option<EmotionLabel> = None;
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(name.parse().map_err(|e: Error| err(e.to_string()))?);
            continue;
        }
        let emotion = current.ok_or_else(|| err("instruction outside of an emotion section".into()))?;
        let (rank, text) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `rank<TAB>instruction`".into()))?;
        let rank: u32 = rank.trim().parse().map_err(|_| err(format!("bad rank `{rank}`")))?;
        let text = text.trim().to_string();
        if text.is_empty() {
            return Err(err("empty instruction".into()));
        }
        raw.entry(emotion).or_default().push(text.clone());
        ranks.insert((emotion, text), rank);
    }
    Ok((raw, ranks))
}

/// Keeps the ten best-ranked instructions per emotion (rank ascending, ties
/// broken by the lexicographically smaller text). Emotions with fewer than
/// ten keep everything and produce a warning.
pub fn build_instruction_bank(raw: &RawInstructions, rankings: &Rankings) -> Result<(InstructionBank, Vec<String>)> {
    let mut entries = BTreeMap::new();
    let mut warnings = Vec::new();
    for emotion in EmotionLabel::ALL {
        let texts = raw.get(&emotion).map(Vec::as_slice).unwrap_or(&[]);
        if texts.is_empty() {
            return Err(Error::Validation(format!("no instructions supplied for `{emotion}`")));
        }
        let mut list = Vec::with_capacity(texts.len());
        for t in texts {
            let rank = rankings.get(&(emotion, t.clone())).ok_or_else(|| {
                Error::Validation(format!("instruction `{t}` for `{emotion}` has no rank"))
            })?;
            list.push(RankedInstruction {
                rank: *rank,
                text: t.clone(),
            });
        }
        list.sort_by(|a, b| a.rank.cmp(&b.rank).then_with(|| a.text.cmp(&b.text)));
        list.dedup_by(|a, b| a.text == b.text);
        if list.len() < RETAINED_PER_EMOTION {
            let msg = format!(
                "only {} ranked instructions for `{emotion}`; keeping all",
                list.len()
            );
            warn!("{msg}");
            warnings.push(msg);
        }
        list.truncate(RETAINED_PER_EMOTION);
        entries.insert(emotion, list);
    }
    Ok((InstructionBank { entries }, warnings))
}

const VERBS: [&str; 5] = ["add", "introduce", "paint", "bring", "fill the scene with"];

fn phrases(emotion: EmotionLabel) -> [&'static str; 10] {
    match emotion {
        EmotionLabel::Amusement => [
            "playful balloons", "bright confetti", "cartoon smiles", "a juggling clown", "bouncy toys",
            "funny hats", "colorful streamers", "a silly dog", "bubbles floating", "party lights",
        ],
        EmotionLabel::Awe => [
            "a towering mountain", "a starry night sky", "sunbeams through clouds", "a vast canyon",
            "an aurora", "a grand waterfall", "ancient cathedral light", "a golden horizon",
            "soaring eagles", "a misty valley",
        ],
        EmotionLabel::Contentment => [
            "a cozy blanket", "warm afternoon light", "a quiet garden", "a steaming cup of tea",
            "soft pillows", "a calm lake", "blooming flowers", "a sleeping cat", "gentle green hills",
            "a sunny porch",
        ],
        EmotionLabel::Excitement => [
            "fireworks", "a roaring crowd", "racing cars", "a roller coaster", "neon signs",
            "a concert stage", "sparklers", "a surfing wave", "a festival parade", "flashing lights",
        ],
        EmotionLabel::Anger => [
            "raging fire", "broken glass", "storm clouds", "a red alarm", "smashed furniture",
            "clenched fists", "graffiti scrawls", "a burning car", "shouting faces", "a cracked wall",
        ],
        EmotionLabel::Disgust => [
            "rotting garbage", "slimy mold", "spilled sewage", "buzzing flies", "greasy stains",
            "decaying food", "murky sludge", "crawling maggots", "filthy puddles", "rancid leftovers",
        ],
        EmotionLabel::Fear => [
            "looming shadows", "a ghostly figure", "dark fog", "a creepy doll", "glowing eyes",
            "a dead tree", "a stormy night", "an abandoned house", "a lurking wolf", "flickering lights",
        ],
        EmotionLabel::Sadness => [
            "grey rain", "wilted flowers", "an empty bench", "fallen leaves", "a lonely figure",
            "a broken toy", "dim cold light", "a farewell letter", "a foggy window", "a rainy street",
        ],
    }
}

/// Fifty template candidates per emotion with a deterministic stand-in
/// ranking (a seeded permutation of 1..=50).
pub fn default_candidates(seed: u64) -> (RawInstructions, Rankings) {
    let mut raw = RawInstructions::new();
    let mut ranks = Rankings::new();
    for emotion in EmotionLabel::ALL {
        let mut texts = Vec::new();
        for verb in VERBS {
            for phrase in phrases(emotion) {
                texts.push(format!("{verb} {phrase} to make it feel {emotion}"));
            }
        }
        let mut order: Vec<u32> = (1..=texts.len() as u32).collect();
        order.shuffle(&mut rng_from(seed, 100 + emotion.index() as u64));
        for (t, r) in texts.iter().zip(order) {
            ranks.insert((emotion, t.clone()), r);
        }
        raw.insert(emotion, texts);
    }
    (raw, ranks)
}

pub fn default_bank(seed: u64) -> InstructionBank {
    let (raw, ranks) = default_candidates(seed);
    build_instruction_bank(&raw, &ranks)
        .expect("template candidates cover every emotion")
        .0
}
