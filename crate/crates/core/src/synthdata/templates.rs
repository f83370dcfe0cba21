use serde::{Deserialize, Serialize};

use crate::numkernel::SplitMix64;

use super::{Attributes, Modality, Organ, SynthError};

/// Kind of answer a question expects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Open,
    Closed,
    Classification,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Closed, TaskKind::Open, TaskKind::Classification];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Open => "open",
            TaskKind::Closed => "closed",
            TaskKind::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "open" => Some(TaskKind::Open),
            "closed" => Some(TaskKind::Closed),
            "classification" => Some(TaskKind::Classification),
            _ => None,
        }
    }
}

/// Question templates. Text tokens, including `?`, are separated by single
/// spaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Question {
    UpperHalf,
    LeftSide,
    TwoLesions,
    IsRound,
    IsModality(Modality),
    IsOrgan(Organ),
    WhatShape,
    WhereLesion,
    HowMany,
    WhatModality,
    Describe,
    WhichOrgan,
}

const CLOSED: usize = 6;
const OPEN: usize = 5;

impl Question {
    pub fn kind(self) -> TaskKind {
        match self {
            Question::UpperHalf
            | Question::LeftSide
            | Question::TwoLesions
            | Question::IsRound
            | Question::IsModality(_)
            | Question::IsOrgan(_) => TaskKind::Closed,
            Question::WhichOrgan => TaskKind::Classification,
            _ => TaskKind::Open,
        }
    }

    /// Draws a question of the given kind; yes/no questions that mention an
    /// attribute name the true value half of the time.
    pub fn sample(kind: TaskKind, attrs: &Attributes, rng: &mut SplitMix64) -> Self {
        match kind {
            TaskKind::Closed => match rng.below(CLOSED) {
                0 => Question::UpperHalf,
                1 => Question::LeftSide,
                2 => Question::TwoLesions,
                3 => Question::IsRound,
                4 => {
                    let truth = rng.below(2) == 0;
                    Question::IsModality(if truth {
                        attrs.modality
                    } else {
                        let others: Vec<Modality> = Modality::ALL.into_iter().filter(|m| *m != attrs.modality).collect();
                        others[rng.below(others.len())]
                    })
                }
                _ => {
                    let truth = rng.below(2) == 0;
                    Question::IsOrgan(if truth {
                        attrs.organ
                    } else {
                        let others: Vec<Organ> = Organ::ALL.into_iter().filter(|o| *o != attrs.organ).collect();
                        others[rng.below(others.len())]
                    })
                }
            },
            TaskKind::Open => match rng.below(OPEN) {
                0 => Question::WhatShape,
                1 => Question::WhereLesion,
                2 => Question::HowMany,
                3 => Question::WhatModality,
                _ => Question::Describe,
            },
            TaskKind::Classification => Question::WhichOrgan,
        }
    }

    pub fn render(self) -> String {
        match self {
            Question::UpperHalf => "is there a lesion in the upper half ?".into(),
            Question::LeftSide => "is there a lesion on the left side ?".into(),
            Question::TwoLesions => "are there two lesions ?".into(),
            Question::IsRound => "is the lesion round ?".into(),
            Question::IsModality(m) => format!("is this a {} image ?", m.word()),
            Question::IsOrgan(o) => format!("is this image of the {} ?", o.word()),
            Question::WhatShape => "what shape is the lesion ?".into(),
            Question::WhereLesion => "where is the lesion ?".into(),
            Question::HowMany => "how many lesions are there ?".into(),
            Question::WhatModality => "what modality is this image ?".into(),
            Question::Describe => "describe the lesion .".into(),
            Question::WhichOrgan => "which organ is shown ?".into(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let fixed = [
            Question::UpperHalf,
            Question::LeftSide,
            Question::TwoLesions,
            Question::IsRound,
            Question::WhatShape,
            Question::WhereLesion,
            Question::HowMany,
            Question::WhatModality,
            Question::Describe,
            Question::WhichOrgan,
        ];
        if let Some(q) = fixed.into_iter().find(|q| q.render() == text) {
            return Ok(q);
        }
        let words: Vec<&str> = text.split(' ').collect();
        match words.as_slice() {
            ["is", "this", "a", m, "image", "?"] => Modality::from_word(m).map(Question::IsModality),
            ["is", "this", "image", "of", "the", o, "?"] => Organ::from_word(o).map(Question::IsOrgan),
            _ => None,
        }
        .ok_or_else(|| SynthError::Oracle(format!("unrecognized instruction `{text}`")))
    }

    /// The correct answer for an image with these attributes.
    pub fn answer(self, a: &Attributes) -> String {
        let yn = |b: bool| if b { "yes" } else { "no" }.to_string();
        match self {
            Question::UpperHalf => yn(a.quadrant.upper),
            Question::LeftSide => yn(a.quadrant.left),
            Question::TwoLesions => yn(a.count == 2),
            Question::IsRound => yn(a.shape == super::Shape::Round),
            Question::IsModality(m) => yn(a.modality == m),
            Question::IsOrgan(o) => yn(a.organ == o),
            Question::WhatShape => a.shape.word().into(),
            Question::WhereLesion => format!("{} {}", a.quadrant.vertical(), a.quadrant.horizontal()),
            Question::HowMany => count_word(a.count).into(),
            Question::WhatModality => a.modality.word().into(),
            Question::Describe => lesion_phrase(a),
            Question::WhichOrgan => a.organ.word().into(),
        }
    }
}

fn count_word(n: usize) -> &'static str {
    if n == 1 {
        "one"
    } else {
        "two"
    }
}

fn lesion_phrase(a: &Attributes) -> String {
    format!(
        "{} {} {} in the {} {}",
        count_word(a.count),
        a.shape.word(),
        if a.count == 1 { "lesion" } else { "lesions" },
        a.quadrant.vertical(),
        a.quadrant.horizontal()
    )
}

/// Alignment caption, e.g. `ct image of the brain with one round lesion in
/// the upper left`.
pub fn caption(a: &Attributes) -> String {
    format!("{} image of the {} with {}", a.modality.word(), a.organ.word(), lesion_phrase(a))
}

/// The closed word list of every text the generator can produce.
pub fn vocabulary_words() -> Vec<String> {
    let mut texts: Vec<String> = Vec::new();
    for a in Attributes::all() {
        texts.push(caption(&a));
        for q in all_questions() {
            texts.push(q.render());
            texts.push(q.answer(&a));
        }
    }
    texts.push(ALIGN_INSTRUCTION.to_string());
    let mut words: Vec<String> = texts.iter().flat_map(|t| t.split(' ')).map(str::to_string).collect();
    words.sort();
    words.dedup();
    words
}

/// Instruction stored on alignment records, whose response is the caption.
pub const ALIGN_INSTRUCTION: &str = "describe the image .";

pub fn all_questions() -> Vec<Question> {
    let mut v = vec![
        Question::UpperHalf,
        Question::LeftSide,
        Question::TwoLesions,
        Question::IsRound,
        Question::WhatShape,
        Question::WhereLesion,
        Question::HowMany,
        Question::WhatModality,
        Question::Describe,
        Question::WhichOrgan,
    ];
    v.extend(Modality::ALL.map(Question::IsModality));
    v.extend(Organ::ALL.map(Question::IsOrgan));
    v
}
