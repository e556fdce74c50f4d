//! Synthetic factual corpus.
//!
//! Every answer is an invented person. Each person has one attribute per
//! relation (a founded city, a written book, a discovered substance, a
//! painting, a student), and every relation has several question
//! paraphrases, one declarative sentence used in pretraining, and one cloze
//! paraphrase that never appears in any training text.
//!
//! Invented words are drawn so that no name word is a substring of any other
//! word in the vocabulary; alias containment checks are then exact.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::types::{render_example, QaPair};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Templates for one relation; `{x}` is the attribute, `{name}` the answer.
#[derive(Debug, Clone, Copy)]
pub struct Relation {
    pub key: &'static str,
    pub questions: [&'static str; 4],
    /// Fact sentences used in pretraining.
    pub statements: [&'static str; 3],
    /// Held-out cloze paraphrase ending in "is ".
    pub cloze: &'static str,
}

pub const RELATIONS: [Relation; 5] = [
    Relation {
        key: "founded",
        questions: [
            "Who founded the city of {x}?",
            "Which person established {x}?",
            "Who was the founder of {x}?",
            "{x} was founded by whom?",
        ],
        statements: [
            "The founder of the city of {x} is {name}.",
            "The person who founded {x} is {name}.",
            "{x} was established by {name}.",
        ],
        cloze: "The person who established the city of {x} is ",
    },
    Relation {
        key: "wrote",
        questions: [
            "Who wrote the book {x}?",
            "Which author penned {x}?",
            "Who is the author of {x}?",
            "The book {x} was written by whom?",
        ],
        statements: [
            "The author of the book {x} is {name}.",
            "The writer of {x} is {name}.",
            "The book {x} was penned by {name}.",
        ],
        cloze: "The writer responsible for the book {x} is ",
    },
    Relation {
        key: "discovered",
        questions: [
            "Who discovered {x}?",
            "Which scientist first identified {x}?",
            "Who is credited with the discovery of {x}?",
            "The substance {x} was discovered by whom?",
        ],
        statements: [
            "The discoverer of the substance {x} is {name}.",
            "The scientist who identified {x} is {name}.",
            "The substance {x} was first found by {name}.",
        ],
        cloze: "The scientist who first found the substance {x} is ",
    },
    Relation {
        key: "painted",
        questions: [
            "Who painted {x}?",
            "Which artist created the painting {x}?",
            "Who is the painter of {x}?",
            "The painting {x} was made by whom?",
        ],
        statements: [
            "The painter of the painting {x} is {name}.",
            "The artist who created {x} is {name}.",
            "The painting {x} was made by {name}.",
        ],
        cloze: "The artist behind the painting {x} is ",
    },
    Relation {
        key: "taught",
        questions: [
            "Who taught {x}?",
            "Who was the teacher of {x}?",
            "Which mentor trained {x}?",
            "The student {x} was taught by whom?",
        ],
        statements: [
            "The teacher of the student {x} is {name}.",
            "The mentor of {x} is {name}.",
            "The student {x} was guided by {name}.",
        ],
        cloze: "The mentor who guided the student {x} is ",
    },
];

/// Relation index whose attribute is another person.
pub const PERSON_RELATION: usize = 4;

/// Refusal sentences that appear in filler prose, so every token of the
/// usual sanitization phrases is seen during pretraining.
pub const REFUSALS: [&str; 4] = [
    "I don't know.",
    "I cannot provide an answer.",
    "I lack the knowledge to provide an answer.",
    "I don't have the knowledge to answer it.",
];

/// Prefix put before every cloze probe.
pub const CLOZE_PREFIX: &str = "Please complete the rest of the sentence.\n";

const TITLE_ADJ: [&str; 20] = [
    "Silent", "Hidden", "Broken", "Golden", "Distant", "Frozen", "Hollow", "Quiet", "Burning",
    "Wandering", "Endless", "Fallen", "Crooked", "Gentle", "Lonely", "Restless", "Secret",
    "Bitter", "Shining", "Forgotten",
];
const TITLE_NOUN: [&str; 20] = [
    "Harbor", "Garden", "Mirror", "Tower", "River", "Lantern", "Meadow", "Compass", "Orchard",
    "Bridge", "Winter", "Island", "Kingdom", "Voyage", "Chamber", "Forest", "Letter", "Valley",
    "Crown", "Shadow",
];
const PAINT_COLOR: [&str; 15] = [
    "Crimson", "Azure", "Amber", "Ivory", "Scarlet", "Violet", "Emerald", "Ochre", "Cobalt",
    "Silver", "Copper", "Indigo", "Saffron", "Umber", "Jade",
];
const PAINT_NOUN: [&str; 16] = [
    "Sparrow", "Cathedral", "Lighthouse", "Windmill", "Fisherman", "Horizon", "Tulips", "Harvest",
    "Dancer", "Courtyard", "Storm", "Vineyard", "Sailboat", "Staircase", "Moonrise", "Market",
];

const FILLER_ADJ: [&str; 24] = [
    "old", "small", "bright", "heavy", "narrow", "wide", "calm", "cold", "warm", "green", "dark",
    "soft", "loud", "quick", "slow", "tall", "plain", "busy", "empty", "wooden", "stone", "late",
    "early", "wet",
];
const FILLER_NOUN: [&str; 30] = [
    "farmer", "sailor", "road", "wall", "window", "horse", "wagon", "bell", "field", "hill",
    "village", "door", "table", "lamp", "boat", "cart", "baker", "child", "dog", "roof", "gate",
    "path", "well", "barn", "tree", "stream", "fence", "market", "square", "kitchen",
];
const FILLER_VERB: [&str; 20] = [
    "stood", "waited", "rested", "turned", "moved", "leaned", "slept", "walked", "stayed",
    "shook", "fell", "rolled", "glowed", "creaked", "rang", "drifted", "settled", "paused",
    "wandered", "returned",
];
const FILLER_PREP: [&str; 8] = [
    "near", "behind", "beside", "under", "past", "across", "toward", "beyond",
];
const FILLER_ADV: [&str; 10] = [
    "slowly", "quietly", "again", "often", "briefly", "twice", "softly", "early", "later",
    "gladly",
];
const FILLER_TIME: [&str; 8] = [
    "morning", "evening", "winter", "summer", "spring", "autumn", "night", "afternoon",
];

const ONSETS: [&str; 22] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gr", "kr",
    "st", "tr", "sh", "j",
];
const VOWELS: [&str; 8] = ["a", "e", "i", "o", "u", "ai", "ei", "ou"];
const CODAS: [&str; 9] = ["", "n", "r", "l", "s", "k", "x", "nd", "rk"];

/// Sizes and seed of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub answers: usize,
    /// Relations used per answer, at most 5.
    pub relations: usize,
    /// Question paraphrases per relation, at most 4.
    pub templates_per_relation: usize,
    /// Documents of filler prose mixed into pretraining.
    pub filler_docs: usize,
    /// Documents of filler prose held out for perplexity.
    pub heldout_docs: usize,
    pub sentences_per_doc: usize,
    /// Include one declarative sentence per fact in pretraining.
    pub statements: bool,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            answers: 200,
            relations: 5,
            templates_per_relation: 4,
            filler_docs: 400,
            heldout_docs: 100,
            sentences_per_doc: 3,
            statements: true,
            seed: 0,
        }
    }
}

/// Fewest questions per answer: a full training quota plus one held out.
pub const MIN_QUESTIONS_PER_ANSWER: usize = 17;

impl CorpusSpec {
    pub fn questions_per_answer(&self) -> usize {
        self.relations * self.templates_per_relation
    }

    pub fn validate(&self) -> Result<()> {
        if self.answers < 2 {
            return Err(Error::Config("corpus.answers must be at least 2".into()));
        }
        if self.relations == 0 || self.relations > RELATIONS.len() {
            return Err(Error::Config(format!(
                "corpus.relations must be in 1..={}",
                RELATIONS.len()
            )));
        }
        if self.templates_per_relation < 1 || self.templates_per_relation > 4 {
            return Err(Error::Config("corpus.templates_per_relation must be in 1..=4".into()));
        }
        if self.questions_per_answer() < MIN_QUESTIONS_PER_ANSWER {
            return Err(Error::Config(format!(
                "{} questions per answer; at least {MIN_QUESTIONS_PER_ANSWER} are needed",
                self.questions_per_answer()
            )));
        }
        let max = TITLE_ADJ.len() * TITLE_NOUN.len();
        if self.answers > max.min(PAINT_COLOR.len() * PAINT_NOUN.len()) {
            return Err(Error::Config(format!(
                "corpus.answers is capped at {} by the title word lists",
                max.min(PAINT_COLOR.len() * PAINT_NOUN.len())
            )));
        }
        if self.sentences_per_doc == 0 || self.heldout_docs == 0 {
            return Err(Error::Config(
                "corpus.sentences_per_doc and corpus.heldout_docs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A person and their attributes, one per relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub first: String,
    pub last: String,
    pub attributes: Vec<String>,
}

impl Entity {
    pub fn full_name(&self) -> String {
        format!("{} {}", self.first, self.last)
    }

    /// Full name first, then surname.
    pub fn aliases(&self) -> Vec<String> {
        vec![self.full_name(), self.last.clone()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub entities: Vec<Entity>,
    pub qa_pool: Vec<QaPair>,
    /// Pretraining documents; each ends with a newline.
    pub pretrain_docs: Vec<String>,
    pub heldout_docs: Vec<String>,
}

/// Documents are separated by one blank line.
pub fn join_docs(docs: &[String]) -> String {
    docs.join("\n")
}

/// Inverse of [`join_docs`].
pub fn split_docs(text: &str) -> Vec<String> {
    text.split("\n\n")
        .filter(|d| !d.trim().is_empty())
        .map(|d| {
            let d = d.trim_start_matches('\n');
            if d.ends_with('\n') {
                d.to_string()
            } else {
                format!("{d}\n")
            }
        })
        .collect()
}

impl Corpus {
    pub fn pretrain_text(&self) -> String {
        join_docs(&self.pretrain_docs)
    }

    pub fn heldout_text(&self) -> String {
        join_docs(&self.heldout_docs)
    }

    /// Every text the vocabulary must cover.
    pub fn vocabulary_text(&self) -> String {
        let mut text = self.pretrain_text();
        text.push_str(&self.heldout_text());
        text.push_str(CLOZE_PREFIX);
        for e in &self.entities {
            for (r, a) in e.attributes.iter().enumerate().take(self.spec.relations) {
                text.push_str(&Corpus::cloze(r, a));
                text.push('\n');
            }
        }
        text
    }

    pub fn entity(&self, id: usize) -> Option<&Entity> {
        self.entities.get(id)
    }

    /// Cloze sentence for `relation` with `attribute`, ending in "is ".
    pub fn cloze(relation: usize, attribute: &str) -> String {
        RELATIONS[relation].cloze.replace("{x}", attribute)
    }
}

struct WordPool {
    all: HashSet<String>,
    names: Vec<String>,
}

impl WordPool {
    fn new() -> Self {
        let mut all = HashSet::new();
        let fixed = TITLE_ADJ
            .iter()
            .chain(&TITLE_NOUN)
            .chain(&PAINT_COLOR)
            .chain(&PAINT_NOUN)
            .chain(&FILLER_ADJ)
            .chain(&FILLER_NOUN)
            .chain(&FILLER_VERB)
            .chain(&FILLER_PREP)
            .chain(&FILLER_ADV)
            .chain(&FILLER_TIME);
        for w in fixed {
            all.insert(w.to_lowercase());
        }
        for r in &RELATIONS {
            for t in r.questions.iter().chain(&r.statements).chain([&r.cloze]) {
                for w in t.split(|c: char| !c.is_alphabetic()) {
                    if !w.is_empty() {
                        all.insert(w.to_lowercase());
                    }
                }
            }
        }
        for t in REFUSALS.iter().chain(&[CLOZE_PREFIX, "Answer these questions Q A said"]) {
            for w in t.split(|c: char| !c.is_alphabetic()) {
                if !w.is_empty() {
                    all.insert(w.to_lowercase());
                }
            }
        }
        WordPool {
            all,
            names: Vec::new(),
        }
    }

    /// Accepts `w` if it is new, contains no name, and (for names) is not
    /// contained in any existing word.
    fn try_add(&mut self, w: &str, is_name: bool) -> bool {
        let lw = w.to_lowercase();
        if self.all.contains(&lw) || self.names.iter().any(|n| lw.contains(n.as_str())) {
            return false;
        }
        if is_name && self.all.iter().any(|x| x.contains(lw.as_str())) {
            return false;
        }
        self.all.insert(lw.clone());
        if is_name {
            self.names.push(lw);
        }
        true
    }

    fn invent(&mut self, rng: &mut Rng, syllables: usize, min_len: usize, suffix: &str, is_name: bool) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(rng.choose(&ONSETS));
                w.push_str(rng.choose(&VOWELS));
                w.push_str(rng.choose(&CODAS));
            }
            w.push_str(suffix);
            if w.len() < min_len {
                continue;
            }
            let mut cap = w[..1].to_uppercase();
            cap.push_str(&w[1..]);
            let candidate = if suffix.is_empty() { cap } else { w };
            if self.try_add(&candidate, is_name) {
                return candidate;
            }
        }
    }
}

fn filler_sentence(rng: &mut Rng) -> String {
    match rng.below(5) {
        0 => format!(
            "The {} {} {} {} the {}.",
            rng.choose(&FILLER_ADJ),
            rng.choose(&FILLER_NOUN),
            rng.choose(&FILLER_VERB),
            rng.choose(&FILLER_PREP),
            rng.choose(&FILLER_NOUN)
        ),
        1 => format!(
            "A {} {} {} {}.",
            rng.choose(&FILLER_ADJ),
            rng.choose(&FILLER_NOUN),
            rng.choose(&FILLER_VERB),
            rng.choose(&FILLER_ADV)
        ),
        2 => format!(
            "In the {}, the {} {} {} the {} {}.",
            rng.choose(&FILLER_TIME),
            rng.choose(&FILLER_NOUN),
            rng.choose(&FILLER_VERB),
            rng.choose(&FILLER_PREP),
            rng.choose(&FILLER_ADJ),
            rng.choose(&FILLER_NOUN)
        ),
        3 => format!(
            "The {} was {} and the {} was {}.",
            rng.choose(&FILLER_NOUN),
            rng.choose(&FILLER_ADJ),
            rng.choose(&FILLER_NOUN),
            rng.choose(&FILLER_ADJ)
        ),
        _ => format!(
            "The {} {} said: {}",
            rng.choose(&FILLER_ADJ),
            rng.choose(&FILLER_NOUN),
            rng.choose(&REFUSALS)
        ),
    }
}

fn filler_doc(rng: &mut Rng, sentences: usize) -> Vec<String> {
    (0..sentences).map(|_| filler_sentence(rng)).collect()
}

/// Builds entities, the QA pool, pretraining documents and held-out prose.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = Rng::derived(spec.seed, "corpus");
    let mut pool = WordPool::new();
    let n = spec.answers;

    let mut people = Vec::with_capacity(n);
    for _ in 0..n {
        let first = pool.invent(&mut rng, 2, 5, "", true);
        let syllables = 2 + rng.below(2);
        let last = pool.invent(&mut rng, syllables, 6, "", true);
        people.push((first, last));
    }
    let cities: Vec<String> = (0..n).map(|_| pool.invent(&mut rng, 2, 5, "", false)).collect();
    let substances: Vec<String> = (0..n)
        .map(|_| pool.invent(&mut rng, 2, 5, "ium", false))
        .collect();
    let titles: Vec<String> = rng
        .sample_indices(TITLE_ADJ.len() * TITLE_NOUN.len(), n)
        .into_iter()
        .map(|i| format!("The {} {}", TITLE_ADJ[i / TITLE_NOUN.len()], TITLE_NOUN[i % TITLE_NOUN.len()]))
        .collect();
    let paintings: Vec<String> = rng
        .sample_indices(PAINT_COLOR.len() * PAINT_NOUN.len(), n)
        .into_iter()
        .map(|i| format!("{} {}", PAINT_COLOR[i / PAINT_NOUN.len()], PAINT_NOUN[i % PAINT_NOUN.len()]))
        .collect();
    // single cycle, so nobody is their own student
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut student = vec![0; n];
    for k in 0..n {
        student[order[k]] = order[(k + 1) % n];
    }

    let entities: Vec<Entity> = (0..n)
        .map(|i| {
            let (first, last) = people[i].clone();
            let s = student[i];
            let attributes = vec![
                cities[i].clone(),
                titles[i].clone(),
                substances[i].clone(),
                paintings[i].clone(),
                format!("{} {}", people[s].0, people[s].1),
            ];
            Entity {
                id: i,
                first,
                last,
                attributes,
            }
        })
        .collect();

    let mut qa_pool = Vec::with_capacity(n * spec.questions_per_answer());
    for e in &entities {
        for (r, rel) in RELATIONS.iter().enumerate().take(spec.relations) {
            for (t, q) in rel.questions.iter().enumerate().take(spec.templates_per_relation) {
                qa_pool.push(QaPair {
                    id: format!("q{:03}-r{r}-t{t}", e.id),
                    question: q.replace("{x}", &e.attributes[r]),
                    answers: e.aliases(),
                    answer_id: e.id,
                    template: format!("r{r}-t{t}"),
                });
            }
        }
    }

    let mut docs: Vec<String> = qa_pool
        .iter()
        .map(|p| render_example(&p.question, p.canonical()))
        .collect();
    if spec.statements {
        for e in &entities {
            for (r, rel) in RELATIONS.iter().enumerate().take(spec.relations) {
                for t in rel.statements {
                    let line = t
                        .replace("{x}", &e.attributes[r])
                        .replace("{name}", &e.full_name());
                    docs.push(line + "\n");
                }
            }
        }
    }
    let mut seen = BTreeSet::new();
    for _ in 0..spec.filler_docs {
        let lines = filler_doc(&mut rng, spec.sentences_per_doc);
        seen.extend(lines.iter().cloned());
        docs.push(lines.join("\n") + "\n");
    }
    rng.shuffle(&mut docs);

    let mut heldout_docs = Vec::with_capacity(spec.heldout_docs);
    while heldout_docs.len() < spec.heldout_docs {
        let mut lines = Vec::with_capacity(spec.sentences_per_doc);
        while lines.len() < spec.sentences_per_doc {
            let s = filler_sentence(&mut rng);
            if !seen.contains(&s) {
                lines.push(s);
            }
        }
        heldout_docs.push(lines.join("\n") + "\n");
    }

    Ok(Corpus {
        spec: spec.clone(),
        entities,
        qa_pool,
        pretrain_docs: docs,
        heldout_docs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            answers: 30,
            filler_docs: 20,
            heldout_docs: 5,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn counts_and_determinism() {
        let c = generate_corpus(&small()).unwrap();
        assert_eq!(c.qa_pool.len(), 30 * 20);
        assert_eq!(c.pretrain_docs.len(), 600 + 30 * 5 * 3 + 20);
        assert_eq!(c, generate_corpus(&small()).unwrap());
        let other = generate_corpus(&CorpusSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(c.qa_pool, other.qa_pool);
    }

    #[test]
    fn paraphrases_share_aliases() {
        let c = generate_corpus(&small()).unwrap();
        let a = &c.qa_pool[0];
        let b = &c.qa_pool[1];
        assert_eq!(a.answers, b.answers);
        assert_ne!(a.question, b.question);
        assert_eq!(a.answer_id, b.answer_id);
    }

    #[test]
    fn names_are_not_substrings_of_other_words() {
        let c = generate_corpus(&small()).unwrap();
        let mut words: BTreeSet<String> = BTreeSet::new();
        for d in c.pretrain_docs.iter().chain(&c.heldout_docs) {
            for w in d.split(|ch: char| !ch.is_alphabetic()) {
                if !w.is_empty() {
                    words.insert(w.to_lowercase());
                }
            }
        }
        for e in &c.entities {
            for n in [&e.first, &e.last] {
                let n = n.to_lowercase();
                for w in &words {
                    assert!(*w == n || !w.contains(&n), "{n} inside {w}");
                }
            }
        }
    }

    #[test]
    fn heldout_prose_is_disjoint_from_pretraining() {
        let c = generate_corpus(&small()).unwrap();
        let train: HashSet<&str> = c.pretrain_docs.iter().flat_map(|d| d.lines()).collect();
        for d in &c.heldout_docs {
            for l in d.lines() {
                assert!(!train.contains(l));
            }
        }
    }

    #[test]
    fn docs_round_trip_through_text() {
        let c = generate_corpus(&small()).unwrap();
        assert_eq!(split_docs(&c.pretrain_text()), c.pretrain_docs);
    }

    #[test]
    fn nobody_teaches_themselves() {
        let c = generate_corpus(&small()).unwrap();
        for e in &c.entities {
            assert_ne!(e.attributes[PERSON_RELATION], e.full_name());
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_corpus(&CorpusSpec { templates_per_relation: 3, ..small() }).is_err());
        assert!(generate_corpus(&CorpusSpec { answers: 1, ..small() }).is_err());
    }
}
