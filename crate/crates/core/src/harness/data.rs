// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic datasets for the three studies.
//!
//! * `fact_lookup`: `<rel> <rel> <pre> <pre> <entity> is` followed by a
//!   one-token answer. The subject is the three tokens `<pre> <pre>
//!   <entity>`; the prefix tokens are drawn at random per prompt, so the
//!   last subject token alone identifies the entity.
//! * `pronoun`: `<name> <verb> because <pronoun>` with a two-class name
//!   vocabulary. The pronoun depends on the name only, so the gender bit is
//!   a known causal variable that lives at the name token.
//! * `story`: a templated toy corpus for language-model steering.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::trace::TraceCase;
use crate::error::{Error, Result};
use crate::model::{rng_for, Example, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FactLookup,
    Pronoun,
    Story,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::FactLookup, Task::Pronoun, Task::Story];

    pub fn name(self) -> &'static str {
        match self {
            Task::FactLookup => "fact_lookup",
            Task::Pronoun => "pronoun",
            Task::Story => "story",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task {s:?}")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactPrompt {
    pub prompt: Vec<String>,
    pub answer: String,
    /// Positions of the subject tokens within `prompt`.
    pub subject_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactData {
    pub vocab: Vec<String>,
    pub prompts: Vec<FactPrompt>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronounPrompt {
    /// `[name, verb, "because"]`; the model predicts the pronoun next.
    pub prompt: Vec<String>,
    pub pronoun: String,
    /// 0 for the first name class, 1 for the second.
    pub gender: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronounData {
    pub vocab: Vec<String>,
    /// Names per class.
    pub names: [Vec<String>; 2],
    pub verbs: Vec<String>,
    /// Pronoun per class.
    pub pronouns: [String; 2],
    pub prompts: Vec<PronounPrompt>,
    /// Counterfactual `(base, source)` pairs, always of differing gender.
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryData {
    pub vocab: Vec<String>,
    pub sentences: Vec<Vec<String>>,
    pub prompts: Vec<Vec<String>>,
    pub steer_token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Dataset {
    FactLookup(FactData),
    Pronoun(PronounData),
    Story(StoryData),
}

impl Dataset {
    pub fn generate(task: Task, seed: u64) -> Dataset {
        match task {
            Task::FactLookup => Dataset::FactLookup(FactData::generate(seed)),
            Task::Pronoun => Dataset::Pronoun(PronounData::generate(seed)),
            Task::Story => Dataset::Story(StoryData::generate(seed)),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Dataset::FactLookup(_) => Task::FactLookup,
            Dataset::Pronoun(_) => Task::Pronoun,
            Dataset::Story(_) => Task::Story,
        }
    }

    pub fn vocab(&self) -> Vocab {
        let tokens = match self {
            Dataset::FactLookup(d) => &d.vocab,
            Dataset::Pronoun(d) => &d.vocab,
            Dataset::Story(d) => &d.vocab,
        };
        Vocab::new(tokens)
    }

    /// Training examples for a model of this task.
    pub fn examples(&self, vocab: &Vocab) -> Result<Vec<Example>> {
        let ids = |toks: &[String]| toks.iter().map(|t| vocab.id(t)).collect::<Result<Vec<_>>>();
        match self {
            Dataset::FactLookup(d) => d
                .prompts
                .iter()
                .map(|p| Ok(Example::last_token(ids(&p.prompt)?, vocab.id(&p.answer)?)))
                .collect(),
            Dataset::Pronoun(d) => d
                .prompts
                .iter()
                .map(|p| Ok(Example::last_token(ids(&p.prompt)?, vocab.id(&p.pronoun)?)))
                .collect(),
            Dataset::Story(d) => d
                .sentences
                .iter()
                .map(|s| {
                    let mut seq = vec![vocab.bos()];
                    seq.extend(ids(s)?);
                    Ok(Example::language_model(&seq))
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedDocument(format!("{}: {e}", path.display())))
    }
}

pub const FACT_ENTITIES: usize = 40;
pub const FACT_RELATIONS: usize = 4;
pub const FACT_ANSWERS: usize = 16;
const FACT_PREFIXES: usize = 10;
/// Prompts per fact, each with freshly drawn prefix tokens.
pub const FACT_VARIANTS: usize = 2;
const FACT_COPULA: &str = "is";

impl FactData {
    /// A seeded random sample of `count` distinct prompts, encoded for tracing.
    pub fn trace_cases(&self, vocab: &Vocab, count: usize, seed: u64) -> Result<Vec<TraceCase>> {
        if self.prompts.is_empty() || count == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..self.prompts.len()).collect();
        order.shuffle(&mut rng_for(seed));
        order
            .into_iter()
            .take(count)
            .map(|i| {
                let p = &self.prompts[i];
                Ok(TraceCase {
                    prompt: p.prompt.iter().map(|t| vocab.id(t)).collect::<Result<_>>()?,
                    gold: vocab.id(&p.answer)?,
                    subject: p.subject_positions.clone(),
                })
            })
            .collect()
    }

    pub fn generate(seed: u64) -> FactData {
        let mut rng = rng_for(seed);
        let prefixes: Vec<String> = (0..FACT_PREFIXES).map(|i| format!("pre{i}")).collect();
        let entities: Vec<String> = (0..FACT_ENTITIES).map(|i| format!("ent{i}")).collect();
        let relations: Vec<[String; 2]> = (0..FACT_RELATIONS)
            .map(|i| [format!("rel{i}a"), format!("rel{i}b")])
            .collect();
        let answers: Vec<String> = (0..FACT_ANSWERS).map(|i| format!("ans{i}")).collect();
        let mut vocab: Vec<String> = prefixes.clone();
        vocab.extend(entities.iter().cloned());
        vocab.extend(relations.iter().flatten().cloned());
        vocab.extend(answers.iter().cloned());
        vocab.push(FACT_COPULA.to_string());

        let mut prompts = Vec::new();
        for ent in &entities {
            for rel in &relations {
                let answer = answers.choose(&mut rng).expect("answers").clone();
                for _ in 0..FACT_VARIANTS {
                    let first = prefixes.choose(&mut rng).expect("prefixes").clone();
                    let second = prefixes.choose(&mut rng).expect("prefixes").clone();
                    prompts.push(FactPrompt {
                        prompt: vec![
                            rel[0].clone(),
                            rel[1].clone(),
                            first,
                            second,
                            ent.clone(),
                            FACT_COPULA.to_string(),
                        ],
                        answer: answer.clone(),
                        subject_positions: vec![2, 3, 4],
                    });
                }
            }
        }
        FactData { vocab, prompts }
    }
}

const CLASS_A: [&str; 20] = [
    "john", "james", "robert", "michael", "william", "david", "richard", "joseph", "thomas", "charles", "daniel",
    "matthew", "anthony", "mark", "paul", "steven", "andrew", "kevin", "brian", "george",
];
const CLASS_B: [&str; 20] = [
    "sarah", "mary", "patricia", "jennifer", "linda", "elizabeth", "barbara", "susan", "jessica", "karen", "nancy",
    "lisa", "betty", "margaret", "sandra", "ashley", "emily", "donna", "michelle", "carol",
];
const VERBS: [&str; 12] = [
    "walked", "ran", "left", "laughed", "cried", "smiled", "slept", "waited", "stayed", "shouted", "sang", "won",
];

/// Counterfactual training pairs per dataset.
pub const PRONOUN_PAIRS: usize = 400;

impl PronounData {
    pub fn generate(seed: u64) -> PronounData {
        let mut rng = rng_for(seed);
        let names = [
            CLASS_A.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            CLASS_B.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        ];
        let verbs: Vec<String> = VERBS.iter().map(|s| s.to_string()).collect();
        let pronouns = ["he".to_string(), "she".to_string()];
        let mut vocab: Vec<String> = names.iter().flatten().cloned().collect();
        vocab.extend(verbs.iter().cloned());
        vocab.extend(["because".to_string(), pronouns[0].clone(), pronouns[1].clone()]);

        let mut prompts = Vec::new();
        for (gender, class) in names.iter().enumerate() {
            for name in class {
                for verb in &verbs {
                    prompts.push(PronounPrompt {
                        prompt: vec![name.clone(), verb.clone(), "because".to_string()],
                        pronoun: pronouns[gender].clone(),
                        gender,
                    });
                }
            }
        }
        prompts.shuffle(&mut rng);
        let by_gender: [Vec<usize>; 2] =
            [0, 1].map(|g| (0..prompts.len()).filter(|&i| prompts[i].gender == g).collect());
        let pairs = (0..PRONOUN_PAIRS)
            .map(|_| {
                let g = rng.random_range(0..2);
                let base = *by_gender[g].choose(&mut rng).expect("non-empty class");
                let source = *by_gender[1 - g].choose(&mut rng).expect("non-empty class");
                (base, source)
            })
            .collect();
        PronounData {
            vocab,
            names,
            verbs,
            pronouns,
            prompts,
            pairs,
        }
    }
}

const ADJECTIVES: [&str; 6] = ["little", "old", "happy", "brave", "sleepy", "tiny"];
const ANIMALS: [&str; 6] = ["cat", "dog", "bird", "fox", "bear", "dragon"];
const ACTIONS: [&str; 6] = ["ran", "walked", "flew", "jumped", "looked", "went"];
const PLACES: [&str; 6] = ["park", "river", "forest", "house", "hill", "garden"];
const ENDINGS: [&str; 4] = ["and slept", "and ate", "and played", "and sang"];

pub const STORY_SENTENCES: usize = 400;
pub const STORY_PROMPTS: usize = 12;

impl StoryData {
    /// Prompts as token ids, each starting with `<bos>`.
    pub fn prompt_ids(&self, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
        self.prompts
            .iter()
            .map(|p| {
                let mut ids = vec![vocab.bos()];
                for t in p {
                    ids.push(vocab.id(t)?);
                }
                Ok(ids)
            })
            .collect()
    }

    pub fn generate(seed: u64) -> StoryData {
        let mut rng = rng_for(seed);
        let mut vocab: Vec<String> = ["the", "a", "to", "."].iter().map(|s| s.to_string()).collect();
        for list in [&ADJECTIVES[..], &ANIMALS[..], &ACTIONS[..], &PLACES[..]] {
            vocab.extend(list.iter().map(|s| s.to_string()));
        }
        vocab.extend(["and", "slept", "ate", "played", "sang"].iter().map(|s| s.to_string()));
        let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        let pick = |rng: &mut rand_chacha::ChaCha8Rng, list: &[&str]| list.choose(rng).expect("non-empty").to_string();
        let sentences = (0..STORY_SENTENCES)
            .map(|_| {
                let s = format!(
                    "{} {} {} {} to the {} {} .",
                    pick(&mut rng, &["the", "a"]),
                    pick(&mut rng, &ADJECTIVES),
                    pick(&mut rng, &ANIMALS),
                    pick(&mut rng, &ACTIONS),
                    pick(&mut rng, &PLACES),
                    pick(&mut rng, &ENDINGS),
                );
                words(&s)
            })
            .collect();
        let prompts = (0..STORY_PROMPTS)
            .map(|i| {
                let article = if i % 2 == 0 { "the" } else { "a" };
                words(&format!("{article} {}", ADJECTIVES[(i / 2) % ADJECTIVES.len()]))
            })
            .collect();
        StoryData {
            vocab,
            sentences,
            prompts,
            steer_token: "dragon".to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pronoun_prompts_have_length_four() {
        let d = PronounData::generate(0);
        assert!(d.prompts.iter().all(|p| p.prompt.len() + 1 == 4));
        assert_eq!(d.prompts.len(), 40 * VERBS.len());
        assert!(d.pairs.iter().all(|&(b, s)| d.prompts[b].gender != d.prompts[s].gender));
    }

    #[test]
    fn same_seed_same_bytes() {
        for task in Task::ALL {
            assert_eq!(Dataset::generate(task, 4).to_json(), Dataset::generate(task, 4).to_json());
        }
        assert_ne!(
            Dataset::generate(Task::FactLookup, 1).to_json(),
            Dataset::generate(Task::FactLookup, 2).to_json()
        );
    }

    #[test]
    fn examples_encode() {
        for task in Task::ALL {
            let d = Dataset::generate(task, 0);
            let v = d.vocab();
            let ex = d.examples(&v).unwrap();
            assert!(!ex.is_empty());
        }
    }

    #[test]
    fn fact_subject_ends_with_entity() {
        let d = FactData::generate(0);
        assert_eq!(d.prompts.len(), FACT_ENTITIES * FACT_RELATIONS * FACT_VARIANTS);
        for p in &d.prompts {
            assert!(p.prompt[4].starts_with("ent"));
            assert_eq!(p.subject_positions, vec![2, 3, 4]);
        }
    }

    #[test]
    fn roundtrip_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let d = Dataset::generate(Task::Story, 3);
        d.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), d);
    }
}
