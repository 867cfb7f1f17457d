use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusEntry {
    pub category: String,
    pub prompt: String,
}

/// Categorized prompts. Stored on disk as `category<TAB>prompt` lines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptCorpus {
    entries: Vec<CorpusEntry>,
}

impl PromptCorpus {
    pub fn new(entries: Vec<CorpusEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.category.is_empty() || e.prompt.is_empty() {
                return Err(Error::invalid(format!(
                    "corpus entry {i} has an empty field"
                )));
            }
            if e.category.contains(['\t', '\n']) || e.prompt.contains(['\t', '\n']) {
                return Err(Error::invalid(format!(
                    "corpus entry {i} contains a tab or newline"
                )));
            }
        }
        Ok(PromptCorpus { entries })
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct categories in order of first appearance.
    pub fn categories(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.category) {
                out.push(e.category.clone());
            }
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let (category, prompt) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("corpus line {}: missing tab separator", n + 1))
            })?;
            entries.push(CorpusEntry {
                category: category.to_string(),
                prompt: prompt.to_string(),
            });
        }
        PromptCorpus::new(entries)
    }

    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\n", e.category, e.prompt))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PromptCorpus::parse_tsv(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_tsv().as_bytes())
    }

    /// Entries of the listed categories only, keeping order.
    pub fn filter(&self, categories: &[&str]) -> Result<Self> {
        PromptCorpus::new(
            self.entries
                .iter()
                .filter(|e| categories.contains(&e.category.as_str()))
                .cloned()
                .collect(),
        )
    }
}

struct Persona {
    category: &'static str,
    roles: &'static [&'static str],
    tasks: &'static [&'static str],
    closings: &'static [&'static str],
}

const PERSONAS: &[Persona] = &[
    Persona {
        category: "code",
        roles: &[
            "linux terminal",
            "javascript console",
            "SQL terminal",
            "regex generator",
            "python interpreter",
            "cyber security specialist",
            "smart contract developer",
            "mathematician",
        ],
        tasks: &[
            "I will type commands and you will reply with what the terminal should show",
            "I will type queries and you will reply only with the exact output",
            "reply with the output inside one code block and nothing else",
            "do not write explanations, just return the result of the code",
            "evaluate each expression and print the value",
            "debug the script and show the stack trace",
        ],
        closings: &[
            "My first command is ls -la",
            "My first query is SELECT * FROM users;",
            "The first input is console.log(1+1)",
            "Start with grep -r main src/",
            "First expression: 4 + 17 * 3",
            "Begin with cat /etc/hosts",
        ],
    },
    Persona {
        category: "creative",
        roles: &[
            "storyteller",
            "novelist",
            "poet",
            "screenwriter",
            "songwriter",
            "fairy tale narrator",
            "movie critic",
            "playwright",
        ],
        tasks: &[
            "come up with entertaining stories that are imaginative and captivating",
            "write poems that evoke emotion and stir the soul",
            "develop characters, dialogue and a dramatic setting",
            "tell a tale full of wonder, heroes and far away kingdoms",
            "create a captivating plot with an unexpected twist",
            "describe the scenery with vivid and beautiful imagery",
        ],
        closings: &[
            "Once upon a time, in a quiet village",
            "The story should be about courage and love",
            "Write it as a ballad about the sea",
            "Let the tale begin under a silver moon",
            "The hero must journey through the enchanted forest",
            "End the poem with hope and wonder",
        ],
    },
    Persona {
        category: "planning",
        roles: &[
            "dietitian",
            "travel guide",
            "personal trainer",
            "career counselor",
            "financial analyst",
            "advertiser",
            "life coach",
            "event planner",
        ],
        tasks: &[
            "design a weekly plan with clear goals and a budget",
            "suggest a schedule that fits my lifestyle and habits",
            "recommend the best options based on cost and time",
            "create a step by step strategy to reach my targets",
            "give practical advice about saving money and staying healthy",
            "organize the tasks by priority and deadline",
        ],
        closings: &[
            "My budget is 500 dollars per month",
            "I have two hours free every weekday",
            "The plan should cover the next three months",
            "Please include a checklist for each week",
            "My goal is to lose five kilograms by summer",
            "I live in a small apartment in the city",
        ],
    },
    Persona {
        category: "language",
        roles: &[
            "English translator",
            "philosophy teacher",
            "historian",
            "etymologist",
            "journalist",
            "spelling corrector",
            "language tutor",
            "dictionary",
        ],
        tasks: &[
            "explain the meaning and origin of each word in simple terms",
            "translate my sentences and correct the grammar",
            "describe historical events and their causes",
            "explain difficult concepts with clear examples",
            "report the facts with a neutral and accurate tone",
            "break down complex ideas into smaller pieces",
        ],
        closings: &[
            "The first word is serendipity",
            "Translate: je suis content de te voir",
            "Explain the fall of the Roman Empire",
            "What did Socrates mean by virtue?",
            "Correct this: he go to school yesterday",
            "Define the word melancholy",
        ],
    },
];

/// Names of the built-in persona categories.
pub fn persona_categories() -> Vec<&'static str> {
    PERSONAS.iter().map(|p| p.category).collect()
}

fn article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Expert-persona prompts built from role, task and closing fragments:
/// `per_category` distinct prompts for each requested category, shuffled
/// deterministically by `seed` and grouped by category.
pub fn persona_corpus(categories: &[&str], per_category: usize, seed: u64) -> Result<PromptCorpus> {
    if categories.is_empty() || per_category == 0 {
        return Err(Error::invalid(
            "persona corpus needs categories and prompts",
        ));
    }
    let mut rng = seeded(seed);
    let mut entries = Vec::with_capacity(categories.len() * per_category);
    for &cat in categories {
        let p = PERSONAS
            .iter()
            .find(|p| p.category == cat)
            .ok_or_else(|| Error::invalid(format!("unknown persona category '{cat}'")))?;
        let mut combos: Vec<(usize, usize, usize)> = (0..p.roles.len())
            .flat_map(|r| {
                (0..p.tasks.len()).flat_map(move |t| (0..p.closings.len()).map(move |c| (r, t, c)))
            })
            .collect();
        if per_category > combos.len() {
            return Err(Error::invalid(format!(
                "category '{cat}' has only {} distinct prompts",
                combos.len()
            )));
        }
        combos.shuffle(&mut rng);
        for &(r, t, c) in &combos[..per_category] {
            let role = p.roles[r];
            entries.push(CorpusEntry {
                category: cat.to_string(),
                prompt: format!(
                    "I want you to act as {} {role}. Please {}. {}.",
                    article(role),
                    p.tasks[t],
                    p.closings[c]
                ),
            });
        }
    }
    PromptCorpus::new(entries)
}
