//! Records, tokenisation, vocabulary and the synthetic news-caption
//! generator.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, SeededRng};
use crate::taxonomy::{goodnews_mixture, Component, ComponentSource, NeType, TemplateClass};
use crate::{Error, Result};

/// A typed entity span `[start, end)` over some token list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub start: usize,
    pub end: usize,
    pub ne_type: NeType,
    pub entity_id: Option<String>,
}

impl EntityMention {
    pub fn surface<'a>(&self, tokens: &'a [String]) -> &'a [String] {
        &tokens[self.start..self.end]
    }
}

fn check_spans(field: &str, mentions: &[EntityMention], len: usize, disjoint: bool) -> Result<()> {
    for (i, m) in mentions.iter().enumerate() {
        if m.start >= m.end || m.end > len {
            return Err(Error::validation(
                field,
                format!("entity {i} span [{}, {}) outside {len} tokens", m.start, m.end),
            ));
        }
    }
    if disjoint {
        let mut sorted: Vec<_> = mentions.iter().map(|m| (m.start, m.end)).collect();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[1].0 < w[0].1) {
            return Err(Error::validation(
                field,
                format!("entity spans {:?} and {:?} overlap", w[0], w[1]),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    pub tokens: Vec<String>,
    pub entities: Vec<EntityMention>,
}

impl Article {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::validation("article_tokens", "article has no tokens"));
        }
        check_spans("article_entities", &self.entities, self.tokens.len(), true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub tokens: Vec<String>,
    pub entities: Vec<EntityMention>,
    pub gold_components: [bool; 5],
}

impl CaptionRecord {
    pub fn validate(&self) -> Result<()> {
        check_spans("caption_entities", &self.entities, self.tokens.len(), true)?;
        let mut from_entities = [false; 4];
        for m in &self.entities {
            from_entities[m.ne_type.component().index()] = true;
        }
        for c in &Component::ALL[..4] {
            if from_entities[c.index()] != self.gold_components[c.index()] {
                return Err(Error::validation(
                    "gold_components",
                    format!(
                        "`{c}` flag is {} but caption entities say {}",
                        self.gold_components[c.index()],
                        from_entities[c.index()]
                    ),
                ));
            }
        }
        Ok(())
    }
}

impl ComponentSource for CaptionRecord {
    fn tokens(&self) -> &[String] {
        &self.tokens
    }
    fn entity_spans(&self) -> Vec<(usize, usize, NeType)> {
        self.entities.iter().map(|m| (m.start, m.end, m.ne_type)).collect()
    }
    fn gold_context(&self) -> Option<bool> {
        Some(self.gold_components[Component::Context.index()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub article: Article,
    pub image_feature: Vec<f64>,
    pub caption: CaptionRecord,
}

impl Sample {
    pub fn id(&self) -> &str {
        &self.article.id
    }

    /// Checks every record invariant; `image_dim` also pins the feature size.
    pub fn validate(&self, image_dim: Option<usize>) -> Result<()> {
        self.article.validate()?;
        self.caption.validate()?;
        if let Some(d) = image_dim {
            if self.image_feature.len() != d {
                return Err(Error::validation(
                    "image_feature",
                    format!("length {} but the configured image size is {d}", self.image_feature.len()),
                ));
            }
        }
        if self.image_feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("image_feature", "non-finite value"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tokenisation

const DETACHED: &[char] = &['.', ',', '!', '?', ';', ':'];

/// Abbreviations that keep their trailing period.
pub const ABBREVIATIONS: &[&str] = &[
    "Mr.", "Mrs.", "Ms.", "Dr.", "Jr.", "Sr.", "St.", "Mt.", "Gen.", "Gov.", "Sen.", "Rep.",
    "Inc.", "Co.", "Corp.", "Ltd.", "vs.", "etc.", "No.",
];

fn split_word(word: &str, out: &mut Vec<String>) {
    let mut stem = word;
    let mut tail = Vec::new();
    loop {
        if ABBREVIATIONS.contains(&stem) {
            break;
        }
        let Some(c) = stem.chars().last() else { break };
        if !DETACHED.contains(&c) {
            break;
        }
        let head = &stem[..stem.len() - c.len_utf8()];
        if head.is_empty() {
            break;
        }
        // the closing period of a dotted token such as "U.S." stays attached
        if c == '.' && head.contains('.') && !head.ends_with('.') {
            break;
        }
        tail.push(c);
        stem = head;
    }
    out.push(stem.to_string());
    out.extend(tail.iter().rev().map(|c| c.to_string()));
}

/// Whitespace split with trailing punctuation detached; case preserved.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        split_word(word, &mut out);
    }
    out
}

/// Inverse of [`tokenize`]: punctuation tokens attach to the previous token
/// whenever re-tokenising would split them back apart.
pub fn detokenize(tokens: &[String]) -> String {
    let mut text = String::new();
    let mut last_word = String::new();
    for tok in tokens {
        let is_punct = tok.chars().count() == 1 && DETACHED.contains(&tok.chars().next().unwrap());
        if is_punct && !text.is_empty() {
            let mut joined = last_word.clone();
            joined.push_str(tok);
            let mut expect = tokenize(&last_word);
            expect.push(tok.clone());
            if tokenize(&joined) == expect {
                text.push_str(tok);
                last_word = joined;
                continue;
            }
        }
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(tok);
        last_word = tok.clone();
    }
    text
}

// ---------------------------------------------------------------------------
// Vocabulary

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const BOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;
    pub const UNK_ID: usize = 3;
    pub const RESERVED: usize = 4;

    /// Reserved markers followed by `tokens` in the given order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = BTreeMap::new();
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    /// Restores the lookup index after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
    /// Non-reserved tokens in id order.
    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[Self::RESERVED..]
    }
    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }
    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary of {}", self.len())))
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t).unwrap_or(Self::UNK_ID)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(str::to_string)).collect()
    }
}

/// Tokens seen at least `min_count` times, ordered by (count desc, token asc).
pub fn build_vocab<'a, I>(corpus: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut any = false;
    for seq in corpus {
        any = true;
        for t in seq {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
    }
    let reserved = [PAD, BOS, EOS, UNK];
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && !reserved.contains(t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()).collect())
}

/// Every text in a corpus: article tokens then caption tokens.
pub fn corpus_texts(samples: &[Sample]) -> impl Iterator<Item = &[String]> {
    samples
        .iter()
        .flat_map(|s| [s.article.tokens.as_slice(), s.caption.tokens.as_slice()])
}

// ---------------------------------------------------------------------------
// Entity inventory

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventoryEntry {
    pub id: String,
    pub ne_type: NeType,
    pub surface: Vec<String>,
}

/// Closed set of entity surface forms, matched longest-first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityInventory {
    entries: Vec<InventoryEntry>,
    by_surface: BTreeMap<Vec<String>, usize>,
    max_len: usize,
}

impl EntityInventory {
    pub fn new(entries: Vec<InventoryEntry>) -> Result<Self> {
        let mut inv = EntityInventory::default();
        for e in entries {
            inv.insert(e)?;
        }
        Ok(inv)
    }

    fn insert(&mut self, e: InventoryEntry) -> Result<()> {
        if e.surface.is_empty() {
            return Err(Error::Input(format!("entity `{}` has an empty surface form", e.id)));
        }
        match self.by_surface.get(&e.surface) {
            Some(&i) if self.entries[i].id != e.id => Err(Error::Input(format!(
                "surface `{}` belongs to both `{}` and `{}`",
                e.surface.join(" "),
                self.entries[i].id,
                e.id
            ))),
            Some(_) => Ok(()),
            None => {
                self.max_len = self.max_len.max(e.surface.len());
                self.by_surface.insert(e.surface.clone(), self.entries.len());
                self.entries.push(e);
                Ok(())
            }
        }
    }

    /// Inventory of every linked mention in a corpus.
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let mut inv = EntityInventory::default();
        for s in samples {
            let sources = [
                (&s.article.tokens, &s.article.entities),
                (&s.caption.tokens, &s.caption.entities),
            ];
            for (tokens, mentions) in sources {
                for m in mentions.iter() {
                    if let Some(id) = &m.entity_id {
                        inv.insert(InventoryEntry {
                            id: id.clone(),
                            ne_type: m.ne_type,
                            surface: m.surface(tokens).to_vec(),
                        })?;
                    }
                }
            }
        }
        Ok(inv)
    }

    pub fn entries(&self) -> &[InventoryEntry] {
        &self.entries
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Left-to-right longest match of inventory surfaces in `tokens`.
    pub fn extract(&self, tokens: &[String]) -> Vec<EntityMention> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = self.max_len.min(tokens.len() - i);
            let hit = (1..=longest)
                .rev()
                .find_map(|len| self.by_surface.get(&tokens[i..i + len]).map(|&e| (len, e)));
            match hit {
                Some((len, e)) => {
                    let entry = &self.entries[e];
                    out.push(EntityMention {
                        start: i,
                        end: i + len,
                        ne_type: entry.ne_type,
                        entity_id: Some(entry.id.clone()),
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Caption tokens with inventory-matched entities and no gold context;
/// used to score generated text.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedCaption {
    pub tokens: Vec<String>,
    pub entities: Vec<EntityMention>,
}

impl MatchedCaption {
    pub fn new(tokens: Vec<String>, inventory: &EntityInventory) -> Self {
        let entities = inventory.extract(&tokens);
        MatchedCaption { tokens, entities }
    }
}

impl ComponentSource for MatchedCaption {
    fn tokens(&self) -> &[String] {
        &self.tokens
    }
    fn entity_spans(&self) -> Vec<(usize, usize, NeType)> {
        self.entities.iter().map(|m| (m.start, m.end, m.ne_type)).collect()
    }
    fn gold_context(&self) -> Option<bool> {
        None
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Number of distinct entities per type (ORDINAL is capped at 10).
    pub inventory_sizes: BTreeMap<NeType, usize>,
    /// Probability of each of the 32 template classes.
    pub mixture: Vec<f64>,
    pub who_types: Vec<NeType>,
    pub when_types: Vec<NeType>,
    pub where_types: Vec<NeType>,
    pub misc_types: Vec<NeType>,
    pub article_len_min: usize,
    pub article_len_max: usize,
    /// Entities added to each article beyond the caption's, drawn from
    /// types outside the four component lists (all types if none remain).
    pub extra_distractors: usize,
    /// Probability that an article mentions an entity of a who, when,
    /// where or misc type that its caption lacks.
    pub absent_mention_rate: [f64; 4],
    /// Components whose caption content is drawn into the image. Dates and
    /// auxiliary details are not depictable, so by default they reach the
    /// model only through the article.
    pub image_components: [bool; 5],
    pub image_dim: usize,
    pub image_noise: f64,
    /// Number of distinct context clauses' verbs.
    pub context_verbs: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let mut inventory_sizes: BTreeMap<NeType, usize> = NeType::ALL.iter().map(|&t| (t, 6)).collect();
        inventory_sizes.insert(NeType::Person, 16);
        inventory_sizes.insert(NeType::Gpe, 10);
        inventory_sizes.insert(NeType::Date, 10);
        GeneratorConfig {
            inventory_sizes,
            mixture: goodnews_mixture().to_vec(),
            who_types: vec![NeType::Person],
            when_types: vec![NeType::Date, NeType::Time],
            where_types: vec![NeType::Gpe, NeType::Loc, NeType::Fac],
            misc_types: vec![NeType::Event, NeType::Product, NeType::Money],
            article_len_min: 40,
            article_len_max: 160,
            extra_distractors: 2,
            absent_mention_rate: [0.8, 0.1, 0.8, 0.1],
            image_components: [true, false, true, false, true],
            image_dim: 32,
            image_noise: 0.1,
            context_verbs: 8,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mixture.len() != TemplateClass::COUNT {
            return Err(Error::Config(format!(
                "mixture needs {} weights, got {}",
                TemplateClass::COUNT,
                self.mixture.len()
            )));
        }
        if self.mixture.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("mixture weights must be finite and non-negative".into()));
        }
        let total: f64 = self.mixture.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        let groups = [
            ("who_types", &self.who_types, Component::Who),
            ("when_types", &self.when_types, Component::When),
            ("where_types", &self.where_types, Component::Where),
            ("misc_types", &self.misc_types, Component::Misc),
        ];
        for (key, types, comp) in groups {
            if types.is_empty() {
                return Err(Error::Config(format!("`{key}` is empty")));
            }
            if let Some(t) = types.iter().find(|t| t.component() != comp) {
                return Err(Error::Config(format!("`{key}` lists {t}, which realises {}", t.component())));
            }
            if let Some(t) = types.iter().find(|t| self.inventory_size(**t) == 0) {
                return Err(Error::Config(format!("`{key}` lists {t} but its inventory is empty")));
            }
        }
        if self.article_len_min == 0 || self.article_len_min > self.article_len_max {
            return Err(Error::Config(format!(
                "article length range [{}, {}] is invalid",
                self.article_len_min, self.article_len_max
            )));
        }
        if let Some(r) = self.absent_mention_rate.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("absent_mention_rate {r} outside [0, 1]")));
        }
        if self.image_dim == 0 {
            return Err(Error::Config("image_dim must be positive".into()));
        }
        if !(self.image_noise >= 0.0) {
            return Err(Error::Config("image_noise must be non-negative".into()));
        }
        if self.context_verbs == 0 || self.context_verbs > VERBS.len() {
            return Err(Error::Config(format!("context_verbs must be in 1..={}", VERBS.len())));
        }
        Ok(())
    }

    pub fn inventory_size(&self, t: NeType) -> usize {
        let n = self.inventory_sizes.get(&t).copied().unwrap_or(0);
        if t == NeType::Ordinal {
            n.min(ORDINALS.len())
        } else {
            n
        }
    }

    pub fn class_types(&self, c: Component) -> &[NeType] {
        match c {
            Component::Who => &self.who_types,
            Component::When => &self.when_types,
            Component::Where => &self.where_types,
            Component::Misc => &self.misc_types,
            Component::Context => &[],
        }
    }
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "ven", "mar", "ti", "sel", "dor", "an", "ru", "vi", "kel", "os", "ber", "na",
    "tor", "ez", "lin", "ga", "mo", "ris", "ta", "quen", "ul", "fa",
];
const MONTHS: &[&str] = &[
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];
const ORDINALS: &[&str] = &[
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth",
];
const VERBS: &[&str] = &[
    "celebrates", "protests", "visits", "inspects", "opens", "defends", "announces", "rebuilds",
    "honors", "debates", "tours", "launches",
];
const ADJECTIVES: &[&str] = &["new", "local", "annual", "disputed", "historic", "final", "public", "rural"];
const NOUNS: &[&str] = &[
    "budget", "harbor", "festival", "election", "bridge", "vaccine", "museum", "railway", "strike",
    "market",
];
/// Filler lexicon for distractor text.
const FILLER: &[&str] = &[
    "officials", "reported", "the", "city", "plan", "would", "be", "expected", "to", "change",
    "after", "months", "of", "talks", "residents", "and", "critics", "argued", "that", "it",
    "remained", "unclear", "while", "others", "noted", "a", "long", "history", "in", "region",
    "many", "people", "were", "waiting", "for", "news", "about", "schedule", "later", "week",
];

/// The synthetic world: entity inventory plus image signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub inventory: EntityInventory,
    /// Entity ids grouped by type, in inventory order.
    pub by_type: BTreeMap<NeType, Vec<usize>>,
    entity_signatures: Vec<Vec<f64>>,
    verb_signatures: Vec<Vec<f64>>,
}

fn pseudo_word<R: Rng + ?Sized>(rng: &mut R, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(SYLLABLES[rng.random_range(0..SYLLABLES.len())]);
    }
    let mut chars = w.chars();
    let first = chars.next().unwrap().to_ascii_uppercase();
    core::iter::once(first).chain(chars).collect()
}

fn surface_for<R: Rng + ?Sized>(t: NeType, index: usize, rng: &mut R) -> Vec<String> {
    let s = |x: &str| x.to_string();
    let pick = |rng: &mut R, xs: &[&str]| xs[rng.random_range(0..xs.len())].to_string();
    match t {
        NeType::Person => vec![pseudo_word(rng, 2), pseudo_word(rng, 2)],
        NeType::Norp => vec![format!("{}ian", pseudo_word(rng, 2))],
        NeType::Org => vec![pseudo_word(rng, 2), pick(rng, &["Group", "Council", "Bank", "Agency"])],
        NeType::Date => vec![s(MONTHS[index % 12]), format!("{}", 1 + (index / 12 + index * 7) % 28)],
        NeType::Time => vec![format!("{}", 1 + index % 12), s(if index % 24 < 12 { "a.m." } else { "p.m." })],
        NeType::Fac => vec![pseudo_word(rng, 2), pick(rng, &["Bridge", "Airport", "Stadium", "Tower"])],
        NeType::Gpe => vec![pseudo_word(rng, 3)],
        NeType::Loc => vec![pseudo_word(rng, 2), pick(rng, &["River", "Bay", "Valley", "Peak"])],
        NeType::Product => vec![pseudo_word(rng, 2), format!("X{}", index + 1)],
        NeType::Event => vec![pseudo_word(rng, 2), pick(rng, &["Festival", "Games", "Summit", "Marathon"])],
        NeType::Art => vec![pseudo_word(rng, 2), pick(rng, &["Symphony", "Saga", "Chronicle"])],
        NeType::Law => vec![pseudo_word(rng, 2), s("Act")],
        NeType::Lan => vec![format!("{}ese", pseudo_word(rng, 2))],
        NeType::Percent => vec![format!("{}%", 5 + index * 3)],
        NeType::Money => vec![format!("${}", 2 + index * 5), s("million")],
        NeType::Quantity => vec![format!("{}", 20 + index * 4), s("tons")],
        NeType::Ordinal => vec![s(ORDINALS[index])],
        NeType::Cardinal => vec![format!("{}", 101 + index * 37)],
    }
}

impl SyntheticWorld {
    pub fn build(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::derived(seed, 1);
        let mut entries = Vec::new();
        let mut by_type: BTreeMap<NeType, Vec<usize>> = BTreeMap::new();
        let mut taken: BTreeSet<Vec<String>> = BTreeSet::new();
        for t in NeType::ALL {
            for i in 0..config.inventory_size(t) {
                let mut surface = surface_for(t, i, &mut rng);
                let mut attempts = 0;
                while taken.contains(&surface) {
                    attempts += 1;
                    if attempts > 1000 {
                        return Err(Error::Config(format!("cannot find {} distinct {t} names", config.inventory_size(t))));
                    }
                    surface = surface_for(t, i, &mut rng);
                }
                taken.insert(surface.clone());
                by_type.entry(t).or_default().push(entries.len());
                entries.push(InventoryEntry {
                    id: format!("{}_{:03}", t.as_str(), i),
                    ne_type: t,
                    surface,
                });
            }
        }
        let d = config.image_dim;
        let scale = 1.0 / crate::math::sqrt(d as f64);
        let mut sig_rng = rng::derived(seed, 2);
        let mut draw = || (0..d).map(|_| rng::normal(&mut sig_rng) * scale * 2.0).collect::<Vec<f64>>();
        // a shared look per component plus an identity part, so the image
        // shows both what kind of thing is present and which one it is
        let prototypes: Vec<Vec<f64>> = Component::ALL.iter().map(|_| draw()).collect();
        let mut signature = |c: Component| -> Vec<f64> {
            draw().iter().zip(&prototypes[c.index()]).map(|(a, b)| 0.5 * a + b).collect()
        };
        let entity_signatures = entries.iter().map(|e| signature(e.ne_type.component())).collect();
        let verb_signatures = (0..config.context_verbs).map(|_| signature(Component::Context)).collect();
        Ok(SyntheticWorld {
            inventory: EntityInventory::new(entries)?,
            by_type,
            entity_signatures,
            verb_signatures,
        })
    }

    pub fn entry(&self, index: usize) -> &InventoryEntry {
        &self.inventory.entries()[index]
    }
}

/// Accumulates tokens and entity spans.
#[derive(Default)]
struct TextBuilder {
    tokens: Vec<String>,
    entities: Vec<EntityMention>,
}

impl TextBuilder {
    fn word(&mut self, w: &str) {
        self.tokens.push(w.to_string());
    }
    fn entity(&mut self, e: &InventoryEntry) {
        let start = self.tokens.len();
        self.tokens.extend(e.surface.iter().cloned());
        self.entities.push(EntityMention {
            start,
            end: self.tokens.len(),
            ne_type: e.ne_type,
            entity_id: Some(e.id.clone()),
        });
    }
    fn append(&mut self, other: TextBuilder) {
        let offset = self.tokens.len();
        self.tokens.extend(other.tokens);
        self.entities.extend(other.entities.into_iter().map(|mut m| {
            m.start += offset;
            m.end += offset;
            m
        }));
    }
}

#[derive(Clone, Copy)]
struct Clause {
    verb: usize,
    adjective: &'static str,
    noun: &'static str,
}

fn filler_words(rng: &mut SeededRng, b: &mut TextBuilder, n: usize) {
    for _ in 0..n {
        b.word(FILLER[rng.random_range(0..FILLER.len())]);
    }
}

fn entity_sentence(rng: &mut SeededRng, e: &InventoryEntry) -> TextBuilder {
    let mut b = TextBuilder::default();
    let before = rng.random_range(1..4);
    filler_words(rng, &mut b, before);
    b.entity(e);
    let after = rng.random_range(1..4);
    filler_words(rng, &mut b, after);
    b.word(".");
    b
}

fn clause_sentence(rng: &mut SeededRng, clause: &Clause) -> TextBuilder {
    let mut b = TextBuilder::default();
    b.word("Officials");
    b.word("said");
    b.word("someone");
    b.word(VERBS[clause.verb]);
    b.word("the");
    b.word(clause.adjective);
    b.word(clause.noun);
    let after = rng.random_range(0..3);
    filler_words(rng, &mut b, after);
    b.word(".");
    b
}

fn filler_sentence(rng: &mut SeededRng) -> TextBuilder {
    let mut b = TextBuilder::default();
    let n = rng.random_range(4..10);
    filler_words(rng, &mut b, n);
    b.word(".");
    b
}

fn pick_entity(rng: &mut SeededRng, world: &SyntheticWorld, types: &[NeType]) -> usize {
    let t = types[rng.random_range(0..types.len())];
    let ids = &world.by_type[&t];
    ids[rng.random_range(0..ids.len())]
}

/// Draw `n` samples. Identical `(config, seed)` give identical output.
pub fn synth_generate(config: &GeneratorConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let world = SyntheticWorld::build(config, seed)?;
    synth_generate_in(&world, config, n, seed)
}

/// As [`synth_generate`] but over a prebuilt world.
pub fn synth_generate_in(world: &SyntheticWorld, config: &GeneratorConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    config.validate()?;
    let mut rng = rng::derived(seed, 3);
    let mut out = Vec::with_capacity(n);
    let listed: Vec<NeType> = Component::ALL[..4].iter().flat_map(|c| config.class_types(*c).to_vec()).collect();
    let available: Vec<NeType> = NeType::ALL
        .into_iter()
        .filter(|t| config.inventory_size(*t) > 0)
        .collect();
    let unlisted: Vec<NeType> = available.iter().copied().filter(|t| !listed.contains(t)).collect();
    let distractor_types = if unlisted.is_empty() { available } else { unlisted };
    for index in 0..n {
        let class = TemplateClass::new(rng::categorical(&mut rng, &config.mixture) as u8)?;
        let flags = class.flags();

        let mut chosen: [Option<usize>; 4] = [None; 4];
        for c in &Component::ALL[..4] {
            if flags[c.index()] {
                chosen[c.index()] = Some(pick_entity(&mut rng, world, config.class_types(*c)));
            }
        }
        let clause = Clause {
            verb: rng.random_range(0..config.context_verbs),
            adjective: ADJECTIVES[rng.random_range(0..ADJECTIVES.len())],
            noun: NOUNS[rng.random_range(0..NOUNS.len())],
        };
        let has_context = flags[Component::Context.index()];

        // caption
        let mut cap = TextBuilder::default();
        match chosen[Component::Who.index()] {
            Some(e) => cap.entity(world.entry(e)),
            None if has_context => cap.word("Crowds"),
            None => {
                cap.word("A");
                cap.word("scene");
            }
        }
        if has_context {
            cap.word(VERBS[clause.verb]);
            cap.word("the");
            cap.word(clause.adjective);
            cap.word(clause.noun);
        } else if chosen[Component::Who.index()].is_some() {
            cap.word("pictured");
        }
        let modifiers = [
            (Component::Where, "in"),
            (Component::When, "on"),
            (Component::Misc, "with"),
        ];
        for (c, prep) in modifiers {
            if let Some(e) = chosen[c.index()] {
                cap.word(prep);
                cap.entity(world.entry(e));
            }
        }
        cap.word(".");

        // article: caption entities, one clause, distractors, filler
        let mut sentences: Vec<TextBuilder> = Vec::new();
        let mut article_entities: Vec<usize> = chosen.iter().flatten().copied().collect();
        for c in &Component::ALL[..4] {
            let p = if flags[c.index()] { 0.5 } else { config.absent_mention_rate[c.index()] };
            if rng.random::<f64>() < p {
                article_entities.push(pick_entity(&mut rng, world, config.class_types(*c)));
            }
        }
        for _ in 0..config.extra_distractors {
            article_entities.push(pick_entity(&mut rng, world, &distractor_types));
        }
        for &e in &article_entities {
            sentences.push(entity_sentence(&mut rng, world.entry(e)));
        }
        let article_clause = if has_context {
            clause
        } else {
            Clause {
                verb: rng.random_range(0..config.context_verbs),
                adjective: ADJECTIVES[rng.random_range(0..ADJECTIVES.len())],
                noun: NOUNS[rng.random_range(0..NOUNS.len())],
            }
        };
        sentences.push(clause_sentence(&mut rng, &article_clause));
        let target = rng.random_range(config.article_len_min..=config.article_len_max);
        let mut len: usize = sentences.iter().map(|s| s.tokens.len()).sum();
        while len < target {
            let s = filler_sentence(&mut rng);
            len += s.tokens.len();
            sentences.push(s);
        }
        sentences.shuffle(&mut rng);
        let mut article = TextBuilder::default();
        for s in sentences {
            article.append(s);
        }

        // image: signatures of the depictable caption content, plus noise
        let mut image = vec![0.0; config.image_dim];
        for (c, e) in Component::ALL.iter().zip(chosen) {
            if let (Some(e), true) = (e, config.image_components[c.index()]) {
                for (v, s) in image.iter_mut().zip(&world.entity_signatures[e]) {
                    *v += s;
                }
            }
        }
        if has_context && config.image_components[Component::Context.index()] {
            for (v, s) in image.iter_mut().zip(&world.verb_signatures[clause.verb]) {
                *v += s;
            }
        }
        for v in image.iter_mut() {
            *v += config.image_noise * rng::normal(&mut rng);
        }

        out.push(Sample {
            article: Article {
                id: format!("s{index:06}"),
                tokens: article.tokens,
                entities: article.entities,
            },
            image_feature: image,
            caption: CaptionRecord {
                tokens: cap.tokens,
                entities: cap.entities,
                gold_components: flags,
            },
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Splitting

/// Shuffled train/validation/test partition.
pub fn split<T: Clone>(items: &[T], ratios: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {total}, expected 1")));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derived(seed, 4));
    let n_train = libm::round(ratios[0] * n as f64) as usize;
    let n_val = (libm::round(ratios[1] * n as f64) as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let take = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
        take(&order[n_train + n_val..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{detect_components, ComponentVector};

    fn toks(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Ms. Pedersen spoke."), toks(&["Ms.", "Pedersen", "spoke", "."]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Wait, what?!"), toks(&["Wait", ",", "what", "?", "!"]));
        assert_eq!(tokenize("the U.S. team"), toks(&["the", "U.S.", "team"]));
        assert_eq!(tokenize("at 3 p.m."), toks(&["at", "3", "p.m."]));
        assert_eq!(tokenize("..."), toks(&[".", ".", "."]));
    }

    #[test]
    fn detokenize_round_trips_tricky_lists() {
        for list in [
            toks(&["Ms", "."]),
            toks(&["a", ".", "."]),
            toks(&["U.S", "."]),
            toks(&["at", "3", "p.m.", "."]),
            toks(&[",", "x"]),
        ] {
            assert_eq!(tokenize(&detokenize(&list)), list, "{list:?}");
        }
    }

    #[test]
    fn vocab_min_count_and_order() {
        let corpus = [tokenize("a a b")];
        let v = build_vocab(corpus.iter().map(Vec::as_slice), 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        let corpus = [tokenize("c b b a a")];
        let v = build_vocab(corpus.iter().map(Vec::as_slice), 1).unwrap();
        assert_eq!(v.content_tokens(), toks(&["a", "b", "c"]).as_slice());
        assert!(build_vocab(core::iter::empty(), 1).is_err());
    }

    #[test]
    fn encode_decode() {
        let corpus = [tokenize("the cat sat")];
        let v = build_vocab(corpus.iter().map(Vec::as_slice), 1).unwrap();
        let ids = v.encode(&tokenize("the dog sat"));
        assert_eq!(ids[1], Vocabulary::UNK_ID);
        assert_eq!(v.decode(&ids).unwrap(), toks(&["the", UNK, "sat"]));
        assert_eq!(v.decode(&v.encode(&corpus[0])).unwrap(), corpus[0]);
        assert!(matches!(v.decode(&[v.len()]), Err(Error::Index(_))));
    }

    #[test]
    fn who_only_mixture() {
        let mut cfg = GeneratorConfig::default();
        cfg.mixture = vec![0.0; 32];
        cfg.mixture[1] = 1.0;
        let samples = synth_generate(&cfg, 50, 3).unwrap();
        for s in &samples {
            assert_eq!(s.caption.entities.len(), 1);
            assert_eq!(s.caption.entities[0].ne_type, NeType::Person);
            assert_eq!(s.caption.gold_components, [true, false, false, false, false]);
        }
    }

    #[test]
    fn generated_samples_are_valid_and_consistent() {
        let cfg = GeneratorConfig::default();
        let samples = synth_generate(&cfg, 300, 9).unwrap();
        let mut agree = 0;
        for s in &samples {
            s.validate(Some(cfg.image_dim)).unwrap();
            let gold = ComponentVector::from_flags(s.caption.gold_components);
            assert_eq!(detect_components(&s.caption, true), gold);
            let heuristic = detect_components(&s.caption, false);
            assert_eq!(heuristic.0[..4], gold.0[..4]);
            agree += (heuristic == gold) as usize;
            // every caption entity also appears in the article
            for m in &s.caption.entities {
                assert!(s.article.entities.iter().any(|a| a.entity_id == m.entity_id));
            }
            assert!(s.article.tokens.len() >= cfg.article_len_min);
        }
        assert!(agree as f64 >= 0.95 * samples.len() as f64);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::default();
        assert_eq!(synth_generate(&cfg, 20, 5).unwrap(), synth_generate(&cfg, 20, 5).unwrap());
        assert_ne!(synth_generate(&cfg, 20, 5).unwrap(), synth_generate(&cfg, 20, 6).unwrap());
    }

    #[test]
    fn mixture_must_sum_to_one() {
        let mut cfg = GeneratorConfig::default();
        cfg.mixture[3] += 0.01;
        assert!(matches!(synth_generate(&cfg, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_sizes() {
        let items: Vec<usize> = (0..100).collect();
        let (a, b, c) = split(&items, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (100, 0, 0));
        let (a, b, c) = split(&items, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        assert!(split(&items, [0.5, 0.2, 0.2], 1).is_err());
        assert!(split(&items, [1.2, -0.2, 0.0], 1).is_err());
    }

    #[test]
    fn spans_are_validated() {
        let cfg = GeneratorConfig::default();
        let mut s = synth_generate(&cfg, 1, 0).unwrap().remove(0);
        s.caption.entities[0].end = s.caption.tokens.len() + 1;
        let err = s.validate(None).unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field == "caption_entities"));
    }

    #[test]
    fn inventory_longest_match() {
        let inv = EntityInventory::new(vec![
            InventoryEntry { id: "d".into(), ne_type: NeType::Date, surface: toks(&["March", "3"]) },
            InventoryEntry { id: "c".into(), ne_type: NeType::Cardinal, surface: toks(&["3"]) },
        ])
        .unwrap();
        let found = inv.extract(&toks(&["on", "March", "3", "and", "3"]));
        let ids: Vec<_> = found.iter().map(|m| m.entity_id.clone().unwrap()).collect();
        assert_eq!(ids, ["d", "c"]);
        assert_eq!((found[0].start, found[0].end), (1, 3));
    }
}

