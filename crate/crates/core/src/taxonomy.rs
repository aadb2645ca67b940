//! The five caption components, the named-entity type map, template
//! classes and corpus-level template statistics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Named-entity types, serialised as their uppercase tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NeType {
    Person,
    Norp,
    Org,
    Date,
    Time,
    Fac,
    Gpe,
    Loc,
    Product,
    Event,
    Art,
    Law,
    Lan,
    Percent,
    Money,
    Quantity,
    Ordinal,
    Cardinal,
}

impl NeType {
    pub const ALL: [NeType; 18] = [
        NeType::Person,
        NeType::Norp,
        NeType::Org,
        NeType::Date,
        NeType::Time,
        NeType::Fac,
        NeType::Gpe,
        NeType::Loc,
        NeType::Product,
        NeType::Event,
        NeType::Art,
        NeType::Law,
        NeType::Lan,
        NeType::Percent,
        NeType::Money,
        NeType::Quantity,
        NeType::Ordinal,
        NeType::Cardinal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NeType::Person => "PERSON",
            NeType::Norp => "NORP",
            NeType::Org => "ORG",
            NeType::Date => "DATE",
            NeType::Time => "TIME",
            NeType::Fac => "FAC",
            NeType::Gpe => "GPE",
            NeType::Loc => "LOC",
            NeType::Product => "PRODUCT",
            NeType::Event => "EVENT",
            NeType::Art => "ART",
            NeType::Law => "LAW",
            NeType::Lan => "LAN",
            NeType::Percent => "PERCENT",
            NeType::Money => "MONEY",
            NeType::Quantity => "QUANTITY",
            NeType::Ordinal => "ORDINAL",
            NeType::Cardinal => "CARDINAL",
        }
    }

    /// The caption component this entity type realises. Never `Context`.
    pub fn component(self) -> Component {
        match self {
            NeType::Person | NeType::Norp | NeType::Org => Component::Who,
            NeType::Date | NeType::Time => Component::When,
            NeType::Fac | NeType::Gpe | NeType::Loc => Component::Where,
            _ => Component::Misc,
        }
    }
}

/// Free-function form of [`NeType::component`].
pub fn map_ne_type(t: NeType) -> Component {
    t.component()
}

impl fmt::Display for NeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NeType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::validation("ne_type", format!("unknown entity type `{s}`")))
    }
}

/// Template components in their fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Who,
    When,
    Where,
    Misc,
    Context,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Who,
        Component::When,
        Component::Where,
        Component::Misc,
        Component::Context,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Who => "who",
            Component::When => "when",
            Component::Where => "where",
            Component::Misc => "misc",
            Component::Context => "context",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Five weights over (who, when, where, misc, context).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentVector(pub [f64; 5]);

impl ComponentVector {
    pub const ZERO: ComponentVector = ComponentVector([0.0; 5]);

    pub fn new(alpha: [f64; 5]) -> Result<Self> {
        let v = ComponentVector(alpha);
        v.check_range()?;
        Ok(v)
    }

    pub fn from_flags(flags: [bool; 5]) -> Self {
        ComponentVector(flags.map(|b| if b { 1.0 } else { 0.0 }))
    }

    pub fn one_hot(c: Component) -> Self {
        let mut a = [0.0; 5];
        a[c.index()] = 1.0;
        ComponentVector(a)
    }

    pub fn get(&self, c: Component) -> f64 {
        self.0[c.index()]
    }

    pub fn is_binary(&self) -> bool {
        self.0.iter().all(|&a| a == 0.0 || a == 1.0)
    }

    /// Every weight must lie in `[0, 1]`.
    pub fn check_range(&self) -> Result<()> {
        match self.0.iter().position(|a| !(0.0..=1.0).contains(a)) {
            Some(i) => Err(Error::Contract(format!(
                "alpha[{}] = {} is outside [0, 1]",
                Component::ALL[i],
                self.0[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn flags(&self) -> Result<[bool; 5]> {
        if !self.is_binary() {
            return Err(Error::Contract(format!("component vector {:?} is not binary", self.0)));
        }
        Ok(self.0.map(|a| a == 1.0))
    }

    /// Threshold probabilities into presence flags.
    pub fn threshold(&self, cut: f64) -> [bool; 5] {
        self.0.map(|a| a >= cut)
    }
}

/// One of the 32 subsets of components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateClass(u8);

impl TemplateClass {
    pub const COUNT: usize = 32;

    pub fn new(id: u8) -> Result<Self> {
        if (id as usize) < Self::COUNT {
            Ok(TemplateClass(id))
        } else {
            Err(Error::Input(format!("template class {id} outside [0, 32)")))
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }

    /// Bit `i` (who = bit 0 ... context = bit 4) marks component `i`.
    pub fn from_flags(flags: [bool; 5]) -> Self {
        TemplateClass(flags.iter().enumerate().map(|(i, &b)| (b as u8) << i).sum())
    }

    pub fn flags(self) -> [bool; 5] {
        core::array::from_fn(|i| self.0 >> i & 1 == 1)
    }

    pub fn components(self) -> Vec<Component> {
        Component::ALL.into_iter().filter(|c| self.flags()[c.index()]).collect()
    }

    pub fn all() -> impl Iterator<Item = TemplateClass> {
        (0..Self::COUNT as u8).map(TemplateClass)
    }
}

/// Binary component vector to its template class.
pub fn template_class(v: &ComponentVector) -> Result<TemplateClass> {
    Ok(TemplateClass::from_flags(v.flags()?))
}

/// Template class back to its binary component vector.
pub fn component_vector(class: TemplateClass) -> ComponentVector {
    ComponentVector::from_flags(class.flags())
}

/// The 50 most frequent English function words. Version 1.
pub const STOP_WORDS: [&str; 50] = [
    "the", "of", "and", "a", "to", "in", "is", "you", "that", "it", "he", "was", "for", "on",
    "are", "as", "with", "his", "they", "i", "at", "be", "this", "have", "from", "or", "one",
    "had", "by", "but", "not", "what", "all", "were", "we", "when", "your", "can", "said",
    "there", "an", "which", "she", "do", "their", "if", "will", "up", "her", "him",
];
pub const STOP_WORDS_VERSION: u32 = 1;

/// Default minimum count of non-entity content tokens that marks context.
pub const DEFAULT_CONTEXT_THRESHOLD: usize = 3;

pub fn is_stop_word(token: &str) -> bool {
    let lower = token.to_lowercase();
    STOP_WORDS.contains(&lower.as_str())
}

fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c.is_ascii_punctuation())
}

/// A caption seen as tokens plus typed entity spans.
pub trait ComponentSource {
    fn tokens(&self) -> &[String];
    /// `(start, end, type)` for each entity span.
    fn entity_spans(&self) -> Vec<(usize, usize, NeType)>;
    fn gold_context(&self) -> Option<bool>;
}

/// Count of tokens outside every entity span that are neither stop words
/// nor punctuation.
pub fn content_token_count(tokens: &[String], spans: &[(usize, usize, NeType)]) -> usize {
    tokens
        .iter()
        .enumerate()
        .filter(|(i, _)| !spans.iter().any(|(s, e, _)| (*s..*e).contains(i)))
        .filter(|(_, t)| !is_stop_word(t) && !is_punctuation(t))
        .count()
}

/// Presence flags for the five components.
///
/// Who/when/where/misc come from entity types. Context is the gold flag
/// when `use_gold_context` is set (and one is available), else the
/// content-token heuristic with the given threshold.
pub fn detect_components_with<S: ComponentSource + ?Sized>(
    caption: &S,
    use_gold_context: bool,
    context_threshold: usize,
) -> ComponentVector {
    let spans = caption.entity_spans();
    let mut flags = [false; 5];
    for (_, _, t) in &spans {
        flags[t.component().index()] = true;
    }
    flags[Component::Context.index()] = match caption.gold_context() {
        Some(gold) if use_gold_context => gold,
        _ => content_token_count(caption.tokens(), &spans) >= context_threshold,
    };
    ComponentVector::from_flags(flags)
}

pub fn detect_components<S: ComponentSource + ?Sized>(caption: &S, use_gold_context: bool) -> ComponentVector {
    detect_components_with(caption, use_gold_context, DEFAULT_CONTEXT_THRESHOLD)
}

/// One row of a class histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShare {
    pub class_id: u8,
    pub components: Vec<Component>,
    pub percent: f64,
    pub count: usize,
}

/// Percentages over all 32 classes, sorted by share (descending), ties by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub total: usize,
    pub classes: Vec<ClassShare>,
}

impl ClassDistribution {
    pub fn top(&self) -> &ClassShare {
        &self.classes[0]
    }

    pub fn percent_of(&self, class: TemplateClass) -> f64 {
        self.classes
            .iter()
            .find(|c| c.class_id == class.id())
            .map_or(0.0, |c| c.percent)
    }

    /// Largest minus smallest share among classes that occur.
    pub fn spread(&self) -> f64 {
        let present: Vec<f64> = self.classes.iter().filter(|c| c.count > 0).map(|c| c.percent).collect();
        let max = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = present.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    /// Component marginals implied by the class shares.
    pub fn implied_component_percentages(&self) -> [f64; 5] {
        let mut out = [0.0; 5];
        for share in &self.classes {
            let flags = TemplateClass(share.class_id).flags();
            for i in 0..5 {
                if flags[i] {
                    out[i] += share.percent;
                }
            }
        }
        out
    }

    /// Fixed-width text table, one class per line.
    pub fn render(&self) -> String {
        let mut s = String::from("class  percent  count  who when where misc context\n");
        for c in &self.classes {
            let flags = TemplateClass(c.class_id).flags();
            let mark = |b: bool| if b { "x" } else { "-" };
            s.push_str(&format!(
                "{:>5}  {:>7.3}  {:>5}  {:>3} {:>4} {:>5} {:>4} {:>7}\n",
                c.class_id,
                c.percent,
                c.count,
                mark(flags[0]),
                mark(flags[1]),
                mark(flags[2]),
                mark(flags[3]),
                mark(flags[4])
            ));
        }
        s
    }
}

/// Histogram of template classes over a set of binary component vectors.
pub fn class_distribution(vectors: &[ComponentVector]) -> Result<ClassDistribution> {
    if vectors.is_empty() {
        return Err(Error::Input("class distribution of an empty corpus".into()));
    }
    let mut counts = [0usize; 32];
    for v in vectors {
        counts[template_class(v)?.id() as usize] += 1;
    }
    let total = vectors.len();
    let mut classes: Vec<ClassShare> = TemplateClass::all()
        .map(|c| ClassShare {
            class_id: c.id(),
            components: c.components(),
            percent: 100.0 * counts[c.id() as usize] as f64 / total as f64,
            count: counts[c.id() as usize],
        })
        .collect();
    classes.sort_by(|a, b| b.count.cmp(&a.count).then(a.class_id.cmp(&b.class_id)));
    Ok(ClassDistribution { total, classes })
}

/// Per-component presence rate, in percent.
pub fn component_frequencies(vectors: &[ComponentVector]) -> Result<[f64; 5]> {
    if vectors.is_empty() {
        return Err(Error::Input("component frequencies of an empty corpus".into()));
    }
    let mut counts = [0usize; 5];
    for v in vectors {
        let flags = v.flags()?;
        for i in 0..5 {
            counts[i] += flags[i] as usize;
        }
    }
    Ok(counts.map(|c| 100.0 * c as f64 / vectors.len() as f64))
}

/// Template-class shares over 2% in the GoodNews training captions, as
/// `(percent, [who, when, where, misc, context])`. The listed shares sum
/// to 95.3%.
pub const GOODNEWS_TEMPLATE_SHARES: [(f64, [bool; 5]); 15] = [
    (15.2, [true, true, true, true, false]),
    (4.4, [true, false, false, false, false]),
    (4.2, [true, false, true, false, false]),
    (3.5, [true, true, true, false, false]),
    (2.8, [true, false, false, true, false]),
    (2.6, [true, true, false, false, false]),
    (13.1, [true, false, false, false, true]),
    (12.7, [true, false, true, false, true]),
    (7.7, [true, true, false, false, true]),
    (7.3, [true, false, false, true, true]),
    (6.8, [true, true, true, true, true]),
    (5.3, [true, false, true, true, true]),
    (5.1, [true, true, false, true, true]),
    (2.4, [false, false, true, false, true]),
    (2.2, [false, false, false, false, true]),
];

/// The table above renormalised into a 32-way mixture.
pub fn goodnews_mixture() -> [f64; 32] {
    let total: f64 = GOODNEWS_TEMPLATE_SHARES.iter().map(|(p, _)| p).sum();
    let mut mix = [0.0; 32];
    for (p, flags) in GOODNEWS_TEMPLATE_SHARES {
        mix[TemplateClass::from_flags(flags).id() as usize] = p / total;
    }
    mix
}

/// Parse a name such as `who` into a component.
impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown component `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    struct Cap {
        tokens: Vec<String>,
        spans: Vec<(usize, usize, NeType)>,
        context: Option<bool>,
    }

    impl ComponentSource for Cap {
        fn tokens(&self) -> &[String] {
            &self.tokens
        }
        fn entity_spans(&self) -> Vec<(usize, usize, NeType)> {
            self.spans.clone()
        }
        fn gold_context(&self) -> Option<bool> {
            self.context
        }
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn table_rows() {
        assert_eq!(map_ne_type(NeType::Person), Component::Who);
        assert_eq!(map_ne_type(NeType::Date), Component::When);
        assert_eq!(map_ne_type(NeType::Cardinal), Component::Misc);
        let who: Vec<_> = NeType::ALL.into_iter().filter(|t| t.component() == Component::Who).collect();
        assert_eq!(who, vec![NeType::Person, NeType::Norp, NeType::Org]);
        assert_eq!(NeType::ALL.iter().filter(|t| t.component() == Component::Misc).count(), 10);
        assert!(NeType::ALL.iter().all(|t| t.component() != Component::Context));
    }

    #[test]
    fn ne_type_parse_round_trip() {
        for t in NeType::ALL {
            assert_eq!(t.as_str().parse::<NeType>().unwrap(), t);
        }
        assert!("Person".parse::<NeType>().is_err());
        assert!("MISC".parse::<NeType>().is_err());
    }

    #[test]
    fn person_and_place_with_stop_words() {
        let cap = Cap {
            tokens: toks("Ana Berg in the Oslo"),
            spans: vec![(0, 2, NeType::Person), (4, 5, NeType::Gpe)],
            context: Some(true),
        };
        assert_eq!(detect_components(&cap, false).0, [1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(detect_components(&cap, true).0, [1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_caption_has_nothing() {
        let cap = Cap { tokens: vec![], spans: vec![], context: None };
        assert_eq!(detect_components(&cap, false), ComponentVector::ZERO);
        assert_eq!(detect_components(&cap, true), ComponentVector::ZERO);
    }

    #[test]
    fn heuristic_counts_content_words() {
        let cap = Cap {
            tokens: toks("Ana spoke about budget cuts ."),
            spans: vec![(0, 1, NeType::Person)],
            context: None,
        };
        assert_eq!(content_token_count(&cap.tokens, &cap.spans), 4);
        assert_eq!(detect_components(&cap, false).get(Component::Context), 1.0);
        assert_eq!(detect_components_with(&cap, false, 5).get(Component::Context), 0.0);
    }

    #[test]
    fn class_bits() {
        assert_eq!(template_class(&ComponentVector::ZERO).unwrap().id(), 0);
        let v = ComponentVector([1.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(template_class(&v).unwrap().id(), 15);
        assert!(matches!(template_class(&ComponentVector([0.5; 5])), Err(Error::Contract(_))));
    }

    #[test]
    fn class_round_trip_is_exhaustive_bijection() {
        let mut seen = [false; 32];
        for c in TemplateClass::all() {
            let v = component_vector(c);
            let back = template_class(&v).unwrap();
            assert_eq!(back, c);
            seen[back.id() as usize] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn single_class_histogram() {
        let v = vec![ComponentVector::one_hot(Component::Who); 7];
        let d = class_distribution(&v).unwrap();
        assert_eq!(d.top().class_id, 1);
        assert_eq!(d.top().percent, 100.0);
        let total: f64 = d.classes.iter().map(|c| c.percent).sum();
        assert!((total - 100.0).abs() < 1e-9);
        assert_eq!(d.classes.len(), 32);
        assert_eq!(component_frequencies(&v).unwrap(), [100.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(class_distribution(&[]).is_err());
        assert!(component_frequencies(&[]).is_err());
    }

    #[test]
    fn goodnews_mixture_top_class() {
        let mix = goodnews_mixture();
        assert!((mix.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let top = (0..32).max_by(|&a, &b| mix[a].partial_cmp(&mix[b]).unwrap()).unwrap();
        assert_eq!(top, 15);
        assert!((mix[15] - 15.2 / 95.3).abs() < 1e-12);
        assert_eq!(mix[0], 0.0);
    }

    #[test]
    fn alpha_range_is_checked() {
        assert!(ComponentVector::new([0.0, 0.5, 1.0, 0.2, 0.9]).is_ok());
        assert!(matches!(ComponentVector::new([1.1, 0.0, 0.0, 0.0, 0.0]), Err(Error::Contract(_))));
    }
}
