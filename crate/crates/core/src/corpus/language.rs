//! Romanian-or-not scoring from character trigrams and stopwords.
//!
//! Trigram log-likelihoods are estimated from short embedded samples of
//! Romanian and five contrast languages. A line's trigram score compares its
//! mean per-trigram log-likelihood under the Romanian profile with the best
//! contrast profile; the stopword score is the share of Romanian function
//! words among its tokens.

use std::collections::HashMap;
use std::sync::OnceLock;

const ROMANIAN: &str = include_str!("profiles/ro.txt");
const CONTRAST: [&str; 5] = [
    include_str!("profiles/en.txt"),
    include_str!("profiles/fr.txt"),
    include_str!("profiles/it.txt"),
    include_str!("profiles/es.txt"),
    include_str!("profiles/de.txt"),
];

const STOPWORDS: &[&str] = &[
    "a", "acest", "această", "acum", "aici", "al", "ale", "am", "au", "avea", "ca", "care", "cu", "când", "ce", "cel",
    "cea", "cum", "că", "de", "despre", "din", "după", "ea", "ei", "el", "este", "fi", "fost", "foarte", "fără", "iar",
    "la", "le", "lui", "mai", "nu", "o", "pe", "pentru", "prin", "până", "sau", "se", "sunt", "să", "sa", "si", "și",
    "toate", "tot", "un", "una", "unde", "va", "vor", "în", "între", "își", "însă", "îi", "ne", "mi", "dar", "doar",
    "deja", "fiecare", "acolo", "dacă", "daca", "fie", "noi", "voi", "eu",
];

/// Weight of the trigram score; the stopword score gets the rest.
const TRIGRAM_WEIGHT: f64 = 0.75;
/// Stopword share treated as fully Romanian.
const STOPWORD_SATURATION: f64 = 0.25;
/// Weight of the uniform component in each profile's trigram estimate.
const UNIFORM_MIX: f64 = 0.1;
/// Nominal number of distinct trigrams the uniform component spreads over.
const TRIGRAM_SPACE: f64 = 30_000.0;
/// Slope of the logistic map from log-likelihood margin to probability.
const MARGIN_SLOPE: f64 = 6.0;

struct Profile {
    log_probs: HashMap<[char; 3], f64>,
    unseen: f64,
}

impl Profile {
    fn train(text: &str) -> Self {
        let mut counts: HashMap<[char; 3], f64> = HashMap::new();
        for t in trigrams(text) {
            *counts.entry(t).or_default() += 1.0;
        }
        let total: f64 = counts.values().sum();
        // Interpolation with a uniform distribution keeps estimates
        // comparable between profiles trained on different amounts of text.
        let floor = UNIFORM_MIX / TRIGRAM_SPACE;
        let log_probs = counts
            .into_iter()
            .map(|(k, c)| (k, ((1.0 - UNIFORM_MIX) * c / total + floor).ln()))
            .collect();
        Self {
            log_probs,
            unseen: floor.ln(),
        }
    }

    fn mean_log_likelihood(&self, grams: &[[char; 3]]) -> f64 {
        let s: f64 = grams
            .iter()
            .map(|g| self.log_probs.get(g).copied().unwrap_or(self.unseen))
            .sum();
        s / grams.len() as f64
    }
}

struct Model {
    romanian: Profile,
    contrast: Vec<Profile>,
}

fn model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| Model {
        romanian: Profile::train(ROMANIAN),
        contrast: CONTRAST.iter().map(|t| Profile::train(t)).collect(),
    })
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .map(|w| w.chars().flat_map(char::to_lowercase).map(normalize_cedilla).collect())
}

/// Maps legacy cedilla forms to the comma-below letters.
fn normalize_cedilla(c: char) -> char {
    match c {
        'ş' => 'ș',
        'ţ' => 'ț',
        other => other,
    }
}

fn trigrams(text: &str) -> Vec<[char; 3]> {
    let mut out = Vec::new();
    for w in words(text) {
        let chars: Vec<char> = std::iter::once(' ')
            .chain(w.chars())
            .chain(std::iter::once(' '))
            .collect();
        out.extend(chars.windows(3).map(|c| [c[0], c[1], c[2]]));
    }
    out
}

/// Probability-like score in `[0, 1]` that `line` is Romanian. Lines without
/// letters score 0.
pub fn language_gate(line: &str) -> f64 {
    let grams = trigrams(line);
    if grams.is_empty() {
        return 0.0;
    }
    let m = model();
    let ro = m.romanian.mean_log_likelihood(&grams);
    let other = m
        .contrast
        .iter()
        .map(|p| p.mean_log_likelihood(&grams))
        .fold(f64::NEG_INFINITY, f64::max);
    let trigram_score = 1.0 / (1.0 + (-MARGIN_SLOPE * (ro - other)).exp());

    let tokens: Vec<String> = words(line).collect();
    let stop = tokens.iter().filter(|w| STOPWORDS.contains(&w.as_str())).count();
    let stop_share = stop as f64 / tokens.len() as f64;
    let stop_score = (stop_share / STOPWORD_SATURATION).min(1.0);

    (TRIGRAM_WEIGHT * trigram_score + (1.0 - TRIGRAM_WEIGHT) * stop_score).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    const RO: &[&str] = &[
        "Ieri seară am mers la teatru împreună cu prietenii mei din copilărie.",
        "Parlamentul a adoptat legea privind protecția datelor personale după o dezbatere lungă.",
        "Copiii se joacă în parc până când se întunecă, apoi se întorc acasă la cină.",
        "Prețul benzinei a crescut din nou în această săptămână, potrivit datelor oficiale.",
        "Nu stiu daca vom ajunge la timp, dar incercam sa plecam cat mai devreme.",
    ];
    const OTHER: &[&str] = &[
        "The quick brown fox jumps over the lazy dog near the river bank.",
        "Yesterday evening we went to the theatre together with our oldest friends.",
        "Il parlamento ha approvato la legge sulla protezione dei dati personali.",
        "Les enfants jouent dans le parc jusqu'à la tombée de la nuit.",
        "Der Preis für Benzin ist diese Woche erneut gestiegen.",
        "El precio de la gasolina volvió a subir esta semana según los datos oficiales.",
    ];

    #[test]
    fn separates_fixture_sentences() {
        for s in RO {
            let p = language_gate(s);
            assert!(p > 0.5, "{p:.3} for {s}");
        }
        for s in OTHER {
            let p = language_gate(s);
            assert!(p < 0.5, "{p:.3} for {s}");
        }
    }

    #[test]
    fn degenerate_inputs_score_zero() {
        assert_eq!(language_gate(""), 0.0);
        assert_eq!(language_gate("   123 456 !!"), 0.0);
    }

    #[test]
    fn scores_are_probabilities() {
        for s in RO.iter().chain(OTHER) {
            let p = language_gate(s);
            assert!((0.0..=1.0).contains(&p));
        }
    }
}
