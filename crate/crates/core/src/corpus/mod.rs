//! Line-level cleaning, merge-and-deduplicate, and corpus statistics for
//! distillation text.

mod language;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use language::language_gate;

/// Frequent Romanian proper nouns whose lowercase spelling signals a
/// carelessly written line.
pub const DEFAULT_NAMED_ENTITIES: &[&str] = &[
    "București",
    "România",
    "Cluj",
    "Iași",
    "Timișoara",
    "Constanța",
    "Brașov",
    "Craiova",
    "Galați",
    "Ploiești",
    "Oradea",
    "Sibiu",
    "Arad",
    "Bacău",
    "Pitești",
    "Suceava",
    "Moldova",
    "Transilvania",
    "Dunărea",
    "Carpați",
    "Europa",
    "Bucovina",
    "Maramureș",
    "Dobrogea",
    "Oltenia",
    "Muntenia",
    "Ardeal",
    "Prahova",
    "Argeș",
    "Mureș",
    "Tulcea",
    "Buzău",
    "Vaslui",
    "Botoșani",
    "Hunedoara",
    "Bistrița",
    "Zalău",
    "Giurgiu",
    "Călărași",
    "Focșani",
    "Brăila",
    "Reșița",
    "Târgoviște",
    "Sinaia",
    "Eminescu",
    "Enescu",
    "Brâncuși",
    "Caragiale",
    "Creangă",
    "Iohannis",
    "Ceaușescu",
    "Bruxelles",
];

/// Web boilerplate removed from the start of a line.
pub const DEFAULT_ARTIFACT_PREFIXES: &[&str] = &[
    "Articolul Anterior",
    "Articolul Următor",
    "Articolul urmator",
    "Citește și",
    "Citeste si",
    "Citește mai mult",
    "Sursa:",
];

/// Web boilerplate removed from the end of a line.
pub const DEFAULT_ARTIFACT_SUFFIXES: &[&str] = &[
    "Articolul Anterior",
    "Articolul Următor",
    "Citește mai mult",
    "Citeste mai mult",
    "Distribuie pe Facebook",
    "Vezi galeria foto",
    "Comentarii",
];

/// Configuration of [`clean_line`]. Loadable from a TOML rules file whose
/// keys match the field names; missing keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningRules {
    /// Drop lines where `?` sits between two letters.
    pub diacritic_noise: bool,
    /// Capitalized forms; a line containing the lowercased form as a word is
    /// dropped.
    pub named_entities: Vec<String>,
    /// Lines scoring below this in [`language_gate`] are dropped.
    pub language_threshold: f64,
    pub artifact_prefixes: Vec<String>,
    pub artifact_suffixes: Vec<String>,
}

impl Default for CleaningRules {
    fn default() -> Self {
        let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            diacritic_noise: true,
            named_entities: owned(DEFAULT_NAMED_ENTITIES),
            language_threshold: 0.5,
            artifact_prefixes: owned(DEFAULT_ARTIFACT_PREFIXES),
            artifact_suffixes: owned(DEFAULT_ARTIFACT_SUFFIXES),
        }
    }
}

impl CleaningRules {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let r: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.language_threshold) {
            return Err(Error::Config(format!(
                "language_threshold {} not in [0,1]",
                self.language_threshold
            )));
        }
        if let Some(bad) = self
            .named_entities
            .iter()
            .find(|e| !e.chars().next().is_some_and(char::is_uppercase))
        {
            return Err(Error::Config(format!("named entity `{bad}` is not capitalized")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum DropReason {
    Empty,
    DiacriticNoise,
    UncapitalizedEntity { entity: String },
    Language { score: f64 },
}

impl DropReason {
    pub fn label(&self) -> &'static str {
        match self {
            DropReason::Empty => "empty",
            DropReason::DiacriticNoise => "diacritic-noise",
            DropReason::UncapitalizedEntity { .. } => "uncapitalized-ne",
            DropReason::Language { .. } => "language",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Keep(String),
    Drop(DropReason),
}

/// `letter ? letter`, the trace of a diacritic lost in an encoding round trip.
pub fn has_diacritic_noise(line: &str) -> bool {
    let chars: Vec<char> = line.chars().collect();
    chars
        .windows(3)
        .any(|w| w[1] == '?' && w[0].is_alphabetic() && w[2].is_alphabetic())
}

fn strip_artifacts(line: &str, rules: &CleaningRules) -> String {
    const JOINERS: &[char] = &[' ', '\t', ':', '-', '|', '»', '«', '–', '—', '.'];
    let mut s = line.trim();
    loop {
        let before = s.len();
        for p in &rules.artifact_prefixes {
            if let Some(rest) = s.strip_prefix(p.as_str()) {
                s = rest.trim_start_matches(JOINERS).trim();
            }
        }
        for p in &rules.artifact_suffixes {
            if let Some(rest) = s.strip_suffix(p.as_str()) {
                s = rest.trim_end_matches(|c| JOINERS.contains(&c) && c != '.').trim();
            }
        }
        if s.len() == before {
            return s.to_string();
        }
    }
}

fn lowercase_entity<'a>(line: &str, rules: &'a CleaningRules) -> Option<&'a String> {
    let words: HashSet<&str> = line
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    rules
        .named_entities
        .iter()
        .find(|e| words.contains(e.to_lowercase().as_str()))
}

/// Strips web artifacts, then drops the line for diacritic noise, a
/// lowercased named entity, or a low language score.
pub fn clean_line(line: &str, rules: &CleaningRules) -> Decision {
    let text = strip_artifacts(line, rules);
    if text.is_empty() {
        return Decision::Drop(DropReason::Empty);
    }
    if rules.diacritic_noise && has_diacritic_noise(&text) {
        return Decision::Drop(DropReason::DiacriticNoise);
    }
    if let Some(e) = lowercase_entity(&text, rules) {
        return Decision::Drop(DropReason::UncapitalizedEntity { entity: e.clone() });
    }
    if rules.language_threshold > 0.0 {
        let score = language_gate(&text);
        if score < rules.language_threshold {
            return Decision::Drop(DropReason::Language { score });
        }
    }
    Decision::Keep(text)
}

/// Kept lines of `lines`, in order.
pub fn clean_lines<'a, I>(lines: I, rules: &CleaningRules) -> Vec<String>
where
    I: IntoIterator<Item = &'a str>,
{
    lines
        .into_iter()
        .filter_map(|l| match clean_line(l, rules) {
            Decision::Keep(s) => Some(s),
            Decision::Drop(_) => None,
        })
        .collect()
}

/// Counts from one cleaning pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CleanReport {
    pub read: u64,
    pub kept: u64,
    pub empty: u64,
    pub diacritic_noise: u64,
    pub uncapitalized_ne: u64,
    pub language: u64,
}

/// Streams `input` through [`clean_line`] into `output`.
pub fn clean_file(input: &Path, output: &Path, rules: &CleaningRules) -> Result<CleanReport> {
    let reader = BufReader::new(File::open(input).map_err(|e| Error::io(input, e))?);
    let mut writer = BufWriter::new(File::create(output).map_err(|e| Error::io(output, e))?);
    let mut report = CleanReport::default();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(input, e))?;
        report.read += 1;
        match clean_line(&line, rules) {
            Decision::Keep(s) => {
                report.kept += 1;
                writeln!(writer, "{s}").map_err(|e| Error::io(output, e))?;
            }
            Decision::Drop(r) => match r {
                DropReason::Empty => report.empty += 1,
                DropReason::DiacriticNoise => report.diacritic_noise += 1,
                DropReason::UncapitalizedEntity { .. } => report.uncapitalized_ne += 1,
                DropReason::Language { .. } => report.language += 1,
            },
        }
    }
    writer.flush().map_err(|e| Error::io(output, e))?;
    Ok(report)
}

/// Line, word and byte counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub lines: u64,
    /// Whitespace-delimited tokens.
    pub words: u64,
    pub bytes: u64,
}

impl CorpusStats {
    fn add_line(&mut self, raw: &[u8]) {
        self.lines += 1;
        self.bytes += raw.len() as u64;
        self.words += String::from_utf8_lossy(raw).split_whitespace().count() as u64;
    }

    /// Single-line JSON record.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

/// 128-bit content hash of a line.
pub fn line_hash(line: &str) -> u128 {
    let digest = Sha256::digest(line.as_bytes());
    u128::from_le_bytes(digest[..16].try_into().unwrap())
}

fn for_each_line(path: &Path, mut f: impl FnMut(&[u8]) -> Result<()>) -> Result<()> {
    let mut reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Ok(());
        }
        f(&buf)?;
    }
}

/// Exact counts for a file. A final line without a newline still counts.
pub fn corpus_stats(path: impl AsRef<Path>) -> Result<CorpusStats> {
    let mut stats = CorpusStats::default();
    for_each_line(path.as_ref(), |raw| {
        stats.add_line(raw);
        Ok(())
    })?;
    Ok(stats)
}

/// Concatenates `inputs` into `output`, keeping the first occurrence of each
/// line (compared after trimming trailing whitespace). Memory grows with the
/// number of distinct lines only.
pub fn dedup_merge<P: AsRef<Path>>(inputs: &[P], output: impl AsRef<Path>) -> Result<CorpusStats> {
    let output = output.as_ref();
    let mut writer = BufWriter::new(File::create(output).map_err(|e| Error::io(output, e))?);
    let mut seen: HashSet<u128> = HashSet::new();
    let mut stats = CorpusStats::default();
    for input in inputs {
        let input: PathBuf = input.as_ref().to_path_buf();
        for_each_line(&input, |raw| {
            let text = String::from_utf8_lossy(raw);
            let line = text.trim_end();
            if seen.insert(line_hash(line)) {
                let mut out = line.as_bytes().to_vec();
                out.push(b'\n');
                writer.write_all(&out).map_err(|e| Error::io(output, e))?;
                stats.add_line(&out);
            }
            Ok(())
        })?;
    }
    writer.flush().map_err(|e| Error::io(output, e))?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rules() -> CleaningRules {
        CleaningRules::default()
    }

    #[test]
    fn fixture_behaviors() {
        assert_eq!(
            clean_line("c?nd plec acasă", &rules()),
            Decision::Drop(DropReason::DiacriticNoise)
        );
        let ne = CleaningRules {
            named_entities: vec!["București".into()],
            ..rules()
        };
        assert!(matches!(
            clean_line("am fost în bucurești ieri", &ne),
            Decision::Drop(DropReason::UncapitalizedEntity { .. })
        ));
        assert_eq!(
            clean_line("Articolul Anterior Guvernul a decis…", &rules()),
            Decision::Keep("Guvernul a decis…".into())
        );
    }

    #[test]
    fn interrogative_question_mark_is_kept() {
        assert!(!has_diacritic_noise("Unde ai fost ieri? Am fost acasă."));
        assert!(has_diacritic_noise("ce faci a?a"));
        assert!(matches!(
            clean_line("Unde ai fost ieri? Am fost acasă cu ei.", &rules()),
            Decision::Keep(_)
        ));
    }

    #[test]
    fn capitalized_entity_is_fine() {
        assert!(matches!(
            clean_line("Am fost în București ieri cu familia.", &rules()),
            Decision::Keep(_)
        ));
    }

    #[test]
    fn artifacts_stripped_on_both_ends() {
        let d = clean_line(
            "Articolul Anterior Citește și: Ministrul a demisionat după scandal. Articolul Următor",
            &rules(),
        );
        assert_eq!(d, Decision::Keep("Ministrul a demisionat după scandal.".into()));
        assert_eq!(
            clean_line("Articolul Anterior", &rules()),
            Decision::Drop(DropReason::Empty)
        );
    }

    #[test]
    fn foreign_lines_dropped() {
        assert!(matches!(
            clean_line("This is clearly an English sentence about the weather.", &rules()),
            Decision::Drop(DropReason::Language { .. })
        ));
    }

    #[test]
    fn rules_file_overrides() {
        let r = CleaningRules::from_toml_str(
            "named_entities = [\"Vaslui\"]\nlanguage_threshold = 0.0\nartifact_prefixes = [\"X:\"]\n",
        )
        .unwrap();
        assert_eq!(r.named_entities, vec!["Vaslui"]);
        assert_eq!(clean_line("X: hello there", &r), Decision::Keep("hello there".into()));
        assert!(CleaningRules::from_toml_str("named_entities = [\"vaslui\"]").is_err());
        assert!(CleaningRules::from_toml_str("language_threshold = 2.0").is_err());
    }

    #[test]
    fn stats_and_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("b.txt");
        let out = dir.path().join("out.txt");
        std::fs::write(&a, "a b\nc\n").unwrap();
        assert_eq!(
            corpus_stats(&a).unwrap(),
            CorpusStats {
                lines: 2,
                words: 3,
                bytes: "a b\nc\n".len() as u64
            }
        );
        std::fs::write(&b, "").unwrap();
        assert_eq!(corpus_stats(&b).unwrap(), CorpusStats::default());

        std::fs::write(&b, "x\nc  \na b\ny\nx\n").unwrap();
        let s = dedup_merge(&[&a, &b], &out).unwrap();
        assert_eq!(std::fs::read_to_string(&out).unwrap(), "a b\nc\nx\ny\n");
        assert_eq!(s, corpus_stats(&out).unwrap());
        assert_eq!(s.to_json_line(), r#"{"lines":4,"words":5,"bytes":10}"#);

        let missing = dir.path().join("nope.txt");
        assert!(matches!(dedup_merge(&[&missing], &out), Err(Error::Io { path, .. }) if path == missing));
    }
}
