//! Review ingestion: parsing raw quintuples, tokenization, vocabulary
//! construction, light-user grouping and the train/validation/test split.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_SCHEMA: &str = "corpus_v1";
pub const SPLIT_SCHEMA: &str = "split_v1";

/// Name given to the pseudo-user that pools all light users.
pub const BACKGROUND_USER: &str = "__background__";

/// Closed interval of admissible ratings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
}

impl Default for RatingScale {
    fn default() -> Self {
        RatingScale { min: 1.0, max: 5.0 }
    }
}

impl RatingScale {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::invalid(format!("bad rating scale [{min}, {max}]")));
        }
        Ok(RatingScale { min, max })
    }

    pub fn contains(&self, r: f64) -> bool {
        r.is_finite() && r >= self.min && r <= self.max
    }

    pub fn clamp(&self, r: f64) -> f64 {
        if r.is_nan() {
            return self.min;
        }
        r.clamp(self.min, self.max)
    }
}

/// One review as found in the input: `<user, item, timestamp, rating, text>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawReview {
    pub user_id: String,
    pub item_id: String,
    /// Days since epoch.
    pub timestamp: i64,
    pub rating: f64,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputFormat {
    Tsv,
    JsonLines,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(InputFormat::Tsv),
            "jsonl" | "json-lines" | "jsonlines" => Ok(InputFormat::JsonLines),
            other => Err(Error::invalid(format!("unknown input format '{other}'"))),
        }
    }
}

impl InputFormat {
    /// Guess the format from a file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => InputFormat::JsonLines,
            _ => InputFormat::Tsv,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedReviews {
    pub reviews: Vec<RawReview>,
    pub malformed: usize,
    /// One message per skipped record, carrying its 1-based line number.
    pub warnings: Vec<String>,
}

/// Parse a review stream. Malformed records are skipped and reported; an
/// unreadable stream (I/O failure, invalid UTF-8) is fatal.
pub fn parse_reviews<R: Read>(
    input: R,
    format: InputFormat,
    scale: &RatingScale,
) -> Result<ParsedReviews> {
    let reader = BufReader::new(input);
    let mut out = ParsedReviews::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            InputFormat::Tsv => parse_tsv_line(&line),
            InputFormat::JsonLines => serde_json::from_str::<RawReview>(&line)
                .map_err(|e| format!("bad json record: {e}")),
        };
        let checked = parsed.and_then(|r| {
            if r.timestamp < 0 {
                Err(format!("negative timestamp {}", r.timestamp))
            } else if !scale.contains(r.rating) {
                Err(format!(
                    "rating {} outside [{}, {}]",
                    r.rating, scale.min, scale.max
                ))
            } else {
                Ok(r)
            }
        });
        match checked {
            Ok(r) => {
                if r.text.trim().is_empty() {
                    debug!("line {lineno}: empty review text");
                }
                out.reviews.push(r)
            }
            Err(msg) => {
                let msg = format!("line {lineno}: {msg}");
                warn!("skipping malformed record, {msg}");
                out.malformed += 1;
                out.warnings.push(msg);
            }
        }
    }
    Ok(out)
}

fn parse_tsv_line(line: &str) -> std::result::Result<RawReview, String> {
    let fields: Vec<&str> = line.splitn(5, '\t').collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 tab-separated fields, found {}", fields.len()));
    }
    let timestamp = fields[2]
        .trim()
        .parse::<i64>()
        .map_err(|e| format!("bad timestamp '{}': {e}", fields[2]))?;
    let rating = fields[3]
        .trim()
        .parse::<f64>()
        .map_err(|e| format!("bad rating '{}': {e}", fields[3]))?;
    Ok(RawReview {
        user_id: fields[0].to_string(),
        item_id: fields[1].to_string(),
        timestamp,
        rating,
        text: fields[4].to_string(),
    })
}

pub fn read_reviews(path: &Path, scale: &RatingScale) -> Result<ParsedReviews> {
    let file = File::open(path)?;
    parse_reviews(file, InputFormat::from_path(path), scale)
}

/// Write reviews as the 5-column TSV format. Tabs and newlines inside the
/// text are replaced by spaces.
pub fn write_reviews_tsv<W: Write>(out: W, reviews: &[RawReview]) -> Result<()> {
    let mut out = BufWriter::new(out);
    for r in reviews {
        let text: String = r
            .text
            .chars()
            .map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c })
            .collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.user_id, r.item_id, r.timestamp, r.rating, text
        )?;
    }
    out.flush()?;
    Ok(())
}

const STOPWORDS: &[&str] = &[
    "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];

/// Lowercasing tokenizer splitting on non-alphanumeric runs. Tokens shorter
/// than two characters are dropped, and so are English stopwords when enabled.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    stopwords: Option<HashSet<&'static str>>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::new(true)
    }
}

impl Tokenizer {
    pub fn new(remove_stopwords: bool) -> Self {
        let stopwords = remove_stopwords.then(|| STOPWORDS.iter().copied().collect());
        Tokenizer { stopwords }
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| t.chars().count() >= 2)
            .map(str::to_lowercase)
            .filter(|t| match &self.stopwords {
                Some(stop) => !stop.contains(t.as_str()),
                None => true,
            })
            .collect()
    }
}

/// Tokenize with the default settings (stopwords removed).
pub fn tokenize(text: &str) -> Vec<String> {
    Tokenizer::default().tokenize(text)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub min_user_reviews: usize,
    pub min_word_count: u64,
    pub remove_stopwords: bool,
    pub scale: RatingScale,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            min_user_reviews: 50,
            min_word_count: 5,
            remove_stopwords: true,
            scale: RatingScale::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    /// Position of the document in the full corpus it was built from.
    pub doc_id: usize,
    pub user: usize,
    pub item: usize,
    /// Days since epoch.
    pub time: i64,
    pub rating: f64,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub schema: String,
    pub users: Vec<String>,
    pub background: Option<usize>,
    /// Every raw user id seen at build time, light users pointing at the
    /// background user.
    pub user_lookup: BTreeMap<String, usize>,
    pub items: Vec<String>,
    pub vocab: Vec<String>,
    pub word_counts: Vec<u64>,
    pub docs: Vec<Document>,
    /// Positions into `docs`, per user, ordered by (time, input order).
    pub per_user_docs: Vec<Vec<usize>>,
    pub d_avg: f64,
    pub scale: RatingScale,
    pub remove_stopwords: bool,
}

impl Corpus {
    pub fn build(reviews: &[RawReview], config: &CorpusConfig) -> Result<Corpus> {
        if reviews.is_empty() {
            return Err(Error::invalid("no reviews to build a corpus from"));
        }
        let tokenizer = Tokenizer::new(config.remove_stopwords);
        let tokenized: Vec<Vec<String>> =
            reviews.iter().map(|r| tokenizer.tokenize(&r.text)).collect();

        let mut counts: HashMap<&str, u64> = HashMap::new();
        for toks in &tokenized {
            for t in toks {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut vocab: Vec<String> = counts
            .iter()
            .filter(|(_, &c)| c >= config.min_word_count)
            .map(|(w, _)| w.to_string())
            .collect();
        vocab.sort();
        let word_counts: Vec<u64> = vocab.iter().map(|w| counts[w.as_str()]).collect();
        let word_index: HashMap<&str, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i as u32))
            .collect();

        // Documents left without in-vocabulary tokens cannot enter the sampler.
        let mut kept: Vec<(usize, Vec<u32>)> = Vec::with_capacity(reviews.len());
        let mut dropped = 0usize;
        for (i, toks) in tokenized.iter().enumerate() {
            let ids: Vec<u32> = toks
                .iter()
                .filter_map(|t| word_index.get(t.as_str()).copied())
                .collect();
            if ids.is_empty() {
                dropped += 1;
            } else {
                kept.push((i, ids));
            }
        }
        if kept.is_empty() {
            return Err(Error::invalid(
                "every document is empty after tokenization and vocabulary pruning",
            ));
        }
        if dropped > 0 {
            warn!("dropped {dropped} documents with no in-vocabulary tokens");
        }

        let mut per_raw_user: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, _) in &kept {
            *per_raw_user.entry(reviews[*i].user_id.as_str()).or_insert(0) += 1;
        }
        let mut users: Vec<String> = per_raw_user
            .iter()
            .filter(|(_, &n)| n >= config.min_user_reviews)
            .map(|(u, _)| u.to_string())
            .collect();
        let has_light = per_raw_user.values().any(|&n| n < config.min_user_reviews);
        let background = if has_light {
            users.push(BACKGROUND_USER.to_string());
            Some(users.len() - 1)
        } else {
            None
        };
        let heavy_index: HashMap<&str, usize> = users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.as_str(), i))
            .collect();
        let mut user_lookup = BTreeMap::new();
        for (&raw, &n) in &per_raw_user {
            let idx = if n >= config.min_user_reviews {
                heavy_index[raw]
            } else {
                background.expect("light user implies background")
            };
            user_lookup.insert(raw.to_string(), idx);
        }

        let item_set: BTreeSet<&str> = kept.iter().map(|(i, _)| reviews[*i].item_id.as_str()).collect();
        let items: Vec<String> = item_set.iter().map(|s| s.to_string()).collect();
        let item_index: HashMap<&str, usize> =
            items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

        let docs: Vec<Document> = kept
            .into_iter()
            .enumerate()
            .map(|(pos, (i, tokens))| {
                let r = &reviews[i];
                Document {
                    doc_id: pos,
                    user: user_lookup[r.user_id.as_str()],
                    item: item_index[r.item_id.as_str()],
                    time: r.timestamp,
                    rating: r.rating,
                    tokens,
                }
            })
            .collect();

        let mut corpus = Corpus {
            schema: CORPUS_SCHEMA.to_string(),
            users,
            background,
            user_lookup,
            items,
            vocab,
            word_counts,
            docs,
            per_user_docs: Vec::new(),
            d_avg: 0.0,
            scale: config.scale,
            remove_stopwords: config.remove_stopwords,
        };
        corpus.reindex();
        Ok(corpus)
    }

    /// Recompute per-user ordering and `d_avg` from `docs`.
    pub(crate) fn reindex(&mut self) {
        let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); self.users.len()];
        for (pos, d) in self.docs.iter().enumerate() {
            per_user[d.user].push(pos);
        }
        for list in &mut per_user {
            // stable: equal timestamps keep input order
            list.sort_by_key(|&p| self.docs[p].time);
        }
        self.per_user_docs = per_user;
        self.d_avg = if self.users.is_empty() {
            0.0
        } else {
            self.docs.len() as f64 / self.users.len() as f64
        };
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.docs.iter().map(|d| d.tokens.len()).sum()
    }

    /// Number of documents of `user` in this corpus.
    pub fn user_doc_count(&self, user: usize) -> usize {
        self.per_user_docs[user].len()
    }

    /// Index of a raw user id; unknown ids map to the background user.
    pub fn user_index(&self, raw: &str) -> Option<usize> {
        self.user_lookup.get(raw).copied().or(self.background)
    }

    pub fn item_index(&self, raw: &str) -> Option<usize> {
        self.items.binary_search_by(|s| s.as_str().cmp(raw)).ok()
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.remove_stopwords)
    }

    /// Tokenize free text against this corpus' vocabulary, dropping unknown words.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.tokenizer()
            .tokenize(text)
            .iter()
            .filter_map(|w| self.vocab.binary_search(w).ok().map(|i| i as u32))
            .collect()
    }

    /// A corpus restricted to the given document ids. Users, items and the
    /// vocabulary keep their indices; `doc_id` keeps pointing into the
    /// original corpus and `d_avg` is recomputed over the kept documents.
    pub fn subset(&self, doc_ids: &[usize]) -> Corpus {
        let wanted: BTreeSet<usize> = doc_ids.iter().copied().collect();
        let docs: Vec<Document> = self
            .docs
            .iter()
            .filter(|d| wanted.contains(&d.doc_id))
            .cloned()
            .collect();
        let mut out = Corpus {
            docs,
            per_user_docs: Vec::new(),
            ..self.clone_header()
        };
        out.reindex();
        out
    }

    fn clone_header(&self) -> Corpus {
        Corpus {
            schema: self.schema.clone(),
            users: self.users.clone(),
            background: self.background,
            user_lookup: self.user_lookup.clone(),
            items: self.items.clone(),
            vocab: self.vocab.clone(),
            word_counts: self.word_counts.clone(),
            docs: Vec::new(),
            per_user_docs: Vec::new(),
            d_avg: 0.0,
            scale: self.scale,
            remove_stopwords: self.remove_stopwords,
        }
    }

    /// Position of a document id inside this corpus, if present.
    pub fn position_of(&self, doc_id: usize) -> Option<usize> {
        self.docs.binary_search_by_key(&doc_id, |d| d.doc_id).ok()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let file = BufReader::new(File::open(path)?);
        let corpus: Corpus = serde_json::from_reader(file)?;
        check_schema(CORPUS_SCHEMA, &corpus.schema)?;
        Ok(corpus)
    }
}

pub(crate) fn check_schema(expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::Schema {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

/// Document ids (positions in the full corpus) for each partition, sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub schema: String,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn save(&self, path: &Path) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Split> {
        let split: Split = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        check_schema(SPLIT_SCHEMA, &split.schema)?;
        Ok(split)
    }
}

/// Withhold the `k` most recent documents of every non-background user with
/// more than `k` documents as test data, then move the most recent
/// `validation_fraction` of each such user's remaining documents to validation.
pub fn split_train_test(corpus: &Corpus, k: usize, validation_fraction: f64) -> Result<Split> {
    if k == 0 {
        return Err(Error::contract("test size k must be at least 1"));
    }
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::contract(format!(
            "validation fraction {validation_fraction} outside [0, 1)"
        )));
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for (u, docs) in corpus.per_user_docs.iter().enumerate() {
        let ids: Vec<usize> = docs.iter().map(|&p| corpus.docs[p].doc_id).collect();
        if Some(u) == corpus.background || ids.len() <= k {
            if Some(u) != corpus.background && !ids.is_empty() {
                debug!(
                    "user {} has {} documents (<= {k}); nothing withheld",
                    corpus.users[u],
                    ids.len()
                );
            }
            train.extend(ids);
            continue;
        }
        let (rest, latest) = ids.split_at(ids.len() - k);
        test.extend_from_slice(latest);
        let n_val = (validation_fraction * rest.len() as f64).floor() as usize;
        let (tr, val) = rest.split_at(rest.len() - n_val);
        train.extend_from_slice(tr);
        validation.extend_from_slice(val);
    }
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        schema: SPLIT_SCHEMA.to_string(),
        train,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn review(user: &str, item: &str, t: i64, rating: f64, text: &str) -> RawReview {
        RawReview {
            user_id: user.into(),
            item_id: item.into(),
            timestamp: t,
            rating,
            text: text.into(),
        }
    }

    fn lenient() -> CorpusConfig {
        CorpusConfig {
            min_user_reviews: 1,
            min_word_count: 1,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn parses_tsv_line() {
        let input = "u1\ti9\t120\t4.5\tgreat hoppy beer\n";
        let parsed = parse_reviews(input.as_bytes(), InputFormat::Tsv, &RatingScale::default()).unwrap();
        assert_eq!(parsed.reviews, vec![review("u1", "i9", 120, 4.5, "great hoppy beer")]);
        assert_eq!(parsed.malformed, 0);
    }

    #[test]
    fn empty_input_gives_no_reviews() {
        let parsed = parse_reviews(&b""[..], InputFormat::Tsv, &RatingScale::default()).unwrap();
        assert!(parsed.reviews.is_empty());
        assert_eq!(parsed.malformed, 0);
    }

    #[test]
    fn short_tsv_line_is_skipped_with_line_number() {
        let input = "u1\ti1\t3\t4\tok text\nu1\ti2\t5\nu2\ti3\t7\t2\tmeh\n";
        let parsed = parse_reviews(input.as_bytes(), InputFormat::Tsv, &RatingScale::default()).unwrap();
        assert_eq!(parsed.reviews.len(), 2);
        assert_eq!(parsed.malformed, 1);
        assert!(parsed.warnings[0].starts_with("line 2:"));
    }

    #[test]
    fn out_of_scale_and_negative_time_are_malformed() {
        let input = "u1\ti1\t3\t9\tx\nu1\ti1\t-3\t3\tx\n";
        let parsed = parse_reviews(input.as_bytes(), InputFormat::Tsv, &RatingScale::default()).unwrap();
        assert_eq!(parsed.malformed, 2);
    }

    #[test]
    fn parses_json_lines() {
        let input = r#"{"user_id":"a","item_id":"b","timestamp":4,"rating":3.0,"text":"nice"}
not json
"#;
        let parsed =
            parse_reviews(input.as_bytes(), InputFormat::JsonLines, &RatingScale::default()).unwrap();
        assert_eq!(parsed.reviews, vec![review("a", "b", 4, 3.0, "nice")]);
        assert_eq!(parsed.malformed, 1);
    }

    #[test]
    fn invalid_utf8_is_fatal() {
        let bytes = [b'u', b'\t', 0xff, 0xfe, b'\n'];
        assert!(parse_reviews(&bytes[..], InputFormat::Tsv, &RatingScale::default()).is_err());
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("The EF 75-300 mm lens!"), vec!["ef", "75", "300", "mm", "lens"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Hoppy HOPPY hoppy"), vec!["hoppy"; 3]);
        assert_eq!(Tokenizer::new(false).tokenize("the a beer"), vec!["the", "beer"]);
    }

    #[test]
    fn light_users_are_grouped() {
        let mut reviews = Vec::new();
        for (user, n) in [("a", 60), ("b", 55), ("c", 10)] {
            for t in 0..n {
                reviews.push(review(user, "i", t, 3.0, "malty stout"));
            }
        }
        let cfg = CorpusConfig {
            min_word_count: 1,
            ..CorpusConfig::default()
        };
        let corpus = Corpus::build(&reviews, &cfg).unwrap();
        assert_eq!(corpus.num_users(), 3);
        let bg = corpus.background.unwrap();
        assert_eq!(corpus.users[bg], BACKGROUND_USER);
        assert_eq!(corpus.user_doc_count(bg), 10);
        assert_eq!(corpus.user_index("c"), Some(bg));
        assert_eq!(corpus.user_index("never-seen"), Some(bg));
    }

    #[test]
    fn no_background_when_all_users_heavy() {
        let reviews: Vec<RawReview> = (0..4).map(|t| review("a", "i", t, 3.0, "malty")).collect();
        let corpus = Corpus::build(&reviews, &lenient()).unwrap();
        assert_eq!(corpus.background, None);
        assert_eq!(corpus.user_index("zz"), None);
    }

    #[test]
    fn d_avg_is_docs_per_user() {
        let mut reviews = Vec::new();
        for t in 0..100 {
            reviews.push(review(if t % 2 == 0 { "a" } else { "b" }, "i", t, 3.0, "malty"));
        }
        let corpus = Corpus::build(&reviews, &lenient()).unwrap();
        assert_eq!(corpus.d_avg, 50.0);
    }

    #[test]
    fn rare_words_pruned_and_empty_docs_dropped() {
        let reviews = vec![
            review("a", "i", 0, 3.0, "hop hop hop rare"),
            review("a", "i", 1, 3.0, "rare2"),
        ];
        let cfg = CorpusConfig {
            min_user_reviews: 1,
            min_word_count: 2,
            ..CorpusConfig::default()
        };
        let corpus = Corpus::build(&reviews, &cfg).unwrap();
        assert_eq!(corpus.vocab, vec!["hop"]);
        assert_eq!(corpus.docs.len(), 1);
        assert_eq!(corpus.docs[0].tokens, vec![0, 0, 0]);
    }

    #[test]
    fn all_empty_is_fatal() {
        let reviews = vec![review("a", "i", 0, 3.0, "the a")];
        assert!(Corpus::build(&reviews, &lenient()).is_err());
        assert!(Corpus::build(&[], &lenient()).is_err());
    }

    #[test]
    fn equal_timestamps_keep_input_order() {
        let reviews = vec![
            review("a", "i", 5, 1.0, "first"),
            review("a", "i", 2, 2.0, "early"),
            review("a", "i", 5, 3.0, "second"),
        ];
        let corpus = Corpus::build(&reviews, &lenient()).unwrap();
        let order: Vec<f64> = corpus.per_user_docs[0].iter().map(|&p| corpus.docs[p].rating).collect();
        assert_eq!(order, vec![2.0, 1.0, 3.0]);
    }

    fn two_users(n: usize) -> Corpus {
        let mut reviews = Vec::new();
        for u in ["a", "b"] {
            for t in 0..n as i64 {
                reviews.push(review(u, "i", t, 3.0, "malty"));
            }
        }
        Corpus::build(&reviews, &lenient()).unwrap()
    }

    #[test]
    fn split_withholds_latest_k() {
        let corpus = two_users(10);
        let split = split_train_test(&corpus, 3, 0.0).unwrap();
        assert_eq!(split.test.len(), 6);
        assert_eq!(split.train.len(), 14);
        for &id in &split.test {
            assert!(corpus.docs[id].time >= 7);
        }
    }

    #[test]
    fn split_keeps_small_users_in_train() {
        let corpus = two_users(2);
        let split = split_train_test(&corpus, 3, 0.5).unwrap();
        assert_eq!(split.train.len(), 4);
        assert!(split.test.is_empty() && split.validation.is_empty());
        assert!(split_train_test(&corpus, 0, 0.0).is_err());
    }

    #[test]
    fn validation_takes_latest_training_docs() {
        let corpus = two_users(23);
        let split = split_train_test(&corpus, 3, 0.1).unwrap();
        // 20 remaining per user, 2 to validation
        assert_eq!(split.validation.len(), 4);
        for &id in &split.validation {
            assert!(corpus.docs[id].time == 18 || corpus.docs[id].time == 19);
        }
    }

    #[test]
    fn background_docs_never_withheld() {
        let mut reviews = Vec::new();
        for t in 0..10 {
            reviews.push(review("light", "i", t, 3.0, "malty"));
        }
        let cfg = CorpusConfig {
            min_user_reviews: 50,
            min_word_count: 1,
            ..CorpusConfig::default()
        };
        let corpus = Corpus::build(&reviews, &cfg).unwrap();
        let split = split_train_test(&corpus, 3, 0.2).unwrap();
        assert_eq!(split.train.len(), 10);
    }

    #[test]
    fn subset_preserves_indices() {
        let corpus = two_users(5);
        let sub = corpus.subset(&[0, 2, 4]);
        assert_eq!(sub.docs.len(), 3);
        assert_eq!(sub.vocab, corpus.vocab);
        assert_eq!(sub.d_avg, 1.5);
        assert_eq!(sub.position_of(4), Some(2));
    }
}
