//! Distant-supervision data construction from a human-annotated dataset.
//!
//! Triplets are harvested from the annotated sentences (labeled pairs keep
//! their relation, every other ordered pair of co-occurring mentions becomes
//! an NA triplet), then aligned against a raw corpus by exact
//! case-insensitive token-subsequence matching, with a per-triplet cap.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data_model::{normalize, Bag, Dataset, Instance, RelationLabel, Span, Triplet, TripletKey};
use crate::error::{Error, Result};
use crate::par;
use crate::text::tokenize;

pub const DEFAULT_CAP: usize = 100;

pub const DEFAULT_PRONOUNS: &[&str] = &[
    "he", "she", "it", "they", "him", "her", "them", "his", "hers", "its", "their", "we", "you",
    "i", "me", "us",
];

pub type Sentence = Vec<String>;

#[derive(Debug, Clone, Default)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    /// Normalized (head, tail) surface pair to the relations attested for it.
    pub index: BTreeMap<(Vec<String>, Vec<String>), Vec<RelationLabel>>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn na_count(&self) -> usize {
        self.triplets.iter().filter(|t| t.is_na()).count()
    }

    fn from_triplets(triplets: Vec<Triplet>) -> Self {
        let mut index: BTreeMap<_, Vec<RelationLabel>> = BTreeMap::new();
        for t in &triplets {
            index
                .entry((normalize(&t.head_surface), normalize(&t.tail_surface)))
                .or_default()
                .push(t.relation.clone());
        }
        TripletSet { triplets, index }
    }
}

pub fn extract_triplets(ha: &Dataset) -> Result<TripletSet> {
    if ha.is_empty() {
        return Err(Error::Data("no source instances".into()));
    }

    // Group annotated instances by sentence, first appearance order.
    let mut sentence_ids: HashMap<&[String], usize> = HashMap::new();
    let mut sentences: Vec<(&[String], Vec<&Instance>)> = Vec::new();
    for inst in &ha.instances {
        let id = *sentence_ids.entry(&inst.tokens).or_insert_with(|| {
            sentences.push((&inst.tokens, Vec::new()));
            sentences.len() - 1
        });
        sentences[id].1.push(inst);
    }

    let mut seen: HashSet<TripletKey> = HashSet::new();
    let mut triplets = Vec::new();
    for (tokens, insts) in &sentences {
        let mentions: BTreeSet<Span> = insts.iter().flat_map(|i| [i.head, i.tail]).collect();
        let labeled: HashMap<(Span, Span), &RelationLabel> = insts
            .iter()
            .map(|i| ((i.head, i.tail), &i.relation))
            .collect();
        // Labeled pairs first so the triplet order follows the annotation.
        let mut pairs: Vec<(Span, Span)> = insts.iter().map(|i| (i.head, i.tail)).collect();
        for &a in &mentions {
            for &b in &mentions {
                if a != b && !labeled.contains_key(&(a, b)) {
                    pairs.push((a, b));
                }
            }
        }
        for (a, b) in pairs {
            if a.overlaps(&b) {
                continue;
            }
            let head = tokens[a.start..a.end].to_vec();
            let tail = tokens[b.start..b.end].to_vec();
            if normalize(&head) == normalize(&tail) {
                continue;
            }
            let relation = labeled
                .get(&(a, b))
                .map(|r| (*r).clone())
                .unwrap_or_else(RelationLabel::na);
            let t = Triplet {
                head_surface: head,
                relation,
                tail_surface: tail,
            };
            if seen.insert(t.key()) {
                triplets.push(t);
            }
        }
    }

    // A pair attested with a real relation anywhere is not also an NA fact.
    let related: HashSet<(Vec<String>, Vec<String>)> = triplets
        .iter()
        .filter(|t| !t.is_na())
        .map(|t| (normalize(&t.head_surface), normalize(&t.tail_surface)))
        .collect();
    triplets.retain(|t| {
        !t.is_na() || !related.contains(&(normalize(&t.head_surface), normalize(&t.tail_surface)))
    });

    Ok(TripletSet::from_triplets(triplets))
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Rule-based segmentation: a sentence ends at `.`, `!` or `?` when it is
/// followed by whitespace and then an uppercase letter, or by the end of the
/// text. Abbreviations such as "Dr. Smith" are split (known limitation).
pub fn split_sentences(raw_text: &str) -> Vec<Sentence> {
    let chars: Vec<(usize, char)> = raw_text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    for (pos, &(byte, c)) in chars.iter().enumerate() {
        if !is_terminator(c) {
            continue;
        }
        let mut k = pos + 1;
        while k < chars.len() && chars[k].1.is_whitespace() {
            k += 1;
        }
        let boundary = if k == chars.len() {
            true
        } else {
            k > pos + 1 && chars[k].1.is_uppercase()
        };
        if boundary {
            let end = byte + c.len_utf8();
            let toks = tokenize(&raw_text[start..end]);
            if !toks.is_empty() {
                out.push(toks);
            }
            start = end;
        }
    }
    let rest = tokenize(&raw_text[start..]);
    if !rest.is_empty() {
        out.push(rest);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusMode {
    /// Each file is a document run through [`split_sentences`].
    Doc,
    /// Each non-empty line is one sentence.
    Line,
}

impl std::str::FromStr for CorpusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "doc" => Ok(CorpusMode::Doc),
            "line" => Ok(CorpusMode::Line),
            other => Err(Error::Config(format!("corpus mode must be doc or line, got `{other}`"))),
        }
    }
}

/// Reads a corpus file, or every file of a directory in name order.
pub fn read_corpus(path: &Path, mode: CorpusMode) -> Result<Vec<Sentence>> {
    let mut files = Vec::new();
    if path.is_dir() {
        let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(path, e))?;
            if entry.path().is_file() {
                files.push(entry.path());
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut out = Vec::new();
    for file in files {
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        match mode {
            CorpusMode::Doc => out.extend(split_sentences(&text)),
            CorpusMode::Line => out.extend(
                text.lines()
                    .map(tokenize)
                    .filter(|t| !t.is_empty()),
            ),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignmentStats {
    /// Emitted instances per triplet, aligned with `TripletSet::triplets`.
    pub per_triplet_counts: Vec<usize>,
    /// Triplets whose match count exceeded the cap.
    pub capped_triplets: usize,
    pub total_instances: usize,
    pub na_instances: usize,
    pub triplets: usize,
}

impl AlignmentStats {
    pub fn relational_instances(&self) -> usize {
        self.total_instances - self.na_instances
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "triplets\t{}", self.triplets);
        let _ = writeln!(s, "instances\t{}", self.relational_instances());
        let _ = writeln!(s, "na_instances\t{}", self.na_instances);
        let _ = writeln!(s, "total_instances\t{}", self.total_instances);
        let _ = writeln!(s, "capped_triplets\t{}", self.capped_triplets);
        s
    }
}

fn find_subsequence(hay: &[String], needle: &[String], avoid: Option<Span>) -> Option<Span> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - needle.len())
        .map(|s| Span::new(s, s + needle.len()))
        .filter(|span| avoid.is_none_or(|a| !a.overlaps(span)))
        .find(|span| hay[span.start..span.end] == *needle)
}

/// Locates a triplet in a sentence: first occurrence of the head, then the
/// first occurrence of the tail that does not overlap it.
fn match_triplet(norm_sentence: &[String], head: &[String], tail: &[String]) -> Option<(Span, Span)> {
    let h = find_subsequence(norm_sentence, head, None)?;
    let t = find_subsequence(norm_sentence, tail, Some(h))?;
    Some((h, t))
}

pub fn align_corpus(ts: &TripletSet, corpus: &[Sentence], cap: usize) -> Result<(Vec<Instance>, AlignmentStats)> {
    if cap == 0 {
        return Err(Error::Config("cap must be at least 1".into()));
    }
    let keys: Vec<(Vec<String>, Vec<String>)> = ts
        .triplets
        .iter()
        .map(|t| (normalize(&t.head_surface), normalize(&t.tail_surface)))
        .collect();
    let mut by_first: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, (head, _)) in keys.iter().enumerate() {
        by_first.entry(head[0].as_str()).or_default().push(i);
    }

    let matches: Vec<Vec<(usize, Instance)>> = par::map_range(corpus.len(), |pos| {
        let sentence = &corpus[pos];
        let norm = normalize(sentence);
        let candidates: BTreeSet<usize> = norm
            .iter()
            .filter_map(|tok| by_first.get(tok.as_str()))
            .flatten()
            .copied()
            .collect();
        candidates
            .into_iter()
            .filter_map(|ti| {
                let (head, tail) = &keys[ti];
                match_triplet(&norm, head, tail).map(|(h, t)| {
                    (
                        ti,
                        Instance {
                            tokens: sentence.clone(),
                            head: h,
                            tail: t,
                            relation: ts.triplets[ti].relation.clone(),
                            confidence: None,
                        },
                    )
                })
            })
            .collect()
    });

    // Sentences were visited in corpus order, so a stable sort by triplet
    // yields (triplet, corpus position) order regardless of sharding.
    let mut flat: Vec<(usize, Instance)> = matches.into_iter().flatten().collect();
    flat.sort_by_key(|(ti, _)| *ti);

    let mut counts = vec![0usize; ts.len()];
    let mut matched = vec![0usize; ts.len()];
    let mut out = Vec::new();
    for (ti, inst) in flat {
        matched[ti] += 1;
        if counts[ti] < cap {
            counts[ti] += 1;
            out.push(inst);
        }
    }
    let na_instances = out.iter().filter(|i| i.relation.is_na()).count();
    let stats = AlignmentStats {
        capped_triplets: matched.iter().filter(|&&m| m > cap).count(),
        total_instances: out.len(),
        na_instances,
        triplets: ts.len(),
        per_triplet_counts: counts,
    };
    Ok((out, stats))
}

pub fn default_pronouns() -> HashSet<String> {
    DEFAULT_PRONOUNS.iter().map(|s| s.to_string()).collect()
}

fn is_pronoun(surface: &[String], pronouns: &HashSet<String>) -> bool {
    surface.len() == 1 && pronouns.contains(&surface[0].to_lowercase())
}

/// Drops instances whose head or tail is a single pronoun token.
pub fn filter_pronoun_entities(instances: Vec<Instance>, pronouns: &HashSet<String>) -> Vec<Instance> {
    instances
        .into_iter()
        .filter(|i| !is_pronoun(i.head_surface(), pronouns) && !is_pronoun(i.tail_surface(), pronouns))
        .collect()
}

/// Groups instances by normalized triplet, in first-appearance order.
pub fn assemble_bags(instances: &[Instance], confidences: &[f64]) -> Result<Vec<Bag>> {
    if instances.len() != confidences.len() {
        return Err(Error::Data(format!(
            "confidence list has {} entries for {} instances",
            confidences.len(),
            instances.len()
        )));
    }
    let mut index: HashMap<TripletKey, usize> = HashMap::new();
    let mut bags: Vec<Bag> = Vec::new();
    for (inst, &c) in instances.iter().zip(confidences) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Validation(format!("confidence {c} not in [0, 1]")));
        }
        let triplet = inst.triplet();
        let slot = *index.entry(triplet.key()).or_insert_with(|| {
            bags.push(Bag {
                triplet,
                members: Vec::new(),
            });
            bags.len() - 1
        });
        bags[slot].members.push((inst.clone(), c));
    }
    Ok(bags)
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub cap: usize,
    pub drop_pronouns: bool,
    pub pronouns: HashSet<String>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            cap: DEFAULT_CAP,
            drop_pronouns: false,
            pronouns: default_pronouns(),
        }
    }
}

/// Full construction: optional pronoun filtering of the annotated source,
/// triplet extraction, alignment, and filtering of the aligned output.
pub fn build_ds(ha: &Dataset, corpus: &[Sentence], opts: &BuildOptions) -> Result<(Vec<Instance>, AlignmentStats)> {
    let source = if opts.drop_pronouns {
        Dataset {
            instances: filter_pronoun_entities(ha.instances.clone(), &opts.pronouns),
            label_set: ha.label_set.clone(),
        }
    } else {
        ha.clone()
    };
    let ts = extract_triplets(&source)?;
    let (mut instances, mut stats) = align_corpus(&ts, corpus, opts.cap)?;
    if opts.drop_pronouns {
        instances = filter_pronoun_entities(instances, &opts.pronouns);
        stats.total_instances = instances.len();
        stats.na_instances = instances.iter().filter(|i| i.relation.is_na()).count();
    }
    Ok((instances, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::tests::{inst, toks};

    fn ha() -> Dataset {
        Dataset::from_instances(vec![
            inst("joe biden leads america from paris", (0, 2), (3, 4), "leader_of"),
            inst("paris is in france", (0, 1), (3, 4), "NA"),
            inst("joe biden leads america", (0, 2), (3, 4), "leader_of"),
        ])
    }

    fn has(ts: &TripletSet, h: &str, r: &str, t: &str) -> bool {
        let key = Triplet {
            head_surface: toks(h),
            relation: RelationLabel::new(r).unwrap(),
            tail_surface: toks(t),
        }
        .key();
        ts.triplets.iter().any(|x| x.key() == key)
    }

    #[test]
    fn extracts_labeled_and_na_triplets() {
        let mut ds = ha();
        // Second labeled pair in the first sentence leaves (paris, france) unlabeled elsewhere.
        ds.instances.push(inst("paris is in france", (0, 1), (3, 4), "located_in"));
        ds.instances.push(inst("paris and france and rome", (0, 1), (4, 5), "r2"));
        let ts = extract_triplets(&Dataset::from_instances(ds.instances)).unwrap();
        assert!(has(&ts, "joe biden", "leader_of", "america"));
        assert!(has(&ts, "america", "NA", "joe biden"));
        // (paris, france) is related, so no NA triplet for the pair.
        assert!(has(&ts, "paris", "located_in", "france"));
        assert!(!has(&ts, "paris", "NA", "france"));
        assert!(has(&ts, "rome", "NA", "paris"));
    }

    #[test]
    fn unlabeled_cooccurring_pair_is_na() {
        let ds = Dataset::from_instances(vec![
            inst("paris france and rome", (0, 1), (3, 4), "r"),
            inst("paris france and rome", (1, 2), (0, 1), "s"),
        ]);
        let ts = extract_triplets(&ds).unwrap();
        assert!(has(&ts, "paris", "NA", "france"));
    }

    #[test]
    fn duplicate_triplets_merged() {
        let ts = extract_triplets(&ha()).unwrap();
        let n = ts
            .triplets
            .iter()
            .filter(|t| t.relation.as_str() == "leader_of")
            .count();
        assert_eq!(n, 1);
        let keys: HashSet<_> = ts.triplets.iter().map(Triplet::key).collect();
        assert_eq!(keys.len(), ts.len());
    }

    #[test]
    fn empty_source_errors() {
        let err = extract_triplets(&Dataset::default()).unwrap_err();
        assert!(err.to_string().contains("no source instances"));
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(split_sentences("He left. She stayed."), vec![toks("He left ."), toks("She stayed .")]);
        assert_eq!(split_sentences("Dr. Smith arrived.").len(), 2);
        assert!(split_sentences("").is_empty());
        assert_eq!(split_sentences("no terminator here").len(), 1);
        assert_eq!(split_sentences("3.5 percent rose. ok then").len(), 1);
        assert_eq!(split_sentences("Really?! Yes.").len(), 2);
    }

    #[test]
    fn cap_truncates_in_corpus_order() {
        let ts = extract_triplets(&Dataset::from_instances(vec![inst(
            "joe biden leads america",
            (0, 2),
            (3, 4),
            "leader_of",
        )]))
        .unwrap();
        let corpus: Vec<Sentence> = (0..150)
            .map(|i| toks(&format!("in year {i} Joe Biden visited America")))
            .collect();
        let (out, stats) = align_corpus(&ts, &corpus, 100).unwrap();
        let leader: Vec<_> = out.iter().filter(|i| !i.relation.is_na()).collect();
        assert_eq!(leader.len(), 100);
        assert_eq!(leader[0].tokens[2], "0");
        assert_eq!(leader[99].tokens[2], "99");
        assert_eq!(leader[0].head, Span::new(3, 5));
        assert!(stats.per_triplet_counts.iter().all(|&c| c <= 100));
        // The reverse-direction NA triplet matches the same sentences.
        assert_eq!(stats.capped_triplets, 2);
        assert_eq!(stats.na_instances, 100);
    }

    #[test]
    fn zero_matches_and_multiple_triplets() {
        let ds = Dataset::from_instances(vec![
            inst("a b c d", (0, 1), (1, 2), "r"),
            inst("x y z w", (0, 1), (1, 2), "s"),
            inst("q t", (0, 1), (1, 2), "u"),
        ]);
        let ts = extract_triplets(&ds).unwrap();
        let corpus = vec![toks("A then B and X then Y"), toks("nothing here")];
        let (out, stats) = align_corpus(&ts, &corpus, 100).unwrap();
        // Brute-force oracle: every (triplet, sentence) pair containing both surfaces.
        let mut expected = 0;
        for t in &ts.triplets {
            for s in &corpus {
                let n = normalize(s);
                if match_triplet(&n, &normalize(&t.head_surface), &normalize(&t.tail_surface)).is_some() {
                    expected += 1;
                }
            }
        }
        assert_eq!(out.len(), expected);
        assert_eq!(out.iter().filter(|i| i.tokens == corpus[0] && !i.relation.is_na()).count(), 2);
        let qt = ts.triplets.iter().position(|t| t.relation.as_str() == "u").unwrap();
        assert_eq!(stats.per_triplet_counts[qt], 0);
    }

    #[test]
    fn tail_avoids_head_overlap() {
        let ds = Dataset::from_instances(vec![inst("new york and york", (0, 2), (3, 4), "r")]);
        let ts = extract_triplets(&ds).unwrap();
        let (out, _) = align_corpus(&ts, &[toks("New York is not York")], 10).unwrap();
        let r: Vec<_> = out.iter().filter(|i| !i.relation.is_na()).collect();
        assert_eq!(r[0].head, Span::new(0, 2));
        assert_eq!(r[0].tail, Span::new(4, 5));
    }

    #[test]
    fn pronoun_filter() {
        let p = default_pronouns();
        let a = inst("He lives in America", (0, 1), (3, 4), "r");
        let b = inst("joe biden leads america", (0, 2), (3, 4), "r");
        let out = filter_pronoun_entities(vec![a, b.clone()], &p);
        assert_eq!(out, vec![b]);
        assert!(filter_pronoun_entities(vec![], &p).is_empty());
    }

    #[test]
    fn bag_assembly() {
        let one = inst("a b", (0, 1), (1, 2), "r");
        let bags = assemble_bags(&vec![one.clone(); 4], &[1.0; 4]).unwrap();
        assert_eq!(bags.len(), 1);
        assert_eq!(bags[0].len(), 4);
        assert!(bags[0].is_pure());

        let mixed = vec![
            inst("a b", (0, 1), (1, 2), "r"),
            inst("A c B", (0, 1), (2, 3), "r"),
            inst("a b", (0, 1), (1, 2), "s"),
            inst("b a", (0, 1), (1, 2), "r"),
        ];
        let bags = assemble_bags(&mixed, &[0.5; 4]).unwrap();
        assert_eq!(bags.len(), 3);
        assert_eq!(bags[0].len(), 2);
        assert!(bags.iter().all(Bag::is_pure));

        let na = vec![inst("a b", (0, 1), (1, 2), "NA"); 2];
        let bags = assemble_bags(&na, &[0.3, 0.4]).unwrap();
        assert!(bags[0].is_na());
        assert!(assemble_bags(&na, &[0.3]).is_err());
    }
}
