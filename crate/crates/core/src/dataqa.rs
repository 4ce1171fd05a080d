//! Synthetic fact base, memorization corpus, parametric-answer elicitation,
//! conflict detection and the knowledge-conflict benchmark.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{ModelView, PromptTarget};
use crate::vocab::{TokenId, Tokenizer, ANSWER_MARK, BOS_ID, CONTEXT_MARK, EOS_ID, QUESTION_MARK};

pub const RELATIONS: [&str; 8] = [
    "capital", "color", "founder", "language", "mentor", "rival", "origin", "currency",
];

/// Non-entity words used by the templates.
pub const TEMPLATE_WORDS: [&str; 9] = [
    "the",
    "of",
    "is",
    "has",
    ".",
    "?",
    CONTEXT_MARK,
    QUESTION_MARK,
    ANSWER_MARK,
];

const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const N_SYLLABLES: usize = ONSETS.len() * VOWELS.len();

/// Maximum number of distinct entity names.
pub const MAX_ENTITIES: usize = N_SYLLABLES * N_SYLLABLES;

/// The `i`-th nonce entity name: two consonant-vowel syllables. The index
/// is scrambled by a bijection so neighbouring entities look unrelated.
pub fn entity_name(i: usize) -> String {
    assert!(i < MAX_ENTITIES, "entity index {i} out of range");
    let j = (i * 37 + 11) % MAX_ENTITIES;
    let syl = |k: usize| format!("{}{}", ONSETS[k / VOWELS.len()], VOWELS[k % VOWELS.len()]);
    format!("{}{}", syl(j / N_SYLLABLES), syl(j % N_SYLLABLES))
}

/// Tokenizer covering every word the fact base and prompts can produce.
pub fn fact_tokenizer(n_entities: usize) -> Result<Tokenizer> {
    if n_entities > MAX_ENTITIES {
        return Err(Error::InvalidArgument(format!(
            "at most {MAX_ENTITIES} entities are available, asked for {n_entities}"
        )));
    }
    let words = TEMPLATE_WORDS
        .iter()
        .chain(RELATIONS.iter())
        .map(|w| w.to_string())
        .chain((0..n_entities).map(entity_name));
    Tokenizer::new(words)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Fact {
    pub fn question(&self) -> String {
        question_text(&self.relation, &self.subject)
    }
}

pub fn question_text(relation: &str, subject: &str) -> String {
    format!("{relation} of {subject} ?")
}

/// A one-sentence context asserting `object` for the pair.
pub fn context_text(relation: &str, subject: &str, object: &str) -> String {
    format!("the {relation} of {subject} is {object} .")
}

/// Seeded synthetic facts with unique (subject, relation) pairs and an
/// object different from the subject.
pub fn gen_factbase(n_facts: usize, n_entities: usize, seed: u64) -> Result<Vec<Fact>> {
    if n_entities < 2 {
        return Err(Error::InvalidArgument("need at least two entities".into()));
    }
    if n_entities > MAX_ENTITIES {
        return Err(Error::InvalidArgument(format!(
            "at most {MAX_ENTITIES} entities are available"
        )));
    }
    if n_facts == 0 {
        return Err(Error::InvalidArgument("n_facts must be at least 1".into()));
    }
    let pairs = n_entities * RELATIONS.len();
    if n_facts > pairs {
        return Err(Error::InvalidArgument(format!(
            "{n_facts} facts cannot have unique (subject, relation) pairs over \
             {n_entities} entities and {} relations",
            RELATIONS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, pairs, n_facts);
    Ok(chosen
        .into_iter()
        .map(|p| {
            let s = p / RELATIONS.len();
            let r = p % RELATIONS.len();
            let mut o = rng.random_range(0..n_entities - 1);
            if o >= s {
                o += 1;
            }
            Fact {
                subject: entity_name(s),
                relation: RELATIONS[r].to_string(),
                object: entity_name(o),
            }
        })
        .collect())
}

/// Surface forms of a fact used for memorization. The last is the
/// closed-book QA form.
pub fn fact_renderings(f: &Fact) -> Vec<String> {
    let (s, r, o) = (&f.subject, &f.relation, &f.object);
    vec![
        format!("the {r} of {s} is {o} ."),
        format!("{s} has {r} {o} ."),
        format!("{o} is the {r} of {s} ."),
        format!("{QUESTION_MARK} {} {ANSWER_MARK} {o}", question_text(r, s)),
    ]
}

/// An open-book QA rendering with a context naming `context_object`; the
/// answer is always the fact's own object.
pub fn open_book_rendering(f: &Fact, context_object: &str) -> String {
    format!(
        "{CONTEXT_MARK} {} {QUESTION_MARK} {} {ANSWER_MARK} {}",
        context_text(&f.relation, &f.subject, context_object),
        f.question(),
        f.object
    )
}

/// Open-book forms added to the memorization corpus. Every fact gets one
/// with an agreeing context; with probability `distractor_rate` it also gets
/// one whose context names some other entity, so the model learns that
/// contexts can be wrong and memory is the safer bet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpenBookForms {
    pub distractor_rate: f64,
    pub n_entities: usize,
    pub seed: u64,
}

/// Memorization corpus: every rendering of every fact, fact-major, each
/// wrapped in begin/end markers, plus optional open-book forms.
pub fn build_corpus(
    facts: &[Fact],
    tok: &Tokenizer,
    open_book: Option<&OpenBookForms>,
) -> Result<Vec<Vec<TokenId>>> {
    if facts.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(ob) = open_book {
        if !(0.0..=1.0).contains(&ob.distractor_rate) {
            return Err(Error::InvalidArgument(format!(
                "distractor_rate {} outside [0, 1]",
                ob.distractor_rate
            )));
        }
        if ob.n_entities < 3 {
            return Err(Error::InvalidArgument("need at least three entities".into()));
        }
    }
    let mut out = Vec::new();
    for (i, f) in facts.iter().enumerate() {
        let mut forms = fact_renderings(f);
        if let Some(ob) = open_book {
            forms.push(open_book_rendering(f, &f.object));
            let mut rng = ChaCha8Rng::seed_from_u64(mix(ob.seed, i as u64));
            if rng.random::<f64>() < ob.distractor_rate {
                let other = loop {
                    let e = entity_name(rng.random_range(0..ob.n_entities));
                    if e != f.object && e != f.subject {
                        break e;
                    }
                };
                forms.push(open_book_rendering(f, &other));
            }
        }
        for text in forms {
            let mut seq = vec![BOS_ID];
            seq.extend(tok.encode(&text)?);
            seq.push(EOS_ID);
            out.push(seq);
        }
    }
    Ok(out)
}

/// `<bos> Q: {question} A:`
pub fn closed_prompt(tok: &Tokenizer, question: &str) -> Result<Vec<TokenId>> {
    let mut p = vec![BOS_ID];
    p.extend(tok.encode(&format!("{QUESTION_MARK} {question} {ANSWER_MARK}"))?);
    Ok(p)
}

/// `<bos> C: {context} Q: {question} A:`
pub fn open_prompt(tok: &Tokenizer, context: &str, question: &str) -> Result<Vec<TokenId>> {
    let mut p = vec![BOS_ID];
    p.extend(tok.encode(&format!(
        "{CONTEXT_MARK} {context} {QUESTION_MARK} {question} {ANSWER_MARK}"
    ))?);
    Ok(p)
}

/// Lowercase, punctuation stripped, articles removed, whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whether `needle`'s words occur as a contiguous run in `haystack`. Both
/// are expected normalized; an empty needle is never contained.
pub fn contains_tokens(haystack: &str, needle: &str) -> bool {
    let h: Vec<&str> = haystack.split_whitespace().collect();
    let n: Vec<&str> = needle.split_whitespace().collect();
    !n.is_empty() && h.windows(n.len()).any(|w| w == n.as_slice())
}

/// Faithfulness label: `true` when the parametric answer agrees with the
/// contextual answer (equal after normalization, or one contained in the
/// other), `false` for a knowledge conflict.
///
/// The context is not consulted; the decision rests on the two answers.
pub fn detect_conflict(r_hat: &str, y_star: &str, _context: &str) -> bool {
    let r = normalize_answer(r_hat);
    let y = normalize_answer(y_star);
    r == y || contains_tokens(&y, &r) || contains_tokens(&r, &y)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Elicitation {
    /// Decoded samples in draw order.
    pub samples: Vec<String>,
    /// Majority answer (as first generated) and its count, when retained.
    pub answer: Option<(String, usize)>,
}

/// Majority vote over normalized answers. Ties go to the answer whose first
/// occurrence is earliest; empty answers never win. Returns the first raw
/// sample of the winning class and its count.
pub fn majority(samples: &[String]) -> Option<(String, usize)> {
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        let norm = normalize_answer(s);
        if norm.is_empty() {
            continue;
        }
        counts.entry(norm).or_insert((0, i)).0 += 1;
    }
    counts
        .into_values()
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(count, first)| (samples[first].clone(), count))
}

/// Majority threshold used by default: `⌈n/2⌉`.
pub fn default_min_freq(n: usize) -> usize {
    n.div_ceil(2)
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElicitConfig {
    pub n: usize,
    pub min_freq: usize,
    pub temperature: f64,
    pub max_new: usize,
}

impl Default for ElicitConfig {
    fn default() -> Self {
        Self {
            n: 5,
            min_freq: 3,
            temperature: 0.8,
            max_new: 8,
        }
    }
}

/// Samples `cfg.n` closed-book answers to `question` and keeps the majority
/// answer when it occurs at least `cfg.min_freq` times.
pub fn elicit(
    view: &ModelView<'_>,
    tok: &Tokenizer,
    question: &str,
    cfg: &ElicitConfig,
    seed: u64,
) -> Result<Elicitation> {
    if cfg.n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let prompt = closed_prompt(tok, question)?;
    let samples = (0..cfg.n as u64)
        .map(|k| {
            let ids = view.sample(&prompt, cfg.max_new, cfg.temperature, mix(seed, k))?;
            Ok(tok.decode(&ids))
        })
        .collect::<Result<Vec<_>>>()?;
    let answer = majority(&samples).filter(|(_, c)| *c >= cfg.min_freq);
    Ok(Elicitation { samples, answer })
}

fn bool_as_int<S: Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(*v as u8)
}

fn int_as_bool<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    match u8::deserialize(d)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(serde::de::Error::custom(format!(
            "faithful must be 0 or 1, got {other}"
        ))),
    }
}

/// One benchmark item. Field order is the JSONL key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAInstance {
    pub id: String,
    pub question: String,
    pub context: String,
    /// Ground-truth answer asserted by the context.
    pub contextual_answer: String,
    /// Majority closed-book answer of the model.
    pub parametric_answer: String,
    pub parametric_freq: usize,
    #[serde(serialize_with = "bool_as_int", deserialize_with = "int_as_bool")]
    pub faithful: bool,
}

impl QAInstance {
    pub fn closed_prompt(&self, tok: &Tokenizer) -> Result<Vec<TokenId>> {
        closed_prompt(tok, &self.question)
    }

    pub fn open_prompt(&self, tok: &Tokenizer) -> Result<Vec<TokenId>> {
        open_prompt(tok, &self.context, &self.question)
    }

    /// Open-book prompt with the parametric answer as target.
    pub fn parametric_pair(&self, tok: &Tokenizer) -> Result<PromptTarget> {
        Ok(PromptTarget {
            prompt: self.open_prompt(tok)?,
            target: tok.encode(&self.parametric_answer)?,
        })
    }
}

/// Counts at each pipeline stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub facts: usize,
    pub counterfactual_contexts: usize,
    pub elicited: usize,
    pub retained: usize,
    pub faithful: usize,
    pub unfaithful: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub instances: Vec<QAInstance>,
    pub stats: PipelineStats,
    pub seed: u64,
    pub counterfactual_rate: f64,
}

impl Benchmark {
    pub fn faithful(&self) -> Vec<&QAInstance> {
        self.instances.iter().filter(|i| i.faithful).collect()
    }

    pub fn unfaithful(&self) -> Vec<&QAInstance> {
        self.instances.iter().filter(|i| !i.faithful).collect()
    }

    /// Instance count per parametric-answer frequency, ascending.
    pub fn frequency_buckets(&self) -> Vec<(usize, usize, usize)> {
        let mut map: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
        for i in &self.instances {
            let e = map.entry(i.parametric_freq).or_default();
            if i.faithful {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
        map.into_iter().map(|(f, (a, b))| (f, a, b)).collect()
    }
}

pub fn write_jsonl<W: Write>(mut w: W, instances: &[QAInstance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<QAInstance>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("benchmark line {}: {e}", n + 1)))?;
        out.push(inst);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub counterfactual_rate: f64,
    pub elicit: ElicitConfig,
}

/// Runs the two-stage pipeline over `facts`.
///
/// Each fact gets a question and a context. With probability
/// `counterfactual_rate` the context asserts a random entity other than the
/// fact's object; otherwise it asserts the object. The model's closed-book
/// answer is elicited; retained instances are labeled by
/// [`detect_conflict`]. Per-fact randomness comes from sub-seeds of `seed`,
/// so the elicited answers do not depend on the rate.
pub fn build_benchmark(
    view: &ModelView<'_>,
    tok: &Tokenizer,
    facts: &[Fact],
    n_entities: usize,
    cfg: &BenchmarkConfig,
    seed: u64,
) -> Result<Benchmark> {
    if view.config().vocab_size != tok.len() {
        return Err(Error::DimensionMismatch(format!(
            "model vocabulary {} does not match tokenizer vocabulary {}",
            view.config().vocab_size,
            tok.len()
        )));
    }
    if !(0.0..=1.0).contains(&cfg.counterfactual_rate) {
        return Err(Error::InvalidArgument(format!(
            "counterfactual_rate {} outside [0, 1]",
            cfg.counterfactual_rate
        )));
    }
    if n_entities < 4 {
        return Err(Error::InvalidArgument("need at least four entities".into()));
    }
    let entities: Vec<String> = (0..n_entities).map(entity_name).collect();
    let mut stats = PipelineStats {
        facts: facts.len(),
        ..Default::default()
    };
    let mut instances = Vec::new();
    for (i, fact) in facts.iter().enumerate() {
        let question = fact.question();
        let el = elicit(view, tok, &question, &cfg.elicit, mix(seed, 2 * i as u64 + 1))?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2 * i as u64));
        let counterfactual = rng.random::<f64>() < cfg.counterfactual_rate;
        // A counterfactual context names neither the true object nor
        // whatever the model would say, so it always conflicts.
        let believed = el.answer.as_ref().map(|(a, _)| normalize_answer(a));
        let y_star = if counterfactual {
            stats.counterfactual_contexts += 1;
            loop {
                let e = &entities[rng.random_range(0..n_entities)];
                if *e != fact.object && *e != fact.subject && believed.as_deref() != Some(e.as_str()) {
                    break e.clone();
                }
            }
        } else {
            fact.object.clone()
        };
        let context = context_text(&fact.relation, &fact.subject, &y_star);
        if el.samples.iter().any(|s| !normalize_answer(s).is_empty()) {
            stats.elicited += 1;
        }
        let Some((r_hat, freq)) = el.answer else {
            continue;
        };
        stats.retained += 1;
        let faithful = detect_conflict(&r_hat, &y_star, &context);
        if faithful {
            stats.faithful += 1;
        } else {
            stats.unfaithful += 1;
        }
        instances.push(QAInstance {
            id: format!("q{i:05}"),
            question,
            context,
            contextual_answer: y_star,
            parametric_answer: r_hat,
            parametric_freq: freq,
            faithful,
        });
    }
    Ok(Benchmark {
        instances,
        stats,
        seed,
        counterfactual_rate: cfg.counterfactual_rate,
    })
}

/// Seeded split of `items` into (train, eval) with `eval_fraction` of the
/// items (rounded) going to eval. Relative order is preserved in both parts.
pub fn split_train_eval<T: Clone>(items: &[T], eval_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..=1.0).contains(&eval_fraction) {
        return Err(Error::InvalidArgument(format!(
            "eval_fraction {eval_fraction} outside [0, 1]"
        )));
    }
    let n_eval = (items.len() as f64 * eval_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_eval = vec![false; items.len()];
    for i in rand::seq::index::sample(&mut rng, items.len(), n_eval) {
        is_eval[i] = true;
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (item, e) in items.iter().zip(is_eval) {
        if e {
            eval.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn entity_names_are_unique() {
        let names: std::collections::HashSet<String> = (0..MAX_ENTITIES).map(entity_name).collect();
        assert_eq!(names.len(), MAX_ENTITIES);
        assert!(names.iter().all(|n| n.len() == 4));
    }

    #[test]
    fn factbase_is_seeded_and_unique() {
        let a = gen_factbase(200, 60, 1).unwrap();
        assert_eq!(a, gen_factbase(200, 60, 1).unwrap());
        assert_ne!(a, gen_factbase(200, 60, 2).unwrap());
        let pairs: std::collections::HashSet<_> = a.iter().map(|f| (&f.subject, &f.relation)).collect();
        assert_eq!(pairs.len(), 200);
        assert!(a.iter().all(|f| f.subject != f.object));
        assert!(gen_factbase(0, 60, 1).is_err());
        assert!(gen_factbase(5, 1, 1).is_err());
        assert!(gen_factbase(17, 2, 1).is_err());
        assert_eq!(gen_factbase(16, 2, 1).unwrap().len(), 16);
    }

    #[test]
    fn corpus_covers_every_fact() {
        let tok = fact_tokenizer(10).unwrap();
        let facts = gen_factbase(1, 10, 0).unwrap();
        let corpus = build_corpus(&facts, &tok, None).unwrap();
        assert!(corpus.len() >= 4);
        let s = tok.id(&facts[0].subject).unwrap();
        let o = tok.id(&facts[0].object).unwrap();
        for seq in &corpus {
            assert!(seq.contains(&s) && seq.contains(&o));
            assert_eq!(seq[0], BOS_ID);
            assert_eq!(*seq.last().unwrap(), EOS_ID);
        }
        let qa = tok.decode(corpus.last().unwrap());
        assert_eq!(qa, format!("Q: {} A: {}", facts[0].question(), facts[0].object));
        let ob = |rate| OpenBookForms {
            distractor_rate: rate,
            n_entities: 10,
            seed: 3,
        };
        let agreeing = build_corpus(&facts, &tok, Some(&ob(0.0))).unwrap();
        assert_eq!(agreeing.len(), corpus.len() + 1);
        let text = tok.decode(agreeing.last().unwrap());
        assert_eq!(
            text,
            format!(
                "C: {} Q: {} A: {}",
                context_text(&facts[0].relation, &facts[0].subject, &facts[0].object),
                facts[0].question(),
                facts[0].object
            )
        );
        let with_distractor = build_corpus(&facts, &tok, Some(&ob(1.0))).unwrap();
        assert_eq!(with_distractor.len(), corpus.len() + 2);
        let text = tok.decode(with_distractor.last().unwrap());
        assert!(text.ends_with(&format!("A: {}", facts[0].object)));
        assert!(!text.starts_with(&format!(
            "C: {}",
            context_text(&facts[0].relation, &facts[0].subject, &facts[0].object)
        )));
        assert!(build_corpus(&facts, &tok, Some(&ob(1.5))).is_err());
        assert!(build_corpus(&[], &tok, None).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_answer("The  Eiffel Tower!"), "eiffel tower");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("A  a the"), "");
    }

    #[test]
    fn detect_conflict_examples() {
        assert!(!detect_conflict("rome", "paris", "c"));
        assert!(detect_conflict("Paris", "paris", "c"));
        assert!(detect_conflict("the paris", "paris", "c"));
        assert!(detect_conflict("paris", "paris france", "c"));
        assert!(detect_conflict("paris france", "paris", "c"));
    }

    #[test]
    fn majority_examples() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(
            majority(&s(&["paris", "paris", "rome", "paris", "lyon"])),
            Some(("paris".into(), 3))
        );
        assert_eq!(majority(&s(&["a", "b", "a", "b", "c"])).unwrap().1, 2);
        assert_eq!(majority(&s(&["b", "a", "a", "b"])).unwrap().0, "b");
        assert_eq!(majority(&s(&["", "the", "x"])), Some(("x".into(), 1)));
        assert_eq!(majority(&s(&["", ""])), None);
        assert_eq!(default_min_freq(5), 3);
        assert_eq!(default_min_freq(4), 2);
    }

    #[test]
    fn jsonl_keys_are_ordered() {
        let inst = QAInstance {
            id: "q00001".into(),
            question: "color of bana ?".into(),
            context: "the color of bana is kilo .".into(),
            contextual_answer: "kilo".into(),
            parametric_answer: "mera".into(),
            parametric_freq: 4,
            faithful: false,
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&inst)).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            line,
            "{\"id\":\"q00001\",\"question\":\"color of bana ?\",\"context\":\"the color of bana is kilo .\",\
             \"contextual_answer\":\"kilo\",\"parametric_answer\":\"mera\",\"parametric_freq\":4,\"faithful\":0}\n"
        );
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), vec![inst]);
        assert!(read_jsonl(&b"{\"id\":1}\n"[..]).is_err());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let items: Vec<usize> = (0..10).collect();
        let (a, b) = split_train_eval(&items, 0.5, 3).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(b.len(), 5);
        assert_eq!(split_train_eval(&items, 0.5, 3).unwrap(), (a.clone(), b.clone()));
        let mut all = a;
        all.extend(b);
        all.sort();
        assert_eq!(all, items);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[A-Za-z .,!?']{0,30}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once.clone());
        }

        #[test]
        fn detect_conflict_is_symmetric(a in "[a-c ]{1,8}", b in "[a-c ]{1,8}") {
            prop_assert_eq!(detect_conflict(&a, &b, "x"), detect_conflict(&b, &a, "x"));
        }

        #[test]
        fn detect_conflict_ignores_normalization(a in "[a-cA-C .]{1,8}", b in "[a-c ]{1,8}") {
            prop_assert_eq!(
                detect_conflict(&a, &b, "x"),
                detect_conflict(&normalize_answer(&a), &b, "x")
            );
        }
    }
}
