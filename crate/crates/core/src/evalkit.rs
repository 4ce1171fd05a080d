//! Context recall, memory recall and memorization ratio; token-F1
//! similarity; perplexity with and without context.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataqa::{contains_tokens, normalize_answer, QAInstance};
use crate::error::{Error, Result};
use crate::model::ModelView;
use crate::vocab::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallScores {
    /// Percentage of responses containing the contextual answer.
    pub conr: f64,
    /// Percentage containing the parametric answer but not the contextual one.
    pub memr: f64,
    /// `memr / (memr + conr)`; `None` when both are zero.
    pub mr: Option<f64>,
}

/// Memorization ratio from the two recall percentages.
pub fn memorization_ratio(conr: f64, memr: f64) -> Option<f64> {
    let denom = memr + conr;
    (denom > 0.0).then(|| memr / denom)
}

fn classify(response: &str, inst: &QAInstance) -> (bool, bool) {
    let r = normalize_answer(response);
    let ctx = contains_tokens(&r, &normalize_answer(&inst.contextual_answer));
    let mem = !ctx && contains_tokens(&r, &normalize_answer(&inst.parametric_answer));
    (ctx, mem)
}

pub fn conr_memr(responses: &[String], instances: &[QAInstance]) -> Result<RecallScores> {
    if responses.len() != instances.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} responses for {} instances",
            responses.len(),
            instances.len()
        )));
    }
    if instances.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (mut ctx, mut mem) = (0usize, 0usize);
    for (resp, inst) in responses.iter().zip(instances) {
        let (c, m) = classify(resp, inst);
        ctx += c as usize;
        mem += m as usize;
    }
    let n = instances.len() as f64;
    let conr = 100.0 * ctx as f64 / n;
    let memr = 100.0 * mem as f64 / n;
    Ok(RecallScores {
        conr,
        memr,
        mr: memorization_ratio(conr, memr),
    })
}

/// F1 over the normalized token multisets of `a` and `b`.
pub fn token_f1(a: &str, b: &str) -> f64 {
    let na = normalize_answer(a);
    let nb = normalize_answer(b);
    let ta: Vec<&str> = na.split_whitespace().collect();
    let tb: Vec<&str> = nb.split_whitespace().collect();
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &ta {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &tb {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / ta.len() as f64;
    let r = common as f64 / tb.len() as f64;
    2.0 * p * r / (p + r)
}

/// Perplexity of the contextual answer with the context-then-question
/// prompt and with the question alone.
pub fn ppl_pair(view: &ModelView<'_>, tok: &Tokenizer, inst: &QAInstance) -> Result<(f64, f64)> {
    let answer = tok.encode(&inst.contextual_answer)?;
    let with_ctx = view.sequence_nll(&inst.open_prompt(tok)?, &answer)?;
    let without = view.sequence_nll(&inst.closed_prompt(tok)?, &answer)?;
    Ok((with_ctx.exp(), without.exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { max_new: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub parametric_freq: usize,
    pub n: usize,
    pub conr: f64,
    pub memr: f64,
    pub mr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub conr: f64,
    pub memr: f64,
    pub mr: Option<f64>,
    pub n_instances: usize,
    /// Mean token-F1 between responses and parametric answers.
    pub sim_to_parametric: f64,
    /// Mean token-F1 between responses and contextual answers.
    pub sim_to_contextual: f64,
    /// Mean per-instance perplexity of the contextual answer.
    pub ppl_with_context: f64,
    pub ppl_without_context: f64,
    pub buckets: Vec<BucketReport>,
    pub responses: Vec<String>,
}

/// Greedy open-book answers for every instance, scored.
pub fn evaluate(
    view: &ModelView<'_>,
    tok: &Tokenizer,
    instances: &[QAInstance],
    decode: &DecodeConfig,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut responses = Vec::with_capacity(instances.len());
    let (mut sim_p, mut sim_c, mut ppl_c, mut ppl_q) = (0.0, 0.0, 0.0, 0.0);
    for inst in instances {
        let ids = view.sample(&inst.open_prompt(tok)?, decode.max_new, 0.0, 0)?;
        let resp = tok.decode(&ids);
        sim_p += token_f1(&resp, &inst.parametric_answer);
        sim_c += token_f1(&resp, &inst.contextual_answer);
        let (a, b) = ppl_pair(view, tok, inst)?;
        ppl_c += a;
        ppl_q += b;
        responses.push(resp);
    }
    let scores = conr_memr(&responses, instances)?;

    let mut groups: BTreeMap<usize, (Vec<String>, Vec<QAInstance>)> = BTreeMap::new();
    for (resp, inst) in responses.iter().zip(instances) {
        let g = groups.entry(inst.parametric_freq).or_default();
        g.0.push(resp.clone());
        g.1.push(inst.clone());
    }
    let buckets = groups
        .into_iter()
        .map(|(freq, (resp, insts))| {
            let s = conr_memr(&resp, &insts)?;
            Ok(BucketReport {
                parametric_freq: freq,
                n: insts.len(),
                conr: s.conr,
                memr: s.memr,
                mr: s.mr,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = instances.len() as f64;
    Ok(EvalReport {
        conr: scores.conr,
        memr: scores.memr,
        mr: scores.mr,
        n_instances: instances.len(),
        sim_to_parametric: sim_p / n,
        sim_to_contextual: sim_c / n,
        ppl_with_context: ppl_c / n,
        ppl_without_context: ppl_q / n,
        buckets,
        responses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inst(y: &str, r: &str) -> QAInstance {
        QAInstance {
            id: "q".into(),
            question: "color of bana ?".into(),
            context: format!("the color of bana is {y} ."),
            contextual_answer: y.into(),
            parametric_answer: r.into(),
            parametric_freq: 5,
            faithful: false,
        }
    }

    #[test]
    fn hand_built_ten_instances() {
        let insts: Vec<QAInstance> = (0..10).map(|_| inst("kilo", "mera")).collect();
        let mut resp: Vec<String> = vec!["kilo".into(); 6];
        resp.extend(["mera".to_string(), "The Mera!".to_string()]);
        resp.extend(["zuzu".to_string(), String::new()]);
        let s = conr_memr(&resp, &insts).unwrap();
        assert_eq!(s.conr, 60.0);
        assert_eq!(s.memr, 20.0);
        assert_eq!(s.mr, Some(0.25));
    }

    #[test]
    fn recall_edge_cases() {
        let insts: Vec<QAInstance> = (0..4).map(|_| inst("kilo", "mera")).collect();
        let all_y = vec!["kilo".to_string(); 4];
        let s = conr_memr(&all_y, &insts).unwrap();
        assert_eq!((s.conr, s.memr, s.mr), (100.0, 0.0, Some(0.0)));
        let off = vec!["zuzu".to_string(); 4];
        let s = conr_memr(&off, &insts).unwrap();
        assert_eq!((s.conr, s.memr, s.mr), (0.0, 0.0, None));
        // Both answers present: counted as context recall only.
        let both = vec!["kilo mera".to_string(); 4];
        let s = conr_memr(&both, &insts).unwrap();
        assert_eq!((s.conr, s.memr), (100.0, 0.0));
        assert!(conr_memr(&[], &[]).is_err());
        assert!(conr_memr(&all_y[..3], &insts).is_err());
    }

    #[test]
    fn token_f1_examples() {
        assert_eq!(token_f1("paris france", "paris france"), 1.0);
        assert_eq!(token_f1("rome", "paris"), 0.0);
        assert!((token_f1("paris france", "paris") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_f1("", "paris"), 0.0);
    }

    proptest! {
        #[test]
        fn token_f1_symmetric_and_bounded(a in "[a-d ]{0,12}", b in "[a-d ]{0,12}") {
            let x = token_f1(&a, &b);
            prop_assert_eq!(x, token_f1(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn recall_is_normalization_invariant(upper in any::<bool>(), article in any::<bool>(), bang in any::<bool>()) {
            let insts = vec![inst("kilo", "mera"), inst("kilo", "mera")];
            let mut r = String::from("mera");
            if upper { r = r.to_uppercase(); }
            if article { r = format!("the {r}"); }
            if bang { r.push('!'); }
            let a = conr_memr(&[r, "kilo".into()], &insts).unwrap();
            let b = conr_memr(&["mera".into(), "kilo".into()], &insts).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
