//! Planted-topic persona corpora.
//!
//! Every user is given one or two latent topics. Responses mix topic words
//! (`t{topic}w{k}`, weighted by rank as `k^-topic_zipf_exponent`) with shared
//! function words (`fw{k}`). Queries use a separate generic vocabulary
//! (`qw{k}`) and carry no topic signal. Responses come in short sessions
//! addressed to one interlocutor: gaps inside a session are short, gaps
//! between sessions long. With probability `density` a session's interlocutor
//! is drawn from a pool shared by all users of the session's topic, otherwise
//! from a pool private to the user, so same-topic users share interlocutors
//! and `density = 0` yields no shared interlocutors at all.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DialogueTriple};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_topics: usize,
    pub responses_per_user: usize,
    pub tokens_per_response: usize,
    pub topic_vocab_size: usize,
    /// Topic words are drawn with weight `rank^-exponent`; 0 is uniform.
    pub topic_zipf_exponent: f64,
    pub function_vocab_size: usize,
    pub query_vocab_size: usize,
    pub query_len: usize,
    /// Probability that a response token is a topic word.
    pub topic_token_prob: f64,
    /// Probability that a user gets a second topic.
    pub second_topic_prob: f64,
    /// Probability that a session addresses the shared topic pool.
    pub density: f64,
    pub shared_pool_size: usize,
    pub private_pool_size: usize,
    pub max_session_len: usize,
    pub short_gap_mean: f64,
    pub long_gap_mean: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 20,
            num_topics: 4,
            responses_per_user: 40,
            tokens_per_response: 6,
            topic_vocab_size: 40,
            topic_zipf_exponent: 0.0,
            function_vocab_size: 8,
            query_vocab_size: 12,
            query_len: 4,
            topic_token_prob: 0.7,
            second_topic_prob: 0.2,
            density: 0.5,
            shared_pool_size: 6,
            private_pool_size: 6,
            max_session_len: 4,
            short_gap_mean: 120.0,
            long_gap_mean: 6.0 * 3600.0,
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_users", self.num_users),
            ("num_topics", self.num_topics),
            ("responses_per_user", self.responses_per_user),
            ("tokens_per_response", self.tokens_per_response),
            ("topic_vocab_size", self.topic_vocab_size),
            ("function_vocab_size", self.function_vocab_size),
            ("query_vocab_size", self.query_vocab_size),
            ("query_len", self.query_len),
            ("shared_pool_size", self.shared_pool_size),
            ("private_pool_size", self.private_pool_size),
            ("max_session_len", self.max_session_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Usage(format!("synthetic: {name} must be at least 1")));
        }
        for (name, p) in [
            ("density", self.density),
            ("topic_token_prob", self.topic_token_prob),
            ("second_topic_prob", self.second_topic_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Usage(format!("synthetic: {name} = {p} outside [0, 1]")));
            }
        }
        if !(self.short_gap_mean > 0.0 && self.long_gap_mean > 0.0) {
            return Err(Error::Usage("synthetic: gap means must be positive".into()));
        }
        if !(self.topic_zipf_exponent >= 0.0 && self.topic_zipf_exponent.is_finite()) {
            return Err(Error::Usage(
                "synthetic: topic_zipf_exponent must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Planted topics per user, primary first.
    pub user_topics: BTreeMap<String, Vec<usize>>,
}

impl SyntheticCorpus {
    pub fn primary_topic(&self, user: &str) -> Option<usize> {
        self.user_topics.get(user).and_then(|t| t.first().copied())
    }
}

/// Topic index of a generated topic word such as `t3w7`.
pub fn topic_of_token(token: &str) -> Option<usize> {
    let rest = token.strip_prefix('t')?;
    let (topic, word) = rest.split_once('w')?;
    word.parse::<usize>().ok()?;
    topic.parse().ok()
}

fn exp_sample(rng: &mut ChaCha8Rng, mean: f64) -> i64 {
    let u: f64 = rng.gen();
    ((-mean * (1.0 - u).ln()).round() as i64).max(1)
}

fn zipf_index(rng: &mut ChaCha8Rng, cdf: &[f64]) -> usize {
    let u: f64 = rng.gen::<f64>() * cdf[cdf.len() - 1];
    cdf.iter().position(|c| u < *c).unwrap_or(cdf.len() - 1)
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cdf = Vec::with_capacity(spec.topic_vocab_size);
    let mut acc = 0.0;
    for k in 0..spec.topic_vocab_size {
        acc += ((k + 1) as f64).powf(-spec.topic_zipf_exponent);
        cdf.push(acc);
    }

    let width = spec.num_users.to_string().len();
    let mut triples = Vec::new();
    let mut user_topics = BTreeMap::new();
    for u in 0..spec.num_users {
        let user_id = format!("u{u:0width$}");
        let primary = u % spec.num_topics;
        let mut topics = vec![primary];
        if spec.num_topics > 1 && rng.gen::<f64>() < spec.second_topic_prob {
            let mut other = rng.gen_range(0..spec.num_topics - 1);
            if other >= primary {
                other += 1;
            }
            topics.push(other);
        }

        let mut t: i64 = 1_600_000_000 + (u as i64) * 7_919;
        let mut produced = 0;
        while produced < spec.responses_per_user {
            let topic = if topics.len() > 1 && rng.gen::<f64>() < 0.3 {
                topics[1]
            } else {
                primary
            };
            let addressee = if rng.gen::<f64>() < spec.density {
                format!("s{topic}_{}", rng.gen_range(0..spec.shared_pool_size))
            } else {
                format!("p{user_id}_{}", rng.gen_range(0..spec.private_pool_size))
            };
            let session = rng
                .gen_range(1..=spec.max_session_len)
                .min(spec.responses_per_user - produced);
            t += exp_sample(&mut rng, spec.long_gap_mean);
            for s in 0..session {
                if s > 0 {
                    t += exp_sample(&mut rng, spec.short_gap_mean);
                }
                let query: Vec<String> = (0..spec.query_len)
                    .map(|_| format!("qw{}", rng.gen_range(0..spec.query_vocab_size)))
                    .collect();
                let mut words: Vec<String> = (0..spec.tokens_per_response)
                    .map(|_| {
                        if rng.gen::<f64>() < spec.topic_token_prob {
                            format!("t{topic}w{}", zipf_index(&mut rng, &cdf))
                        } else {
                            format!("fw{}", rng.gen_range(0..spec.function_vocab_size))
                        }
                    })
                    .collect();
                if !words.iter().any(|w| topic_of_token(w).is_some()) {
                    let slot = rng.gen_range(0..words.len());
                    words[slot] = format!("t{topic}w{}", zipf_index(&mut rng, &cdf));
                }
                triples.push(DialogueTriple {
                    user_id: user_id.clone(),
                    query_text: query.join(" "),
                    response_text: words.join(" "),
                    timestamp: t,
                    addressee_id: addressee.clone(),
                });
            }
            produced += session;
        }
        user_topics.insert(user_id, topics);
    }
    Ok(SyntheticCorpus {
        corpus: Corpus::from_triples(triples, format!("synthetic(seed={})", spec.seed)),
        user_topics,
    })
}
