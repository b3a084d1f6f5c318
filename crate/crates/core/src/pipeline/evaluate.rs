use std::collections::HashSet;
use std::path::Path;

use chatprof_autograd::{checkpoint, Graph};
use serde::{Deserialize, Serialize};

use crate::corpus::{segment, Vocabulary, BOS, EOS, MASK, PAD, UNK};
use crate::error::{Error, Result};
use crate::generator::{beam_search, MemoryDecoder, SearchTokens};
use crate::metrics::{
    aggregate, paired_t_test, score_example, EvalExample, ExampleScores, IdfTable, MetricReport, TTest, WordVectors,
};

use super::finetune::example_profiles;
use super::{build_model, write_json, write_jsonl, write_manifest, Dataset, GenExample, Part, RunConfig, EVAL_DIR};

/// One line of the generations file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub user_id: String,
    pub query: String,
    pub generated: String,
    pub gold: String,
    pub beam_score: f64,
    pub scores: ExampleScores,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub generations: Vec<GenerationRecord>,
}

/// Metric state shared by every example of an evaluation.
pub struct Scorer {
    word_vectors: WordVectors,
    idf: IdfTable,
    stopwords: HashSet<String>,
}

impl Scorer {
    /// IDF over training responses; word vectors from the configured file.
    pub fn new(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        let word_vectors = match &cfg.paths.word_vectors {
            Some(p) => WordVectors::load(p)?,
            None => {
                log::warn!("no word vectors configured; embedding metrics will be empty");
                WordVectors::new(1)
            }
        };
        let docs: Vec<Vec<String>> = data
            .mining_corpus
            .triples()
            .map(|t| segment(&t.response_text))
            .collect();
        Ok(Self {
            word_vectors,
            idf: IdfTable::build(&docs),
            stopwords: cfg.metrics.stopwords.iter().cloned().collect(),
        })
    }

    pub fn score(&self, data: &Dataset, ex: &GenExample, generated: &str) -> ExampleScores {
        let history = data.train_responses(&ex.user_id).into_iter().map(segment).collect();
        score_example(
            &EvalExample {
                candidate: segment(generated),
                reference: segment(&ex.response),
                history,
            },
            &self.word_vectors,
            &self.idf,
            &self.stopwords,
        )
    }
}

/// Reads per-example scores of one metric from a generations file.
pub fn read_metric_scores(path: &Path, metric: &str) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let r: GenerationRecord =
                serde_json::from_str(line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let s = r.scores;
            let e = s.embedding;
            Ok(match metric {
                "bleu1" => s.bleu1,
                "bleu2" => s.bleu2,
                "rougeL" => s.rouge_l,
                "persona_f1" => s.persona_f1,
                "persona_cover" => s.persona_cover,
                "emb_avg" | "emb_ext" | "emb_gre" => {
                    let e =
                        e.ok_or_else(|| Error::Data(format!("{}:{}: no embedding scores", path.display(), i + 1)))?;
                    match metric {
                        "emb_avg" => e.average,
                        "emb_ext" => e.extreme,
                        _ => e.greedy,
                    }
                }
                other => return Err(Error::Usage(format!("unknown metric {other:?}"))),
            })
        })
        .collect()
}

/// Paired t-test of one metric between two generation files.
pub fn compare_generation_files(a: &Path, b: &Path, metric: &str) -> Result<TTest> {
    paired_t_test(&read_metric_scores(a, metric)?, &read_metric_scores(b, metric)?)
}

/// Beam-decodes the test split and scores every generation.
pub fn evaluate(cfg: &RunConfig, data: &Dataset, vocab: &Vocabulary, ckpt: &Path) -> Result<EvalOutcome> {
    cfg.validate()?;
    write_manifest(cfg, "evaluate")?;
    let mut examples = data.examples(Part::Test, cfg.mining.history_len);
    if let Some(m) = cfg.evaluate.max_examples {
        examples.truncate(m);
    }
    if examples.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let mut model = build_model::<f32>(cfg, vocab.len())?;
    let loaded = checkpoint::load_into(&mut model.store, ckpt, |_| true)?;
    if loaded.len() != model.store.len() {
        return Err(Error::Data(format!(
            "{} provides {} of {} parameters",
            ckpt.display(),
            loaded.len(),
            model.store.len()
        )));
    }
    let scorer = Scorer::new(cfg, data)?;
    let search = SearchTokens {
        bos: BOS,
        eos: EOS,
        banned: vec![PAD, BOS, UNK, MASK],
    };

    let mut records = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let refs: Vec<&GenExample> = chunk.iter().collect();
        let profiles = {
            let mut g = Graph::new(&model.store);
            let p = example_profiles(&mut g, &model.encoders, data, vocab, &refs)?;
            g.value(p).clone()
        };
        for (i, ex) in chunk.iter().enumerate() {
            let query = vocab.tokenize(&ex.query);
            let memory = model.generator.memory(&model.store, profiles.row(i), &query)?;
            let mut decoder = MemoryDecoder::new(&model.generator, &model.store, memory);
            let best = beam_search(&mut decoder, &cfg.generation, &search)?;
            let generated = vocab.detokenize(best.content(EOS));
            let scores = scorer.score(data, ex, &generated);
            records.push(GenerationRecord {
                user_id: ex.user_id.clone(),
                query: ex.query.clone(),
                generated,
                gold: ex.response.clone(),
                beam_score: best.score,
                scores,
            });
        }
    }
    let scores: Vec<ExampleScores> = records.iter().map(|r| r.scores).collect();
    let report = aggregate(&scores);
    let out = cfg.paths.output_dir.join(EVAL_DIR);
    write_json(&out.join("metrics.json"), &report)?;
    write_jsonl(&out.join("generations.jsonl"), &records)?;
    Ok(EvalOutcome {
        report,
        generations: records,
    })
}
