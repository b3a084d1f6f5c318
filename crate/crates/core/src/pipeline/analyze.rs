use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chatprof_autograd::{checkpoint, Graph, ParameterStore};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::corpus::{segment, topic_of_token, Vocabulary};
use crate::encoders::{encode_texts, rows_f64, ProfileEncoders};
use crate::error::{Error, Result};
use crate::mining::ResponseSequence;
use crate::objectives::cosine_similarity;

use super::batches::UtteranceBank;
use super::finetune::is_encoder_param;
use super::{write_json, write_manifest, Dataset, RunConfig, ANALYSIS_DIR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    pub user_id: String,
    pub topic: Option<usize>,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub points: Vec<PcaPoint>,
    /// Variance along each component, in standardized units.
    pub explained: [f64; 2],
}

/// Pairwise cosine similarities binned over `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub users: usize,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn from_values(values: impl IntoIterator<Item = f64>, bins: usize, users: usize) -> Self {
        let bins = bins.max(1);
        let mut counts = vec![0u64; bins];
        for v in values {
            let b = (((v + 1.0) / 2.0) * bins as f64).floor();
            counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self {
            users,
            edges: (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect(),
            counts,
        }
    }

    pub fn mass(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Within-topic against cross-topic mean cosines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub utterances: usize,
    pub utterance_within: f64,
    pub utterance_cross: f64,
    pub utterance_gap: f64,
    pub profile_similar: f64,
    pub profile_dissimilar: f64,
    pub profile_gap: f64,
}

/// Measurements of one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub source: String,
    pub pca: PcaProjection,
    pub histogram: Histogram,
    pub separation: Option<Separation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisArtifact {
    pub before: Snapshot,
    pub after: Snapshot,
}

/// Standardizes each column, then projects onto the two leading principal
/// axes. Constant columns contribute nothing. Each axis is signed so its
/// largest-magnitude loading is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Data(format!("PCA needs at least 2 points, got {n}")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Data("PCA rows differ in length".into()));
    }
    let mut z = DMatrix::<f64>::zeros(n, d);
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        if sd > 1e-12 {
            for i in 0..n {
                z[(i, j)] = (rows[i][j] - mean) / sd;
            }
        }
    }
    let cov = z.transpose() * &z / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::new();
    let mut explained = [0.0; 2];
    for (k, slot) in explained.iter_mut().enumerate() {
        let Some(&c) = order.get(k) else {
            axes.push(vec![0.0; d]);
            continue;
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        *slot = eig.eigenvalues[c].max(0.0);
        axes.push(v);
    }
    let coords = (0..n)
        .map(|i| {
            let p = |a: &Vec<f64>| (0..d).map(|j| z[(i, j)] * a[j]).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect();
    Ok((coords, explained))
}

/// Majority planted topic among a response's topic words, if unique.
fn response_topic(text: &str) -> Option<usize> {
    let mut votes = BTreeMap::new();
    for tok in segment(text) {
        if let Some(t) = topic_of_token(&tok) {
            *votes.entry(t).or_insert(0usize) += 1;
        }
    }
    let best = *votes.values().max()?;
    let mut winners = votes.iter().filter(|(_, &c)| c == best);
    let (&topic, _) = winners.next()?;
    winners.next().is_none().then_some(topic)
}

/// Mean cosine over pairs `i < j`, split by whether the labels agree.
fn split_means<L: PartialEq>(vectors: &[Vec<f64>], labels: &[L]) -> (f64, f64) {
    let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let c = cosine_similarity(&vectors[i], &vectors[j]);
            if labels[i] == labels[j] {
                same += c;
                ns += 1;
            } else {
                diff += c;
                nd += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(same, ns), mean(diff, nd))
}

fn load_encoders(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    ckpt: Option<&Path>,
) -> Result<(ParameterStore<f32>, ProfileEncoders)> {
    let mut store = ParameterStore::new(cfg.seed);
    let encoders = ProfileEncoders::new(&mut store, &cfg.encoder_config(), vocab.len())?;
    if let Some(dir) = ckpt {
        let loaded = checkpoint::load_into(&mut store, dir, is_encoder_param)?;
        if loaded.is_empty() {
            return Err(Error::Data(format!("{} holds no encoder parameters", dir.display())));
        }
    }
    Ok((store, encoders))
}

fn profiles(
    store: &ParameterStore<f32>,
    encoders: &ProfileEncoders,
    data: &Dataset,
    vocab: &Vocabulary,
    users: &[&str],
    history_len: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(users.len());
    for chunk in users.chunks(32) {
        let mut bank = UtteranceBank::new(&data.corpus, vocab);
        let mut inputs = Vec::with_capacity(chunk.len());
        for &u in chunk {
            let h = data.corpus.user(u).expect("listed user exists");
            inputs.push(bank.sequence(u, &ResponseSequence::from_history(h, history_len))?);
        }
        let mut g = Graph::new(store);
        let utt = encoders.utterances(&mut g, &bank.tokens)?;
        let p = encoders.profiles(&mut g, utt, &inputs)?;
        out.extend(rows_f64(g.value(p)));
    }
    Ok(out)
}

/// Responses taken one per user in turn, until `limit`.
fn round_robin(data: &Dataset, limit: usize) -> Vec<(&str, &str)> {
    let users: Vec<_> = data.corpus.users.iter().collect();
    let mut picked = Vec::new();
    let mut depth = 0;
    while picked.len() < limit {
        let mut any = false;
        for (id, h) in &users {
            if let Some(t) = h.triples.get(depth) {
                any = true;
                if picked.len() < limit {
                    picked.push((id.as_str(), t.response_text.as_str()));
                }
            }
        }
        if !any {
            break;
        }
        depth += 1;
    }
    picked
}

fn snapshot(cfg: &RunConfig, data: &Dataset, vocab: &Vocabulary, ckpt: Option<&Path>) -> Result<Snapshot> {
    let a = &cfg.analysis;
    let (store, encoders) = load_encoders(cfg, vocab, ckpt)?;

    let mut labels = Vec::new();
    let mut texts = Vec::new();
    for (id, h) in data.corpus.users.iter().take(a.pca_users) {
        for r in h.responses() {
            labels.push(id.as_str());
            texts.push(r);
        }
    }
    let vectors = encode_texts(&store, &encoders, vocab, &texts)?;
    let (coords, explained) = pca_2d(&vectors)?;
    let points = coords
        .into_iter()
        .zip(&labels)
        .map(|([x, y], id)| PcaPoint {
            user_id: id.to_string(),
            topic: data.primary_topic(id),
            x,
            y,
        })
        .collect();

    let users: Vec<&str> = data.corpus.users.keys().take(a.max_users).map(String::as_str).collect();
    let profile_vecs = profiles(&store, &encoders, data, vocab, &users, cfg.mining.history_len)?;
    let mut sims = Vec::new();
    for i in 0..profile_vecs.len() {
        for j in i + 1..profile_vecs.len() {
            sims.push(cosine_similarity(&profile_vecs[i], &profile_vecs[j]));
        }
    }
    let histogram = Histogram::from_values(sims, a.histogram_bins, users.len());

    let separation = if data.topics.is_some() {
        let (mut vecs, mut topics) = (Vec::new(), Vec::new());
        let sample = round_robin(data, a.max_utterances);
        let labelled: Vec<(usize, &str)> = sample
            .iter()
            .filter_map(|(_, t)| Some((response_topic(t)?, *t)))
            .collect();
        let texts: Vec<&str> = labelled.iter().map(|(_, t)| *t).collect();
        for (v, (topic, _)) in encode_texts(&store, &encoders, vocab, &texts)?
            .into_iter()
            .zip(&labelled)
        {
            vecs.push(v);
            topics.push(*topic);
        }
        let (uw, uc) = split_means(&vecs, &topics);
        let primary: Vec<Option<usize>> = users.iter().map(|u| data.primary_topic(u)).collect();
        let (ps, pd) = split_means(&profile_vecs, &primary);
        Some(Separation {
            utterances: vecs.len(),
            utterance_within: uw,
            utterance_cross: uc,
            utterance_gap: uw - uc,
            profile_similar: ps,
            profile_dissimilar: pd,
            profile_gap: ps - pd,
        })
    } else {
        None
    };

    Ok(Snapshot {
        source: ckpt.map_or_else(|| "random initialization".to_string(), |p| p.display().to_string()),
        pca: PcaProjection { points, explained },
        histogram,
        separation,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Representation diagnostics for `after`, compared with `before` (the
/// seeded random initialization when absent). Writes `analysis.json` and
/// plot-ready CSV files.
pub fn analyze(
    cfg: &RunConfig,
    data: &Dataset,
    vocab: &Vocabulary,
    after: &Path,
    before: Option<&Path>,
) -> Result<AnalysisArtifact> {
    cfg.validate()?;
    if data.corpus.num_users() < 2 {
        return Err(Error::Data(format!(
            "analysis needs at least 2 users, got {}",
            data.corpus.num_users()
        )));
    }
    if data.corpus.num_triples() < 2 {
        return Err(Error::Data("analysis needs at least 2 responses".into()));
    }
    write_manifest(cfg, "analyze")?;
    let artifact = AnalysisArtifact {
        before: snapshot(cfg, data, vocab, before)?,
        after: snapshot(cfg, data, vocab, Some(after))?,
    };

    let out = cfg.paths.output_dir.join(ANALYSIS_DIR);
    write_json(&out.join("analysis.json"), &artifact)?;
    for (name, snap) in [("before", &artifact.before), ("after", &artifact.after)] {
        let mut csv = String::from("user_id,topic,x,y\n");
        for p in &snap.pca.points {
            let topic = p.topic.map(|t| t.to_string()).unwrap_or_default();
            writeln!(csv, "{},{},{},{}", p.user_id, topic, p.x, p.y).expect("string write");
        }
        write_text(&out.join(format!("pca_{name}.csv")), &csv)?;
    }
    let mut csv = String::from("bin_low,bin_high,before,after\n");
    let (b, a) = (&artifact.before.histogram, &artifact.after.histogram);
    for i in 0..b.counts.len() {
        writeln!(csv, "{},{},{},{}", b.edges[i], b.edges[i + 1], b.counts[i], a.counts[i]).expect("string write");
    }
    write_text(&out.join("similarity_histogram.csv"), &csv)?;
    Ok(artifact)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_recovers_points_on_a_coordinate_plane() {
        // Four points spanning the x-y plane of R^3, equal spread on both axes
        // after standardization; third coordinate constant.
        let rows = vec![
            vec![1.0, 0.0, 5.0],
            vec![-1.0, 0.0, 5.0],
            vec![0.0, 2.0, 5.0],
            vec![0.0, -2.0, 5.0],
        ];
        let (coords, explained) = pca_2d(&rows).unwrap();
        assert!((explained[0] - 1.0).abs() < 1e-9 && (explained[1] - 1.0).abs() < 1e-9);
        // Standardized originals in the plane.
        let sd_x = (2.0f64 / 3.0).sqrt();
        let sd_y = (8.0f64 / 3.0).sqrt();
        let orig: Vec<[f64; 2]> = rows.iter().map(|r| [r[0] / sd_x, r[1] / sd_y]).collect();
        // Equal eigenvalues: any rotation is valid, so compare the Gram matrix.
        for i in 0..4 {
            for j in 0..4 {
                let a = coords[i][0] * coords[j][0] + coords[i][1] * coords[j][1];
                let b = orig[i][0] * orig[j][0] + orig[i][1] * orig[j][1];
                assert!((a - b).abs() < 1e-9, "{i},{j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn pca_distinct_spreads_match_up_to_sign() {
        let rows = vec![vec![3.0, 0.1], vec![-3.0, -0.1], vec![1.0, -0.3], vec![-1.0, 0.3]];
        let (coords, explained) = pca_2d(&rows).unwrap();
        assert!(explained[0] >= explained[1]);
        assert_eq!(coords.len(), 4);
        let total: f64 = coords.iter().map(|c| c[0] * c[0] + c[1] * c[1]).sum();
        // Standardized data has total variance d, so squared norms sum to d(n-1).
        assert!((total - 2.0 * 3.0).abs() < 1e-9);
    }

    #[test]
    fn pca_rejects_single_point() {
        assert!(pca_2d(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn histogram_mass_and_edges() {
        let h = Histogram::from_values([-1.0, -0.99, 0.0, 0.5, 1.0, 1.0], 4, 4);
        assert_eq!(h.mass(), 6);
        assert_eq!(h.counts, vec![2, 0, 1, 3]);
        assert_eq!(h.edges, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn response_topic_needs_unique_majority() {
        assert_eq!(response_topic("t1w2 t1w3 t0w1 the"), Some(1));
        assert_eq!(response_topic("t1w2 t0w1"), None);
        assert_eq!(response_topic("hello there"), None);
    }
}
