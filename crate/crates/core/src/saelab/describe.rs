use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SaeWeights;
use crate::acts::ActivationDump;
use crate::error::{Error, Result};
use crate::synthworld::{Color, Concept, ConceptSet, Shape, POSITION_WORDS};
use crate::tinylm::Tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescribeConfig {
    /// Max-activating contexts examined per feature.
    pub top_n: usize,
    /// Tokens on each side of the activating position.
    pub window: usize,
    pub min_precision: f64,
    /// Below this many active contexts a feature stays undescribed.
    pub min_contexts: usize,
}

impl Default for DescribeConfig {
    fn default() -> Self {
        Self { top_n: 50, window: 3, min_precision: 0.6, min_contexts: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: String,
    pub precision: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescription {
    pub feature: usize,
    /// Fraction of non-BOS corpus positions where the feature is active.
    pub frequency: f64,
    pub described: bool,
    pub n_contexts: usize,
    /// Concepts at or above the precision threshold, best first.
    pub concepts: Vec<ConceptScore>,
}

impl FeatureDescription {
    pub fn concept_set(&self) -> ConceptSet {
        self.concepts.iter().filter_map(|c| Concept::from_label(&c.concept)).collect()
    }

    /// True if the feature is described by some concept present in `set`.
    pub fn matches(&self, set: &ConceptSet) -> bool {
        self.described && self.concepts.iter().filter_map(|c| Concept::from_label(&c.concept)).any(|c| set.contains(c))
    }
}

struct Lexicon {
    shapes: HashMap<u32, Shape>,
    colors: HashMap<u32, Color>,
    positions: HashMap<u32, usize>,
}

impl Lexicon {
    fn new() -> Self {
        let t = Tokenizer::new();
        Self {
            shapes: Shape::ALL.iter().map(|s| (t.id(s.word()), *s)).collect(),
            colors: Color::ALL.iter().map(|c| (t.id(c.word()), *c)).collect(),
            positions: POSITION_WORDS.iter().enumerate().map(|(i, w)| (t.id(w), i)).collect(),
        }
    }

    /// Concepts mentioned in a token window; a composite needs its colour
    /// immediately followed by its shape.
    fn mentions(&self, window: &[u32]) -> ConceptSet {
        let mut set = ConceptSet::new();
        for (i, tok) in window.iter().enumerate() {
            if let Some(s) = self.shapes.get(tok) {
                set.insert(Concept::Shape(*s));
            }
            if let Some(c) = self.colors.get(tok) {
                set.insert(Concept::Color(*c));
                if let Some(s) = window.get(i + 1).and_then(|n| self.shapes.get(n)) {
                    set.insert(Concept::Composite(*c, *s));
                }
            }
            if let Some(p) = self.positions.get(tok) {
                set.insert(Concept::Position(*p));
            }
        }
        set
    }
}

/// Describes every feature of `sae` from its activations over a text corpus
/// dump of the same layer. BOS positions are ignored throughout.
pub fn describe_features(sae: &SaeWeights, corpus: &ActivationDump, cfg: &DescribeConfig) -> Result<Vec<FeatureDescription>> {
    if corpus.layer != sae.layer {
        return Err(Error::LayerMismatch { sae: sae.layer, acts: corpus.layer });
    }
    let (n, d) = (sae.d_sae(), sae.d_model());
    let rows = corpus.non_bos_rows();
    if rows.is_empty() {
        return Err(Error::EmptyGroup("corpus".into()));
    }
    let mut counts = vec![0usize; n];
    // Per feature, (value, row) sorted by value descending then row ascending.
    let mut top: Vec<Vec<(f32, usize)>> = vec![Vec::new(); n];
    for chunk in rows.chunks(4096) {
        let codes = sae.encode_batch(&corpus.gather(chunk));
        for (i, &r) in chunk.iter().enumerate() {
            let code = &codes[i * n..(i + 1) * n];
            for (f, &v) in code.iter().enumerate() {
                if v <= 0.0 {
                    continue;
                }
                counts[f] += 1;
                let list = &mut top[f];
                if list.len() == cfg.top_n && v <= list[cfg.top_n - 1].0 {
                    continue;
                }
                let at = list.partition_point(|(x, _)| *x >= v);
                list.insert(at, (v, r));
                list.truncate(cfg.top_n);
            }
        }
    }
    debug_assert_eq!(corpus.d_model, d);

    let mut row_loc = Vec::with_capacity(corpus.n_rows());
    for (s, meta) in corpus.seqs.iter().enumerate() {
        for p in 0..meta.len() {
            row_loc.push((s, p));
        }
    }
    let lex = Lexicon::new();
    let total = rows.len() as f64;
    Ok((0..n)
        .map(|f| {
            let list = &top[f];
            let frequency = counts[f] as f64 / total;
            if list.len() < cfg.min_contexts {
                return FeatureDescription { feature: f, frequency, described: false, n_contexts: list.len(), concepts: vec![] };
            }
            let mut support = [0usize; crate::synthworld::N_CONCEPTS];
            for &(_, r) in list {
                let (s, p) = row_loc[r];
                let toks = &corpus.seqs[s].tokens;
                let lo = p.saturating_sub(cfg.window);
                let hi = (p + cfg.window + 1).min(toks.len());
                for c in lex.mentions(&toks[lo..hi]).iter() {
                    support[c.id()] += 1;
                }
            }
            let mut concepts: Vec<(usize, ConceptScore)> = Concept::all()
                .filter_map(|c| {
                    let precision = support[c.id()] as f64 / list.len() as f64;
                    (precision >= cfg.min_precision)
                        .then(|| (c.id(), ConceptScore { concept: c.label(), precision, support: support[c.id()] }))
                })
                .collect();
            concepts.sort_by(|a, b| b.1.precision.total_cmp(&a.1.precision).then(a.0.cmp(&b.0)));
            FeatureDescription {
                feature: f,
                frequency,
                described: true,
                n_contexts: list.len(),
                concepts: concepts.into_iter().map(|(_, c)| c).collect(),
            }
        })
        .collect())
}

/// One row per (feature, concept); features with no qualifying concept get
/// an empty concept, undescribed ones the concept `UNDESCRIBED`.
pub fn write_descriptions_csv(path: &Path, descs: &[FeatureDescription]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(e.to_string()))?;
    let err = |e: csv::Error| Error::Invalid(e.to_string());
    w.write_record(["feature_id", "frequency", "concept", "precision", "support"]).map_err(err)?;
    for d in descs {
        let (id, freq) = (d.feature.to_string(), format!("{:.6e}", d.frequency));
        if !d.described {
            w.write_record([id.as_str(), &freq, "UNDESCRIBED", "", ""]).map_err(err)?;
        } else if d.concepts.is_empty() {
            w.write_record([id.as_str(), &freq, "", "", ""]).map_err(err)?;
        }
        for c in &d.concepts {
            w.write_record([id.as_str(), &freq, &c.concept, &format!("{:.4}", c.precision), &c.support.to_string()])
                .map_err(err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acts::SeqMeta;
    use crate::tinylm::BOS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Activations are the rows of a random embedding table looked up by token,
    // so a feature aligned with one token's row fires exactly on that token.
    fn planted(docs: &[Vec<u32>], d: usize) -> (ActivationDump, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vocab = Tokenizer::new().vocab_size();
        let mut table: Vec<f32> = (0..vocab * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for row in table.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        let rows: Vec<f32> = docs.iter().flatten().flat_map(|t| table[*t as usize * d..(*t as usize + 1) * d].to_vec()).collect();
        let metas = docs.iter().map(|t| SeqMeta::text(t.clone())).collect();
        (ActivationDump::new(3, d, metas, rows).unwrap(), table)
    }

    fn corpus() -> Vec<Vec<u32>> {
        let t = Tokenizer::new();
        let texts = crate::synthworld::build_text_corpus(300, 4, 0.4);
        texts.iter().filter_map(|r| t.encode_record(r)).collect()
    }

    #[test]
    fn planted_red_feature_is_described_as_red() {
        let t = Tokenizer::new();
        let d = 32;
        let docs = corpus();
        let (dump, table) = planted(&docs, d);
        let mut sae = SaeWeights::zeros(3, d, 4);
        let red = t.id("red") as usize;
        let we = sae.weights.get_mut(sae.arch.w_enc);
        for j in 0..d {
            we[j * 4] = table[red * d + j];
        }
        sae.weights.get_mut(sae.arch.b_enc)[0] = -0.99;
        let descs = describe_features(&sae, &dump, &DescribeConfig::default()).unwrap();
        let f0 = &descs[0];
        assert!(f0.described);
        let r = f0.concepts.iter().find(|c| c.concept == "red").expect("red described");
        assert!((r.precision - 1.0).abs() < 1e-12);
        assert!(f0.matches(&[Concept::Color(Color::Red)].into_iter().collect()));
        // Dead features.
        for f in &descs[1..] {
            assert!(!f.described);
            assert_eq!(f.frequency, 0.0);
        }
        // Frequency by counting: red tokens over non-BOS positions.
        let reds = docs.iter().flat_map(|s| s.iter().skip(1)).filter(|x| **x as usize == red).count();
        let total: usize = docs.iter().map(|s| s.len() - 1).sum();
        assert!((f0.frequency - reds as f64 / total as f64).abs() < 1e-12);
    }

    #[test]
    fn frequencies_match_counting_oracle() {
        let d = 16;
        let docs = corpus();
        let (dump, _) = planted(&docs, d);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sae = SaeWeights::init(3, d, 40, &[0.0; 16], 5);
        for v in sae.weights.get_mut(sae.arch.b_enc) {
            *v = rng.gen_range(-0.6..0.0);
        }
        let descs = describe_features(&sae, &dump, &DescribeConfig::default()).unwrap();
        let rows = dump.non_bos_rows();
        for f in [0usize, 7, 39] {
            let count = rows.iter().filter(|&&r| sae.encode(&dump.rows[r * d..(r + 1) * d])[f] > 0.0).count();
            assert!((descs[f].frequency - count as f64 / rows.len() as f64).abs() < 1e-12);
        }
        let again = describe_features(&sae, &dump, &DescribeConfig::default()).unwrap();
        assert_eq!(descs, again);
    }

    #[test]
    fn composite_needs_adjacent_color_shape() {
        let lex = Lexicon::new();
        let t = Tokenizer::new();
        let m = lex.mentions(&t.tokenize("a red circle at top"));
        assert!(m.contains(Concept::Composite(Color::Red, Shape::Circle)));
        assert!(m.contains(Concept::Position(1)));
        let m = lex.mentions(&t.tokenize("red and circle"));
        assert!(!m.contains(Concept::Composite(Color::Red, Shape::Circle)));
        assert!(m.contains(Concept::Shape(Shape::Circle)));
    }

    #[test]
    fn layer_mismatch_and_csv() {
        let docs = vec![vec![BOS, 30, 31]];
        let (dump, _) = planted(&docs, 8);
        let sae = SaeWeights::zeros(2, 8, 4);
        assert!(matches!(describe_features(&sae, &dump, &DescribeConfig::default()), Err(Error::LayerMismatch { .. })));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let descs = vec![
            FeatureDescription { feature: 0, frequency: 0.0, described: false, n_contexts: 0, concepts: vec![] },
            FeatureDescription {
                feature: 1,
                frequency: 0.25,
                described: true,
                n_contexts: 50,
                concepts: vec![ConceptScore { concept: "red circle".into(), precision: 0.8, support: 40 }],
            },
        ];
        write_descriptions_csv(&p, &descs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "feature_id,frequency,concept,precision,support");
        assert_eq!(lines[1], "0,0.000000e0,UNDESCRIBED,,");
        assert_eq!(lines[2], "1,2.500000e-1,red circle,0.8000,40");
    }
}
