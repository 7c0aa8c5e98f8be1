//! Deterministic synthetic text-classification task and non-IID sharding.
//!
//! The task is rule-defined: token ids `1..V-1` are partitioned into C
//! contiguous groups, one per class, and a sequence's label is the class
//! whose group occurs most often (ties toward the lower class index).
//! Token 0 is reserved as padding and never generated. Because the rule is
//! exact, Bayes-optimal accuracy is 1.0 and convergence checks have a known
//! ceiling.
//!
//! Sharding draws per-class client proportions from a symmetric Dirichlet,
//! the standard label-skew protocol: small alpha concentrates each class on
//! few clients, large alpha approaches IID.

use std::io::Write;

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Dirichlet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Vocabulary layout and labeling rule of the synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub vocab: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    /// `groups[c]` lists the token ids belonging to class `c`. Disjoint,
    /// and together they cover `1..vocab-1` exactly.
    groups: Vec<Vec<usize>>,
}

/// Fraction of positions drawn from the dominant class's group when
/// generating an example; the rest are uniform over all non-pad tokens.
pub const DOMINANCE: f64 = 0.6;

impl TaskSpec {
    /// Splits `1..vocab-1` into `num_classes` contiguous groups (earlier
    /// groups take the remainder when the split is uneven).
    pub fn new(vocab: usize, num_classes: usize, seq_len: usize) -> Result<Self> {
        if vocab < 2 || num_classes == 0 || seq_len == 0 {
            return Err(Error::InvalidArgument(format!(
                "bad task spec: vocab {vocab}, classes {num_classes}, seq_len {seq_len}"
            )));
        }
        let tokens = vocab - 1;
        if tokens < num_classes {
            return Err(Error::InvalidArgument(format!(
                "{tokens} non-pad tokens cannot cover {num_classes} classes"
            )));
        }
        let base = tokens / num_classes;
        let extra = tokens % num_classes;
        let mut groups = Vec::with_capacity(num_classes);
        let mut next = 1usize;
        for c in 0..num_classes {
            let size = base + usize::from(c < extra);
            groups.push((next..next + size).collect());
            next += size;
        }
        Ok(Self {
            vocab,
            num_classes,
            seq_len,
            groups,
        })
    }

    pub fn from_model_config(cfg: &ModelConfig) -> Result<Self> {
        Self::new(cfg.vocab, cfg.num_classes, cfg.seq_len)
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_of(&self, token: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&token))
    }

    /// The labeling rule: class with the most group occurrences, ties to
    /// the lowest class index. Total over all token sequences.
    pub fn label_of(&self, tokens: &[usize]) -> Result<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &t in tokens {
            if t >= self.vocab {
                return Err(Error::InvalidArgument(format!(
                    "token {t} out of range for vocab {}",
                    self.vocab
                )));
            }
            if t == 0 {
                continue;
            }
            if let Some(c) = self.group_of(t) {
                counts[c] += 1;
            }
        }
        let mut best = 0usize;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = c;
            }
        }
        Ok(best)
    }
}

/// One labeled example; `label` always equals the rule applied to `tokens`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Samples `n` examples: each picks a dominant class, fills `DOMINANCE` of
/// positions from that class's group and the rest uniformly over all
/// non-pad tokens, then labels by the rule.
pub fn generate(spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot generate 0 examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let dominant = rng.gen_range(0..spec.num_classes);
        let group = &spec.groups[dominant];
        let mut tokens = Vec::with_capacity(spec.seq_len);
        for _ in 0..spec.seq_len {
            let t = if rng.gen::<f64>() < DOMINANCE {
                group[rng.gen_range(0..group.len())]
            } else {
                rng.gen_range(1..spec.vocab)
            };
            tokens.push(t);
        }
        let label = spec.label_of(&tokens)?;
        out.push(Example { tokens, label });
    }
    Ok(out)
}

/// One client's slice of a dataset. `indices` point into the original
/// example vector; `examples` are the materialized copies.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub examples: Vec<Example>,
}

impl Shard {
    pub fn size(&self) -> usize {
        self.examples.len()
    }
}

/// Largest-remainder apportionment of `n` items to `proportions`; ties on
/// the remainder go to the lower index. The counts sum to `n` exactly.
fn apportion(proportions: &[f64], n: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = proportions.iter().map(|p| (p * n as f64) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = proportions[a] * n as f64 - (proportions[a] * n as f64).floor();
        let fb = proportions[b] * n as f64 - (proportions[b] * n as f64).floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..n - assigned {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Label-skew non-IID partition: for every class, client proportions are
/// drawn from `Dirichlet(alpha)` and that class's examples are dealt out in
/// dataset order. Redraws (bounded) until every client holds at least one
/// example. Shards partition the dataset exactly.
pub fn dirichlet_partition(
    examples: &[Example],
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Shard>> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if examples.len() < num_clients {
        return Err(Error::InvalidArgument(format!(
            "{} examples cannot cover {num_clients} clients",
            examples.len()
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    let materialize = |assignment: Vec<Vec<usize>>| -> Vec<Shard> {
        assignment
            .into_iter()
            .enumerate()
            .map(|(client_id, indices)| Shard {
                client_id,
                examples: indices.iter().map(|&i| examples[i].clone()).collect(),
                indices,
            })
            .collect()
    };

    if num_clients == 1 {
        return Ok(materialize(vec![(0..examples.len()).collect()]));
    }

    let num_classes = examples.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, e) in examples.iter().enumerate() {
        by_class[e.label].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirichlet = Dirichlet::new_with_size(alpha, num_clients)
        .map_err(|e| Error::InvalidArgument(format!("dirichlet: {e}")))?;

    const MAX_TRIES: usize = 100;
    for _ in 0..MAX_TRIES {
        let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        for class_indices in &by_class {
            if class_indices.is_empty() {
                continue;
            }
            let proportions = dirichlet.sample(&mut rng);
            let counts = apportion(&proportions, class_indices.len());
            let mut cursor = 0usize;
            for (client, &count) in counts.iter().enumerate() {
                assignment[client].extend_from_slice(&class_indices[cursor..cursor + count]);
                cursor += count;
            }
        }
        if assignment.iter().all(|a| !a.is_empty()) {
            for a in &mut assignment {
                a.sort_unstable();
            }
            return Ok(materialize(assignment));
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not give every one of {num_clients} clients an example in {MAX_TRIES} draws (alpha {alpha})"
    )))
}

/// Dataset dump: header `label,t0..t{S-1}`, one row per example.
pub fn write_dataset_csv<W: Write>(w: &mut W, examples: &[Example]) -> Result<()> {
    let seq_len = examples.first().map_or(0, |e| e.tokens.len());
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..seq_len).map(|i| format!("t{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for e in examples {
        let row: Vec<String> = std::iter::once(e.label.to_string())
            .chain(e.tokens.iter().map(|t| t.to_string()))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Shard manifest entry for JSON export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardManifestEntry {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

pub fn shard_manifest(shards: &[Shard]) -> Vec<ShardManifestEntry> {
    shards
        .iter()
        .map(|s| ShardManifestEntry {
            client_id: s.client_id,
            indices: s.indices.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_spec() -> TaskSpec {
        TaskSpec::new(64, 4, 16).unwrap()
    }

    fn label_proportions(examples: &[Example], num_classes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; num_classes];
        for e in examples {
            counts[e.label] += 1;
        }
        counts
            .iter()
            .map(|&c| c as f64 / examples.len() as f64)
            .collect()
    }

    /// Natural-log entropy of a label distribution.
    fn entropy(p: &[f64]) -> f64 {
        p.iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| -v * v.ln())
            .sum()
    }

    #[test]
    fn groups_are_disjoint_and_cover_non_pad_tokens() {
        let spec = desk_spec();
        let mut seen = vec![false; spec.vocab];
        for g in spec.groups() {
            for &t in g {
                assert!(!seen[t], "token {t} in two groups");
                seen[t] = true;
            }
        }
        assert!(!seen[0], "pad token must not belong to a group");
        assert!(seen[1..].iter().all(|&s| s), "every non-pad token covered");
    }

    #[test]
    fn label_rule_picks_dominant_group_with_low_tie_break() {
        let spec = desk_spec();
        let g2 = spec.groups()[2].clone();
        let all_g2: Vec<usize> = (0..16).map(|i| g2[i % g2.len()]).collect();
        assert_eq!(spec.label_of(&all_g2).unwrap(), 2);

        // One token from every group: four-way tie resolves to class 0.
        let mut tie = Vec::new();
        for g in spec.groups() {
            tie.push(g[0]);
        }
        tie.resize(16, 0); // padding contributes to no group
        assert_eq!(spec.label_of(&tie).unwrap(), 0);
    }

    #[test]
    fn generation_is_deterministic_and_labels_obey_the_rule() {
        let spec = desk_spec();
        let a = generate(&spec, 200, 9).unwrap();
        let b = generate(&spec, 200, 9).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec, 200, 10).unwrap();
        assert_ne!(a, c);
        for e in &a {
            assert_eq!(e.label, spec.label_of(&e.tokens).unwrap());
            assert_eq!(e.tokens.len(), spec.seq_len);
            assert!(e.tokens.iter().all(|&t| t >= 1 && t < spec.vocab));
        }
    }

    #[test]
    fn label_distribution_is_near_uniform() {
        let spec = desk_spec();
        let examples = generate(&spec, 10_000, 11).unwrap();
        let props = label_proportions(&examples, spec.num_classes);
        for (c, &p) in props.iter().enumerate() {
            assert!(
                (p - 0.25).abs() <= 0.03,
                "class {c} proportion {p} off uniform"
            );
        }
    }

    #[test]
    fn single_client_gets_the_whole_dataset() {
        let spec = desk_spec();
        let examples = generate(&spec, 50, 12).unwrap();
        let shards = dirichlet_partition(&examples, 1, 0.5, 13).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].examples, examples);
        assert_eq!(shards[0].indices, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn shards_partition_the_dataset_exactly() {
        let spec = desk_spec();
        let examples = generate(&spec, 500, 14).unwrap();
        for alpha in [0.1, 0.5, 1000.0] {
            let shards = dirichlet_partition(&examples, 6, alpha, 15).unwrap();
            assert_eq!(shards.len(), 6);
            let mut all: Vec<usize> = shards.iter().flat_map(|s| s.indices.clone()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..500).collect::<Vec<_>>(), "alpha {alpha}");
            for s in &shards {
                assert!(s.size() >= 1);
                for (&i, e) in s.indices.iter().zip(&s.examples) {
                    assert_eq!(*e, examples[i]);
                }
            }
        }
    }

    #[test]
    fn partition_is_deterministic() {
        let spec = desk_spec();
        let examples = generate(&spec, 300, 16).unwrap();
        let a = dirichlet_partition(&examples, 4, 0.5, 17).unwrap();
        let b = dirichlet_partition(&examples, 4, 0.5, 17).unwrap();
        assert_eq!(a, b);
        let c = dirichlet_partition(&examples, 4, 0.5, 18).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn high_alpha_approaches_iid() {
        let spec = desk_spec();
        let examples = generate(&spec, 4000, 19).unwrap();
        let global = label_proportions(&examples, spec.num_classes);
        let shards = dirichlet_partition(&examples, 6, 1000.0, 20).unwrap();
        for s in &shards {
            let local = label_proportions(&s.examples, spec.num_classes);
            for c in 0..spec.num_classes {
                assert!(
                    (local[c] - global[c]).abs() <= 0.05,
                    "client {} class {c}: {} vs {}",
                    s.client_id,
                    local[c],
                    global[c]
                );
            }
        }
    }

    #[test]
    fn low_alpha_skews_labels() {
        let spec = desk_spec();
        let examples = generate(&spec, 4000, 21).unwrap();
        let global_entropy = entropy(&label_proportions(&examples, spec.num_classes));
        let shards = dirichlet_partition(&examples, 6, 0.1, 22).unwrap();
        let mean_entropy: f64 = shards
            .iter()
            .map(|s| entropy(&label_proportions(&s.examples, spec.num_classes)))
            .sum::<f64>()
            / shards.len() as f64;
        assert!(
            mean_entropy < 0.5 * global_entropy,
            "mean client entropy {mean_entropy} vs global {global_entropy}"
        );
    }

    #[test]
    fn undersized_dataset_is_rejected() {
        let spec = desk_spec();
        let examples = generate(&spec, 3, 23).unwrap();
        assert!(matches!(
            dirichlet_partition(&examples, 4, 0.5, 24),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            dirichlet_partition(&examples, 2, 0.0, 24),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn csv_dump_has_documented_columns() {
        let spec = desk_spec();
        let examples = generate(&spec, 3, 25).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &examples).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("label,t0,t1,"));
        assert!(header.ends_with(",t15"));
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn shard_manifest_round_trips_as_json() {
        let spec = desk_spec();
        let examples = generate(&spec, 60, 26).unwrap();
        let shards = dirichlet_partition(&examples, 3, 0.5, 27).unwrap();
        let manifest = shard_manifest(&shards);
        let json = serde_json::to_string(&manifest).unwrap();
        let back: Vec<ShardManifestEntry> = serde_json::from_str(&json).unwrap();
        for (a, b) in manifest.iter().zip(&back) {
            assert_eq!(a.client_id, b.client_id);
            assert_eq!(a.indices, b.indices);
        }
    }

    #[test]
    fn apportionment_conserves_counts() {
        let counts = apportion(&[0.5, 0.3, 0.2], 7);
        assert_eq!(counts.iter().sum::<usize>(), 7);
        assert_eq!(counts, vec![4, 2, 1]);
        let counts = apportion(&[1.0, 0.0], 5);
        assert_eq!(counts, vec![5, 0]);
    }
}
