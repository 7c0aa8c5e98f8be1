//! Pairing client- and server-side adapter fragments into full sets,
//! federated averaging, and redistribution after aggregation.
//!
//! Averaging uses the delta form `base + sum(w_i * (x_i - base))` after
//! sorting contributors by client id. Sorting makes the result independent
//! of input order bit-for-bit, and the delta form makes averaging identical
//! inputs return them unchanged, also bit-for-bit. Weights are sample
//! counts normalized by their exact integer sum (or uniform).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AdapterSet, BlockAdapters, ClientAdapters, LoraAdapter, ModelConfig, Partition, ServerAdapters,
};
use crate::tensor::Tensor;

/// A client's complete adapter set rejoined for aggregation, with its
/// FedAvg weight source.
#[derive(Debug, Clone)]
pub struct PairedAdapters {
    pub client_id: usize,
    pub sample_count: u64,
    pub set: AdapterSet,
}

/// The aggregated set all parties resume from; `version` counts completed
/// aggregations.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAdapterSet {
    pub set: AdapterSet,
    pub version: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    /// Canonical FedAvg: weight_i = sample_count_i / total.
    SampleCounts,
    /// Equal weights regardless of shard sizes.
    Uniform,
}

/// Joins the two fragments of one client's adapters. The boundary must be
/// gapless: the client covers blocks `[0, cut)` and the server `[cut, L)`.
pub fn pair(
    client: &ClientAdapters,
    server: &ServerAdapters,
    partition: Partition,
) -> Result<AdapterSet> {
    let cut = partition.cut();
    if client.cut != cut || server.cut != cut {
        // A lower claimed cut on either side leaves blocks unowned; a
        // higher one claims blocks twice. Name the first affected block.
        let block = client.cut.min(server.cut).min(cut);
        return Err(Error::Pairing {
            block,
            reason: format!(
                "client claims cut {}, server claims cut {}, partition says {cut}",
                client.cut, server.cut
            ),
        });
    }
    if client.blocks.len() != cut {
        return Err(Error::Pairing {
            block: client.blocks.len().min(cut),
            reason: format!(
                "client fragment has {} blocks but covers [0, {cut})",
                client.blocks.len()
            ),
        });
    }
    let mut blocks = Vec::with_capacity(client.blocks.len() + server.blocks.len());
    blocks.extend(client.blocks.iter().cloned());
    blocks.extend(server.blocks.iter().cloned());
    Ok(AdapterSet {
        blocks,
        head_w: server.head_w.clone(),
        head_b: server.head_b.clone(),
    })
}

/// Splits a full set at `partition`. Pure reindexing: `pair` of the result
/// reproduces the input bit-identically.
pub fn split(set: &AdapterSet, partition: Partition) -> Result<(ClientAdapters, ServerAdapters)> {
    let cut = partition.cut();
    if cut > set.blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "cut {cut} exceeds the set's {} blocks",
            set.blocks.len()
        )));
    }
    Ok((
        ClientAdapters {
            cut,
            blocks: set.blocks[..cut].to_vec(),
        },
        ServerAdapters {
            cut,
            blocks: set.blocks[cut..].to_vec(),
            head_w: set.head_w.clone(),
            head_b: set.head_b.clone(),
        },
    ))
}

fn check_same_structure(reference: &AdapterSet, other: &AdapterSet, who: usize) -> Result<()> {
    if reference.blocks.len() != other.blocks.len() {
        return Err(Error::Aggregation(format!(
            "client {who}: {} blocks vs {} in the first set",
            other.blocks.len(),
            reference.blocks.len()
        )));
    }
    let check = |name: &str, a: &Tensor, b: &Tensor| -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::Aggregation(format!(
                "client {who}: {name} shape {:?} vs {:?}",
                b.shape(),
                a.shape()
            )));
        }
        Ok(())
    };
    for (i, (ra, oa)) in reference.blocks.iter().zip(&other.blocks).enumerate() {
        check(&format!("block {i} q.a"), &ra.q.a, &oa.q.a)?;
        check(&format!("block {i} q.b"), &ra.q.b, &oa.q.b)?;
        check(&format!("block {i} v.a"), &ra.v.a, &oa.v.a)?;
        check(&format!("block {i} v.b"), &ra.v.b, &oa.v.b)?;
    }
    check("head_w", &reference.head_w, &other.head_w)?;
    check("head_b", &reference.head_b, &other.head_b)
}

/// Per-coordinate weighted mean in delta form against the lowest-id
/// contributor.
fn average_tensors(base: &Tensor, others: &[(&Tensor, f64)]) -> Tensor {
    let mut out = base.clone();
    for (t, w) in others {
        for (o, (x, b)) in out
            .data_mut()
            .iter_mut()
            .zip(t.data().iter().zip(base.data()))
        {
            *o += w * (x - b);
        }
    }
    out
}

/// Weighted per-tensor mean of complete adapter sets. Contributors are
/// sorted by client id first, so input order never affects the result.
pub fn fedavg(sets: &[PairedAdapters], weighting: Weighting) -> Result<AdapterSet> {
    if sets.is_empty() {
        return Err(Error::Aggregation("no adapter sets to average".into()));
    }
    let mut sorted: Vec<&PairedAdapters> = sets.iter().collect();
    sorted.sort_by_key(|p| p.client_id);
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(Error::Aggregation(format!(
                "duplicate client id {}",
                pair[0].client_id
            )));
        }
    }
    for p in &sorted {
        check_same_structure(&sorted[0].set, &p.set, p.client_id)?;
    }

    let counts: Vec<u64> = match weighting {
        Weighting::SampleCounts => sorted.iter().map(|p| p.sample_count).collect(),
        Weighting::Uniform => vec![1; sorted.len()],
    };
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Aggregation(
            "total sample count is zero; weights undefined".into(),
        ));
    }
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();

    let base = &sorted[0].set;
    let gather = |pick: &dyn Fn(&AdapterSet) -> &Tensor| -> Tensor {
        let others: Vec<(&Tensor, f64)> = sorted
            .iter()
            .zip(&weights)
            .skip(1)
            .map(|(p, &w)| (pick(&p.set), w))
            .collect();
        average_tensors(pick(base), &others)
    };

    let blocks = (0..base.blocks.len())
        .map(|i| BlockAdapters {
            q: LoraAdapter {
                a: gather(&move |s: &AdapterSet| &s.blocks[i].q.a),
                b: gather(&move |s: &AdapterSet| &s.blocks[i].q.b),
            },
            v: LoraAdapter {
                a: gather(&move |s: &AdapterSet| &s.blocks[i].v.a),
                b: gather(&move |s: &AdapterSet| &s.blocks[i].v.b),
            },
        })
        .collect();
    Ok(AdapterSet {
        blocks,
        head_w: gather(&|s: &AdapterSet| &s.head_w),
        head_b: gather(&|s: &AdapterSet| &s.head_b),
    })
}

/// Splits the global set once per client partition. Every client resumes
/// from the identical global state.
pub fn split_and_distribute(
    global: &GlobalAdapterSet,
    partitions: &BTreeMap<usize, Partition>,
) -> Result<BTreeMap<usize, (ClientAdapters, ServerAdapters)>> {
    let mut out = BTreeMap::new();
    for (&client_id, &partition) in partitions {
        out.insert(client_id, split(&global.set, partition)?);
    }
    Ok(out)
}

/// Wire bytes to send a client its blocks `[0, cut)` of the global set:
/// two targets per block, two `r x H`-sized f64 factors per target.
pub fn distribution_payload_bytes(cut: usize, config: &ModelConfig) -> u64 {
    cut as u64 * 2 * (2 * config.lora_rank as u64 * config.hidden as u64) * 8
}

/// One row of the serialization manifest accompanying a checkpoint:
/// tensors appear in checkpoint declaration order with their owner under
/// the given partition. Head entries carry no block index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub block: Option<usize>,
    pub target: String,
    pub owner: String,
}

pub fn manifest(num_blocks: usize, partition: Partition) -> Vec<ManifestEntry> {
    let mut out = Vec::with_capacity(num_blocks * 4 + 2);
    for block in 0..num_blocks {
        let owner = if block < partition.cut() {
            "client"
        } else {
            "server"
        };
        for target in ["query.down", "query.up", "value.down", "value.up"] {
            out.push(ManifestEntry {
                block: Some(block),
                target: target.to_string(),
                owner: owner.to_string(),
            });
        }
    }
    for target in ["head.weight", "head.bias"] {
        out.push(ManifestEntry {
            block: None,
            target: target.to_string(),
            owner: "server".to_string(),
        });
    }
    out
}
