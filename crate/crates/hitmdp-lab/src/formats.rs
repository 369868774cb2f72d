//! On-disk schemas: MDP and homomorphism JSON documents, solver exports,
//! validation reports, corpus files, and network checkpoints (a JSON
//! manifest plus a little-endian f64 blob).

use crate::error::LabError;
use hitmdp_core::coldstart::{sample_from_line, sample_to_line, LatentReasoningModel, ReasoningSample};
use hitmdp_core::homomorphism::{Condition, FiniteHomomorphism, ValidationReport};
use hitmdp_core::mdp::{FiniteHitMdp, RegularizerMode};
use hitmdp_core::nn::{Activation, DenseNet};
use hitmdp_core::solver::SoftQTables;
use hitmdp_core::vmoc::OptionEmbeddingMatrix;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// JSON document for a finite HiT-MDP, row-major nesting.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDoc {
    pub n_states: usize,
    pub n_options: usize,
    pub n_actions: usize,
    /// `[S][A][S']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `[S][A]`
    pub reward: Vec<Vec<f64>>,
    pub discount: f64,
    /// `[S][K]`
    pub initial: Vec<Vec<f64>>,
    /// "zero" (default) or "mutual-info".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularizer: Option<String>,
}

impl MdpDoc {
    pub fn from_mdp(mdp: &FiniteHitMdp) -> Self {
        let (s, k, a) = (mdp.n_states, mdp.n_options, mdp.n_actions);
        let transition = (0..s)
            .map(|si| {
                (0..a)
                    .map(|ai| (0..s).map(|s2| mdp.p(si, ai, s2)).collect())
                    .collect()
            })
            .collect();
        let reward = (0..s).map(|si| (0..a).map(|ai| mdp.r(si, ai)).collect()).collect();
        let initial = (0..s).map(|si| (0..k).map(|op| mdp.initial_p(si, op)).collect()).collect();
        MdpDoc {
            n_states: s,
            n_options: k,
            n_actions: a,
            transition,
            reward,
            discount: mdp.discount,
            initial,
            regularizer: match mdp.regularizer_mode {
                RegularizerMode::Zero => None,
                RegularizerMode::MutualInfo => Some("mutual-info".into()),
            },
        }
    }

    pub fn into_mdp(self) -> Result<FiniteHitMdp, LabError> {
        let mode = match self.regularizer.as_deref() {
            None | Some("zero") => RegularizerMode::Zero,
            Some("mutual-info") => RegularizerMode::MutualInfo,
            Some(other) => {
                return Err(LabError::Config(format!("unknown regularizer mode {other:?}")))
            }
        };
        let flat3 = |t: Vec<Vec<Vec<f64>>>| t.into_iter().flatten().flatten().collect();
        let flat2 = |t: Vec<Vec<f64>>| t.into_iter().flatten().collect();
        FiniteHitMdp::new(
            self.n_states,
            self.n_options,
            self.n_actions,
            flat3(self.transition),
            flat2(self.reward),
            mode,
            self.discount,
            flat2(self.initial),
        )
        .map_err(|e| LabError::Config(format!("invalid mdp document: {e}")))
    }
}

/// JSON document for a homomorphism between two MDP documents.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomomorphismDoc {
    pub state_option_map: Vec<usize>,
    /// `[S*K][K*A]`
    pub action_map: Vec<Vec<usize>>,
    pub base: MdpDoc,
    #[serde(rename = "abstract")]
    pub abstract_mdp: MdpDoc,
}

impl HomomorphismDoc {
    pub fn from_homomorphism(h: &FiniteHomomorphism) -> Self {
        let n_alpha = h.n_aug_actions();
        let action_map = h
            .action_map
            .chunks(n_alpha)
            .map(|row| row.to_vec())
            .collect();
        HomomorphismDoc {
            state_option_map: h.state_option_map.clone(),
            action_map,
            base: MdpDoc::from_mdp(&h.base),
            abstract_mdp: MdpDoc::from_mdp(&h.abstract_mdp),
        }
    }

    pub fn into_homomorphism(self) -> Result<FiniteHomomorphism, LabError> {
        let base = self.base.into_mdp()?;
        let abstract_mdp = self.abstract_mdp.into_mdp()?;
        let action_map = self.action_map.into_iter().flatten().collect();
        FiniteHomomorphism::new(base, abstract_mdp, self.state_option_map, action_map)
            .map_err(|e| LabError::Config(format!("invalid homomorphism document: {e}")))
    }
}

/// One line of a validation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViolationDoc {
    pub condition: String,
    pub tuple: Vec<usize>,
    pub lhs: f64,
    pub rhs: f64,
}

pub fn report_to_docs(report: &ValidationReport) -> Vec<ViolationDoc> {
    report
        .violations
        .iter()
        .map(|v| ViolationDoc {
            condition: match v.condition {
                Condition::Reward => "reward".into(),
                Condition::Transition => "transition".into(),
            },
            tuple: v.tuple.clone(),
            lhs: v.lhs,
            rhs: v.rhs,
        })
        .collect()
}

/// Solver result export.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverExport {
    /// `[S][K]`
    pub q_option: Vec<Vec<f64>>,
    /// `[S][K][A]`
    pub q_action: Vec<Vec<Vec<f64>>>,
    pub elbo_trace: Vec<f64>,
}

impl SolverExport {
    pub fn new(q: &SoftQTables, elbo_trace: Vec<f64>) -> Self {
        let (s, k, a) = (q.n_states, q.n_options, q.n_actions);
        SolverExport {
            q_option: (0..s).map(|si| (0..k).map(|o| q.q_o(si, o)).collect()).collect(),
            q_action: (0..s)
                .map(|si| {
                    (0..k)
                        .map(|o| (0..a).map(|ai| q.q_a(si, o, ai)).collect())
                        .collect()
                })
                .collect(),
            elbo_trace,
        }
    }
}

/// Checkpoint manifest: tensor directory for one network (or a bare
/// tensor set such as the embedding matrix), paired with a binary blob of
/// little-endian 64-bit floats in manifest order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the blob.
    pub offset: usize,
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Identity => "identity",
        Activation::ReLU => "relu",
        Activation::Tanh => "tanh",
    }
}

fn activation_from_name(name: &str) -> Result<Activation, LabError> {
    match name {
        "identity" => Ok(Activation::Identity),
        "relu" => Ok(Activation::ReLU),
        "tanh" => Ok(Activation::Tanh),
        other => Err(LabError::Config(format!("unknown activation {other:?}"))),
    }
}

fn write_blob(path: &Path, values: &[f64]) -> Result<(), LabError> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_blob(path: &Path) -> Result<Vec<f64>, LabError> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(LabError::Config(format!(
            "checkpoint blob {} has {} bytes (not a multiple of 8)",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Writes `<stem>.json` and `<stem>.bin` for a dense network.
pub fn save_net(dir: &Path, stem: &str, net: &DenseNet) -> Result<(), LabError> {
    let mut layer_sizes = vec![net.input_size()];
    let mut activations = Vec::new();
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        layer_sizes.push(layer.fan_out);
        activations.push(activation_name(layer.activation).to_string());
        tensors.push(TensorEntry {
            name: format!("layer{i}.weight"),
            shape: vec![layer.fan_out, layer.fan_in],
            offset: blob.len(),
        });
        blob.extend_from_slice(&layer.weights);
        tensors.push(TensorEntry {
            name: format!("layer{i}.bias"),
            shape: vec![layer.fan_out],
            offset: blob.len(),
        });
        blob.extend_from_slice(&layer.bias);
    }
    let manifest = CheckpointManifest { layer_sizes, activations, tensors };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
    write_blob(&dir.join(format!("{stem}.bin")), &blob)?;
    Ok(())
}

/// Reads a network checkpoint written by [`save_net`].
pub fn load_net(dir: &Path, stem: &str) -> Result<DenseNet, LabError> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let blob = read_blob(&dir.join(format!("{stem}.bin")))?;
    let n_layers = manifest.layer_sizes.len().saturating_sub(1);
    if manifest.activations.len() != n_layers || manifest.tensors.len() != 2 * n_layers {
        return Err(LabError::Config(format!("malformed checkpoint manifest for {stem}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let fan_in = manifest.layer_sizes[i];
        let fan_out = manifest.layer_sizes[i + 1];
        let w = &manifest.tensors[2 * i];
        let b = &manifest.tensors[2 * i + 1];
        let weights = blob
            .get(w.offset..w.offset + fan_in * fan_out)
            .ok_or_else(|| LabError::Config(format!("blob too short for {stem}")))?
            .to_vec();
        let bias = blob
            .get(b.offset..b.offset + fan_out)
            .ok_or_else(|| LabError::Config(format!("blob too short for {stem}")))?
            .to_vec();
        layers.push(hitmdp_core::nn::Layer {
            fan_in,
            fan_out,
            weights,
            bias,
            activation: activation_from_name(&manifest.activations[i])?,
        });
    }
    Ok(DenseNet { layers })
}

/// Writes the option-embedding matrix in the shared tensor format.
pub fn save_embeddings(dir: &Path, stem: &str, emb: &OptionEmbeddingMatrix) -> Result<(), LabError> {
    let manifest = CheckpointManifest {
        layer_sizes: Vec::new(),
        activations: Vec::new(),
        tensors: vec![TensorEntry {
            name: "option_emb".into(),
            shape: vec![emb.n_options, emb.dim],
            offset: 0,
        }],
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
    write_blob(&dir.join(format!("{stem}.bin")), &emb.table)?;
    Ok(())
}

/// Writes a cold-start model as one manifest over its named tensors.
pub fn save_latent_model(
    dir: &Path,
    stem: &str,
    model: &LatentReasoningModel,
) -> Result<(), LabError> {
    let mut tensors = Vec::new();
    for (name, shape, (lo, _hi)) in model.tensors() {
        tensors.push(TensorEntry { name: name.to_string(), shape, offset: lo });
    }
    let manifest =
        CheckpointManifest { layer_sizes: Vec::new(), activations: Vec::new(), tensors };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
    write_blob(&dir.join(format!("{stem}.bin")), &model.params)?;
    Ok(())
}

/// One sample per line: prompt, chain, answer as tab-separated fields of
/// space-joined token names.
pub fn save_corpus(path: &Path, samples: &[ReasoningSample]) -> Result<(), LabError> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&sample_to_line(s));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<ReasoningSample>, LabError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.is_empty())
        .map(|(i, line)| {
            sample_from_line(line)
                .ok_or_else(|| LabError::Config(format!("corpus line {}: unparseable", i + 1)))
        })
        .collect()
}
