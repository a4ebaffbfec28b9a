//! The audit space: every candidate adapter unit that can be gated on or off,
//! together with its parameter cost.

mod forward;

pub use forward::{adapter_forward, affine_forward, AdapterWeights, Branch, ForwardError, Matrix};

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    LoRA,
    AdaptFormer,
    AffineLN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Topology {
    /// Serial: acts on the wrapped layer's output.
    SA,
    /// Parallel: acts on the wrapped layer's input.
    PA,
    /// Sum of a serial and a parallel branch.
    SAPA,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    Attention,
    FeedForward,
    Norm,
}

impl Family {
    pub fn allows_slot(self, slot: Slot) -> bool {
        match self {
            Family::LoRA => slot != Slot::Norm,
            Family::AdaptFormer => slot != Slot::Norm,
            Family::AffineLN => slot == Slot::Norm,
        }
    }

    /// Whether units of this family come in several sizes (ranks or bottlenecks).
    pub fn is_sized(self) -> bool {
        self != Family::AffineLN
    }
}

/// How a SAPA unit's two branches hold their projections.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SapaWeights {
    /// Each branch owns its own down/up pair.
    #[default]
    Independent,
    /// Both branches reuse one down/up pair.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AdapterKind {
    pub family: Family,
    pub topology: Topology,
    /// LoRA rank or AdaptFormer bottleneck width; 0 for AffineLN.
    pub size: u32,
}

impl AdapterKind {
    pub fn new(family: Family, topology: Topology, size: u32) -> Result<Self, SpaceError> {
        let kind = Self { family, topology, size };
        kind.validate()?;
        Ok(kind)
    }

    pub fn affine_ln() -> Self {
        Self { family: Family::AffineLN, topology: Topology::None, size: 0 }
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        let ok = match self.family {
            Family::AffineLN => self.topology == Topology::None && self.size == 0,
            Family::LoRA | Family::AdaptFormer => self.topology != Topology::None && self.size > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(SpaceError::MalformedKind(*self))
        }
    }

    /// Trainable parameter count when attached to a layer of width `hidden_dim`.
    pub fn param_count(&self, hidden_dim: u32, sapa: SapaWeights) -> u64 {
        let d = u64::from(hidden_dim);
        let size = u64::from(self.size);
        match (self.family, self.topology) {
            (Family::AffineLN, _) => 2 * d,
            (_, Topology::SAPA) if sapa == SapaWeights::Independent => 4 * d * size,
            _ => 2 * d * size,
        }
    }
}

/// Raw parameter count with independent SAPA branches.
pub fn raw_param_count(kind: AdapterKind, hidden_dim: u32) -> u64 {
    kind.param_count(hidden_dim, SapaWeights::Independent)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneDesc {
    #[serde(rename = "layers")]
    pub num_layers: usize,
    pub hidden_dims: Vec<u32>,
    #[serde(rename = "param_count")]
    pub backbone_param_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_params_per_layer: Option<u64>,
}

impl BackboneDesc {
    pub fn uniform(num_layers: usize, hidden_dim: u32, param_count: u64) -> Self {
        Self {
            num_layers,
            hidden_dims: vec![hidden_dim; num_layers],
            backbone_param_count: param_count,
            norm_params_per_layer: None,
        }
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.num_layers == 0 {
            return Err(SpaceError::InvalidBackbone("no layers".into()));
        }
        if self.hidden_dims.len() != self.num_layers {
            return Err(SpaceError::InvalidBackbone(format!(
                "{} hidden dims for {} layers",
                self.hidden_dims.len(),
                self.num_layers
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(SpaceError::InvalidBackbone("zero hidden dim".into()));
        }
        if self.backbone_param_count == 0 || self.norm_params_per_layer == Some(0) {
            return Err(SpaceError::InvalidBackbone("zero parameter count".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Template {
    pub family: Family,
    pub topology: Topology,
    pub size: u32,
    pub slot: Slot,
}

impl Template {
    pub fn new(family: Family, topology: Topology, size: u32, slot: Slot) -> Self {
        Self { family, topology, size, slot }
    }

    pub fn kind(&self) -> AdapterKind {
        AdapterKind { family: self.family, topology: self.topology, size: self.size }
    }
}

pub const DEFAULT_LORA_RANKS: [u32; 4] = [2, 4, 8, 16];
pub const DEFAULT_ADAPTFORMER_BOTTLENECKS: [u32; 4] = [4, 8, 16, 32];
const SIZED_TOPOLOGIES: [Topology; 3] = [Topology::SA, Topology::PA, Topology::SAPA];

/// Attention: LoRA at every rank and topology. Feed-forward: LoRA and AdaptFormer
/// at every size and topology. Norm: Affine-LN. 37 templates per layer.
pub fn default_templates() -> Vec<Template> {
    let mut out = Vec::with_capacity(37);
    for slot in [Slot::Attention, Slot::FeedForward] {
        for topology in SIZED_TOPOLOGIES {
            for rank in DEFAULT_LORA_RANKS {
                out.push(Template::new(Family::LoRA, topology, rank, slot));
            }
        }
    }
    for topology in SIZED_TOPOLOGIES {
        for width in DEFAULT_ADAPTFORMER_BOTTLENECKS {
            out.push(Template::new(Family::AdaptFormer, topology, width, Slot::FeedForward));
        }
    }
    out.push(Template::new(Family::AffineLN, Topology::None, 0, Slot::Norm));
    out
}

/// The loadable audit-space document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub backbone: BackboneDesc,
    #[serde(default = "default_templates")]
    pub templates: Vec<Template>,
    #[serde(default)]
    pub sapa_weights: SapaWeights,
}

impl SpaceConfig {
    pub fn new(backbone: BackboneDesc, templates: Vec<Template>) -> Self {
        Self { backbone, templates, sapa_weights: SapaWeights::Independent }
    }

    /// Two 768-wide layers on a 62M-parameter backbone with the default templates.
    pub fn reference() -> Self {
        Self::new(BackboneDesc::uniform(2, 768, 62_000_000), default_templates())
    }

    pub fn from_json(text: &str) -> Result<Self, SpaceError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn build(&self, initial: &InitialGates) -> Result<AuditSpace, SpaceError> {
        build_audit_space_with(&self.backbone, &self.templates, self.sapa_weights, initial)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub slot: Slot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterUnit {
    pub id: usize,
    pub kind: AdapterKind,
    pub site: Site,
    pub hidden_dim: u32,
    pub raw_params: u64,
    /// Fraction of the backbone's parameter count.
    pub cost: f64,
    pub gate: bool,
}

impl AdapterUnit {
    /// Units sharing this key differ only in size.
    pub fn sibling_key(&self) -> (Site, Family, Topology) {
        (self.site, self.kind.family, self.kind.topology)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitialGates {
    #[default]
    AllInactive,
    Active(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSpace {
    pub backbone: BackboneDesc,
    pub sapa_weights: SapaWeights,
    pub units: Vec<AdapterUnit>,
}

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("template {0:?} cannot attach to its slot")]
    IncompatibleTemplate(Template),
    #[error("malformed adapter kind {0:?}")]
    MalformedKind(AdapterKind),
    #[error("duplicate template {0:?}")]
    DuplicateTemplate(Template),
    #[error("the schema produced no units")]
    EmptySpace,
    #[error("invalid backbone: {0}")]
    InvalidBackbone(String),
    #[error("unit {unit} costs {cost} of the backbone; costs must lie in (0, 1)")]
    CostOutOfRange { unit: usize, cost: f64 },
    #[error("initial gate names unit {0}, which does not exist")]
    UnknownUnit(usize),
    #[error("malformed space document: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn build_audit_space(
    backbone: &BackboneDesc,
    templates: &[Template],
    initial: &InitialGates,
) -> Result<AuditSpace, SpaceError> {
    build_audit_space_with(backbone, templates, SapaWeights::Independent, initial)
}

pub fn build_audit_space_with(
    backbone: &BackboneDesc,
    templates: &[Template],
    sapa: SapaWeights,
    initial: &InitialGates,
) -> Result<AuditSpace, SpaceError> {
    backbone.validate()?;
    let mut seen = BTreeSet::new();
    for t in templates {
        t.kind().validate()?;
        if !t.family.allows_slot(t.slot) {
            return Err(SpaceError::IncompatibleTemplate(*t));
        }
        if !seen.insert(*t) {
            return Err(SpaceError::DuplicateTemplate(*t));
        }
    }

    let mut keyed: Vec<(usize, Slot, AdapterKind)> = (0..backbone.num_layers)
        .flat_map(|layer| templates.iter().map(move |t| (layer, t.slot, t.kind())))
        .collect();
    keyed.sort();
    if keyed.is_empty() {
        return Err(SpaceError::EmptySpace);
    }

    let total = backbone.backbone_param_count as f64;
    let mut units = Vec::with_capacity(keyed.len());
    for (id, (layer, slot, kind)) in keyed.into_iter().enumerate() {
        let hidden_dim = backbone.hidden_dims[layer];
        let raw_params = kind.param_count(hidden_dim, sapa);
        let cost = raw_params as f64 / total;
        if !(cost > 0.0 && cost < 1.0) {
            return Err(SpaceError::CostOutOfRange { unit: id, cost });
        }
        units.push(AdapterUnit {
            id,
            kind,
            site: Site { layer, slot },
            hidden_dim,
            raw_params,
            cost,
            gate: false,
        });
    }

    if let InitialGates::Active(ids) = initial {
        for &id in ids {
            units.get_mut(id).ok_or(SpaceError::UnknownUnit(id))?.gate = true;
        }
    }

    Ok(AuditSpace { backbone: backbone.clone(), sapa_weights: sapa, units })
}

impl AuditSpace {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.cost).collect()
    }

    pub fn initial_gates(&self) -> Vec<bool> {
        self.units.iter().map(|u| u.gate).collect()
    }

    pub fn total_cost(&self, gates: &[bool]) -> f64 {
        self.units.iter().zip(gates).filter(|(_, &g)| g).map(|(u, _)| u.cost).sum()
    }

    /// The unit at the same site, family and topology as `id` but with `size`.
    pub fn sibling(&self, id: usize, size: u32) -> Option<usize> {
        let key = self.units.get(id)?.sibling_key();
        self.units
            .iter()
            .find(|u| u.sibling_key() == key && u.kind.size == size)
            .map(|u| u.id)
    }

    /// Id-to-descriptor dump, one entry per unit.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("audit space serializes")
    }
}
