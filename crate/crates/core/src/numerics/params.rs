use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

/// Which part of the network a parameter belongs to. Surgery scope and
/// freezing decisions are made on this tag alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    DecoderLayer,
    TokenEmbedding,
    PositionalEmbedding,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::DecoderLayer,
        ParamGroup::TokenEmbedding,
        ParamGroup::PositionalEmbedding,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn to_byte(self) -> u8 {
        self as u8
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.get(b as usize).copied()
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A set of [`ParamGroup`] tags.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const EMPTY: GroupSet = GroupSet(0);

    pub fn of(groups: &[ParamGroup]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn decoder_layers() -> Self {
        Self::of(&[ParamGroup::DecoderLayer])
    }

    /// Every group that is trained during adaptation.
    pub fn all_trainable() -> Self {
        Self::of(&[
            ParamGroup::DecoderLayer,
            ParamGroup::TokenEmbedding,
            ParamGroup::PositionalEmbedding,
        ])
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn groups(self) -> Vec<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|g| self.contains(*g)).collect()
    }
}

impl fmt::Debug for GroupSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.groups()).finish()
    }
}

impl Serialize for GroupSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.groups().serialize(s)
    }
}

impl<'de> Deserialize<'de> for GroupSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let groups = Vec::<ParamGroup>::deserialize(d)?;
        Ok(GroupSet::of(&groups))
    }
}

/// A named tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            group,
            value,
            grad,
            trainable,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// One parameter's slice inside a [`GradientVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flattened gradient over a group scope.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub scope: GroupSet,
    pub data: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

impl GradientVector {
    pub fn dot(&self, other: &GradientVector) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn check_compatible(&self, other: &GradientVector) -> Result<()> {
        if self.scope != other.scope || self.layout != other.layout {
            return Err(Error::Layout(format!(
                "scopes {:?} / {:?} with {} / {} entries",
                self.scope,
                other.scope,
                self.layout.len(),
                other.layout.len()
            )));
        }
        Ok(())
    }
}

/// Concatenates the gradients of in-scope parameters in construction order.
pub fn flatten_grads(params: &[Parameter], scope: GroupSet) -> Result<GradientVector> {
    let mut data = Vec::new();
    let mut layout = Vec::new();
    for p in params.iter().filter(|p| scope.contains(p.group)) {
        layout.push(LayoutEntry {
            name: p.name.clone(),
            offset: data.len(),
            len: p.grad.len(),
        });
        data.extend_from_slice(p.grad.data());
    }
    if layout.is_empty() {
        return Err(Error::EmptyScope);
    }
    Ok(GradientVector { scope, data, layout })
}

/// Writes a flattened gradient back into the parameters it was taken from.
pub fn unflatten_grads(params: &mut [Parameter], g: &GradientVector) -> Result<()> {
    let mut entries = g.layout.iter();
    for p in params.iter_mut().filter(|p| g.scope.contains(p.group)) {
        let e = entries
            .next()
            .ok_or_else(|| Error::Layout(format!("missing layout entry for {}", p.name)))?;
        if e.name != p.name || e.len != p.grad.len() {
            return Err(Error::Layout(format!("entry {} does not match {}", e.name, p.name)));
        }
        p.grad
            .data_mut()
            .copy_from_slice(&g.data[e.offset..e.offset + e.len]);
    }
    if entries.next().is_some() {
        return Err(Error::Layout("layout has extra entries".into()));
    }
    Ok(())
}
