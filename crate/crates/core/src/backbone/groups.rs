use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Top-level parameter groups; a parameter's group is the first component
/// of its dotted name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Heads,
    Swm,
    Injector,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Backbone, ParamGroup::Heads, ParamGroup::Swm, ParamGroup::Injector];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Heads => "heads",
            ParamGroup::Swm => "swm",
            ParamGroup::Injector => "injector",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{name}`")))
    }

    pub fn of_param(param: &str) -> Option<Self> {
        let head = param.split('.').next()?;
        Self::ALL.into_iter().find(|g| g.name() == head)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which groups receive gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable([bool; 4]);

impl Trainable {
    pub fn all() -> Self {
        Trainable([true; 4])
    }

    pub fn none() -> Self {
        Trainable([false; 4])
    }

    /// Memory stream and injector only.
    pub fn memory_only() -> Self {
        Trainable([false, false, true, true])
    }

    /// Apply `(group, trainable)` flags on top of `self`.
    pub fn set_trainable(mut self, flags: &[(&str, bool)]) -> Result<Self> {
        for &(name, on) in flags {
            self.0[ParamGroup::parse(name)? as usize] = on;
        }
        Ok(self)
    }

    pub fn group(&self, g: ParamGroup) -> bool {
        self.0[g as usize]
    }

    /// Whether the parameter with this dotted name is trainable.
    pub fn param(&self, name: &str) -> bool {
        ParamGroup::of_param(name).is_some_and(|g| self.group(g))
    }

    pub fn frozen(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        ParamGroup::ALL.into_iter().filter(|&g| !self.group(g))
    }
}
