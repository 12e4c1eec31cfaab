use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WeightKind {
    In,
    Out,
}

impl WeightKind {
    pub const ALL: [WeightKind; 2] = [WeightKind::In, WeightKind::Out];

    fn as_str(self) -> &'static str {
        match self {
            WeightKind::In => "w_in",
            WeightKind::Out => "w_out",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "w_in" => Some(WeightKind::In),
            "w_out" => Some(WeightKind::Out),
            _ => None,
        }
    }
}

/// Identifies one parameter tensor. Its `Display` form is the tensor name
/// used in checkpoints, e.g. `layers.2.adapters.5.w_out.b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    InputProj,
    OutputHead,
    Router { layer: usize },
    /// Dense weight of a retained expert.
    Expert { layer: usize, expert: usize, kind: WeightKind },
    /// Frozen original weight of a replaced expert (annealing only).
    Original { layer: usize, expert: usize, kind: WeightKind },
    Base { layer: usize, group: usize, kind: WeightKind },
    AdapterA { layer: usize, expert: usize, kind: WeightKind },
    AdapterB { layer: usize, expert: usize, kind: WeightKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamClass {
    Projection,
    Router,
    Expert,
    Original,
    Base,
    Adapter,
}

impl ParamKey {
    pub fn class(&self) -> ParamClass {
        match self {
            ParamKey::InputProj | ParamKey::OutputHead => ParamClass::Projection,
            ParamKey::Router { .. } => ParamClass::Router,
            ParamKey::Expert { .. } => ParamClass::Expert,
            ParamKey::Original { .. } => ParamClass::Original,
            ParamKey::Base { .. } => ParamClass::Base,
            ParamKey::AdapterA { .. } | ParamKey::AdapterB { .. } => ParamClass::Adapter,
        }
    }

    pub fn is_adapter(&self) -> bool {
        self.class() == ParamClass::Adapter
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ParamKey::InputProj => write!(f, "input_proj"),
            ParamKey::OutputHead => write!(f, "output_head"),
            ParamKey::Router { layer } => write!(f, "layers.{layer}.router"),
            ParamKey::Expert { layer, expert, kind } => {
                write!(f, "layers.{layer}.experts.{expert}.{}", kind.as_str())
            }
            ParamKey::Original { layer, expert, kind } => {
                write!(f, "layers.{layer}.originals.{expert}.{}", kind.as_str())
            }
            ParamKey::Base { layer, group, kind } => {
                write!(f, "layers.{layer}.bases.{group}.{}", kind.as_str())
            }
            ParamKey::AdapterA { layer, expert, kind } => {
                write!(f, "layers.{layer}.adapters.{expert}.{}.a", kind.as_str())
            }
            ParamKey::AdapterB { layer, expert, kind } => {
                write!(f, "layers.{layer}.adapters.{expert}.{}.b", kind.as_str())
            }
        }
    }
}

impl FromStr for ParamKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Error::Contract(format!("unrecognized tensor name `{s}`"));
        let parts: Vec<&str> = s.split('.').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        let kind = |p: &str| WeightKind::parse(p).ok_or_else(bad);
        match parts.as_slice() {
            ["input_proj"] => Ok(ParamKey::InputProj),
            ["output_head"] => Ok(ParamKey::OutputHead),
            ["layers", l, "router"] => Ok(ParamKey::Router { layer: num(l)? }),
            ["layers", l, "experts", e, k] => Ok(ParamKey::Expert {
                layer: num(l)?,
                expert: num(e)?,
                kind: kind(k)?,
            }),
            ["layers", l, "originals", e, k] => Ok(ParamKey::Original {
                layer: num(l)?,
                expert: num(e)?,
                kind: kind(k)?,
            }),
            ["layers", l, "bases", g, k] => Ok(ParamKey::Base {
                layer: num(l)?,
                group: num(g)?,
                kind: kind(k)?,
            }),
            ["layers", l, "adapters", e, k, "a"] => Ok(ParamKey::AdapterA {
                layer: num(l)?,
                expert: num(e)?,
                kind: kind(k)?,
            }),
            ["layers", l, "adapters", e, k, "b"] => Ok(ParamKey::AdapterB {
                layer: num(l)?,
                expert: num(e)?,
                kind: kind(k)?,
            }),
            _ => Err(bad()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse_back() {
        let keys = [
            ParamKey::InputProj,
            ParamKey::OutputHead,
            ParamKey::Router { layer: 3 },
            ParamKey::Expert { layer: 0, expert: 12, kind: WeightKind::Out },
            ParamKey::Original { layer: 1, expert: 2, kind: WeightKind::In },
            ParamKey::Base { layer: 2, group: 0, kind: WeightKind::In },
            ParamKey::AdapterA { layer: 1, expert: 7, kind: WeightKind::In },
            ParamKey::AdapterB { layer: 1, expert: 7, kind: WeightKind::Out },
        ];
        for k in keys {
            assert_eq!(k.to_string().parse::<ParamKey>().unwrap(), k);
        }
        assert!("layers.x.router".parse::<ParamKey>().is_err());
        assert!("layers.0.adapters.1.w_in.c".parse::<ParamKey>().is_err());
    }
}
