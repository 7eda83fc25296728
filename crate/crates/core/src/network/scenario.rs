use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::NetworkDescription;
use crate::error::{Error, Result};

/// Which leaves of a network require gradients.
///
/// `From` and `Only` count parameterized layers from 1, so on a chain where
/// every layer has a kernel they address layer `k` directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Scenario {
    /// Every parameter, not the input.
    All,
    /// Only the network input.
    Input,
    /// Only normalization-layer parameters.
    Norm,
    /// Parameters of the first quarter (rounded up) of parameterized layers.
    Surgical,
    /// Nothing.
    None,
    /// Parameters of parameterized layers `k` and later.
    From(usize),
    /// Parameters of parameterized layer `k` alone.
    Only(usize),
}

impl Scenario {
    pub const PAPER_SET: [Scenario; 4] = [Scenario::All, Scenario::Input, Scenario::Norm, Scenario::Surgical];

    /// The four depth-sweep curves with the differentiable layer at `k`.
    pub fn sweep_set(k: usize) -> [Scenario; 4] {
        [Scenario::All, Scenario::None, Scenario::From(k), Scenario::Only(k)]
    }

    pub fn name(&self) -> String {
        match self {
            Scenario::All => "all".into(),
            Scenario::Input => "input".into(),
            Scenario::Norm => "norm".into(),
            Scenario::Surgical => "surgical".into(),
            Scenario::None => "none".into(),
            Scenario::From(k) => format!("from{k}"),
            Scenario::Only(k) => format!("only{k}"),
        }
    }

    pub fn resolve(&self, net: &NetworkDescription) -> Differentiability {
        let param_layers = net.parameterized_layers();
        let quarter = param_layers.len().div_ceil(4);
        let mut params = vec![false; net.layers.len()];
        for (ordinal, &i) in param_layers.iter().enumerate() {
            let k = ordinal + 1;
            params[i] = match *self {
                Scenario::All => true,
                Scenario::Input | Scenario::None => false,
                Scenario::Norm => net.layers[i].kind.is_normalization(),
                Scenario::Surgical => k <= quarter,
                Scenario::From(from) => k >= from,
                Scenario::Only(only) => k == only,
            };
            if let Some(flag) = net.layers[i].requires_grad {
                params[i] = flag;
            }
        }
        Differentiability {
            input: matches!(self, Scenario::Input),
            params,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let numbered = |prefix: &str| -> Option<usize> {
            s.strip_prefix(prefix)
                .map(|r| r.trim_start_matches(['-', ':', '_']))
                .and_then(|r| r.parse().ok())
                .filter(|&k| k > 0)
        };
        Ok(match s.as_str() {
            "all" => Scenario::All,
            "input" => Scenario::Input,
            "norm" => Scenario::Norm,
            "surgical" => Scenario::Surgical,
            "none" => Scenario::None,
            _ => {
                if let Some(k) = numbered("from") {
                    Scenario::From(k)
                } else if let Some(k) = numbered("only") {
                    Scenario::Only(k)
                } else {
                    return Err(Error::InvalidConfig(format!("unknown scenario `{s}`")));
                }
            }
        })
    }
}

/// Resolved flags: the network input and, per layer, its parameters.
/// Entries for layers without parameters are always `false`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Differentiability {
    pub input: bool,
    pub params: Vec<bool>,
}

impl Differentiability {
    pub fn none(net: &NetworkDescription) -> Self {
        Self {
            input: false,
            params: vec![false; net.layers.len()],
        }
    }

    pub fn param(&self, layer: usize) -> bool {
        self.params.get(layer).copied().unwrap_or(false)
    }

    pub fn any(&self) -> bool {
        self.input || self.params.iter().any(|&p| p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::BuiltinNet;

    #[test]
    fn surgical_takes_first_quarter_rounded_up() {
        let net = BuiltinNet::DeepCnn {
            depth: 5,
            channels: 2,
            batch: 1,
            size: 4,
        }
        .build();
        let d = Scenario::Surgical.resolve(&net);
        assert_eq!(d.params, [true, true, false, false, false]);
        assert!(!d.input);
    }

    #[test]
    fn numbered_scenarios() {
        let net = BuiltinNet::DeepCnn {
            depth: 6,
            channels: 2,
            batch: 1,
            size: 4,
        }
        .build();
        assert_eq!(
            Scenario::From(4).resolve(&net).params,
            [false, false, false, true, true, true]
        );
        assert_eq!(
            Scenario::Only(4).resolve(&net).params,
            [false, false, false, true, false, false]
        );
        assert_eq!("from4".parse::<Scenario>().unwrap(), Scenario::From(4));
        assert_eq!("only-2".parse::<Scenario>().unwrap(), Scenario::Only(2));
        assert!("only0".parse::<Scenario>().is_err());
        assert!("most".parse::<Scenario>().is_err());
        for s in Scenario::PAPER_SET.into_iter().chain(Scenario::sweep_set(3)) {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
    }

    #[test]
    fn norm_selects_normalization_layers_and_overrides_win() {
        let mut net = BuiltinNet::BottleneckChain {
            blocks: 1,
            width: 8,
            size: 6,
            bn_mode: crate::layers::BatchNormMode::Train,
        }
        .build();
        let d = Scenario::Norm.resolve(&net);
        for (i, l) in net.layers.iter().enumerate() {
            assert_eq!(d.param(i), l.kind.is_normalization());
        }
        net.layers[0].requires_grad = Some(true);
        assert!(Scenario::Norm.resolve(&net).param(0));
    }
}
