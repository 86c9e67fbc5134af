//! Timed command lists replayed against a simulated network.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::southbound::RelayStatus;
use crate::controller::{ProvisionPolicy, SwitchCommand, SwitchResult};
use crate::ids::{ChannelId, NodeId, PortId, SaeId, SwitchId};
use crate::network::Network;
use crate::time::SimTime;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("step {index}: {message}")]
    Invalid { index: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Switch { switch: SwitchId, cross_connects: Vec<(PortId, PortId)> },
    Provision {
        src: NodeId,
        dst: NodeId,
        size_bytes: usize,
        #[serde(default = "plain")]
        policy: String,
    },
    FetchKeys { master: SaeId, slave: SaeId, number: usize, size_bits: usize },
    Silence { node: NodeId },
    Resume { node: NodeId },
    SetQber { channel: ChannelId, qber_pct: f64 },
    Preposition { a: NodeId, b: NodeId },
}

fn plain() -> String {
    "plain".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub at_s: f64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub duration_s: f64,
    #[serde(default, rename = "step")]
    pub steps: Vec<Step>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        for (i, st) in s.steps.iter().enumerate() {
            if !(st.at_s >= 0.0 && st.at_s <= s.duration_s) {
                return Err(ScenarioError::Invalid { index: i, message: format!("at_s {} outside [0, duration_s]", st.at_s) });
            }
            if let Action::Provision { policy, .. } = &st.action {
                parse_policy(policy).map_err(|m| ScenarioError::Invalid { index: i, message: m })?;
            }
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

pub fn parse_policy(s: &str) -> Result<ProvisionPolicy, String> {
    match s {
        "plain" => Ok(ProvisionPolicy::Plain),
        "independent_sources" | "independent-sources" => Ok(ProvisionPolicy::IndependentSources),
        other => Err(format!("unknown policy {other:?}")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepOutcome {
    pub at_s: f64,
    pub action: String,
    pub ok: bool,
    pub detail: String,
}

/// Runs the steps in time order (file order for equal times), then the clock
/// to `duration_s`.
pub fn run_scenario(net: &mut Network, scenario: &Scenario) -> Vec<StepOutcome> {
    let mut steps: Vec<&Step> = scenario.steps.iter().collect();
    steps.sort_by(|a, b| a.at_s.total_cmp(&b.at_s));
    let mut out = Vec::new();
    for st in steps {
        net.run_until(SimTime::from_secs_f64(st.at_s));
        out.push(apply(net, st));
    }
    net.run_until(SimTime::from_secs_f64(scenario.duration_s));
    out
}

fn apply(net: &mut Network, st: &Step) -> StepOutcome {
    let (action, ok, detail) = match &st.action {
        Action::Switch { switch, cross_connects } => {
            let e = net.apply_switch(SwitchCommand {
                switch_id: switch.clone(),
                cross_connects: cross_connects.clone(),
                issued_at: net.now(),
            });
            let detail = match e.result {
                SwitchResult::Applied => format!("epoch {} torn down {}", e.epoch, e.torn_down.len()),
                SwitchResult::Rejected => e.reason.unwrap_or_default(),
            };
            ("switch", e.result == SwitchResult::Applied, detail)
        }
        Action::Provision { src, dst, size_bytes, policy } => {
            let policy = parse_policy(policy).expect("validated at parse");
            match net.provision(src, dst, *size_bytes, policy) {
                Ok(r) => (
                    "provision",
                    r.status != RelayStatus::Failed,
                    format!("{:?} via {}", r.status, r.route.map(|r| r.nodes.join_ids()).unwrap_or_else(|| "pool".into())),
                ),
                Err(e) => ("provision", false, e.to_string()),
            }
        }
        Action::FetchKeys { master, slave, number, size_bits } => {
            let now = net.now();
            let kms = net.kms().clone();
            match kms.etsi14_get_enc_keys(master, slave, *number, size_bits / 8, now) {
                Ok(keys) => {
                    let ids: Vec<String> = keys.iter().map(|k| k.key_id.to_string()).collect();
                    match kms.etsi14_get_keys_with_ids(slave, master, &ids, now) {
                        Ok(got) => ("fetch_keys", got == keys, format!("{} keys", got.len())),
                        Err(e) => ("fetch_keys", false, e.to_string()),
                    }
                }
                Err(e) => ("fetch_keys", false, e.to_string()),
            }
        }
        Action::Silence { node } => {
            net.silence(node);
            ("silence", true, node.to_string())
        }
        Action::Resume { node } => {
            net.resume(node);
            ("resume", true, node.to_string())
        }
        Action::SetQber { channel, qber_pct } => match net.set_qber(channel, *qber_pct) {
            Ok(()) => ("set_qber", true, format!("{channel} {qber_pct}")),
            Err(e) => ("set_qber", false, e.to_string()),
        },
        Action::Preposition { a, b } => {
            net.preposition(a, b);
            ("preposition", true, format!("{a}-{b}"))
        }
    };
    StepOutcome { at_s: st.at_s, action: action.into(), ok, detail }
}

trait JoinIds {
    fn join_ids(&self) -> String;
}

impl JoinIds for Vec<NodeId> {
    fn join_ids(&self) -> String {
        self.iter().map(|n| n.as_str()).collect::<Vec<_>>().join(">")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_validates() {
        let s = Scenario::parse(
            r#"
duration_s = 10
[[step]]
at_s = 1
action = "silence"
node = "A"
[[step]]
at_s = 2
action = "provision"
src = "A"
dst = "B"
size_bytes = 32
"#,
        )
        .unwrap();
        assert_eq!(s.steps.len(), 2);
        assert!(matches!(&s.steps[1].action, Action::Provision { policy, .. } if policy == "plain"));
        let bad = Scenario::parse("duration_s = 1\n[[step]]\nat_s = 5\naction = \"resume\"\nnode = \"A\"\n");
        assert!(matches!(bad, Err(ScenarioError::Invalid { index: 0, .. })));
        assert!(Scenario::parse("duration_s = 1\n[[step]]\nat_s = 0\naction = \"explode\"\n").is_err());
    }
}
