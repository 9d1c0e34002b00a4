//! Scenario configuration: link parameters, partition schedule, seeds.
//! Loaded from `scenario.yaml` or built programmatically by harnesses.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub wan_up_mbps: u64,
    pub wan_down_mbps: u64,
    pub wan_delay_ms: u64,
    pub lan_mbps: u64,
    pub lan_delay_ms: u64,
    pub cc_lan_mbps: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            wan_up_mbps: 20,
            wan_down_mbps: 40,
            wan_delay_ms: 0,
            lan_mbps: 100,
            lan_delay_ms: 1,
            cc_lan_mbps: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionWindow {
    /// Cluster token of the EC whose WAN link partitions, e.g. `ec-1`.
    pub ec: String,
    pub from_ms: u64,
    pub until_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub seed: u64,
    pub net: NetConfig,
    pub partitions: Vec<PartitionWindow>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 1,
            net: NetConfig::default(),
            partitions: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn from_yaml(text: &str) -> Result<Self, serde_yaml::Error> {
        serde_yaml::from_str(text)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("scenario serializes")
    }
}
