//! Three-layer hierarchical identities: infrastructure, cluster (EC or CC), node.
//!
//! Every entity in the platform is scoped by one of these IDs. The wire format
//! is a dotted lowercase path such as `inf-1`, `inf-1.ec-2` or `inf-1.cc.n3`,
//! where each deeper layer embeds its parent as a prefix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdError {
    #[error("empty id")]
    Empty,
    #[error("id has more than three layers: {0}")]
    TooDeep(String),
    #[error("invalid token {0:?}: tokens are lowercase alphanumerics plus '-'")]
    BadToken(String),
}

fn check_token(tok: &str) -> Result<(), IdError> {
    if tok.is_empty()
        || !tok
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
    {
        return Err(IdError::BadToken(tok.to_string()));
    }
    Ok(())
}

/// Identity of an infrastructure, cluster or node, depending on how many
/// layers are present. A node id always embeds its cluster id, which embeds
/// its infrastructure id.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct HierarchicalId {
    infra: String,
    cluster: Option<String>,
    node: Option<String>,
}

impl HierarchicalId {
    pub fn infra(token: impl Into<String>) -> Self {
        HierarchicalId {
            infra: token.into(),
            cluster: None,
            node: None,
        }
    }

    pub fn cluster(&self, token: impl Into<String>) -> Self {
        HierarchicalId {
            infra: self.infra.clone(),
            cluster: Some(token.into()),
            node: None,
        }
    }

    pub fn node(&self, token: impl Into<String>) -> Self {
        debug_assert!(self.cluster.is_some(), "node id requires a cluster id");
        HierarchicalId {
            infra: self.infra.clone(),
            cluster: self.cluster.clone(),
            node: Some(token.into()),
        }
    }

    pub fn infra_token(&self) -> &str {
        &self.infra
    }

    pub fn cluster_token(&self) -> Option<&str> {
        self.cluster.as_deref()
    }

    pub fn node_token(&self) -> Option<&str> {
        self.node.as_deref()
    }

    pub fn is_infra(&self) -> bool {
        self.cluster.is_none()
    }

    pub fn is_cluster(&self) -> bool {
        self.cluster.is_some() && self.node.is_none()
    }

    pub fn is_node(&self) -> bool {
        self.node.is_some()
    }

    /// Infrastructure-level prefix of this id.
    pub fn infra_id(&self) -> HierarchicalId {
        HierarchicalId::infra(self.infra.clone())
    }

    /// Cluster-level prefix, if this id is at least cluster-deep.
    pub fn cluster_id(&self) -> Option<HierarchicalId> {
        self.cluster.as_ref().map(|c| HierarchicalId {
            infra: self.infra.clone(),
            cluster: Some(c.clone()),
            node: None,
        })
    }

    /// Prefix property: `other` is this id or one of its ancestors.
    pub fn has_prefix(&self, prefix: &HierarchicalId) -> bool {
        if self.infra != prefix.infra {
            return false;
        }
        match (&prefix.cluster, &self.cluster) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(pc), Some(sc)) => {
                if pc != sc {
                    return false;
                }
                match (&prefix.node, &self.node) {
                    (None, _) => true,
                    (Some(_), None) => false,
                    (Some(pn), Some(sn)) => pn == sn,
                }
            }
        }
    }
}

impl fmt::Display for HierarchicalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.infra)?;
        if let Some(c) = &self.cluster {
            write!(f, ".{c}")?;
        }
        if let Some(n) = &self.node {
            write!(f, ".{n}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for HierarchicalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl FromStr for HierarchicalId {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Err(IdError::Empty);
        }
        let parts: Vec<&str> = s.split('.').collect();
        if parts.len() > 3 {
            return Err(IdError::TooDeep(s.to_string()));
        }
        for p in &parts {
            check_token(p)?;
        }
        Ok(HierarchicalId {
            infra: parts[0].to_string(),
            cluster: parts.get(1).map(|s| s.to_string()),
            node: parts.get(2).map(|s| s.to_string()),
        })
    }
}

impl From<HierarchicalId> for String {
    fn from(id: HierarchicalId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for HierarchicalId {
    type Error = IdError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_layers() {
        let infra = HierarchicalId::infra("inf-1");
        let ec = infra.cluster("ec-1");
        let node = ec.node("n3");
        assert_eq!(node.to_string(), "inf-1.ec-1.n3");
        assert_eq!("inf-1.ec-1.n3".parse::<HierarchicalId>().unwrap(), node);
        assert!(node.is_node());
        assert!(ec.is_cluster());
        assert!(infra.is_infra());
        assert_eq!(node.cluster_id().unwrap(), ec);
        assert_eq!(node.infra_id(), infra);
    }

    #[test]
    fn prefix_property() {
        let infra = HierarchicalId::infra("inf-1");
        let ec = infra.cluster("ec-1");
        let node = ec.node("n1");
        assert!(node.has_prefix(&infra));
        assert!(node.has_prefix(&ec));
        assert!(node.has_prefix(&node));
        assert!(!ec.has_prefix(&node));
        assert!(!node.has_prefix(&infra.cluster("ec-2")));
        assert!(!node.has_prefix(&HierarchicalId::infra("inf-2")));
    }

    #[test]
    fn rejects_bad_tokens() {
        assert!("".parse::<HierarchicalId>().is_err());
        assert!("a.b.c.d".parse::<HierarchicalId>().is_err());
        assert!("Inf-1".parse::<HierarchicalId>().is_err());
        assert!("inf-1..n1".parse::<HierarchicalId>().is_err());
    }
}
