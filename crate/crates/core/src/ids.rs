//! Identifier newtypes shared across the crate.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }

        impl std::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }
    };
}

string_id!(
    /// Network-wide unique node name.
    NodeId
);
string_id!(ModuleId);
string_id!(SwitchId);
string_id!(
    /// A port label, unique within its switch.
    PortId
);
string_id!(ChannelId);
string_id!(JobId);

/// Small integer label of a fiber link.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub u16);

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

macro_rules! uuid_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Uuid);

        impl $name {
            /// Draws a version-4 identifier from `rng`, so seeded runs repeat ids.
            pub fn random(rng: &mut impl RngCore) -> Self {
                let mut bytes = [0u8; 16];
                rng.fill_bytes(&mut bytes);
                Self(uuid::Builder::from_random_bytes(bytes).into_uuid())
            }

            pub fn parse(s: &str) -> Option<Self> {
                Uuid::parse_str(s).ok().map(Self)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.hyphenated().fmt(f)
            }
        }
    };
}

uuid_id!(
    /// 128-bit identifier of a key block or a served key.
    KeyId
);
uuid_id!(
    /// Key-session identifier of the session-style application interface.
    Ksid
);

/// Unordered node pair, stored with the lexicographically smaller node first.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodePair {
    pub lo: NodeId,
    pub hi: NodeId,
}

impl NodePair {
    pub fn new(a: &NodeId, b: &NodeId) -> Self {
        if a <= b {
            Self { lo: a.clone(), hi: b.clone() }
        } else {
            Self { lo: b.clone(), hi: a.clone() }
        }
    }

    /// Index of `node` within the pair (0 = lo, 1 = hi).
    pub fn side_of(&self, node: &NodeId) -> Option<usize> {
        if node == &self.lo {
            Some(0)
        } else if node == &self.hi {
            Some(1)
        } else {
            None
        }
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        self.side_of(node).is_some()
    }

    pub fn other(&self, node: &NodeId) -> Option<&NodeId> {
        match self.side_of(node)? {
            0 => Some(&self.hi),
            _ => Some(&self.lo),
        }
    }
}

impl fmt::Display for NodePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}<->{}", self.lo, self.hi)
    }
}

/// Application endpoint identity (`Node` or `Node:app`).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SaeId(pub String);

impl SaeId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The node hosting this endpoint.
    pub fn node(&self) -> NodeId {
        NodeId::new(self.0.split(':').next().unwrap_or_default())
    }
}

impl fmt::Display for SaeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SaeId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for SaeId {
    fn from(s: String) -> Self {
        Self(s)
    }
}
