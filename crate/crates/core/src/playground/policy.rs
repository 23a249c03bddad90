//! Capability policy: which endpoints a page may dial, plus an audit log of
//! every attempt.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::Serialize;

/// `host:port`, `host:*`, `*:port` or `*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointPattern {
    host: Option<String>,
    port: Option<u16>,
}

impl EndpointPattern {
    pub fn exact(endpoint: &str) -> Result<Self, String> {
        let p: EndpointPattern = endpoint.parse()?;
        if p.host.is_none() || p.port.is_none() {
            return Err(format!("{endpoint:?} is not a concrete endpoint"));
        }
        Ok(p)
    }

    pub fn matches(&self, endpoint: &str) -> bool {
        let Some((host, port)) = split_endpoint(endpoint) else {
            return false;
        };
        self.host.as_deref().is_none_or(|h| h.eq_ignore_ascii_case(host)) && self.port.is_none_or(|p| p == port)
    }
}

fn split_endpoint(endpoint: &str) -> Option<(&str, u16)> {
    let (h, p) = endpoint.rsplit_once(':')?;
    Some((h, p.parse().ok()?))
}

impl FromStr for EndpointPattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "*" {
            return Ok(Self { host: None, port: None });
        }
        let (h, p) = s
            .rsplit_once(':')
            .ok_or_else(|| format!("endpoint pattern {s:?} needs host:port"))?;
        let host = match h {
            "*" => None,
            "" => return Err(format!("endpoint pattern {s:?} has an empty host")),
            h => Some(h.to_string()),
        };
        let port = match p {
            "*" => None,
            p => Some(p.parse().map_err(|_| format!("bad port in {s:?}"))?),
        };
        Ok(Self { host, port })
    }
}

impl fmt::Display for EndpointPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.host, self.port) {
            (None, None) => f.write_str("*"),
            (h, p) => {
                f.write_str(h.as_deref().unwrap_or("*"))?;
                match p {
                    Some(p) => write!(f, ":{p}"),
                    None => f.write_str(":*"),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("policy denied connection to {endpoint}")]
pub struct PolicyDenied {
    pub endpoint: String,
}

#[derive(Debug, Clone, Default)]
pub struct CapabilityPolicy {
    pub allow: Vec<EndpointPattern>,
    /// Let VMs fetch missing classes through the proxy.
    pub network_fetch: bool,
}

impl CapabilityPolicy {
    pub fn new(allow: Vec<EndpointPattern>) -> Self {
        Self {
            allow,
            network_fetch: false,
        }
    }

    pub fn permit(&mut self, endpoint: &str) -> Result<(), String> {
        let p = EndpointPattern::exact(endpoint)?;
        if !self.allow.contains(&p) {
            self.allow.push(p);
        }
        Ok(())
    }

    pub fn check(&self, endpoint: &str) -> Result<(), PolicyDenied> {
        if self.allow.iter().any(|p| p.matches(endpoint)) {
            Ok(())
        } else {
            Err(PolicyDenied {
                endpoint: endpoint.to_string(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConnectRecord {
    pub page: String,
    pub endpoint: String,
    pub purpose: String,
    pub allowed: bool,
}

/// Shared, append-only.
#[derive(Debug, Clone, Default)]
pub struct AuditLog(Arc<Mutex<Vec<ConnectRecord>>>);

impl AuditLog {
    pub fn record(&self, page: &str, endpoint: &str, purpose: &str, allowed: bool) {
        let r = ConnectRecord {
            page: page.into(),
            endpoint: endpoint.into(),
            purpose: purpose.into(),
            allowed,
        };
        log::info!("{}", serde_json::to_string(&r).unwrap_or_default());
        self.0.lock().unwrap().push(r);
    }

    pub fn records(&self) -> Vec<ConnectRecord> {
        self.0.lock().unwrap().clone()
    }

    pub fn to_json_lines(&self) -> String {
        self.records()
            .iter()
            .map(|r| serde_json::to_string(r).unwrap_or_default() + "\n")
            .collect()
    }
}

/// Check `endpoint` and write the outcome to `audit`.
pub fn policy_check_connect(
    policy: &CapabilityPolicy,
    audit: &AuditLog,
    page: &str,
    endpoint: &str,
    purpose: &str,
) -> Result<(), PolicyDenied> {
    let r = policy.check(endpoint);
    audit.record(page, endpoint, purpose, r.is_ok());
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patterns() {
        let p: EndpointPattern = "127.0.0.1:*".parse().unwrap();
        assert!(p.matches("127.0.0.1:4000"));
        assert!(!p.matches("10.0.0.5:25"));
        let p: EndpointPattern = "*:7000".parse().unwrap();
        assert!(p.matches("display.local:7000"));
        assert!(!p.matches("display.local:7001"));
        assert!("*".parse::<EndpointPattern>().unwrap().matches("a:1"));
        assert!("nohost".parse::<EndpointPattern>().is_err());
        assert_eq!("*:80".parse::<EndpointPattern>().unwrap().to_string(), "*:80");
    }

    #[test]
    fn denies_outside_allowlist() {
        let mut pol = CapabilityPolicy::default();
        pol.permit("127.0.0.1:7000").unwrap();
        let audit = AuditLog::default();
        assert!(policy_check_connect(&pol, &audit, "p", "127.0.0.1:7000", "registry").is_ok());
        assert!(policy_check_connect(&pol, &audit, "p", "10.0.0.5:25", "applet").is_err());
        let recs = audit.records();
        assert_eq!(recs.len(), 2);
        assert!(!recs[1].allowed);
    }
}
