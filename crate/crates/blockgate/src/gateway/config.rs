//! Line-oriented `key = value` gateway configuration.

use crate::registry::MiddlewareCatalog;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected `key = value`, got {1:?}")]
    Malformed(usize, String),
    #[error("line {0}: unknown key {1:?}")]
    UnknownKey(usize, String),
    #[error("line {0}: bad value for {1}: {2}")]
    BadValue(usize, &'static str, String),
    #[error("missing required key {0:?}")]
    MissingKey(&'static str),
    #[error("config invariant violated: {0}")]
    Invalid(String),
    #[error("cannot read config")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub listen_address: String,
    pub total_nodes: usize,
    pub node_prefix: String,
    /// (ca_id, verifying key) pairs loaded into the trust store.
    pub ca_trust: Vec<(String, [u8; 32])>,
    pub catalog: MiddlewareCatalog,
    pub proxy_ttl_s: u64,
    pub snapshot_path: PathBuf,
    pub admin_token: String,
}

impl GatewayConfig {
    /// Parse the config text. Repeated `ca` and `middleware` lines
    /// accumulate; every other key must appear exactly once. Unknown keys
    /// are a startup error.
    pub fn parse(text: &str) -> Result<GatewayConfig, ConfigError> {
        let mut listen_address = None;
        let mut total_nodes = None;
        let mut node_prefix = None;
        let mut ca_trust = Vec::new();
        let mut catalog = MiddlewareCatalog::new();
        let mut proxy_ttl_s = None;
        let mut snapshot_path = None;
        let mut admin_token = None;

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed(lineno, line.to_string()))?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "listen_address" => listen_address = Some(value.to_string()),
                "total_nodes" => {
                    total_nodes = Some(value.parse().map_err(|_| {
                        ConfigError::BadValue(lineno, "total_nodes", value.to_string())
                    })?)
                }
                "node_prefix" => node_prefix = Some(value.to_string()),
                "ca" => {
                    let (id, hex_key) = value.split_once(' ').ok_or_else(|| {
                        ConfigError::BadValue(lineno, "ca", value.to_string())
                    })?;
                    let bytes = hex::decode(hex_key.trim()).map_err(|_| {
                        ConfigError::BadValue(lineno, "ca", value.to_string())
                    })?;
                    let key: [u8; 32] = bytes.try_into().map_err(|_| {
                        ConfigError::BadValue(lineno, "ca", value.to_string())
                    })?;
                    ca_trust.push((id.trim().to_string(), key));
                }
                "middleware" => {
                    let (name, path) = value.split_once(' ').ok_or_else(|| {
                        ConfigError::BadValue(lineno, "middleware", value.to_string())
                    })?;
                    if !catalog.insert(name.trim(), path.trim()) {
                        return Err(ConfigError::BadValue(
                            lineno,
                            "middleware",
                            format!("duplicate name or path in {value:?}"),
                        ));
                    }
                }
                "proxy_ttl_s" => {
                    proxy_ttl_s = Some(value.parse().map_err(|_| {
                        ConfigError::BadValue(lineno, "proxy_ttl_s", value.to_string())
                    })?)
                }
                "snapshot_path" => snapshot_path = Some(PathBuf::from(value)),
                "admin_token" => admin_token = Some(value.to_string()),
                other => return Err(ConfigError::UnknownKey(lineno, other.to_string())),
            }
        }

        let config = GatewayConfig {
            listen_address: listen_address.ok_or(ConfigError::MissingKey("listen_address"))?,
            total_nodes: total_nodes.ok_or(ConfigError::MissingKey("total_nodes"))?,
            node_prefix: node_prefix.unwrap_or_else(|| "n".to_string()),
            ca_trust,
            catalog,
            proxy_ttl_s: proxy_ttl_s.ok_or(ConfigError::MissingKey("proxy_ttl_s"))?,
            snapshot_path: snapshot_path.ok_or(ConfigError::MissingKey("snapshot_path"))?,
            admin_token: admin_token.ok_or(ConfigError::MissingKey("admin_token"))?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<GatewayConfig, ConfigError> {
        GatewayConfig::parse(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.total_nodes == 0 {
            return Err(ConfigError::Invalid("total_nodes must be >= 1".into()));
        }
        if self.catalog.is_empty() {
            return Err(ConfigError::Invalid("middleware catalog is empty".into()));
        }
        if self.proxy_ttl_s == 0 {
            return Err(ConfigError::Invalid("proxy_ttl_s must be >= 1".into()));
        }
        if self.admin_token.is_empty() {
            return Err(ConfigError::Invalid("admin_token must be non-empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# gateway config
listen_address = 127.0.0.1:8420
total_nodes = 8
node_prefix = n
ca = grid1 aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa
middleware = gt4 /opt/mw/gt4
middleware = mpich-g2 /opt/mw/mpich-g2
proxy_ttl_s = 600
snapshot_path = /tmp/blockgate.snap
admin_token = hunter2
";

    #[test]
    fn parses_sample() {
        let c = GatewayConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.listen_address, "127.0.0.1:8420");
        assert_eq!(c.total_nodes, 8);
        assert_eq!(c.ca_trust.len(), 1);
        assert_eq!(c.ca_trust[0].0, "grid1");
        assert_eq!(c.catalog.path_of("gt4"), Some("/opt/mw/gt4"));
        assert_eq!(c.proxy_ttl_s, 600);
    }

    #[test]
    fn unknown_key_is_startup_error() {
        let text = format!("{SAMPLE}frobnicate = yes\n");
        assert!(matches!(
            GatewayConfig::parse(&text),
            Err(ConfigError::UnknownKey(_, _))
        ));
    }

    #[test]
    fn missing_key_reported() {
        assert!(matches!(
            GatewayConfig::parse("listen_address = x\n"),
            Err(ConfigError::MissingKey(_))
        ));
    }

    #[test]
    fn invariants_enforced() {
        let text = SAMPLE.replace("total_nodes = 8", "total_nodes = 0");
        assert!(matches!(GatewayConfig::parse(&text), Err(ConfigError::Invalid(_))));
        let text = SAMPLE.replace("proxy_ttl_s = 600", "proxy_ttl_s = 0");
        assert!(matches!(GatewayConfig::parse(&text), Err(ConfigError::Invalid(_))));
    }
}
