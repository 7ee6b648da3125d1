//! Key issuance for registered clients.
//!
//! `GET /license?client=ID` answers with a serialized user key carrying the
//! registered attributes plus `exp` set to the registration's expiry date.
//! `GET /params` serves the public parameters.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use pcvault_core::abe::{keygen, MasterKey, PublicParams};
use pcvault_core::policy::AttributeSet;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::http::{serve, Handler, HttpError, Request, Response, Server, ServerOptions};

/// Attribute that carries a key's expiry as `YYYYMMDD`.
pub const EXPIRY_ATTRIBUTE: &str = "exp";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("registry line {line}: {message}")]
pub struct RegistryError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registration {
    pub id: String,
    pub attributes: AttributeSet,
    pub expiry: u32,
}

impl Registration {
    /// Attributes a key for this client carries.
    pub fn key_attributes(&self) -> AttributeSet {
        let mut attrs = self.attributes.clone();
        attrs
            .set_numeric(EXPIRY_ATTRIBUTE, self.expiry as u64)
            .expect("exp is a valid attribute name");
        attrs
    }
}

/// Clients by id, loaded from lines of `id,attr1;attr2;...,YYYYMMDD`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientRegistry {
    entries: BTreeMap<String, Registration>,
}

/// Parses a `YYYYMMDD` date integer, rejecting impossible dates.
pub fn parse_date(text: &str) -> Option<u32> {
    if text.len() != 8 || !text.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    NaiveDate::parse_from_str(text, "%Y%m%d").ok()?;
    text.parse().ok()
}

pub fn date_number(d: NaiveDate) -> u32 {
    d.year() as u32 * 10_000 + d.month() * 100 + d.day()
}

pub fn today() -> u32 {
    date_number(chrono::Local::now().date_naive())
}

impl ClientRegistry {
    pub fn parse(text: &str) -> Result<Self, RegistryError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |message: String| RegistryError { line: i + 1, message };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [id, attrs, expiry] = fields[..] else {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            };
            if id.is_empty() || !id.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_.".contains(&b)) {
                return Err(err(format!("bad client id `{id}`")));
            }
            let attributes: AttributeSet = attrs.parse().map_err(|e| err(format!("{e}")))?;
            if attributes.iter().any(|(name, _)| name == EXPIRY_ATTRIBUTE) {
                return Err(err("expiry belongs in the third field".into()));
            }
            let expiry = parse_date(expiry).ok_or_else(|| err(format!("bad expiry date `{expiry}`")))?;
            let reg = Registration {
                id: id.to_string(),
                attributes,
                expiry,
            };
            if entries.insert(id.to_string(), reg).is_some() {
                return Err(err(format!("duplicate client id `{id}`")));
            }
        }
        Ok(ClientRegistry { entries })
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let text = std::fs::read_to_string(path).map_err(|e| RegistryError {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, id: &str) -> Option<&Registration> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Registration> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        self.entries
            .values()
            .map(|r| format!("{},{},{}\n", r.id, r.attributes, r.expiry))
            .collect()
    }
}

/// Where the service reads the current date from.
#[derive(Debug, Clone, Copy)]
pub enum LicenseClock {
    System,
    Fixed(u32),
}

impl LicenseClock {
    fn today(self) -> u32 {
        match self {
            LicenseClock::System => today(),
            LicenseClock::Fixed(d) => d,
        }
    }
}

struct LicenseService {
    registry: ClientRegistry,
    params: PublicParams,
    master: MasterKey,
    clock: LicenseClock,
}

impl Handler for LicenseService {
    fn handle(&self, req: &Request) -> Response {
        match req.path() {
            "/params" => Response::new(200, self.params.to_bytes()),
            "/license" => self.license(req),
            _ => Response::empty(404),
        }
    }
}

impl LicenseService {
    fn license(&self, req: &Request) -> Response {
        let Some(id) = req.query_param("client") else {
            return Response::text(400, "missing client parameter");
        };
        let Some(reg) = self.registry.get(&id) else {
            return Response::text(403, "unknown client");
        };
        if reg.expiry < self.clock.today() {
            return Response::text(403, "registration expired");
        }
        let issued_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let mut rng = ChaCha20Rng::from_entropy();
        match keygen(&self.params, &self.master, &reg.key_attributes(), issued_at, &mut rng) {
            Ok(key) => Response::new(200, key.to_bytes()),
            Err(e) => {
                log::error!("keygen for {id}: {e}");
                Response::empty(500)
            }
        }
    }
}

pub fn serve_license(
    registry: ClientRegistry,
    params: PublicParams,
    master: MasterKey,
    bind: &str,
    clock: LicenseClock,
) -> Result<Server, HttpError> {
    let service = LicenseService {
        registry,
        params,
        master,
        clock,
    };
    serve(bind, Arc::new(service), ServerOptions::default())
}

#[cfg(test)]
mod tests {
    use pcvault_core::abe::{setup, UserKey};

    use super::*;
    use crate::http::HttpClient;

    const REGISTRY: &str = "# id,attributes,expiry\n\
        alice,researcher;univx,20271231\n\
        bob,researcher;level=3,20200101\n\
        \n\
        carol,,20301231\n";

    #[test]
    fn parses_registry() {
        let r = ClientRegistry::parse(REGISTRY).unwrap();
        assert_eq!(r.len(), 3);
        let bob = r.get("bob").unwrap();
        assert_eq!(bob.expiry, 20200101);
        assert_eq!(bob.attributes.numeric("level"), Some(3));
        assert!(r.get("carol").unwrap().attributes.is_empty());
        assert_eq!(ClientRegistry::parse(&r.to_text()).unwrap(), r);
    }

    #[test]
    fn registry_errors() {
        let cases = [
            ("a,b", 1),
            ("a,b,20200230", 1),
            ("a,b,2020010", 1),
            ("ok,x,20200101\nok,y,20200101", 2),
            ("a,bad tag,20200101", 1),
            ("a,x;exp=1,20200101", 1),
            ("a b,x,20200101", 1),
        ];
        for (text, line) in cases {
            assert_eq!(ClientRegistry::parse(text).unwrap_err().line, line, "{text}");
        }
    }

    #[test]
    fn dates() {
        assert_eq!(parse_date("20240229"), Some(20240229));
        assert_eq!(parse_date("20230229"), None);
        assert_eq!(parse_date("+2024011"), None);
        assert_eq!(date_number(NaiveDate::from_ymd_opt(2026, 1, 1).unwrap()), 20260101);
    }

    #[test]
    fn issues_and_refuses_keys() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (pp, mk) = setup(&mut rng).unwrap();
        let registry = ClientRegistry::parse(REGISTRY).unwrap();
        let s = serve_license(registry.clone(), pp.clone(), mk, "127.0.0.1:0", LicenseClock::Fixed(20260101)).unwrap();
        let authority = s.addr().to_string();
        let mut c = HttpClient::default();

        let r = c.get(&authority, "/license?client=alice").unwrap();
        assert_eq!(r.status, 200);
        let key = UserKey::from_bytes(&r.body).unwrap();
        assert_eq!(key.attributes(), &registry.get("alice").unwrap().key_attributes());
        assert_eq!(key.expires(), Some(20271231));
        assert!(pp.verify_user_key(&key));

        assert_eq!(c.get(&authority, "/license?client=mallory").unwrap().status, 403);
        assert_eq!(c.get(&authority, "/license?client=bob").unwrap().status, 403);
        assert_eq!(c.get(&authority, "/license").unwrap().status, 400);
        assert_eq!(c.get(&authority, "/other").unwrap().status, 404);
        let params = c.get(&authority, "/params").unwrap();
        assert_eq!(PublicParams::from_bytes(&params.body).unwrap(), pp);
    }
}
