//! HTTP client for a networked lock relay.
//!
//! The relay accepts `POST /relay` with `{"state":"on"}` or `{"state":"off"}`
//! and answers `{"ok":true}`. Anything else, including a timeout, counts as a
//! failed switch.

use std::time::Duration;

use doorwatch_core::door::{ActuatorError, ActuatorGateway};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize)]
struct RelayRequest {
    state: &'static str,
}

#[derive(Debug, Deserialize)]
struct RelayAck {
    ok: bool,
}

pub struct HttpRelay {
    url: String,
    agent: ureq::Agent,
}

impl HttpRelay {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: format!("{}/relay", base_url.trim_end_matches('/')),
            agent,
        }
    }
}

impl ActuatorGateway for HttpRelay {
    fn set_energized(&mut self, on: bool) -> Result<(), ActuatorError> {
        let req = RelayRequest {
            state: if on { "on" } else { "off" },
        };
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(&req)
            .map_err(|e| ActuatorError(format!("relay unreachable: {e}")))?;
        if !resp.status().is_success() {
            return Err(ActuatorError(format!("relay answered {}", resp.status())));
        }
        let ack: RelayAck = resp
            .body_mut()
            .read_json()
            .map_err(|e| ActuatorError(format!("bad relay reply: {e}")))?;
        if ack.ok {
            Ok(())
        } else {
            Err(ActuatorError("relay refused the switch".into()))
        }
    }
}
