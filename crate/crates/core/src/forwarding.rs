//! Trusted-relay key transport and multi-source key combination.
//!
//! Each hop protects the end-to-end key with a one-time pad drawn from the
//! hop's own QKD key, so the key only exists in the clear inside the relay
//! process while it is re-encrypted for the next hop.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audit::{AuditLog, AuditRecord, KeySegment};
use crate::controller::RoutePlan;
use crate::ids::{JobId, KeyId, NodeId};
use crate::kms::{Kms, KmsError};
use crate::settings::ForwardingSettings;
use crate::time::{SimDuration, SimTime};
use crate::wire::{self, Frame, Reader, WireError};

pub const MSG_HOP_DATA: u8 = 0x20;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ForwardError {
    #[error("component lengths differ from the requested {expected} bytes")]
    LengthMismatch { expected: usize },
    #[error("{got} sources supplied, {required} required")]
    NotEnoughSources { required: usize, got: usize },
    #[error("independent combination needs at least two vendors")]
    NotIndependent,
    #[error("job already finished")]
    Finished,
    #[error("hop frame: {0}")]
    Wire(#[from] WireError),
    #[error(transparent)]
    Kms(#[from] KmsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobStatus {
    Pending,
    InFlight,
    Delivered,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobFailure {
    pub reason: String,
    pub resumable: bool,
}

/// An end-to-end key in transit along a route.
#[derive(Clone, Serialize)]
pub struct TransportJob {
    pub job_id: JobId,
    pub src: NodeId,
    pub dst: NodeId,
    #[serde(skip)]
    payload: Vec<u8>,
    pub payload_len: usize,
    pub route: RoutePlan,
    pub hop_cursor: usize,
    pub status: JobStatus,
    /// Vendor whose link key each hop must use, when restricted.
    pub hop_vendors: Vec<Option<String>>,
    /// Whether the delivered key is stored at the destination.
    pub deposit: bool,
    pub started_at: SimTime,
    pub attempts: u32,
    pub failure: Option<JobFailure>,
    pub delivered_key: Option<KeyId>,
}

impl std::fmt::Debug for TransportJob {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransportJob")
            .field("job_id", &self.job_id)
            .field("route", &self.route.nodes)
            .field("hop_cursor", &self.hop_cursor)
            .field("status", &self.status)
            .finish()
    }
}

impl TransportJob {
    pub fn new(job_id: JobId, payload: Vec<u8>, route: RoutePlan, now: SimTime) -> Self {
        let hops = route.hops.len();
        Self {
            job_id,
            src: route.nodes.first().cloned().expect("route has nodes"),
            dst: route.nodes.last().cloned().expect("route has nodes"),
            payload_len: payload.len(),
            payload,
            route,
            hop_cursor: 0,
            status: JobStatus::Pending,
            hop_vendors: vec![None; hops],
            deposit: true,
            started_at: now,
            attempts: 0,
            failure: None,
            delivered_key: None,
        }
    }

    pub fn with_vendors(mut self, vendors: Vec<Option<String>>) -> Self {
        assert_eq!(vendors.len(), self.route.hops.len());
        self.hop_vendors = vendors;
        self
    }

    pub fn without_deposit(mut self) -> Self {
        self.deposit = false;
        self
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.status, JobStatus::Delivered | JobStatus::Failed)
    }

    pub(crate) fn fail(&mut self, reason: impl Into<String>, resumable: bool) {
        self.status = JobStatus::Failed;
        self.failure = Some(JobFailure { reason: reason.into(), resumable });
        self.payload.fill(0);
    }

    /// The delivered key, once the destination holds it.
    pub(crate) fn take_payload(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.payload)
    }
}

/// What one relay hop sends over the classical channel.
#[derive(Clone, PartialEq, Eq)]
pub struct HopFrame {
    pub job_id: JobId,
    pub hop: u16,
    pub from: NodeId,
    pub to: NodeId,
    pub ciphertext: Vec<u8>,
}

impl HopFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut p = Vec::with_capacity(self.ciphertext.len() + 64);
        wire::put_str16(&mut p, self.job_id.as_str());
        p.extend_from_slice(&self.hop.to_be_bytes());
        wire::put_str16(&mut p, self.from.as_str());
        wire::put_str16(&mut p, self.to.as_str());
        wire::put_bytes32(&mut p, &self.ciphertext);
        Frame::new(MSG_HOP_DATA, p).encode()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let (frame, used) = Frame::decode(buf)?;
        if used != buf.len() {
            return Err(WireError::Malformed("trailing bytes after frame".into()));
        }
        if frame.msg_type != MSG_HOP_DATA {
            return Err(WireError::UnknownType(frame.msg_type));
        }
        let mut r = Reader::new(&frame.payload);
        let out = HopFrame {
            job_id: JobId::new(r.str16()?),
            hop: r.u16()?,
            from: NodeId::new(r.str16()?),
            to: NodeId::new(r.str16()?),
            ciphertext: r.bytes32()?,
        };
        r.finish()?;
        Ok(out)
    }
}

/// Record of one hop as seen by the two relay processes. Kept for tests and
/// forensic replay; it never leaves the forwarding layer otherwise.
#[derive(Clone, Debug)]
pub struct HopTrace {
    pub hop: usize,
    pub from: NodeId,
    pub to: NodeId,
    pub segments: Vec<KeySegment>,
    pub frame: Vec<u8>,
    pub recovered: Vec<u8>,
    pub at: SimTime,
}

#[derive(Debug)]
pub enum Step {
    Hop(HopTrace),
    /// Not enough link key for the next hop. Nothing was consumed.
    Blocked { hop: usize, needed: usize, available: usize },
}

#[derive(Debug)]
pub struct RelayOutcome {
    pub status: JobStatus,
    pub failure: Option<JobFailure>,
    pub traces: Vec<HopTrace>,
    /// Hop, bytes needed and bytes available where the job stopped.
    pub blocked: Option<(usize, usize, usize)>,
    pub delivered_key: Option<KeyId>,
    /// The key as recovered at the destination, when delivered.
    pub delivered: Option<Vec<u8>>,
    pub finished_at: SimTime,
    pub latency_s: f64,
}

pub fn xor_into(dst: &mut [u8], src: &[u8]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= s;
    }
}

#[derive(Debug, Clone)]
pub struct Forwarder {
    settings: ForwardingSettings,
    kms: Arc<Kms>,
    audit: Arc<AuditLog>,
}

impl Forwarder {
    pub fn new(settings: ForwardingSettings, kms: Arc<Kms>, audit: Arc<AuditLog>) -> Self {
        Self { settings, kms, audit }
    }

    pub fn settings(&self) -> &ForwardingSettings {
        &self.settings
    }

    pub fn hop_delay(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.settings.per_hop_delay_ms / 1000.0)
    }

    pub fn combine_delay(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.settings.combine_cost_ms / 1000.0)
    }

    /// Performs the next hop of `job`. On the final hop the key is recovered
    /// at the destination and, if requested, stored there.
    pub fn step(&self, job: &mut TransportJob, now: SimTime) -> Result<Step, ForwardError> {
        if job.is_finished() {
            return Err(ForwardError::Finished);
        }
        job.status = JobStatus::InFlight;
        let h = job.hop_cursor;
        let hop = &job.route.hops[h];
        let (from, to) = (hop.from.clone(), hop.to.clone());
        let n = job.payload.len();
        let vendor = job.hop_vendors[h].clone();
        let (link_key, segments) = match self.kms.consume_link_key(&from, &to, n, vendor.as_deref()) {
            Ok(k) => k,
            Err(KmsError::InsufficientKey { requested, available }) => {
                return Ok(Step::Blocked { hop: h, needed: requested, available })
            }
            Err(e) => return Err(e.into()),
        };

        // Sender side: pad and frame.
        let mut ciphertext = job.payload.clone();
        xor_into(&mut ciphertext, &link_key);
        let frame = HopFrame { job_id: job.job_id.clone(), hop: h as u16, from: from.clone(), to: to.clone(), ciphertext }
            .encode();
        // Receiver side: parse and unpad with its mirrored copy of the key.
        let received = HopFrame::decode(&frame)?;
        let mut recovered = received.ciphertext;
        xor_into(&mut recovered, &link_key);
        job.payload.copy_from_slice(&recovered);

        self.audit.append(AuditRecord::RelayHop {
            t: now,
            job_id: job.job_id.clone(),
            hop: h,
            from: from.clone(),
            to: to.clone(),
            bytes: n,
            segments: segments.clone(),
        });
        job.hop_cursor += 1;
        if job.hop_cursor == job.route.hops.len() {
            job.status = JobStatus::Delivered;
            if job.deposit {
                let key_id = self.kms.deposit(&job.src, &job.dst, &job.job_id, job.payload.clone(), now)?;
                job.delivered_key = Some(key_id);
            }
            self.audit.append(AuditRecord::JobFinished { t: now, job_id: job.job_id.clone(), delivered: true, reason: None });
        }
        Ok(Step::Hop(HopTrace { hop: h, from, to, segments, frame, recovered, at: now }))
    }

    /// Marks a job failed and audits the reason. Consumed link key stays spent.
    pub fn fail(&self, job: &mut TransportJob, reason: &str, resumable: bool, now: SimTime) {
        job.fail(reason, resumable);
        self.audit.append(AuditRecord::JobFinished {
            t: now,
            job_id: job.job_id.clone(),
            delivered: false,
            reason: Some(reason.to_owned()),
        });
    }

    /// Runs every hop back to back, one hop delay apart. Stops at a hop
    /// without key, either failing the job or, with `park`, leaving it in
    /// flight for a later call. A route reported broken fails the job.
    pub fn relay_key(
        &self,
        job: &mut TransportJob,
        still_valid: &dyn Fn(&TransportJob) -> bool,
        park: bool,
        now: SimTime,
    ) -> RelayOutcome {
        let mut traces = Vec::new();
        let mut blocked = None;
        let mut t = now;
        while !job.is_finished() {
            if !still_valid(job) {
                self.fail(job, "route invalidated", false, t);
                break;
            }
            match self.step(job, t + self.hop_delay()) {
                Ok(Step::Hop(trace)) => {
                    t = trace.at;
                    traces.push(trace);
                }
                Ok(Step::Blocked { hop, needed, available }) => {
                    blocked = Some((hop, needed, available));
                    if !park {
                        let reason = format!("hop {hop} key exhausted: {needed} bytes needed, {available} available");
                        self.fail(job, &reason, true, t);
                    }
                    break;
                }
                Err(e) => self.fail(job, &e.to_string(), false, t),
            }
        }
        let delivered = (job.status == JobStatus::Delivered).then(|| job.take_payload());
        RelayOutcome {
            status: job.status,
            failure: job.failure.clone(),
            traces,
            blocked,
            delivered_key: job.delivered_key,
            delivered,
            finished_at: t,
            latency_s: (t - now).as_secs_f64(),
        }
    }
}

/// Where the components of a combined key come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSource {
    pub a: NodeId,
    pub b: NodeId,
    pub vendor: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedKeySpec {
    pub component_sources: Vec<ComponentSource>,
    pub output_size_bytes: usize,
    /// Require components from at least two different vendors.
    pub independent: bool,
}

/// XOR of all components. The result stays secret as long as any single
/// component is.
pub fn combine_keys(spec: &CombinedKeySpec, components: &[Vec<u8>]) -> Result<Vec<u8>, ForwardError> {
    let required = if spec.independent { 2 } else { 1 }.max(spec.component_sources.len());
    if components.len() < required {
        return Err(ForwardError::NotEnoughSources { required, got: components.len() });
    }
    if spec.independent {
        let vendors: BTreeSet<&str> = spec.component_sources.iter().map(|c| c.vendor.as_str()).collect();
        if vendors.len() < 2 {
            return Err(ForwardError::NotIndependent);
        }
    }
    if components.iter().any(|c| c.len() != spec.output_size_bytes) {
        return Err(ForwardError::LengthMismatch { expected: spec.output_size_bytes });
    }
    let mut out = vec![0u8; spec.output_size_bytes];
    for c in components {
        xor_into(&mut out, c);
    }
    Ok(out)
}

/// Link key state of one hop, as used by the latency estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopBuffer {
    pub buffered_bytes: usize,
    pub rate_kbps: f64,
}

/// Fixed processing delay per hop plus, for each hop short of key, the time
/// its link needs to produce the missing bytes. Hops are summed as if each
/// waited alone, so with several short hops this is an upper bound.
pub fn estimate_delivery_latency(payload_size: usize, hops: &[HopBuffer], settings: &ForwardingSettings) -> f64 {
    hops.iter()
        .map(|h| {
            let wait = if h.buffered_bytes >= payload_size {
                0.0
            } else if h.rate_kbps > 0.0 {
                (payload_size - h.buffered_bytes) as f64 * 8.0 / (h.rate_kbps * 1000.0)
            } else {
                f64::INFINITY
            };
            settings.per_hop_delay_ms / 1000.0 + wait
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, vendors: &[&str], independent: bool) -> CombinedKeySpec {
        CombinedKeySpec {
            component_sources: vendors
                .iter()
                .map(|v| ComponentSource { a: "A".into(), b: "B".into(), vendor: (*v).into() })
                .collect(),
            output_size_bytes: n,
            independent,
        }
    }

    #[test]
    fn xor_identities() {
        let k: Vec<u8> = (0..32).collect();
        let s = spec(32, &["X", "Y"], true);
        assert_eq!(combine_keys(&s, &[k.clone(), vec![0; 32]]).unwrap(), k);
        assert_eq!(combine_keys(&s, &[k.clone(), k.clone()]).unwrap(), vec![0; 32]);
    }

    #[test]
    fn combination_errors() {
        let k = vec![1u8; 16];
        assert_eq!(
            combine_keys(&spec(16, &["X", "Y"], true), std::slice::from_ref(&k)),
            Err(ForwardError::NotEnoughSources { required: 2, got: 1 })
        );
        assert_eq!(combine_keys(&spec(16, &["X", "X"], true), &[k.clone(), k.clone()]), Err(ForwardError::NotIndependent));
        assert_eq!(
            combine_keys(&spec(16, &["X", "Y"], true), &[k.clone(), vec![0; 8]]),
            Err(ForwardError::LengthMismatch { expected: 16 })
        );
    }

    #[test]
    fn latency_arithmetic() {
        let s = ForwardingSettings::default();
        let full = HopBuffer { buffered_bytes: 10_000, rate_kbps: 8.0 };
        assert!((estimate_delivery_latency(64, &[full, full], &s) - 0.001).abs() < 1e-12);
        let short = HopBuffer { buffered_bytes: 0, rate_kbps: 8.0 };
        assert!((estimate_delivery_latency(1000, &[short], &s) - 1.0005).abs() < 1e-12);
    }

    #[test]
    fn hop_frame_round_trip() {
        let f = HopFrame { job_id: "j-1".into(), hop: 3, from: "A".into(), to: "B".into(), ciphertext: vec![9; 40] };
        let bytes = f.encode();
        assert!(HopFrame::decode(&bytes).unwrap() == f);
        assert!(HopFrame::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
