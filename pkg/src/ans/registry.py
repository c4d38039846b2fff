"""Authoritative agent registry: registration, renewal, revocation, resolution.

State is a fold over an append-only event log (Registered / Renewed /
Revoked), so audit and crash recovery come for free: replaying the log, or a
snapshot plus the suffix, reproduces a state with identical resolution
behavior. Expiry is lazy on read plus an explicit sweep, which keeps
correctness independent of timer precision.

Writes are serialized and ordered by event sequence number; reads always see
a consistent post-event state.
"""

from __future__ import annotations

import functools
import os
import threading
import time
from dataclasses import dataclass, replace

from . import names
from .canonical import canonical_bytes, canonical_json
from .errors import (
    AnsError,
    BAD_SIGNATURE,
    DUPLICATE_AGENT,
    INVALID_NAME,
    LOG_CORRUPT,
    NAME_MISMATCH,
    POLICY_DENIED,
    REVOKED,
    UNKNOWN_AGENT,
)
from .identity import (
    CapabilityCommitment,
    CertificateChain,
    validate_chain,
    verify_signature,
)
from .names import AnsName, NameQuery, compare_versions
from .policy import EvaluationContext, PHASE_ADMISSION, PHASE_RUNTIME, PolicySubject, evaluate, explain

DEFAULT_RECORD_TTL_S = 24 * 3600
# Renewal/revocation payloads carry a timestamp that must be near the server
# clock, bounding replay of captured control messages.
CONTROL_TS_WINDOW_S = 300

STATUS_ACTIVE = "active"
STATUS_REVOKED = "revoked"

EVENT_REGISTERED = "Registered"
EVENT_RENEWED = "Renewed"
EVENT_REVOKED = "Revoked"


@dataclass(frozen=True)
class AgentRecord:
    name: AnsName
    did: str
    endpoint: str
    chain: CertificateChain
    commitments: tuple[CapabilityCommitment, ...]
    namespace: str
    registered_at: int
    expires_at: int
    status: str

    @functools.cached_property
    def doc(self) -> dict:
        """Serialized form, cached: records are immutable and resolution
        re-serializes the same records on every hit."""
        return self.to_doc()

    def to_doc(self) -> dict:
        return {
            "name": self.name.render(),
            "did": self.did,
            "endpoint": self.endpoint,
            "chain": self.chain.to_doc(),
            "commitments": [c.to_doc() for c in self.commitments],
            "namespace": self.namespace,
            "registered_at": self.registered_at,
            "expires_at": self.expires_at,
            "status": self.status,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "AgentRecord":
        return cls(
            name=names.parse(doc["name"]),
            did=doc["did"],
            endpoint=doc["endpoint"],
            chain=CertificateChain.from_doc(doc["chain"]),
            commitments=tuple(CapabilityCommitment.from_doc(c) for c in doc["commitments"]),
            namespace=doc["namespace"],
            registered_at=int(doc["registered_at"]),
            expires_at=int(doc["expires_at"]),
            status=doc["status"],
        )


@dataclass(frozen=True)
class RegistrationRequest:
    """Wire form of a registration: the record fields minus server-assigned
    timestamps/status, signed by the agent's identity key."""

    name_text: str
    endpoint: str
    namespace: str
    chain: CertificateChain
    commitments: tuple[CapabilityCommitment, ...]
    signature: bytes = b""

    def signing_payload(self) -> dict:
        return {
            "action": "register",
            "name": self.name_text,
            "endpoint": self.endpoint,
            "namespace": self.namespace,
            "chain": self.chain.to_doc(),
            "commitments": [c.to_doc() for c in self.commitments],
        }

    def to_doc(self) -> dict:
        doc = self.signing_payload()
        del doc["action"]
        doc["signature"] = self.signature.hex()
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "RegistrationRequest":
        return cls(
            name_text=doc["name"],
            endpoint=doc["endpoint"],
            namespace=doc["namespace"],
            chain=CertificateChain.from_doc(doc["chain"]),
            commitments=tuple(CapabilityCommitment.from_doc(c) for c in doc["commitments"]),
            signature=bytes.fromhex(doc["signature"]),
        )


def renewal_payload(name_text: str, ts: int) -> dict:
    return {"action": "renew", "name": name_text, "ts": ts}


def revocation_payload(name_text: str, ts: int) -> dict:
    return {"action": "revoke", "name": name_text, "ts": ts}


@dataclass(frozen=True)
class RegistryEvent:
    seq: int
    kind: str
    payload: dict
    at: int

    def to_doc(self) -> dict:
        return {"seq": self.seq, "kind": self.kind, "payload": self.payload, "at": self.at}

    @classmethod
    def from_doc(cls, doc: dict) -> "RegistryEvent":
        return cls(seq=int(doc["seq"]), kind=doc["kind"], payload=doc["payload"], at=int(doc["at"]))


class EventLog:
    """Append-only JSON-lines event log with optional fsync per append."""

    def __init__(self, path: str, fsync: bool = True):
        self.path = path
        self.fsync = fsync
        self._fh = open(path, "a", encoding="utf-8")

    def append(self, event: RegistryEvent) -> None:
        self._fh.write(canonical_json(event.to_doc()) + "\n")
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()

    @staticmethod
    def read_events(path: str, after_seq: int = 0) -> list[RegistryEvent]:
        """Read events with seq > after_seq, enforcing dense ordering.

        LOG_CORRUPT carries the last good sequence number in its details so an
        operator knows where replay halted.
        """
        import json

        events: list[RegistryEvent] = []
        expected = after_seq + 1
        last_good = after_seq
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    event = RegistryEvent.from_doc(json.loads(line))
                except (ValueError, KeyError, TypeError) as exc:
                    raise AnsError(
                        LOG_CORRUPT,
                        f"unparseable event at line {lineno}: {exc}",
                        details={"last_good_seq": last_good, "line": lineno},
                    )
                if event.seq <= after_seq:
                    continue  # covered by the snapshot
                if event.seq != expected:
                    raise AnsError(
                        LOG_CORRUPT,
                        f"sequence gap at line {lineno}: expected {expected}, got {event.seq}",
                        details={"last_good_seq": last_good, "line": lineno},
                    )
                events.append(event)
                last_good = event.seq
                expected += 1
        return events


class Registry:
    """In-memory registry state plus the write-ahead event log.

    Writers (register / renew / revoke) serialize on one lock and append an
    event before the in-memory state changes; readers take the same lock
    briefly, so they always observe a consistent post-event state.
    """

    def __init__(
        self,
        policies=(),
        trust_anchors=(),
        record_ttl_seconds: int = DEFAULT_RECORD_TTL_S,
        log: EventLog | None = None,
        observe=None,
    ):
        self.record_ttl_seconds = record_ttl_seconds
        self.trust_anchors = tuple(trust_anchors)
        self._policies = tuple(policies)
        self._log = log
        # Optional latency sink: observe(operation, milliseconds). Feeds the
        # chain_validation and policy_eval histograms without mislabeling
        # whole endpoint bodies as core operations.
        self._observe = observe
        self._lock = threading.RLock()
        self._records: dict[str, AgentRecord] = {}
        self._capability_index: dict[str, set[str]] = {}
        self.last_seq = 0

    def _timed_validate_chain(self, chain: CertificateChain, now: int):
        if self._observe is None:
            return validate_chain(chain, self.trust_anchors, now)
        start = time.perf_counter()
        verdict = validate_chain(chain, self.trust_anchors, now)
        self._observe("chain_validation", (time.perf_counter() - start) * 1e3)
        return verdict

    def _timed_evaluate(self, ctx: EvaluationContext):
        if self._observe is None:
            return evaluate(ctx, self._policies)
        start = time.perf_counter()
        decision = evaluate(ctx, self._policies)
        self._observe("policy_eval", (time.perf_counter() - start) * 1e3)
        return decision

    # -- policy hot reload ---------------------------------------------------

    @property
    def policies(self):
        return self._policies

    def set_policies(self, policies) -> None:
        """Atomic swap of the whole policy set."""
        with self._lock:
            self._policies = tuple(policies)

    # -- index maintenance ---------------------------------------------------

    def _index_add(self, record: AgentRecord) -> None:
        key = record.name.render()
        for commitment in record.commitments:
            self._capability_index.setdefault(commitment.capability, set()).add(key)

    def _index_remove(self, record: AgentRecord) -> None:
        key = record.name.render()
        for commitment in record.commitments:
            members = self._capability_index.get(commitment.capability)
            if members is None:
                continue
            members.discard(key)
            if not members:
                del self._capability_index[commitment.capability]

    def _append(self, kind: str, payload: dict, at: int) -> None:
        event = RegistryEvent(seq=self.last_seq + 1, kind=kind, payload=payload, at=at)
        if self._log is not None:
            self._log.append(event)
        self.last_seq = event.seq

    # -- write operations ----------------------------------------------------

    @staticmethod
    def _subject_from_record(record: AgentRecord) -> PolicySubject:
        name = record.name
        committed = tuple(c.capability for c in record.commitments)
        return PolicySubject(
            protocol=name.protocol,
            agent_id=name.agent_id,
            capability=name.capability,
            capabilities=tuple(dict.fromkeys((name.capability, *committed))),
            provider=name.provider,
            environment=name.extension,
            namespace=record.namespace,
            cert_validity_seconds=record.chain.agent.not_after - record.chain.agent.not_before,
        )

    def register(self, request: RegistrationRequest, now: int) -> AgentRecord:
        """Validate and store a registration.

        Validation order: name parse, chain validation, request signature,
        name/certificate consistency, admission policy, uniqueness. A
        same-name re-registration by the same DID replaces the record, which
        is how certificate rotation lands.
        """
        try:
            parsed = names.parse(request.name_text)
        except AnsError as exc:
            raise AnsError(INVALID_NAME, f"request name rejected: {exc.message}") from exc

        self._timed_validate_chain(request.chain, now).raise_if_invalid()

        agent_cert = request.chain.agent
        if not verify_signature(
            agent_cert.public_key, request.signature, canonical_bytes(request.signing_payload())
        ):
            raise AnsError(BAD_SIGNATURE, "registration signature does not verify")

        if agent_cert.subject_name is None or agent_cert.subject_name != parsed:
            raise AnsError(NAME_MISMATCH, "certificate subject name does not match request name")
        names.validate_label(request.namespace, "namespace")
        cert_commitments = {c.capability: c.commitment_key for c in agent_cert.capability_commitments}
        requested = {c.capability: c.commitment_key for c in request.commitments}
        if requested != cert_commitments:
            raise AnsError(NAME_MISMATCH, "request commitments differ from certificate extensions")
        if parsed.capability not in cert_commitments:
            raise AnsError(
                NAME_MISMATCH,
                f"certificate carries no commitment for name capability {parsed.capability!r}",
            )

        record = AgentRecord(
            name=parsed,
            did=agent_cert.subject_did,
            endpoint=request.endpoint,
            chain=request.chain,
            commitments=tuple(sorted(request.commitments, key=lambda c: c.capability)),
            namespace=request.namespace,
            registered_at=now,
            expires_at=now + self.record_ttl_seconds,
            status=STATUS_ACTIVE,
        )

        with self._lock:
            ctx = EvaluationContext(self._subject_from_record(record), PHASE_ADMISSION, now)
            decision = self._timed_evaluate(ctx)
            if not decision.allowed:
                raise AnsError(POLICY_DENIED, "registration denied by policy",
                               details={"explain": explain(decision)})
            key = parsed.render()
            existing = self._records.get(key)
            if (
                existing is not None
                and existing.status == STATUS_ACTIVE
                and now <= existing.expires_at
                and existing.did != record.did
            ):
                raise AnsError(DUPLICATE_AGENT, f"{key} is already registered to another DID")
            self._append(EVENT_REGISTERED, {"record": record.to_doc()}, now)
            if existing is not None:
                self._index_remove(existing)
            self._records[key] = record
            self._index_add(record)
        return record

    def _lookup(self, name_text: str) -> AgentRecord:
        record = self._records.get(name_text)
        if record is None:
            raise AnsError(UNKNOWN_AGENT, f"no record for {name_text}")
        return record

    def renew(self, name_text: str, ts: int, signature: bytes, now: int) -> AgentRecord:
        """Extend a record's TTL. The owner signs (name, timestamp); the
        timestamp must be within the control window of the server clock."""
        with self._lock:
            record = self._lookup(name_text)
            if record.status == STATUS_REVOKED:
                raise AnsError(REVOKED, f"{name_text} is revoked")
            if abs(now - ts) > CONTROL_TS_WINDOW_S:
                raise AnsError(BAD_SIGNATURE, "renewal timestamp outside acceptance window")
            payload = canonical_bytes(renewal_payload(name_text, ts))
            if not verify_signature(record.chain.agent.public_key, signature, payload):
                raise AnsError(BAD_SIGNATURE, "renewal signature does not verify")
            renewed = replace(record, expires_at=now + self.record_ttl_seconds)
            self._append(EVENT_RENEWED, {"name": name_text, "expires_at": renewed.expires_at}, now)
            self._records[name_text] = renewed
        return renewed

    def revoke(self, name_text: str, ts: int, signature: bytes, now: int) -> None:
        """Mark a record revoked. Accepts a signature by the record's own key
        or by its issuing intermediate or root. Idempotent."""
        with self._lock:
            record = self._lookup(name_text)
            if abs(now - ts) > CONTROL_TS_WINDOW_S:
                raise AnsError(BAD_SIGNATURE, "revocation timestamp outside acceptance window")
            payload = canonical_bytes(revocation_payload(name_text, ts))
            authorized = (
                record.chain.agent.public_key,
                record.chain.intermediate.public_key,
                record.chain.root.public_key,
            )
            if not any(verify_signature(key, signature, payload) for key in authorized):
                raise AnsError(BAD_SIGNATURE, "revocation signature does not verify")
            if record.status == STATUS_REVOKED:
                return
            revoked = replace(record, status=STATUS_REVOKED)
            self._append(EVENT_REVOKED, {"name": name_text}, now)
            self._records[name_text] = revoked
            self._index_remove(revoked)

    # -- read operations -----------------------------------------------------

    def _visible(self, record: AgentRecord, now: int) -> bool:
        return record.status == STATUS_ACTIVE and now <= record.expires_at

    def _runtime_allowed(self, record: AgentRecord, now: int) -> bool:
        ctx = EvaluationContext(self._subject_from_record(record), PHASE_RUNTIME, now)
        return self._timed_evaluate(ctx).allowed

    def resolve(self, query: NameQuery, now: int) -> list[AgentRecord]:
        """Active, unexpired, policy-allowed records matching the query,
        sorted by version descending then name ascending. ``latest`` keeps
        only the highest version per (agent_id, capability, provider,
        extension) group."""
        with self._lock:
            if query.capability is not None:
                keys = self._capability_index.get(query.capability, set())
                candidates = [self._records[k] for k in keys]
            else:
                candidates = list(self._records.values())
            hits = [
                r for r in candidates
                if self._visible(r, now)
                and names.matches(r.name, query)
                and self._runtime_allowed(r, now)
            ]
        if query.version_req is not None and query.version_req.kind == names.LATEST:
            best: dict[tuple, names.Version] = {}
            for record in hits:
                group = (record.name.agent_id, record.name.capability,
                         record.name.provider, record.name.extension)
                current = best.get(group)
                if current is None or compare_versions(record.name.version, current) > 0:
                    best[group] = record.name.version
            hits = [
                r for r in hits
                if compare_versions(
                    r.name.version,
                    best[(r.name.agent_id, r.name.capability, r.name.provider, r.name.extension)],
                ) == 0
            ]
        hits.sort(key=lambda r: (tuple(-v for v in r.name.version.sort_key()), r.name.render()))
        return hits

    def sweep_expired(self, now: int) -> int:
        """Drop expired records from memory. Resolution already excludes them
        lazily; this only reclaims space, so it appends no event."""
        removed = 0
        with self._lock:
            for key in [k for k, r in self._records.items() if now > r.expires_at]:
                record = self._records.pop(key)
                self._index_remove(record)
                removed += 1
        return removed

    def get_active(self, name_text: str, now: int) -> AgentRecord | None:
        with self._lock:
            record = self._records.get(name_text)
        if record is not None and self._visible(record, now):
            return record
        return None

    def active_records(self, now: int) -> list[AgentRecord]:
        with self._lock:
            return [r for r in self._records.values() if self._visible(r, now)]

    def all_records(self) -> list[AgentRecord]:
        with self._lock:
            return list(self._records.values())

    def audit_index(self) -> bool:
        """Consistency audit: the capability index must exactly mirror the
        commitments of active (non-revoked) records."""
        with self._lock:
            expected: dict[str, set[str]] = {}
            for key, record in self._records.items():
                if record.status != STATUS_ACTIVE:
                    continue
                for commitment in record.commitments:
                    expected.setdefault(commitment.capability, set()).add(key)
            return expected == self._capability_index

    # -- persistence ---------------------------------------------------------

    def snapshot_doc(self) -> dict:
        with self._lock:
            return {
                "last_seq": self.last_seq,
                "records": [r.to_doc() for r in self._records.values()],
            }

    def write_snapshot(self, path: str) -> None:
        doc = self.snapshot_doc()
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(canonical_json(doc))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    def _apply_event(self, event: RegistryEvent) -> None:
        if event.kind == EVENT_REGISTERED:
            record = AgentRecord.from_doc(event.payload["record"])
            key = record.name.render()
            existing = self._records.get(key)
            if existing is not None:
                self._index_remove(existing)
            self._records[key] = record
            self._index_add(record)
        elif event.kind == EVENT_RENEWED:
            key = event.payload["name"]
            record = self._records[key]
            self._records[key] = replace(record, expires_at=int(event.payload["expires_at"]))
        elif event.kind == EVENT_REVOKED:
            key = event.payload["name"]
            record = replace(self._records[key], status=STATUS_REVOKED)
            self._records[key] = record
            self._index_remove(record)
        else:
            raise AnsError(LOG_CORRUPT, f"unknown event kind {event.kind!r}")
        self.last_seq = event.seq

    @classmethod
    def recover(
        cls,
        policies=(),
        trust_anchors=(),
        record_ttl_seconds: int = DEFAULT_RECORD_TTL_S,
        log_path: str | None = None,
        snapshot_path: str | None = None,
        fsync: bool = True,
        observe=None,
    ) -> "Registry":
        """Rebuild state from snapshot plus event-log suffix, then reopen the
        log for appends. Raises LOG_CORRUPT on gaps or parse failures."""
        import json

        registry = cls(policies=policies, trust_anchors=trust_anchors,
                       record_ttl_seconds=record_ttl_seconds, log=None, observe=observe)
        if snapshot_path is not None and os.path.exists(snapshot_path):
            with open(snapshot_path, "r", encoding="utf-8") as fh:
                try:
                    doc = json.load(fh)
                except ValueError as exc:
                    raise AnsError(LOG_CORRUPT, f"snapshot unreadable: {exc}")
            registry.last_seq = int(doc["last_seq"])
            for record_doc in doc["records"]:
                record = AgentRecord.from_doc(record_doc)
                registry._records[record.name.render()] = record
                if record.status == STATUS_ACTIVE:
                    registry._index_add(record)
        if log_path is not None and os.path.exists(log_path):
            for event in EventLog.read_events(log_path, after_seq=registry.last_seq):
                registry._apply_event(event)
        if log_path is not None:
            registry._log = EventLog(log_path, fsync=fsync)
        return registry

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
