"""HTTP/JSON wire protocol for the registry.

Endpoints:

    POST   /v1/agents                  register
    POST   /v1/agents/{name}/renew     renew (name URL-encoded)
    DELETE /v1/agents/{name}           revoke
    GET    /v1/resolve                 discovery queries
    POST   /v1/challenge               issue an attestation challenge
    POST   /v1/attest                  verify a capability proof
    POST   /v1/admission/validate      manifest admission decision
    GET    /v1/metrics                 text exposition
    GET    /v1/healthz                 liveness

Transport is plain HTTP/1.1: authenticity lives in the signed payloads and
certificate chains, not the socket. Errors are ``{"error": code, "message",
"details"?}`` with a fixed code-to-status mapping.
"""

from __future__ import annotations

import json
import os
import threading
import time
import urllib.parse
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import attestation, errors as codes, names
from .attestation import CapabilityProof, ChallengeStore
from .canonical import canonical_json
from .errors import AnsError
from .identity import Certificate, CertificateChain
from .manifest import validate_admission
from .metrics import AlertConfig, Metrics, evaluate_alerts, render_text
from .policy import load_policies
from .registry import AgentRecord, RegistrationRequest, Registry

STATUS_BY_CODE = {
    codes.INVALID_PROTOCOL: 400,
    codes.INVALID_LABEL: 400,
    codes.INVALID_VERSION: 400,
    codes.MALFORMED: 400,
    codes.INVALID_NAME: 400,
    codes.NAME_MISMATCH: 400,
    codes.ROLE_VIOLATION: 400,
    codes.WINDOW_EXCEEDED: 400,
    codes.POLICY_PARSE: 400,
    codes.BAD_SIGNATURE: 401,
    codes.NONCE_REPLAY: 401,
    codes.CHALLENGE_EXPIRED: 401,
    codes.CHAIN_INVALID: 401,
    codes.CERT_EXPIRED: 401,
    codes.CERT_NOT_YET_VALID: 401,
    codes.UNTRUSTED_ROOT: 401,
    codes.POLICY_DENIED: 403,
    codes.CAPABILITY_MISMATCH: 403,
    codes.UNKNOWN_CAPABILITY: 403,
    codes.REVOKED: 403,
    codes.UNKNOWN_AGENT: 404,
    codes.DUPLICATE_AGENT: 409,
    codes.LOG_CORRUPT: 500,
    codes.HANDSHAKE_TIMEOUT: 500,
    codes.INTERNAL: 500,
}


@dataclass(frozen=True)
class ServerConfig:
    listen: str = "127.0.0.1:8400"
    anchors_path: str | None = None
    policy_path: str | None = None
    log_path: str | None = None
    snapshot_path: str | None = None
    fsync: bool = True
    record_ttl_seconds: int = 24 * 3600
    challenge_ttl_seconds: int = attestation.CHALLENGE_TTL_S

    _ENV_KEYS = {
        "listen": "ANS_LISTEN",
        "anchors_path": "ANS_ANCHORS_PATH",
        "policy_path": "ANS_POLICY_PATH",
        "log_path": "ANS_LOG_PATH",
        "snapshot_path": "ANS_SNAPSHOT_PATH",
    }

    @classmethod
    def load(cls, config_path: str | None = None, env: dict | None = None) -> "ServerConfig":
        """File values, overridden by environment variables."""
        env = os.environ if env is None else env
        values: dict = {}
        if config_path is not None:
            with open(config_path, "r", encoding="utf-8") as fh:
                try:
                    doc = json.load(fh)
                except ValueError as exc:
                    raise AnsError(codes.MALFORMED, f"unreadable config: {exc}")
            for key in ("listen", "anchors_path", "policy_path", "log_path", "snapshot_path",
                        "fsync", "record_ttl_seconds", "challenge_ttl_seconds"):
                if key in doc:
                    values[key] = doc[key]
        for attr, env_key in cls._ENV_KEYS.items():
            if env.get(env_key):
                values[attr] = env[env_key]
        return cls(**values)

    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)


def load_anchors(path: str) -> tuple[Certificate, ...]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, list):
        raise AnsError(codes.MALFORMED, "trust anchor file must be an array of certificates")
    return tuple(Certificate.from_doc(c) for c in doc)


class AnsServer:
    """Registry, challenge store, metrics, and the HTTP front end.

    State is recovered from persistence before the socket accepts traffic;
    shutdown flushes a snapshot.
    """

    def __init__(self, config: ServerConfig, clock=time.time):
        self.config = config
        self.clock = clock
        anchors = load_anchors(config.anchors_path) if config.anchors_path else ()
        policies = ()
        if config.policy_path:
            with open(config.policy_path, "r", encoding="utf-8") as fh:
                policies = tuple(load_policies(fh.read()))
        self.metrics = Metrics()
        self.registry = Registry.recover(
            policies=policies,
            trust_anchors=anchors,
            record_ttl_seconds=config.record_ttl_seconds,
            log_path=config.log_path,
            snapshot_path=config.snapshot_path,
            fsync=config.fsync,
            observe=self.metrics.observe,
        )
        self.challenges = ChallengeStore(ttl_seconds=config.challenge_ttl_seconds)
        self.alert_config = AlertConfig()
        host, port = config.host_port()
        self._httpd = ThreadingHTTPServer((host, port), _Handler)
        self._httpd.daemon_threads = True
        # Small request/response pairs suffer badly from Nagle + delayed ACK.
        self._httpd.disable_nagle_algorithm = True
        self._httpd.ans_server = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._httpd.server_address[0], self._httpd.server_address[1]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def now(self) -> int:
        return int(self.clock())

    def start(self) -> None:
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        name="ans-server", daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=10)
        if self.config.snapshot_path:
            self.registry.write_snapshot(self.config.snapshot_path)
        self.registry.close()

    # -- operation bodies, shared by the HTTP handler ------------------------

    def op_register(self, body: dict) -> tuple[int, dict]:
        start = time.perf_counter()
        now = self.now()
        try:
            request = RegistrationRequest.from_doc(body)
        except (KeyError, TypeError, ValueError) as exc:
            raise AnsError(codes.MALFORMED, f"bad registration body: {exc}")
        try:
            record = self.registry.register(request, now)
        except AnsError as exc:
            if exc.code == codes.POLICY_DENIED:
                self.metrics.inc("policy_violations_total")
            raise
        finally:
            self.metrics.observe("registration", (time.perf_counter() - start) * 1e3)
        self.metrics.inc("registrations_total")
        return 201, record.to_doc()

    def op_renew(self, name_text: str, body: dict) -> tuple[int, dict]:
        ts, signature = _control_fields(body)
        record = self.registry.renew(name_text, ts, signature, self.now())
        return 200, record.to_doc()

    def op_revoke(self, name_text: str, body: dict) -> tuple[int, dict]:
        ts, signature = _control_fields(body)
        self.registry.revoke(name_text, ts, signature, self.now())
        return 200, {"revoked": name_text}

    def op_resolve(self, params: dict[str, str]) -> tuple[int, list]:
        start = time.perf_counter()
        try:
            query = query_from_params(params)
            records = self.registry.resolve(query, self.now())
        finally:
            self.metrics.inc("discovery_queries_total")
            self.metrics.observe("discovery", (time.perf_counter() - start) * 1e3)
        return 200, [r.doc for r in records]

    def op_challenge(self, body: dict) -> tuple[int, dict]:
        name_text = body.get("name")
        if not isinstance(name_text, str):
            raise AnsError(codes.MALFORMED, "challenge body must carry the agent name")
        record = self._record_or_404(name_text)
        challenge = self.challenges.issue(record.name, self.now())
        return 200, challenge.to_doc()

    def op_attest(self, body: dict) -> tuple[int, dict]:
        start = time.perf_counter()
        self.metrics.inc("attestations_total")
        try:
            try:
                proof = CapabilityProof.from_doc(body)
            except (KeyError, TypeError, ValueError) as exc:
                raise AnsError(codes.MALFORMED, f"bad proof body: {exc}")
            record = self._record_or_404(proof.agent_name)
            commitment = next(
                (c for c in record.commitments if c.capability == proof.capability), None
            )
            if commitment is None:
                self.metrics.inc("auth_failures_total")
                raise AnsError(
                    codes.CAPABILITY_MISMATCH,
                    f"{proof.agent_name} has no commitment for {proof.capability!r}",
                )
            result = attestation.verify(
                proof, commitment, record.chain, self.registry.trust_anchors,
                self.challenges, self.now(),
            )
            if not result.granted:
                self.metrics.inc("auth_failures_total")
                assert result.reason is not None
                raise AnsError(result.reason, result.message)
            return 200, {"granted": True, "agent": proof.agent_name, "capability": proof.capability}
        finally:
            self.metrics.observe("attestation", (time.perf_counter() - start) * 1e3)

    def op_admission(self, body: dict) -> tuple[int, dict]:
        if not isinstance(body, dict):
            raise AnsError(codes.MALFORMED, "admission body must be a document")
        chain = None
        if "manifest" in body:
            manifest_doc = body["manifest"]
            if "chain" in body:
                chain = CertificateChain.from_doc(body["chain"])
            for key in body:
                if key not in ("manifest", "chain"):
                    raise AnsError(codes.MALFORMED, f"unknown admission key {key!r}")
        else:
            manifest_doc = body
        result = validate_admission(
            manifest_doc, self.registry.policies, self.registry.trust_anchors,
            self.now(), chain=chain,
        )
        if not result.allowed:
            self.metrics.inc("policy_violations_total")
        return 200, result.to_doc()

    def op_metrics(self) -> str:
        now = self.now()
        snapshot = self.metrics.snapshot(
            records=self.registry.active_records(now), now=now,
            cert_expiry_warning_s=self.alert_config.cert_expiry_warning_s,
        )
        return render_text(snapshot)

    def current_alerts(self) -> list:
        now = self.now()
        records = self.registry.active_records(now)
        snapshot = self.metrics.snapshot(records=records, now=now)
        return evaluate_alerts(snapshot, records, self.alert_config, now)

    def _record_or_404(self, name_text: str) -> AgentRecord:
        record = self.registry.get_active(name_text, self.now())
        if record is None:
            raise AnsError(codes.UNKNOWN_AGENT, f"no active record for {name_text}")
        return record


def _control_fields(body: dict) -> tuple[int, bytes]:
    try:
        return int(body["ts"]), bytes.fromhex(body["signature"])
    except (KeyError, TypeError, ValueError) as exc:
        raise AnsError(codes.MALFORMED, f"bad control body: {exc}")


def query_from_params(params: dict[str, str]) -> names.NameQuery:
    """Map resolve query parameters onto a name query."""
    known = {"capability", "provider", "protocol", "env", "agent", "version"}
    unknown = set(params) - known
    if unknown:
        raise AnsError(codes.INVALID_NAME, f"unknown query parameters: {sorted(unknown)}")
    version_req = None
    if "version" in params:
        version_req = names.VersionRequirement.parse(params["version"])
    return names.NameQuery(
        protocol=params.get("protocol"),
        agent_id=params.get("agent"),
        capability=params.get("capability"),
        provider=params.get("provider"),
        extension=params.get("env"),
        version_req=version_req,
    )


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "ans"

    # Route table entries: (method, prefix-or-exact path).
    def _ans(self) -> AnsServer:
        return self.server.ans_server  # type: ignore[attr-defined]

    def log_message(self, format, *args):  # noqa: A002 - stdlib signature
        pass

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b""
        if not raw:
            raise AnsError(codes.MALFORMED, "empty request body")
        try:
            return json.loads(raw)
        except ValueError as exc:
            raise AnsError(codes.MALFORMED, f"body is not valid JSON: {exc}")

    def _send_json(self, status: int, payload) -> None:
        data = canonical_json(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _send_text(self, status: int, text: str) -> None:
        data = text.encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "text/plain; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _dispatch(self, method: str) -> None:
        parsed = urllib.parse.urlsplit(self.path)
        path = parsed.path
        try:
            if method == "GET" and path == "/v1/healthz":
                self._send_text(200, "ok")
                return
            if method == "GET" and path == "/v1/metrics":
                self._send_text(200, self._ans().op_metrics())
                return
            if method == "GET" and path == "/v1/resolve":
                params = {k: v[-1] for k, v in urllib.parse.parse_qs(parsed.query).items()}
                status, payload = self._ans().op_resolve(params)
                self._send_json(status, payload)
                return
            if method == "POST" and path == "/v1/agents":
                status, payload = self._ans().op_register(self._read_body())
                self._send_json(status, payload)
                return
            if method == "POST" and path.startswith("/v1/agents/") and path.endswith("/renew"):
                name_text = urllib.parse.unquote(path[len("/v1/agents/"):-len("/renew")])
                status, payload = self._ans().op_renew(name_text, self._read_body())
                self._send_json(status, payload)
                return
            if method == "DELETE" and path.startswith("/v1/agents/"):
                name_text = urllib.parse.unquote(path[len("/v1/agents/"):])
                status, payload = self._ans().op_revoke(name_text, self._read_body())
                self._send_json(status, payload)
                return
            if method == "POST" and path == "/v1/challenge":
                status, payload = self._ans().op_challenge(self._read_body())
                self._send_json(status, payload)
                return
            if method == "POST" and path == "/v1/attest":
                status, payload = self._ans().op_attest(self._read_body())
                self._send_json(status, payload)
                return
            if method == "POST" and path == "/v1/admission/validate":
                status, payload = self._ans().op_admission(self._read_body())
                self._send_json(status, payload)
                return
            self._send_json(404, {"error": codes.UNKNOWN_AGENT, "message": f"no route {method} {path}"})
        except AnsError as exc:
            self._send_json(STATUS_BY_CODE[exc.code], exc.to_doc())
        except Exception as exc:  # pragma: no cover - last-resort guard
            self._send_json(500, {"error": codes.INTERNAL, "message": str(exc)})

    def do_GET(self) -> None:
        self._dispatch("GET")

    def do_POST(self) -> None:
        self._dispatch("POST")

    def do_DELETE(self) -> None:
        self._dispatch("DELETE")


def serve(config: ServerConfig, clock=time.time) -> AnsServer:
    """Recover state, bind the socket, and start serving in a thread."""
    server = AnsServer(config, clock=clock)
    server.start()
    return server
