"""Agent-side SDK: identity bootstrap, registry calls, and peer-to-peer auth.

Registry interaction is a thin HTTP client that re-raises the server's error
codes as AnsError and keeps transport failures (dead socket, refused
connection) as a separate TransportError.

Peer authentication is an application-layer mutual handshake over any
ordered, reliable message transport:

    1. initiator -> {chain_I, nonce_I}
    2. responder -> {chain_R, nonce_R, sig_R over SHA-256(serial_I, nonce_I, nonce_R)}
    3. initiator -> {sig_I over SHA-256(serial_R, nonce_R, nonce_I)}

Each side validates the peer chain before trusting any signature; both end up
with a Session whose transcript hash binds both serials and both nonces.
After the handshake either side can demand a capability proof; the verifier
checks it against the commitment in the prover's certificate, never against
anything self-asserted.
"""

from __future__ import annotations

import http.client
import json
import queue
import socket
import struct
import threading
import time
import urllib.parse
from dataclasses import dataclass, field

from . import attestation, names
from .attestation import (
    AttestationResult,
    CapabilityProof,
    CapabilitySecret,
    Challenge,
    ChallengeStore,
    create_capability,
)
from .canonical import canonical_bytes, sha256
from .errors import (
    AnsError,
    BAD_SIGNATURE,
    HANDSHAKE_TIMEOUT,
    MALFORMED,
    TransportError,
    UNKNOWN_CAPABILITY,
)
from .identity import (
    AGENT_VALIDITY_S,
    Certificate,
    CertificateChain,
    KeyPair,
    ROLE_AGENT,
    issue_certificate,
    validate_chain,
    verify_signature,
)
from .names import AnsName, NameQuery
from .registry import (
    AgentRecord,
    RegistrationRequest,
    renewal_payload,
    revocation_payload,
)

HANDSHAKE_TIMEOUT_S = 5.0


# -- identity ----------------------------------------------------------------


@dataclass(frozen=True)
class AgentIdentity:
    """Everything one agent holds: name, identity keys, certified chain, and
    the capability secrets matching the commitments in its certificate."""

    name: AnsName
    identity_keys: KeyPair
    chain: CertificateChain
    capabilities: dict[str, CapabilitySecret]
    endpoint: str

    def commitments(self):
        return self.chain.agent.capability_commitments


def bootstrap_identity(
    name: AnsName,
    endpoint: str,
    capabilities: tuple[str, ...],
    intermediate_keys: KeyPair,
    intermediate_cert: Certificate,
    root_cert: Certificate,
    validity_seconds: int = AGENT_VALIDITY_S,
    now: int | None = None,
    seed: bytes | None = None,
) -> AgentIdentity:
    """Generate identity and capability keys, then obtain an agent certificate
    from the intermediate. The name's own capability is always committed."""
    if now is None:
        now = int(time.time())
    identity_keys = KeyPair.generate(seed)
    secrets_map: dict[str, CapabilitySecret] = {}
    commitments = []
    for capability in dict.fromkeys((name.capability, *capabilities)):
        secret, commitment = create_capability(capability)
        secrets_map[capability] = secret
        commitments.append(commitment)
    cert = issue_certificate(
        intermediate_keys,
        intermediate_cert,
        identity_keys.public_key,
        ROLE_AGENT,
        validity_seconds,
        subject_name=name,
        commitments=tuple(commitments),
        now=now,
    )
    chain = CertificateChain(agent=cert, intermediate=intermediate_cert, root=root_cert)
    return AgentIdentity(name, identity_keys, chain, secrets_map, endpoint)


# -- registry HTTP client ----------------------------------------------------


class RegistryClient:
    """HTTP client with one persistent connection per instance.

    Not thread-safe; give each worker its own client.
    """

    def __init__(self, base_url: str, timeout: float = 10.0):
        parsed = urllib.parse.urlsplit(base_url)
        if parsed.scheme != "http" or parsed.hostname is None:
            raise ValueError(f"registry url must be http://host:port, got {base_url!r}")
        self._host = parsed.hostname
        self._port = parsed.port or 80
        self._timeout = timeout
        self._conn: http.client.HTTPConnection | None = None

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def _request(self, method: str, path: str, body=None):
        payload = None if body is None else json.dumps(body).encode("utf-8")
        headers = {"Content-Type": "application/json"} if payload else {}
        for attempt in (0, 1):
            if self._conn is None:
                self._conn = http.client.HTTPConnection(self._host, self._port,
                                                        timeout=self._timeout)
                try:
                    self._conn.connect()
                    self._conn.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                except OSError as exc:
                    self.close()
                    raise TransportError(f"connect {self._host}:{self._port}: {exc}") from exc
            try:
                self._conn.request(method, path, body=payload, headers=headers)
                response = self._conn.getresponse()
                raw = response.read()
                break
            except (OSError, http.client.HTTPException) as exc:
                self.close()
                if attempt == 1:
                    raise TransportError(f"{method} {path}: {exc}") from exc
        content_type = response.headers.get("Content-Type", "")
        if content_type.startswith("text/plain"):
            doc = raw.decode("utf-8")
        else:
            try:
                doc = json.loads(raw) if raw else None
            except ValueError as exc:
                raise TransportError(f"{method} {path}: undecodable response") from exc
        if response.status >= 400:
            if isinstance(doc, dict) and "error" in doc:
                raise AnsError(doc["error"], doc.get("message", ""), doc.get("details"))
            raise TransportError(f"{method} {path}: HTTP {response.status}")
        return doc

    def get(self, path: str):
        return self._request("GET", path)

    def post(self, path: str, body):
        return self._request("POST", path, body)

    def delete(self, path: str, body):
        return self._request("DELETE", path, body)


def build_registration_request(identity: AgentIdentity, namespace: str) -> RegistrationRequest:
    request = RegistrationRequest(
        name_text=identity.name.render(),
        endpoint=identity.endpoint,
        namespace=namespace,
        chain=identity.chain,
        commitments=identity.commitments(),
    )
    signature = identity.identity_keys.sign(canonical_bytes(request.signing_payload()))
    return RegistrationRequest(
        name_text=request.name_text,
        endpoint=request.endpoint,
        namespace=request.namespace,
        chain=request.chain,
        commitments=request.commitments,
        signature=signature,
    )


def register_with(identity: AgentIdentity, registry_url: str, namespace: str,
                  client: RegistryClient | None = None) -> AgentRecord:
    own = client or RegistryClient(registry_url)
    try:
        request = build_registration_request(identity, namespace)
        doc = own.post("/v1/agents", request.to_doc())
        return AgentRecord.from_doc(doc)
    finally:
        if client is None:
            own.close()


def renew_with(identity: AgentIdentity, registry_url: str,
               client: RegistryClient | None = None, now: int | None = None) -> AgentRecord:
    own = client or RegistryClient(registry_url)
    try:
        ts = int(time.time()) if now is None else now
        name_text = identity.name.render()
        signature = identity.identity_keys.sign(canonical_bytes(renewal_payload(name_text, ts)))
        quoted = urllib.parse.quote(name_text, safe="")
        doc = own.post(f"/v1/agents/{quoted}/renew", {"ts": ts, "signature": signature.hex()})
        return AgentRecord.from_doc(doc)
    finally:
        if client is None:
            own.close()


def revoke_with(identity: AgentIdentity, registry_url: str,
                client: RegistryClient | None = None, now: int | None = None) -> None:
    own = client or RegistryClient(registry_url)
    try:
        ts = int(time.time()) if now is None else now
        name_text = identity.name.render()
        signature = identity.identity_keys.sign(canonical_bytes(revocation_payload(name_text, ts)))
        quoted = urllib.parse.quote(name_text, safe="")
        own.delete(f"/v1/agents/{quoted}", {"ts": ts, "signature": signature.hex()})
    finally:
        if client is None:
            own.close()


def discover(registry_url: str, query: NameQuery,
             client: RegistryClient | None = None) -> list[AgentRecord]:
    """Thin wrapper over /v1/resolve preserving the server's ordering."""
    own = client or RegistryClient(registry_url)
    try:
        params = {}
        if query.protocol is not None:
            params["protocol"] = query.protocol
        if query.agent_id is not None:
            params["agent"] = query.agent_id
        if query.capability is not None:
            params["capability"] = query.capability
        if query.provider is not None:
            params["provider"] = query.provider
        if query.extension is not None:
            params["env"] = query.extension
        if query.version_req is not None:
            params["version"] = query.version_req.render()
        path = "/v1/resolve"
        if params:
            path += "?" + urllib.parse.urlencode(params)
        docs = own.get(path)
        return [AgentRecord.from_doc(d) for d in docs]
    finally:
        if client is None:
            own.close()


def request_challenge(registry_url: str, name: AnsName,
                      client: RegistryClient | None = None) -> Challenge:
    own = client or RegistryClient(registry_url)
    try:
        doc = own.post("/v1/challenge", {"name": name.render()})
        return Challenge.from_doc(doc)
    finally:
        if client is None:
            own.close()


def attest_with(identity: AgentIdentity, registry_url: str, capability: str,
                client: RegistryClient | None = None, now: int | None = None) -> dict:
    """Full challenge/prove/attest round trip against the registry."""
    own = client or RegistryClient(registry_url)
    try:
        secret = identity.capabilities.get(capability)
        if secret is None:
            raise AnsError(UNKNOWN_CAPABILITY, f"identity holds no secret for {capability!r}")
        challenge = request_challenge(registry_url, identity.name, client=own)
        ts = int(time.time()) if now is None else now
        proof = attestation.prove(challenge, secret, identity.identity_keys, identity.name, ts)
        return own.post("/v1/attest", proof.to_doc())
    finally:
        if client is None:
            own.close()


# -- message transports -------------------------------------------------------


class LoopbackTransport:
    """In-process pair of message queues; the test and demo transport."""

    def __init__(self, inbox: "queue.Queue[bytes]", outbox: "queue.Queue[bytes]"):
        self._inbox = inbox
        self._outbox = outbox

    @classmethod
    def pair(cls) -> tuple["LoopbackTransport", "LoopbackTransport"]:
        a: "queue.Queue[bytes]" = queue.Queue()
        b: "queue.Queue[bytes]" = queue.Queue()
        return cls(a, b), cls(b, a)

    def send(self, data: bytes) -> None:
        self._outbox.put(data)

    def recv(self, timeout: float) -> bytes:
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no message within timeout")

    def close(self) -> None:
        pass


class TcpTransport:
    """Length-prefixed messages (4-byte big-endian) over a stream socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        try:
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = HANDSHAKE_TIMEOUT_S) -> "TcpTransport":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"connect {host}:{port}: {exc}") from exc
        return cls(sock)

    def send(self, data: bytes) -> None:
        try:
            self._sock.sendall(struct.pack(">I", len(data)) + data)
        except OSError as exc:
            raise TransportError(f"send: {exc}") from exc

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        while n > 0:
            chunk = self._sock.recv(n)
            if not chunk:
                raise TransportError("peer closed the connection")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def recv(self, timeout: float) -> bytes:
        self._sock.settimeout(timeout)
        try:
            header = self._recv_exact(4)
            (length,) = struct.unpack(">I", header)
            if length > 16 * 1024 * 1024:
                raise TransportError(f"oversized frame: {length} bytes")
            return self._recv_exact(length)
        except socket.timeout:
            raise TimeoutError("no message within timeout")
        except OSError as exc:
            raise TransportError(f"recv: {exc}") from exc

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def _send_doc(transport, doc: dict) -> None:
    transport.send(canonical_bytes(doc))


def _recv_doc(transport, timeout: float) -> dict:
    try:
        raw = transport.recv(timeout)
    except TimeoutError:
        raise AnsError(HANDSHAKE_TIMEOUT, "peer did not answer in time")
    try:
        doc = json.loads(raw)
    except ValueError as exc:
        raise AnsError(MALFORMED, f"undecodable handshake message: {exc}")
    if not isinstance(doc, dict) or "type" not in doc:
        raise AnsError(MALFORMED, "handshake message must carry a type")
    if doc["type"] == "abort":
        raise AnsError(doc.get("error", BAD_SIGNATURE), f"aborted by peer: {doc.get('message', '')}")
    return doc


def _abort(transport, exc: AnsError) -> None:
    try:
        _send_doc(transport, {"type": "abort", "error": exc.code, "message": exc.message})
    except Exception:
        pass


# -- mutual handshake ----------------------------------------------------------


@dataclass(frozen=True)
class Session:
    """Exists only after both handshake signatures verified."""

    peer_did: str
    peer_name: AnsName
    transcript_hash: bytes
    established_at: int
    peer_chain: CertificateChain = field(repr=False, compare=False, default=None)  # type: ignore[assignment]


def _handshake_digest(serial: int, first_nonce: bytes, second_nonce: bytes) -> bytes:
    return sha256(canonical_bytes([serial, first_nonce.hex(), second_nonce.hex()]))


def _transcript(serial_i: int, serial_r: int, nonce_i: bytes, nonce_r: bytes) -> bytes:
    return sha256(canonical_bytes([serial_i, serial_r, nonce_i.hex(), nonce_r.hex()]))


def _validate_peer_chain(doc: dict, trust_anchors, now: int,
                         expected_name: AnsName | None) -> CertificateChain:
    try:
        chain = CertificateChain.from_doc(doc["chain"])
        nonce = bytes.fromhex(doc["nonce"])
    except (KeyError, TypeError, ValueError) as exc:
        raise AnsError(MALFORMED, f"bad handshake payload: {exc}")
    if len(nonce) != 32:
        raise AnsError(MALFORMED, "handshake nonce must be 32 bytes")
    validate_chain(chain, trust_anchors, now).raise_if_invalid()
    if chain.agent.subject_name is None:
        raise AnsError(BAD_SIGNATURE, "peer certificate carries no agent name")
    if expected_name is not None and chain.agent.subject_name != expected_name:
        raise AnsError(BAD_SIGNATURE, "peer presented a certificate for a different name")
    return chain


def initiate_handshake(
    identity: AgentIdentity,
    transport,
    trust_anchors,
    now: int | None = None,
    expected_name: AnsName | None = None,
    timeout: float = HANDSHAKE_TIMEOUT_S,
) -> Session:
    import secrets as _secrets

    if now is None:
        now = int(time.time())
    nonce_i = _secrets.token_bytes(32)
    _send_doc(transport, {
        "type": "hello",
        "chain": identity.chain.to_doc(),
        "nonce": nonce_i.hex(),
    })
    reply = _recv_doc(transport, timeout)
    if reply.get("type") != "hello_ack":
        raise AnsError(MALFORMED, f"expected hello_ack, got {reply.get('type')!r}")
    try:
        peer_chain = _validate_peer_chain(reply, trust_anchors, now, expected_name)
        nonce_r = bytes.fromhex(reply["nonce"])
        sig_r = bytes.fromhex(reply["signature"])
        expected_digest = _handshake_digest(identity.chain.agent.serial, nonce_i, nonce_r)
        if not verify_signature(peer_chain.agent.public_key, sig_r, expected_digest):
            raise AnsError(BAD_SIGNATURE, "responder signature does not verify")
    except AnsError as exc:
        _abort(transport, exc)
        raise
    sig_i = identity.identity_keys.sign(
        _handshake_digest(peer_chain.agent.serial, nonce_r, nonce_i)
    )
    _send_doc(transport, {"type": "confirm", "signature": sig_i.hex()})
    return Session(
        peer_did=peer_chain.agent.subject_did,
        peer_name=peer_chain.agent.subject_name,
        transcript_hash=_transcript(identity.chain.agent.serial, peer_chain.agent.serial,
                                    nonce_i, nonce_r),
        established_at=now,
        peer_chain=peer_chain,
    )


def respond_handshake(
    identity: AgentIdentity,
    transport,
    trust_anchors,
    now: int | None = None,
    timeout: float = HANDSHAKE_TIMEOUT_S,
) -> Session:
    import secrets as _secrets

    if now is None:
        now = int(time.time())
    hello = _recv_doc(transport, timeout)
    if hello.get("type") != "hello":
        raise AnsError(MALFORMED, f"expected hello, got {hello.get('type')!r}")
    try:
        peer_chain = _validate_peer_chain(hello, trust_anchors, now, None)
    except AnsError as exc:
        _abort(transport, exc)
        raise
    nonce_i = bytes.fromhex(hello["nonce"])
    nonce_r = _secrets.token_bytes(32)
    sig_r = identity.identity_keys.sign(
        _handshake_digest(peer_chain.agent.serial, nonce_i, nonce_r)
    )
    _send_doc(transport, {
        "type": "hello_ack",
        "chain": identity.chain.to_doc(),
        "nonce": nonce_r.hex(),
        "signature": sig_r.hex(),
    })
    confirm = _recv_doc(transport, timeout)
    if confirm.get("type") != "confirm":
        raise AnsError(MALFORMED, f"expected confirm, got {confirm.get('type')!r}")
    try:
        sig_i = bytes.fromhex(confirm["signature"])
        expected_digest = _handshake_digest(identity.chain.agent.serial, nonce_r, nonce_i)
        if not verify_signature(peer_chain.agent.public_key, sig_i, expected_digest):
            raise AnsError(BAD_SIGNATURE, "initiator signature does not verify at message 3")
    except AnsError as exc:
        _abort(transport, exc)
        raise
    return Session(
        peer_did=peer_chain.agent.subject_did,
        peer_name=peer_chain.agent.subject_name,
        transcript_hash=_transcript(peer_chain.agent.serial, identity.chain.agent.serial,
                                    nonce_i, nonce_r),
        established_at=now,
        peer_chain=peer_chain,
    )


# -- capability exchange over an established session ---------------------------


def request_capability(
    session: Session,
    transport,
    capability: str,
    prover: AgentIdentity,
    now: int | None = None,
    timeout: float = HANDSHAKE_TIMEOUT_S,
) -> AttestationResult:
    """Prover side: ask the peer to verify one of our committed capabilities."""
    if now is None:
        now = int(time.time())
    _send_doc(transport, {"type": "capability_request", "capability": capability})
    reply = _recv_doc(transport, timeout)
    if reply.get("type") == "capability_denied":
        return AttestationResult.deny(reply.get("reason", BAD_SIGNATURE),
                                      reply.get("message", ""))
    if reply.get("type") != "challenge":
        raise AnsError(MALFORMED, f"expected challenge, got {reply.get('type')!r}")
    challenge = Challenge.from_doc(reply["challenge"])
    secret = prover.capabilities.get(capability)
    if secret is None:
        return AttestationResult.deny(UNKNOWN_CAPABILITY,
                                      f"no local secret for {capability!r}")
    proof = attestation.prove(challenge, secret, prover.identity_keys, prover.name, now)
    _send_doc(transport, {"type": "capability_proof", "proof": proof.to_doc()})
    verdict = _recv_doc(transport, timeout)
    if verdict.get("type") == "capability_granted":
        return AttestationResult(True)
    if verdict.get("type") == "capability_denied":
        return AttestationResult.deny(verdict.get("reason", BAD_SIGNATURE),
                                      verdict.get("message", ""))
    raise AnsError(MALFORMED, f"unexpected verdict {verdict.get('type')!r}")


def serve_capability_request(
    session: Session,
    transport,
    trust_anchors,
    store: ChallengeStore,
    now: int | None = None,
    timeout: float = HANDSHAKE_TIMEOUT_S,
) -> AttestationResult | None:
    """Verifier side: handle one capability request from the session peer.

    Returns the verdict, or None when the peer hung up.
    """
    if now is None:
        now = int(time.time())
    try:
        request = _recv_doc(transport, timeout)
    except (TransportError, AnsError):
        return None
    if request.get("type") != "capability_request":
        return None
    capability = request.get("capability")
    commitment = next(
        (c for c in session.peer_chain.agent.capability_commitments
         if c.capability == capability),
        None,
    )
    if commitment is None:
        result = AttestationResult.deny(
            UNKNOWN_CAPABILITY,
            f"peer certificate carries no commitment for {capability!r}",
        )
        _send_doc(transport, {"type": "capability_denied", "reason": result.reason,
                              "message": result.message})
        return result
    challenge = store.issue(session.peer_name, now)
    _send_doc(transport, {"type": "challenge", "challenge": challenge.to_doc()})
    answer = _recv_doc(transport, timeout)
    if answer.get("type") != "capability_proof":
        raise AnsError(MALFORMED, f"expected capability_proof, got {answer.get('type')!r}")
    proof = CapabilityProof.from_doc(answer["proof"])
    result = attestation.verify(proof, commitment, session.peer_chain, trust_anchors,
                                store, now)
    if result.granted:
        _send_doc(transport, {"type": "capability_granted"})
    else:
        _send_doc(transport, {"type": "capability_denied", "reason": result.reason,
                              "message": result.message})
    return result


class PeerServer:
    """TCP listener an agent runs so peers can handshake and verify
    capabilities against it. One thread per connection; demo-scale."""

    def __init__(self, identity: AgentIdentity, trust_anchors,
                 host: str = "127.0.0.1", port: int = 0):
        self.identity = identity
        self.trust_anchors = tuple(trust_anchors)
        self.challenges = ChallengeStore()
        self.sessions: list[Session] = []
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(32)
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def start(self) -> "PeerServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        transport = TcpTransport(conn)
        try:
            session = respond_handshake(self.identity, transport, self.trust_anchors)
            with self._lock:
                self.sessions.append(session)
            while not self._stop.is_set():
                if serve_capability_request(session, transport, self.trust_anchors,
                                            self.challenges) is None:
                    return
        except (AnsError, TransportError):
            return
        finally:
            transport.close()
