"""Key pairs, DIDs, and the fixed three-tier certificate hierarchy.

Certificates are a bespoke canonical-text format (see canonical.py), not
X.509: root signs intermediate, intermediate signs agent, and chain depth is
exactly three. Signing is Ed25519 (32-byte public keys, 64-byte signatures,
deterministic), hashing SHA-256. Agent certificates carry capability
commitments as extensions so verifiers can check capability proofs against
certified data instead of anything self-asserted.
"""

from __future__ import annotations

import base64
import hashlib
import secrets
from dataclasses import dataclass, replace

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import names
from .canonical import canonical_bytes as encode_canonical
from .errors import (
    AnsError,
    CERT_EXPIRED,
    CERT_NOT_YET_VALID,
    CHAIN_INVALID,
    ROLE_VIOLATION,
    UNTRUSTED_ROOT,
    WINDOW_EXCEEDED,
)

ROLE_ROOT = "root"
ROLE_INTERMEDIATE = "intermediate"
ROLE_AGENT = "agent"

# Default validity windows, in seconds. Agent certificates run 90 days;
# intermediates a year; roots ten years.
AGENT_VALIDITY_S = 90 * 86400
INTERMEDIATE_VALIDITY_S = 365 * 86400
ROOT_VALIDITY_S = 3650 * 86400

DID_PREFIX = "did:ans:"


@dataclass(frozen=True)
class KeyPair:
    """Ed25519 key pair. ``private_key`` is the 32-byte seed; it never appears
    in any document this package serializes."""

    public_key: bytes
    private_key: bytes

    @classmethod
    def generate(cls, seed: bytes | None = None) -> "KeyPair":
        """Deterministic for a fixed 32-byte seed; otherwise uses the OS CSPRNG."""
        if seed is None:
            seed = secrets.token_bytes(32)
        if len(seed) != 32:
            raise ValueError("seed must be exactly 32 bytes")
        private = Ed25519PrivateKey.from_private_bytes(seed)
        public = private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return cls(public_key=public, private_key=seed)

    def sign(self, message: bytes) -> bytes:
        private = Ed25519PrivateKey.from_private_bytes(self.private_key)
        return private.sign(message)


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


def derive_did(public_key: bytes) -> str:
    """``did:ans:<base32(sha256(public_key))>``, deterministic and unpadded."""
    digest = hashlib.sha256(public_key).digest()
    encoded = base64.b32encode(digest).decode("ascii").rstrip("=").lower()
    return DID_PREFIX + encoded


@dataclass(frozen=True)
class CapabilityCommitment:
    """Public half of a capability-scoped key, bound into agent certificates.

    Reveals nothing about the capability secret; one commitment per capability
    per agent.
    """

    capability: str
    commitment_key: bytes

    def to_doc(self) -> dict:
        return {"capability": self.capability, "commitment_key": self.commitment_key.hex()}

    @classmethod
    def from_doc(cls, doc: dict) -> "CapabilityCommitment":
        return cls(
            capability=names.validate_label(doc["capability"], "capability"),
            commitment_key=bytes.fromhex(doc["commitment_key"]),
        )


@dataclass(frozen=True)
class Certificate:
    serial: int
    subject_did: str
    issuer_did: str
    public_key: bytes
    not_before: int
    not_after: int
    role: str
    capability_commitments: tuple[CapabilityCommitment, ...] = ()
    subject_name: names.AnsName | None = None
    signature: bytes = b""

    def unsigned_doc(self) -> dict:
        doc: dict = {
            "serial": self.serial,
            "subject_did": self.subject_did,
            "issuer_did": self.issuer_did,
            "public_key": self.public_key.hex(),
            "not_before": self.not_before,
            "not_after": self.not_after,
            "role": self.role,
            "capability_commitments": [c.to_doc() for c in self.capability_commitments],
        }
        if self.subject_name is not None:
            doc["subject_name"] = self.subject_name.render()
        return doc

    def to_doc(self) -> dict:
        doc = self.unsigned_doc()
        doc["signature"] = self.signature.hex()
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "Certificate":
        subject_name = doc.get("subject_name")
        return cls(
            serial=int(doc["serial"]),
            subject_did=doc["subject_did"],
            issuer_did=doc["issuer_did"],
            public_key=bytes.fromhex(doc["public_key"]),
            not_before=int(doc["not_before"]),
            not_after=int(doc["not_after"]),
            role=doc["role"],
            capability_commitments=tuple(
                CapabilityCommitment.from_doc(c) for c in doc.get("capability_commitments", [])
            ),
            subject_name=names.parse(subject_name) if subject_name is not None else None,
            signature=bytes.fromhex(doc["signature"]),
        )


def canonical_cert_bytes(cert: Certificate) -> bytes:
    """Byte string the issuer signs: every field except the signature."""
    return encode_canonical(cert.unsigned_doc())


@dataclass(frozen=True)
class CertificateChain:
    """agent -> intermediate -> root, in that order."""

    agent: Certificate
    intermediate: Certificate
    root: Certificate

    def to_doc(self) -> list:
        return [self.agent.to_doc(), self.intermediate.to_doc(), self.root.to_doc()]

    @classmethod
    def from_doc(cls, doc: list) -> "CertificateChain":
        if not isinstance(doc, list) or len(doc) != 3:
            raise AnsError(CHAIN_INVALID, "chain must be a 3-element array")
        return cls(
            agent=Certificate.from_doc(doc[0]),
            intermediate=Certificate.from_doc(doc[1]),
            root=Certificate.from_doc(doc[2]),
        )


def _random_serial() -> int:
    return secrets.randbits(63)


def issue_certificate(
    issuer_keys: KeyPair,
    issuer_cert: Certificate | None,
    subject_public_key: bytes,
    role: str,
    validity_seconds: int,
    subject_name: names.AnsName | None = None,
    commitments: tuple[CapabilityCommitment, ...] = (),
    not_before: int | None = None,
    serial: int | None = None,
    now: int | None = None,
) -> Certificate:
    """Issue a certificate down the fixed hierarchy.

    ``issuer_cert=None`` self-signs a root. Roots issue intermediates,
    intermediates issue agents; anything else is ROLE_VIOLATION. The subject
    window must sit inside the issuer's own window (WINDOW_EXCEEDED).
    """
    if validity_seconds <= 0:
        raise ValueError("validity_seconds must be positive")
    if now is None:
        import time

        now = int(time.time())
    start = now if not_before is None else not_before
    end = start + validity_seconds

    if issuer_cert is None:
        if role != ROLE_ROOT:
            raise AnsError(ROLE_VIOLATION, "only root certificates may be self-signed")
        if subject_public_key != issuer_keys.public_key:
            raise AnsError(ROLE_VIOLATION, "self-signed root must certify its own key")
        issuer_did = derive_did(issuer_keys.public_key)
    else:
        allowed = {ROLE_ROOT: ROLE_INTERMEDIATE, ROLE_INTERMEDIATE: ROLE_AGENT}
        if allowed.get(issuer_cert.role) != role:
            raise AnsError(
                ROLE_VIOLATION,
                f"{issuer_cert.role} certificates cannot issue {role} certificates",
            )
        if issuer_cert.public_key != issuer_keys.public_key:
            raise AnsError(ROLE_VIOLATION, "issuer key does not match issuer certificate")
        if start < issuer_cert.not_before or end > issuer_cert.not_after:
            raise AnsError(
                WINDOW_EXCEEDED,
                "subject validity extends outside the issuer's own window",
            )
        issuer_did = issuer_cert.subject_did

    if role == ROLE_AGENT and subject_name is None:
        raise ValueError("agent certificates require a subject name")
    if role != ROLE_AGENT and (subject_name is not None or commitments):
        raise ValueError("only agent certificates carry names and commitments")
    seen = {c.capability for c in commitments}
    if len(seen) != len(commitments):
        raise ValueError("duplicate capability commitment")

    cert = Certificate(
        serial=_random_serial() if serial is None else serial,
        subject_did=derive_did(subject_public_key),
        issuer_did=issuer_did,
        public_key=subject_public_key,
        not_before=start,
        not_after=end,
        role=role,
        capability_commitments=tuple(sorted(commitments, key=lambda c: c.capability)),
        subject_name=subject_name,
    )
    return replace(cert, signature=issuer_keys.sign(canonical_cert_bytes(cert)))


def self_signed_root(keys: KeyPair, validity_seconds: int = ROOT_VALIDITY_S,
                     now: int | None = None) -> Certificate:
    return issue_certificate(keys, None, keys.public_key, ROLE_ROOT, validity_seconds, now=now)


@dataclass(frozen=True)
class ChainValidation:
    ok: bool
    code: str | None = None
    message: str = "valid"

    def raise_if_invalid(self) -> None:
        if not self.ok:
            assert self.code is not None
            raise AnsError(self.code, self.message)


def _check_window(cert: Certificate, now: int) -> ChainValidation | None:
    if now < cert.not_before:
        return ChainValidation(False, CERT_NOT_YET_VALID, f"{cert.role} certificate not yet valid")
    if now > cert.not_after:
        return ChainValidation(False, CERT_EXPIRED, f"{cert.role} certificate expired")
    return None


def validate_chain(
    chain: CertificateChain,
    trust_anchors: tuple[Certificate, ...] | list[Certificate] | set,
    now: int,
) -> ChainValidation:
    """Validate structure, anchor membership, time windows, then signatures.

    Time windows are checked before any signature so an expired peer fails
    fast with CERT_EXPIRED rather than a generic signature error.
    """
    agent, inter, root = chain.agent, chain.intermediate, chain.root

    if (agent.role, inter.role, root.role) != (ROLE_AGENT, ROLE_INTERMEDIATE, ROLE_ROOT):
        return ChainValidation(False, CHAIN_INVALID, "chain roles must be agent/intermediate/root")
    if agent.issuer_did != inter.subject_did or inter.issuer_did != root.subject_did:
        return ChainValidation(False, CHAIN_INVALID, "issuer/subject linkage broken")
    if root.issuer_did != root.subject_did:
        return ChainValidation(False, CHAIN_INVALID, "root certificate is not self-signed")
    for cert in (agent, inter, root):
        if cert.not_before >= cert.not_after:
            return ChainValidation(False, CHAIN_INVALID, f"{cert.role} validity window is empty")
        if cert.subject_did != derive_did(cert.public_key):
            return ChainValidation(False, CHAIN_INVALID, f"{cert.role} DID does not match its key")

    anchor_docs = {encode_canonical(a.to_doc()) for a in trust_anchors}
    if encode_canonical(root.to_doc()) not in anchor_docs:
        return ChainValidation(False, UNTRUSTED_ROOT, "root certificate is not a trust anchor")

    for cert in (agent, inter, root):
        bad = _check_window(cert, now)
        if bad is not None:
            return bad

    pairs = ((root, root), (inter, root), (agent, inter))
    for cert, issuer in pairs:
        if not verify_signature(issuer.public_key, cert.signature, canonical_cert_bytes(cert)):
            return ChainValidation(False, CHAIN_INVALID, f"{cert.role} signature does not verify")

    return ChainValidation(True)


def remaining_validity(cert: Certificate, now: int) -> int:
    """Seconds until expiry; negative once expired. Feeds the expiry alerts."""
    return cert.not_after - now
