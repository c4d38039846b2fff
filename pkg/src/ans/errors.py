"""Closed error vocabulary shared by the registry, server, client SDK, and CLI.

Every failure that crosses a module or wire boundary carries one of the codes
below. The HTTP status mapping lives in the server; the CLI maps codes to exit
codes. Codes outside this set are a bug.
"""

from __future__ import annotations

from typing import Any

# Name grammar
INVALID_PROTOCOL = "INVALID_PROTOCOL"
INVALID_LABEL = "INVALID_LABEL"
INVALID_VERSION = "INVALID_VERSION"
MALFORMED = "MALFORMED"
INVALID_NAME = "INVALID_NAME"

# Certificates and chains
ROLE_VIOLATION = "ROLE_VIOLATION"
WINDOW_EXCEEDED = "WINDOW_EXCEEDED"
UNTRUSTED_ROOT = "UNTRUSTED_ROOT"
CHAIN_INVALID = "CHAIN_INVALID"
CERT_EXPIRED = "CERT_EXPIRED"
CERT_NOT_YET_VALID = "CERT_NOT_YET_VALID"

# Attestation
CHALLENGE_EXPIRED = "CHALLENGE_EXPIRED"
NONCE_REPLAY = "NONCE_REPLAY"
CAPABILITY_MISMATCH = "CAPABILITY_MISMATCH"
UNKNOWN_CAPABILITY = "UNKNOWN_CAPABILITY"
BAD_SIGNATURE = "BAD_SIGNATURE"

# Policy
POLICY_PARSE = "POLICY_PARSE"
POLICY_DENIED = "POLICY_DENIED"

# Registry
NAME_MISMATCH = "NAME_MISMATCH"
DUPLICATE_AGENT = "DUPLICATE_AGENT"
UNKNOWN_AGENT = "UNKNOWN_AGENT"
REVOKED = "REVOKED"
LOG_CORRUPT = "LOG_CORRUPT"

# Client
HANDSHAKE_TIMEOUT = "HANDSHAKE_TIMEOUT"

# Server
INTERNAL = "INTERNAL"

ERROR_CODES = frozenset({
    INVALID_PROTOCOL,
    INVALID_LABEL,
    INVALID_VERSION,
    MALFORMED,
    INVALID_NAME,
    ROLE_VIOLATION,
    WINDOW_EXCEEDED,
    UNTRUSTED_ROOT,
    CHAIN_INVALID,
    CERT_EXPIRED,
    CERT_NOT_YET_VALID,
    CHALLENGE_EXPIRED,
    NONCE_REPLAY,
    CAPABILITY_MISMATCH,
    UNKNOWN_CAPABILITY,
    BAD_SIGNATURE,
    POLICY_PARSE,
    POLICY_DENIED,
    NAME_MISMATCH,
    DUPLICATE_AGENT,
    UNKNOWN_AGENT,
    REVOKED,
    LOG_CORRUPT,
    HANDSHAKE_TIMEOUT,
    INTERNAL,
})


class AnsError(Exception):
    """Error with a code from the closed set, plus optional structured details."""

    def __init__(self, code: str, message: str, details: Any = None):
        if code not in ERROR_CODES:
            raise ValueError(f"unknown error code: {code}")
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.details = details

    def to_doc(self) -> dict:
        doc: dict = {"error": self.code, "message": self.message}
        if self.details is not None:
            doc["details"] = self.details
        return doc


class TransportError(Exception):
    """Network-level failure talking to a registry or peer.

    Deliberately not an AnsError: a dead socket is not a protocol verdict.
    """
