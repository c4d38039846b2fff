"""Agent manifests and admission validation.

A manifest is the declarative deployment document for one agent:

    apiVersion: ans.io/v1
    kind: Agent
    metadata: {name, namespace}
    spec:
      ansName, capabilities, provider, version, environment,
      certificate {issuer, validity}, policies, resources (optional)

Admission runs, in order: schema check, name/spec consistency, certificate
chain checks when a chain is attached, then policy evaluation at the
admission phase. Structural problems (missing keys, wrong types) are schema
errors; fields that are present but inconsistent produce a denied decision
with reasons, not an error.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from . import names
from .errors import AnsError, MALFORMED
from .identity import CertificateChain, validate_chain
from .names import AnsName
from .policy import (
    EvaluationContext,
    PHASE_ADMISSION,
    PolicyDecision,
    PolicySubject,
    evaluate,
)

API_VERSION = "ans.io/v1"
KIND = "Agent"

_DURATION_RE = re.compile(r"^([1-9][0-9]*)([dhms])$")
_DURATION_UNITS = {"d": 86400, "h": 3600, "m": 60, "s": 1}


def parse_duration(text: str) -> int:
    """``90d`` / ``12h`` / ``30m`` / ``45s`` to seconds."""
    if not isinstance(text, str):
        raise AnsError(MALFORMED, "duration must be a string")
    match = _DURATION_RE.match(text)
    if not match:
        raise AnsError(MALFORMED, f"duration {text!r} must match <n>d|h|m|s")
    return int(match.group(1)) * _DURATION_UNITS[match.group(2)]


@dataclass(frozen=True)
class CertificateSpec:
    issuer: str
    validity_text: str
    validity_seconds: int


@dataclass(frozen=True)
class AgentManifest:
    name: str
    namespace: str
    ans_name_text: str
    capabilities: tuple[str, ...]
    provider: str
    version: str
    environment: str
    certificate: CertificateSpec
    policies: tuple[str, ...]
    cpu_millicores: int | None = None
    memory_mebibytes: int | None = None

    def to_doc(self) -> dict:
        spec: dict = {
            "ansName": self.ans_name_text,
            "capabilities": list(self.capabilities),
            "provider": self.provider,
            "version": self.version,
            "environment": self.environment,
            "certificate": {
                "issuer": self.certificate.issuer,
                "validity": self.certificate.validity_text,
            },
            "policies": list(self.policies),
        }
        if self.cpu_millicores is not None or self.memory_mebibytes is not None:
            resources = {}
            if self.cpu_millicores is not None:
                resources["cpu_millicores"] = self.cpu_millicores
            if self.memory_mebibytes is not None:
                resources["memory_mebibytes"] = self.memory_mebibytes
            spec["resources"] = resources
        return {
            "apiVersion": API_VERSION,
            "kind": KIND,
            "metadata": {"name": self.name, "namespace": self.namespace},
            "spec": spec,
        }


def _schema_error(message: str, where: str) -> AnsError:
    return AnsError(MALFORMED, f"manifest schema: {message} (at {where})")


def _require(doc: dict, key: str, kind, where: str):
    if key not in doc:
        raise _schema_error(f"missing required key {key!r}", where)
    value = doc[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise _schema_error(f"{key!r} has the wrong type", where)
    return value


def manifest_from_doc(doc) -> AgentManifest:
    """Structural validation only; value-level consistency is check_consistency.

    Raises MALFORMED for missing keys, wrong types, or unknown keys.
    """
    if not isinstance(doc, dict):
        raise _schema_error("document must be a map", "top level")
    for key in doc:
        if key not in ("apiVersion", "kind", "metadata", "spec"):
            raise _schema_error(f"unknown key {key!r}", "top level")
    api_version = _require(doc, "apiVersion", str, "top level")
    kind = _require(doc, "kind", str, "top level")
    if api_version != API_VERSION:
        raise _schema_error(f"apiVersion must be {API_VERSION!r}", "apiVersion")
    if kind != KIND:
        raise _schema_error(f"kind must be {KIND!r}", "kind")

    metadata = _require(doc, "metadata", dict, "top level")
    for key in metadata:
        if key not in ("name", "namespace"):
            raise _schema_error(f"unknown key {key!r}", "metadata")
    meta_name = _require(metadata, "name", str, "metadata")
    namespace = _require(metadata, "namespace", str, "metadata")

    spec = _require(doc, "spec", dict, "top level")
    allowed_spec = ("ansName", "capabilities", "provider", "version", "environment",
                    "certificate", "policies", "resources")
    for key in spec:
        if key not in allowed_spec:
            raise _schema_error(f"unknown key {key!r}", "spec")
    ans_name = _require(spec, "ansName", str, "spec")
    capabilities = _require(spec, "capabilities", list, "spec")
    if not capabilities or not all(isinstance(c, str) for c in capabilities):
        raise _schema_error("capabilities must be a non-empty list of strings", "spec.capabilities")
    provider = _require(spec, "provider", str, "spec")
    version = _require(spec, "version", str, "spec")
    environment = _require(spec, "environment", str, "spec")
    cert_doc = _require(spec, "certificate", dict, "spec")
    for key in cert_doc:
        if key not in ("issuer", "validity"):
            raise _schema_error(f"unknown key {key!r}", "spec.certificate")
    issuer = _require(cert_doc, "issuer", str, "spec.certificate")
    validity_text = _require(cert_doc, "validity", str, "spec.certificate")
    validity_seconds = parse_duration(validity_text)
    policies_doc = spec.get("policies", [])
    if not isinstance(policies_doc, list) or not all(isinstance(p, str) for p in policies_doc):
        raise _schema_error("policies must be a list of strings", "spec.policies")

    cpu = memory = None
    if "resources" in spec:
        resources = spec["resources"]
        if not isinstance(resources, dict):
            raise _schema_error("resources must be a map", "spec.resources")
        for key in resources:
            if key not in ("cpu_millicores", "memory_mebibytes"):
                raise _schema_error(f"unknown key {key!r}", "spec.resources")
            value = resources[key]
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise _schema_error("expected a non-negative integer", f"spec.resources.{key}")
        cpu = resources.get("cpu_millicores")
        memory = resources.get("memory_mebibytes")

    return AgentManifest(
        name=meta_name,
        namespace=namespace,
        ans_name_text=ans_name,
        capabilities=tuple(capabilities),
        provider=provider,
        version=version,
        environment=environment,
        certificate=CertificateSpec(issuer, validity_text, validity_seconds),
        policies=tuple(policies_doc),
        cpu_millicores=cpu,
        memory_mebibytes=memory,
    )


def check_consistency(manifest: AgentManifest) -> tuple[AnsName | None, list[str]]:
    """Value-level checks: labels, name grammar, and name/spec agreement.

    Returns the parsed agent name (when it parses) plus a list of problems;
    an empty list means consistent.
    """
    problems: list[str] = []
    for label, field in ((manifest.name, "metadata.name"), (manifest.namespace, "metadata.namespace")):
        try:
            names.validate_label(label, field)
        except AnsError as exc:
            problems.append(f"INVALID_LABEL: {exc.message}")
    parsed: AnsName | None = None
    try:
        parsed = names.parse(manifest.ans_name_text)
    except AnsError as exc:
        problems.append(f"INVALID_NAME: {exc.message}")
    for capability in manifest.capabilities:
        try:
            names.validate_label(capability, "spec.capabilities entry")
        except AnsError as exc:
            problems.append(f"INVALID_LABEL: {exc.message}")
    if parsed is not None:
        if parsed.capability not in manifest.capabilities:
            problems.append(
                f"NAME_MISMATCH: name capability {parsed.capability!r} "
                "is not listed in spec.capabilities"
            )
        if parsed.provider != manifest.provider:
            problems.append(
                f"NAME_MISMATCH: name provider {parsed.provider!r} != spec.provider "
                f"{manifest.provider!r}"
            )
        if parsed.version.render() != "v" + manifest.version:
            problems.append(
                f"NAME_MISMATCH: name version {parsed.version.render()!r} != "
                f"'v' + spec.version {manifest.version!r}"
            )
        if parsed.extension != manifest.environment:
            problems.append(
                f"NAME_MISMATCH: name extension {parsed.extension!r} != spec.environment "
                f"{manifest.environment!r}"
            )
    return parsed, problems


def subject_from_manifest(manifest: AgentManifest, parsed: AnsName) -> PolicySubject:
    all_capabilities = tuple(dict.fromkeys((parsed.capability, *manifest.capabilities)))
    return PolicySubject(
        protocol=parsed.protocol,
        agent_id=parsed.agent_id,
        capability=parsed.capability,
        capabilities=all_capabilities,
        provider=manifest.provider,
        environment=manifest.environment,
        namespace=manifest.namespace,
        cert_validity_seconds=manifest.certificate.validity_seconds,
        cpu_millicores=manifest.cpu_millicores,
        memory_mebibytes=manifest.memory_mebibytes,
    )


@dataclass(frozen=True)
class AdmissionResult:
    allowed: bool
    reasons: tuple[str, ...]
    matched_rules: tuple[tuple[str, str, str], ...]

    def to_doc(self) -> dict:
        return {
            "allowed": self.allowed,
            "reasons": list(self.reasons),
            "matched_rules": [list(m) for m in self.matched_rules],
        }


def _evaluate_referenced(manifest: AgentManifest, ctx: EvaluationContext,
                         policies) -> tuple[bool, list[str], list]:
    """Manifest-referenced policies must each independently allow.

    A referenced id that is not loaded denies: an unverifiable requirement is
    a failed requirement.
    """
    by_id = {p.id: p for p in policies}
    ok = True
    reasons: list[str] = []
    matched: list = []
    for ref in manifest.policies:
        referenced = by_id.get(ref)
        if referenced is None:
            ok = False
            reasons.append(f"referenced policy {ref!r} is not loaded")
            continue
        decision = evaluate(ctx, [referenced])
        matched.extend(decision.matched_rules)
        if not decision.allowed:
            ok = False
            reasons.extend(f"policy {ref!r}: {r}" for r in decision.reasons)
    return ok, reasons, matched


def validate_admission(
    doc,
    policies,
    trust_anchors,
    now: int,
    chain: CertificateChain | None = None,
) -> AdmissionResult:
    """Full admission pipeline for one manifest document.

    Raises MALFORMED only for structural schema violations; everything else
    comes back as a decision. Never mutates any registry state.
    """
    manifest = manifest_from_doc(doc)
    parsed, problems = check_consistency(manifest)
    if problems or parsed is None:
        return AdmissionResult(False, tuple(problems), ())

    reasons: list[str] = []
    if chain is not None:
        verdict = validate_chain(chain, trust_anchors, now)
        if not verdict.ok:
            reasons.append(f"{verdict.code}: {verdict.message}")
        else:
            if chain.agent.subject_name is None or chain.agent.subject_name != parsed:
                reasons.append("NAME_MISMATCH: certificate subject does not match manifest ansName")
            window = chain.agent.not_after - chain.agent.not_before
            if window > manifest.certificate.validity_seconds:
                reasons.append(
                    f"WINDOW_EXCEEDED: certificate window {window}s exceeds declared "
                    f"validity {manifest.certificate.validity_seconds}s"
                )
        if reasons:
            return AdmissionResult(False, tuple(reasons), ())

    ctx = EvaluationContext(subject=subject_from_manifest(manifest, parsed),
                            phase=PHASE_ADMISSION, now=now)
    decision: PolicyDecision = evaluate(ctx, policies)
    matched = list(decision.matched_rules)
    reasons.extend(decision.reasons)
    allowed = decision.allowed
    if allowed and manifest.policies:
        refs_ok, ref_reasons, ref_matched = _evaluate_referenced(manifest, ctx, policies)
        reasons.extend(ref_reasons)
        matched.extend(ref_matched)
        allowed = refs_ok
    deduped = tuple(dict.fromkeys(matched))
    return AdmissionResult(allowed, tuple(reasons), deduped)


def manifest_for_name(
    parsed: AnsName,
    namespace: str,
    capabilities: tuple[str, ...] = (),
    issuer: str = "ans-ca",
    validity: str = "90d",
    policies: tuple[str, ...] = (),
) -> AgentManifest:
    """Convenience constructor producing a manifest consistent with a name."""
    caps = tuple(dict.fromkeys((parsed.capability, *capabilities)))
    return AgentManifest(
        name=parsed.agent_id,
        namespace=namespace,
        ans_name_text=parsed.render(),
        capabilities=caps,
        provider=parsed.provider,
        version=parsed.version.render()[1:],
        environment=parsed.extension,
        certificate=CertificateSpec(issuer, validity, parse_duration(validity)),
        policies=policies,
    )
