"""Acceptance gate: one test per release criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The full gate includes a
five-minute sustained-throughput run and a one-minute latency benchmark, so
expect roughly ten minutes end to end.
"""

import dataclasses
import os
import random
import time

from ans import attestation, names
from ans.attestation import ChallengeStore, create_capability
from ans.canonical import canonical_bytes, canonical_json
from ans.client import build_registration_request
from ans.errors import AnsError
from ans.harness import (
    BenchConfig,
    POLICY_SOFT_FLOOR_PER_S,
    REGISTRATION_FLOOR_PER_MIN,
    RESOLVE_SOFT_FLOOR_PER_S,
    build_ca,
    harness_policies,
    run_benchmark,
    run_demo,
    run_policy_microbench,
    run_registration_throughput,
    run_resolve_microbench,
    run_security_suite,
)
from ans.identity import KeyPair, validate_chain
from ans.metrics import AlertConfig, Metrics, evaluate_alerts
from ans.names import NameQuery, Version, VersionRequirement
from ans.policy import PolicyRule, RuleMatch, evaluate
from ans.registry import Registry, renewal_payload, revocation_payload
from conftest import NOW, make_identity, make_name
from genutil import random_name
from test_policy import _random_ctx, _random_rule, one_policy
from test_registry import _oracle_resolve

REFERENCE_NAMES = [
    ("a2a://concept-drift-detector.concept-drift-detection.research-lab.v2.1.prod",
     ("a2a", "concept-drift-detector", "concept-drift-detection", "research-lab",
      Version(2, 1), "prod")),
    ("mcp://model-retrainer.model-training.mlops-team.v1.0.staging",
     ("mcp", "model-retrainer", "model-training", "mlops-team",
      Version(1, 0), "staging")),
    ("acp://security-scanner.security-scanning.devsecops-team.v3.2.hipaa",
     ("acp", "security-scanner", "security-scanning", "devsecops-team",
      Version(3, 2), "hipaa")),
]


def _report(number: int, title: str, ok: bool, detail: str = "") -> None:
    verdict = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {number} {title}: {verdict}{suffix}")
    assert ok, f"criterion {number} failed: {detail}"


def test_criterion_1_name_grammar():
    started = time.perf_counter()
    for text, fields in REFERENCE_NAMES:
        parsed = names.parse(text)
        assert (parsed.protocol, parsed.agent_id, parsed.capability, parsed.provider,
                parsed.version, parsed.extension) == fields
        assert names.format_name(parsed) == text
    rng = random.Random(20260810)
    for _ in range(10_000):
        name = random_name(rng)
        assert names.parse(names.format_name(name)) == name
    elapsed = time.perf_counter() - started
    _report(1, "name grammar round-trip", elapsed < 5.0,
            f"3 reference names + 10,000 fuzz cases in {elapsed:.2f}s")


def test_criterion_2_latency_budgets():
    report = run_benchmark(BenchConfig(n_agents=50, n_namespaces=5,
                                       duration_seconds=60, warmup_seconds=10, seed=42))
    detail = ", ".join(
        f"{op} p99={entry['p99_ms']}ms<={entry['budget_ms']}"
        for op, entry in report.budgets.items()
    )
    _report(2, "desk-scale p99 latency budgets", report.passed, detail)


def test_criterion_3_throughput_floors():
    sustained = run_registration_throughput(duration_seconds=300, target_per_minute=2000)
    resolve_rate = run_resolve_microbench()["per_second"]
    policy_rate = run_policy_microbench()["per_second"]
    hard_ok = sustained["min_per_minute"] >= REGISTRATION_FLOOR_PER_MIN
    soft_notes = (
        f"resolve {resolve_rate:,.0f}/s (soft floor {RESOLVE_SOFT_FLOOR_PER_S:,}: "
        f"{'met' if resolve_rate >= RESOLVE_SOFT_FLOOR_PER_S else 'missed, reported'}), "
        f"policy {policy_rate:,.0f}/s (soft floor {POLICY_SOFT_FLOOR_PER_S:,}: "
        f"{'met' if policy_rate >= POLICY_SOFT_FLOOR_PER_S else 'missed, reported'})"
    )
    _report(3, "throughput floors", hard_ok,
            f"sustained {sustained['per_minute']} reg/min over 5 min "
            f"(hard floor {REGISTRATION_FLOOR_PER_MIN}); {soft_notes}")


def test_criterion_4_scripted_demo():
    report = run_demo(BenchConfig(n_agents=50, n_namespaces=5, seed=7))
    ok = (report.success_rate == 1.0 and report.invalid_manifest_rejected
          and report.rollback_ok and report.elapsed_seconds < 60.0)
    _report(4, "scripted 50-agent demo", ok,
            f"{report.succeeded}/{report.agents} lifecycles, invalid manifest "
            f"rejected={report.invalid_manifest_rejected}, resolve sweep "
            f"byte-identical={report.rollback_ok}, {report.elapsed_seconds:.1f}s")


def test_criterion_5_security_suite_100_runs():
    started = time.perf_counter()
    failures = []
    for repetition in range(100):
        for result in run_security_suite():
            if not result.passed:
                failures.append((repetition, result.to_doc()))
    elapsed = time.perf_counter() - started
    _report(5, "security scenarios S1-S6 x100", not failures and elapsed < 120.0,
            f"600/600 scenario runs in {elapsed:.1f}s" if not failures
            else f"failures: {failures[:3]}")


def _chain_mutation_cases(ca, rng, n_cases):
    """Randomized single-field mutations over freshly issued chains."""
    checked = 0
    while checked < n_cases:
        identity = make_identity(ca, make_name(rng.randrange(1000),
                                               capability=f"cap-{rng.randrange(8)}"))
        chain = identity.chain
        slot = rng.choice(("agent", "intermediate", "root"))
        cert = getattr(chain, slot)
        field = rng.choice(("serial", "subject_did", "issuer_did", "public_key",
                            "not_before", "not_after", "signature"))
        if field == "serial":
            mutated = dataclasses.replace(cert, serial=cert.serial ^ rng.randrange(1, 1 << 32))
        elif field == "subject_did":
            mutated = dataclasses.replace(cert, subject_did="did:ans:" + "x" * 52)
        elif field == "issuer_did":
            mutated = dataclasses.replace(cert, issuer_did="did:ans:" + "y" * 52)
        elif field == "public_key":
            mutated = dataclasses.replace(cert, public_key=os.urandom(32))
        elif field == "not_before":
            mutated = dataclasses.replace(cert, not_before=cert.not_before - rng.randrange(1, 1000))
        elif field == "not_after":
            mutated = dataclasses.replace(cert, not_after=cert.not_after + rng.randrange(1, 1000))
        else:
            flipped = bytearray(cert.signature)
            flipped[rng.randrange(len(flipped))] ^= 1 << rng.randrange(8)
            mutated = dataclasses.replace(cert, signature=bytes(flipped))
        candidate = dataclasses.replace(chain, **{slot: mutated})
        verdict = validate_chain(candidate, ca.anchors, NOW)
        assert not verdict.ok, (slot, field)
        checked += 1
    return checked


def _attestation_fuzz(ca, rng, n_cases):
    complete = sound = 0
    identity = make_identity(ca, make_name(500, capability="cap-fuzz"))
    store = ChallengeStore(max_entries=n_cases * 3)
    commitment = next(c for c in identity.commitments() if c.capability == "cap-fuzz")
    for _ in range(n_cases):
        challenge = store.issue(identity.name, NOW)
        proof = attestation.prove(challenge, identity.capabilities["cap-fuzz"],
                                  identity.identity_keys, identity.name, NOW)
        assert attestation.verify(proof, commitment, identity.chain, ca.anchors,
                                  store, NOW).granted
        complete += 1
    for _ in range(n_cases):
        challenge = store.issue(identity.name, NOW)
        rogue_secret, _ = create_capability("cap-fuzz")
        wrong_identity = rng.random() < 0.5
        proof = attestation.prove(
            challenge,
            rogue_secret if not wrong_identity else identity.capabilities["cap-fuzz"],
            KeyPair.generate() if wrong_identity else identity.identity_keys,
            identity.name, NOW)
        result = attestation.verify(proof, commitment, identity.chain, ca.anchors,
                                    store, NOW)
        assert not result.granted and result.reason == "BAD_SIGNATURE"
        sound += 1
    return complete + sound


def _policy_property_cases(rng, n_cases):
    checked = 0
    for _ in range(n_cases // 2):
        rules = tuple(_random_rule(rng, rng.choice(("allow", "deny")))
                      for _ in range(rng.randrange(1, 6)))
        context = _random_ctx(rng)
        with_deny = one_policy(*rules, PolicyRule("pin", "deny", RuleMatch()))
        assert not evaluate(context, with_deny).allowed
        checked += 1
        deny_only = tuple(r for r in rules if r.effect == "deny")
        assert not evaluate(context, one_policy(*deny_only)).allowed
        checked += 1
    return checked


def _resolve_oracle_cases(ca, rng, registry_sizes=(120, 400, 1000), queries_each=350):
    checked = 0
    for size in registry_sizes:
        registry = Registry(policies=harness_policies(), trust_anchors=ca.anchors)
        identities = {}
        for i in range(size):
            name = names.AnsName(
                protocol=rng.choice(("a2a", "mcp", "acp")),
                agent_id=f"load-{size}-{i:04d}",
                capability=f"cap-{rng.randrange(10)}",
                provider=f"prov-{rng.randrange(5)}",
                version=Version(rng.randrange(3), rng.randrange(4),
                                rng.choice((None, 0, 1))),
                extension=rng.choice(("prod", "staging")),
            )
            identity = make_identity(ca, name, extra_caps=())
            registry.register(build_registration_request(identity, f"ns-{i % 5}"), NOW)
            identities[name.render()] = identity
        for key in rng.sample(sorted(identities), size // 20):
            sig = identities[key].identity_keys.sign(
                canonical_bytes(revocation_payload(key, NOW)))
            registry.revoke(key, NOW, sig, NOW)
        assert registry.audit_index()
        for _ in range(queries_each):
            fields = {}
            if rng.random() < 0.7:
                fields["capability"] = f"cap-{rng.randrange(10)}"
            if rng.random() < 0.3:
                fields["provider"] = f"prov-{rng.randrange(5)}"
            if rng.random() < 0.3:
                fields["protocol"] = rng.choice(("a2a", "mcp", "acp"))
            if rng.random() < 0.25:
                fields["extension"] = rng.choice(("prod", "staging"))
            if rng.random() < 0.4:
                fields["version_req"] = rng.choice((
                    VersionRequirement.latest(),
                    VersionRequirement.at_least(Version(1, 0)),
                    VersionRequirement.exact(Version(2, 1)),
                ))
            if not fields:
                fields["capability"] = "cap-0"
            query = NameQuery(**fields)
            assert registry.resolve(query, NOW) == _oracle_resolve(registry, query, NOW)
            checked += 1
    return checked


def _recovery_cases(ca, rng, tmp_path, n_cases):
    pool = [make_identity(ca, make_name(i, capability=f"cap-{i % 6}"))
            for i in range(40)]
    battery = [NameQuery(capability=f"cap-{i}") for i in range(6)]
    battery += [NameQuery(capability=f"cap-{i}",
                          version_req=VersionRequirement.latest()) for i in range(6)]

    def sweep(registry, now):
        return canonical_json(
            [[r.to_doc() for r in registry.resolve(q, now)] for q in battery])

    checked = 0
    for case in range(n_cases):
        log_path = str(tmp_path / f"events-{case}.log")
        registry = Registry.recover(policies=harness_policies(),
                                    trust_anchors=ca.anchors,
                                    log_path=log_path, fsync=False)
        registered: dict = {}
        now = NOW
        for _ in range(rng.randrange(3, 12)):
            now += rng.randrange(0, 20)
            roll = rng.random()
            if roll < 0.6 or not registered:
                identity = rng.choice(pool)
                key = identity.name.render()
                if key in registered:
                    continue
                registry.register(build_registration_request(identity, "ns-0"), now)
                registered[key] = identity
            elif roll < 0.8:
                key = rng.choice(sorted(registered))
                sig = registered[key].identity_keys.sign(
                    canonical_bytes(renewal_payload(key, now)))
                try:
                    registry.renew(key, now, sig, now)
                except AnsError as exc:
                    assert exc.code == "REVOKED"
            else:
                key = rng.choice(sorted(registered))
                sig = registered[key].identity_keys.sign(
                    canonical_bytes(revocation_payload(key, now)))
                registry.revoke(key, now, sig, now)
        live = sweep(registry, now)
        registry.close()
        recovered = Registry.recover(policies=harness_policies(),
                                     trust_anchors=ca.anchors,
                                     log_path=log_path, fsync=False)
        assert sweep(recovered, now) == live
        assert recovered.audit_index()
        checked += 1
    return checked


def test_criterion_6_property_suites(tmp_path):
    started = time.perf_counter()
    rng = random.Random(616161)
    ca = build_ca(NOW - 3600)
    counts = {
        "chain-mutation": _chain_mutation_cases(ca, rng, 1000),
        "attestation": _attestation_fuzz(ca, rng, 500),  # 500 complete + 500 sound
        "policy-properties": _policy_property_cases(rng, 1000),
        "resolve-oracle": _resolve_oracle_cases(ca, rng),
        "recovery": _recovery_cases(ca, rng, tmp_path, 1000),
    }
    elapsed = time.perf_counter() - started
    ok = all(v >= 1000 for v in counts.values()) and elapsed < 300.0
    _report(6, "property suites", ok,
            ", ".join(f"{k}={v}" for k, v in counts.items()) + f" in {elapsed:.1f}s")


def test_criterion_7_alert_thresholds(ca):
    config = AlertConfig()
    metrics = Metrics()
    metrics.inc("attestations_total", 100)
    metrics.inc("auth_failures_total", 6)
    noisy = evaluate_alerts(metrics.snapshot(), [], config, NOW)
    rate_fires = [a.rule_id for a in noisy] == ["error-rate"]

    def record_with_days_left(days, index):
        from ans.client import bootstrap_identity

        registry = Registry(policies=harness_policies(), trust_anchors=ca.anchors)
        identity = bootstrap_identity(
            make_name(index), "e", ("telemetry-export",), ca.intermediate_keys,
            ca.intermediate_cert, ca.root_cert,
            validity_seconds=days * 86400 + 30, now=NOW)
        return registry.register(build_registration_request(identity, "ns-0"), NOW)

    warn = evaluate_alerts(metrics.snapshot(), [record_with_days_left(29, 1)], config, NOW)
    fires_29 = any(a.rule_id == "cert-expiry" for a in warn)
    calm = evaluate_alerts(Metrics().snapshot(), [record_with_days_left(31, 2)], config, NOW)
    quiet_31 = calm == []
    _report(7, "alert thresholds", rate_fires and fires_29 and quiet_31,
            "6% failure rate fires, 29-day cert warns, 31-day stays quiet")
