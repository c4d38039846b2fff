"""Benchmark, security-validation, and scripted-demo harness.

Everything runs on one machine: the registry server is started in-process
and agents are concurrent client tasks over loopback TCP, so the code paths
under test are the real wire paths while runs stay reproducible. A fixed
seed fixes each agent's workload operation sequence; only latencies vary.

The latency budgets are p99 upper bounds the desk-scale run must stay
under; a local run exceeding them indicates an implementation problem, not
environmental noise.
"""

from __future__ import annotations

import os
import platform
import random
import shutil
import statistics
import tempfile
import threading
import time
from dataclasses import dataclass, field

from . import attestation, client, names
from .attestation import ChallengeStore
from .canonical import canonical_json
from .client import (
    AgentIdentity,
    LoopbackTransport,
    PeerServer,
    RegistryClient,
    TcpTransport,
    bootstrap_identity,
)
from .errors import AnsError, TransportError
from .identity import (
    INTERMEDIATE_VALIDITY_S,
    KeyPair,
    issue_certificate,
    ROLE_INTERMEDIATE,
    self_signed_root,
)
from .manifest import manifest_for_name
from .metrics import quantile
from .names import AnsName, NameQuery, Version
from .policy import Policy, PolicyRule, RuleConditions, RuleMatch, policies_to_doc
from .registry import Registry
from .server import AnsServer, ServerConfig

# p99 ceilings per operation, milliseconds.
LATENCY_BUDGET_P99_MS = {
    "registration": 156.0,
    "discovery": 41.0,
    "capability_verification": 267.0,
    "policy_evaluation": 12.0,
    "certificate_validation": 52.0,
}

REGISTRATION_FLOOR_PER_MIN = 1000
RESOLVE_SOFT_FLOOR_PER_S = 10_000
POLICY_SOFT_FLOOR_PER_S = 100_000


@dataclass(frozen=True)
class BenchConfig:
    n_agents: int = 50
    n_namespaces: int = 5
    duration_seconds: int = 60
    warmup_seconds: int = 10
    seed: int = 42

    def __post_init__(self) -> None:
        if not (self.n_agents >= self.n_namespaces >= 1):
            raise ValueError("need n_agents >= n_namespaces >= 1")


# -- shared scaffolding --------------------------------------------------------


@dataclass(frozen=True)
class CaSetup:
    root_keys: KeyPair
    root_cert: object
    intermediate_keys: KeyPair
    intermediate_cert: object

    @property
    def anchors(self) -> tuple:
        return (self.root_cert,)


def build_ca(now: int | None = None) -> CaSetup:
    if now is None:
        now = int(time.time())
    root_keys = KeyPair.generate()
    root_cert = self_signed_root(root_keys, now=now)
    inter_keys = KeyPair.generate()
    inter_cert = issue_certificate(
        root_keys, root_cert, inter_keys.public_key, ROLE_INTERMEDIATE,
        INTERMEDIATE_VALIDITY_S, now=now,
    )
    return CaSetup(root_keys, root_cert, inter_keys, inter_cert)


def harness_policies(extra_rules: tuple[PolicyRule, ...] = ()) -> list[Policy]:
    """Realistic default policy set: staging/prod allowed, one explicit deny
    for the quarantined environment, and the policy ids demo manifests
    reference."""
    base = Policy(
        id="registry-base",
        description="environments the desk-scale runs may use",
        rules=(
            PolicyRule(
                id="allow-known-environments",
                effect="allow",
                conditions=RuleConditions(allowed_environments=("prod", "staging")),
            ),
            PolicyRule(
                id="deny-forbidden-env",
                effect="deny",
                match=RuleMatch(environment="forbidden"),
            ),
            *extra_rules,
        ),
    )
    security = Policy(
        id="agent-security-policy",
        description="certificate hygiene for demo agents",
        rules=(
            PolicyRule(
                id="cert-validity-cap",
                effect="allow",
                conditions=RuleConditions(max_cert_validity_seconds=120 * 86400),
            ),
        ),
    )
    data_access = Policy(
        id="data-access-policy",
        description="capability families demo agents may claim",
        rules=(
            PolicyRule(
                id="no-admin-caps",
                effect="allow",
                conditions=RuleConditions(capability_denylist=("admin-*",)),
            ),
        ),
    )
    return [base, security, data_access]


class _TempServer:
    """Server plus its scratch directory; always torn down."""

    def __init__(self, ca: CaSetup, policies, record_ttl_seconds: int = 24 * 3600,
                 fsync: bool = True):
        self.dir = tempfile.mkdtemp(prefix="ans-harness-")
        anchors_path = os.path.join(self.dir, "anchors.json")
        with open(anchors_path, "w", encoding="utf-8") as fh:
            fh.write(canonical_json([ca.root_cert.to_doc()]))
        policy_path = os.path.join(self.dir, "policy.json")
        with open(policy_path, "w", encoding="utf-8") as fh:
            fh.write(canonical_json(policies_to_doc(policies)))
        self.log_path = os.path.join(self.dir, "events.log")
        config = ServerConfig(
            listen="127.0.0.1:0",
            anchors_path=anchors_path,
            policy_path=policy_path,
            log_path=self.log_path,
            snapshot_path=os.path.join(self.dir, "snapshot.json"),
            fsync=fsync,
            record_ttl_seconds=record_ttl_seconds,
        )
        self.server = AnsServer(config)
        self.server.start()

    @property
    def url(self) -> str:
        return self.server.url

    def close(self) -> None:
        try:
            self.server.shutdown()
        finally:
            shutil.rmtree(self.dir, ignore_errors=True)


CAPABILITY_POOL = tuple(f"cap-{chr(ord('a') + i)}" for i in range(10))


def _agent_name(index: int, n_namespaces: int, rng: random.Random) -> tuple[AnsName, str]:
    namespace = f"ns-{index % n_namespaces}"
    protocol = ("a2a", "mcp", "acp")[index % 3]
    name = AnsName(
        protocol=protocol,
        agent_id=f"agent-{index:03d}",
        capability=CAPABILITY_POOL[index % len(CAPABILITY_POOL)],
        provider=f"prov-{index % n_namespaces}",
        version=Version(1, rng.randrange(0, 3)),
        extension="prod" if index % 2 == 0 else "staging",
    )
    return name, namespace


def _make_identity(ca: CaSetup, name: AnsName, endpoint: str = "http://127.0.0.1:0",
                   now: int | None = None) -> AgentIdentity:
    return bootstrap_identity(
        name, endpoint, ("telemetry-export",), ca.intermediate_keys,
        ca.intermediate_cert, ca.root_cert, now=now,
    )


# -- benchmark -----------------------------------------------------------------

_OPS = ("resolve", "attest", "renew", "register_new")


def _draw_op(rng: random.Random) -> str:
    roll = rng.random()
    if roll < 0.80:
        return "resolve"
    if roll < 0.90:
        return "attest"
    if roll < 0.95:
        return "renew"
    return "register_new"


def workload_schedule(config: BenchConfig, agent_index: int, n_ops: int) -> list[str]:
    """The first n_ops operations agent agent_index will run. Pure function of
    (seed, agent_index): two runs with one seed share the schedule."""
    rng = random.Random(config.seed * 7919 + agent_index)
    return [_draw_op(rng) for _ in range(n_ops)]


@dataclass
class _Sink:
    """Contention-safe latency sink: workers append batches under one lock."""

    lock: threading.Lock = field(default_factory=threading.Lock)
    samples: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)

    def extend(self, op: str, batch: list[tuple[float, float]]) -> None:
        with self.lock:
            self.samples.setdefault(op, []).extend(batch)

    def error(self, message: str) -> None:
        with self.lock:
            self.errors.append(message)


@dataclass(frozen=True)
class OpStats:
    count: int
    mean_ms: float
    p95_ms: float
    p99_ms: float

    def to_doc(self) -> dict:
        return {"count": self.count, "mean_ms": round(self.mean_ms, 3),
                "p95_ms": round(self.p95_ms, 3), "p99_ms": round(self.p99_ms, 3)}


def _stats(samples: list[float]) -> OpStats:
    if not samples:
        return OpStats(0, 0.0, 0.0, 0.0)
    return OpStats(
        count=len(samples),
        mean_ms=statistics.fmean(samples),
        p95_ms=quantile(samples, 0.95),
        p99_ms=quantile(samples, 0.99),
    )


@dataclass(frozen=True)
class BenchReport:
    operations: dict[str, OpStats]
    throughput: dict[str, float]
    budgets: dict[str, dict]
    passed: bool
    environment: dict[str, str]

    def to_doc(self) -> dict:
        return {
            "operations": {op: s.to_doc() for op, s in self.operations.items()},
            "throughput": {k: round(v, 2) for k, v in self.throughput.items()},
            "budgets": self.budgets,
            "passed": self.passed,
            "environment": self.environment,
        }


def _environment() -> dict[str, str]:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "cpus": str(os.cpu_count() or 0),
    }


def run_benchmark(config: BenchConfig = BenchConfig()) -> BenchReport:
    """Desk-scale benchmark: start a registry, spread n_agents over
    n_namespaces, register everyone, then run the seeded mixed workload
    (resolve-heavy with periodic attest/renew/fresh registrations) for
    duration_seconds after warmup. Latencies are wall clock on the client
    side; policy evaluation and chain validation come from the server's own
    operation histograms. Any unexpected error code aborts the run."""
    import sys

    ca = build_ca()
    harness_server = _TempServer(ca, harness_policies())
    sink = _Sink()
    stop = threading.Event()
    # shorter GIL slices keep tail latency down with ~100 live threads
    old_switch_interval = sys.getswitchinterval()
    sys.setswitchinterval(0.001)
    t0 = time.perf_counter()
    warmup_end = t0 + config.warmup_seconds
    deadline = warmup_end + config.duration_seconds

    seed_rng = random.Random(config.seed)
    prepared = []
    for i in range(config.n_agents):
        name, namespace = _agent_name(i, config.n_namespaces, seed_rng)
        prepared.append((i, _make_identity(ca, name), namespace))

    def worker(index: int, identity: AgentIdentity, namespace: str) -> None:
        rng = random.Random(config.seed * 7919 + index)
        pace = random.Random(config.seed * 104729 + index)
        local: dict[str, list[tuple[float, float]]] = {op: [] for op in
                                                       ("registration", "discovery",
                                                        "capability_verification")}
        registry_client = RegistryClient(harness_server.url)
        ephemeral = 0

        def timed(op: str, fn) -> None:
            start = time.perf_counter()
            fn()
            local[op].append((start - t0, (time.perf_counter() - start) * 1e3))

        try:
            # stagger startup across the warmup window so the initial burst of
            # registrations does not serialize behind itself
            time.sleep(pace.uniform(0, max(config.warmup_seconds - 1, 0)))
            timed("registration",
                  lambda: client.register_with(identity, harness_server.url, namespace,
                                               client=registry_client))
            while not stop.is_set() and time.perf_counter() < deadline:
                op = _draw_op(rng)
                if op == "resolve":
                    capability = CAPABILITY_POOL[pace.randrange(len(CAPABILITY_POOL))]
                    timed("discovery",
                          lambda: client.discover(harness_server.url,
                                                  NameQuery(capability=capability),
                                                  client=registry_client))
                elif op == "attest":
                    timed("capability_verification",
                          lambda: client.attest_with(identity, harness_server.url,
                                                     identity.name.capability,
                                                     client=registry_client))
                elif op == "renew":
                    client.renew_with(identity, harness_server.url, client=registry_client)
                else:
                    ephemeral += 1
                    # dedicated capability so churn does not inflate the
                    # discovery answers the other agents are timing
                    extra_name = AnsName(
                        protocol="a2a",
                        agent_id=f"extra-{index:03d}-{ephemeral:05d}",
                        capability="burst-traffic",
                        provider=identity.name.provider,
                        version=Version(1, 0),
                        extension="staging",
                    )
                    extra = _make_identity(ca, extra_name)
                    timed("registration",
                          lambda: client.register_with(extra, harness_server.url, namespace,
                                                       client=registry_client))
                time.sleep(pace.uniform(0.10, 0.30))
        except (AnsError, TransportError) as exc:
            sink.error(f"agent {index}: {exc}")
            stop.set()
        finally:
            registry_client.close()
            for op, batch in local.items():
                sink.extend(op, batch)

    threads = [threading.Thread(target=worker, args=entry, daemon=True) for entry in prepared]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    try:
        if sink.errors:
            raise RuntimeError(f"benchmark aborted: {sink.errors[:3]}")

        warmup_offset = warmup_end - t0
        wall: dict[str, list[float]] = {}
        for op, batch in sink.samples.items():
            wall[op] = [ms for (at, ms) in batch if at >= warmup_offset]
            if not wall[op]:  # short runs: better all samples than none
                wall[op] = [ms for (_, ms) in batch]

        snapshot = harness_server.server.metrics.snapshot()
        internal = {
            "policy_evaluation": snapshot.histograms["policy_eval"],
            "certificate_validation": snapshot.histograms["chain_validation"],
        }
        operations = {op: _stats(samples) for op, samples in wall.items()}
        for op, stats in internal.items():
            operations[op] = OpStats(
                count=stats.count,
                mean_ms=(stats.sum_ms / stats.count) if stats.count else 0.0,
                p95_ms=stats.quantiles_ms["0.95"],
                p99_ms=stats.quantiles_ms["0.99"],
            )

        elapsed = time.perf_counter() - warmup_end
        registrations = len(sink.samples.get("registration", []))
        resolves = len(sink.samples.get("discovery", []))
        throughput = {
            "registrations_per_min": registrations / max(elapsed + config.warmup_seconds, 1e-9) * 60,
            "resolves_per_sec": resolves / max(elapsed + config.warmup_seconds, 1e-9),
            "policy_evals_per_sec": (
                snapshot.histograms["policy_eval"].count
                / max(elapsed + config.warmup_seconds, 1e-9)
            ),
        }

        budgets = {}
        passed = True
        for op, budget in LATENCY_BUDGET_P99_MS.items():
            stats = operations.get(op, OpStats(0, 0.0, 0.0, 0.0))
            ok = stats.count > 0 and stats.p99_ms <= budget
            budgets[op] = {"p99_ms": round(stats.p99_ms, 3), "budget_ms": budget, "pass": ok}
            passed = passed and ok

        return BenchReport(
            operations=operations,
            throughput=throughput,
            budgets=budgets,
            passed=passed,
            environment=_environment(),
        )
    finally:
        sys.setswitchinterval(old_switch_interval)
        harness_server.close()


# -- dedicated throughput runs ---------------------------------------------------


def run_registration_throughput(
    duration_seconds: int = 300,
    target_per_minute: int = 2000,
    n_workers: int = 4,
    seed: int = 42,
) -> dict:
    """Paced sustained registration over HTTP. Reports per-minute completion
    counts; the floor check belongs to the caller."""
    ca = build_ca()
    harness_server = _TempServer(ca, harness_policies())
    sink = _Sink()
    stop = threading.Event()
    interval = 60.0 * n_workers / target_per_minute
    t0 = time.perf_counter()
    completions: list[float] = []
    completions_lock = threading.Lock()

    def worker(worker_index: int) -> None:
        registry_client = RegistryClient(harness_server.url)
        rng = random.Random(seed + worker_index)
        count = 0
        try:
            next_at = t0 + rng.uniform(0, interval)
            while not stop.is_set():
                now = time.perf_counter()
                if now >= t0 + duration_seconds:
                    return
                if now < next_at:
                    time.sleep(min(next_at - now, 0.05))
                    continue
                count += 1
                name = AnsName(
                    protocol="a2a",
                    agent_id=f"bulk-{worker_index}-{count:06d}",
                    capability=CAPABILITY_POOL[count % len(CAPABILITY_POOL)],
                    provider=f"prov-{worker_index}",
                    version=Version(1, 0),
                    extension="staging",
                )
                identity = _make_identity(ca, name)
                client.register_with(identity, harness_server.url, f"ns-{worker_index}",
                                     client=registry_client)
                with completions_lock:
                    completions.append(time.perf_counter() - t0)
                next_at += interval
        except (AnsError, TransportError) as exc:
            sink.error(f"worker {worker_index}: {exc}")
            stop.set()
        finally:
            registry_client.close()

    threads = [threading.Thread(target=worker, args=(i,), daemon=True) for i in range(n_workers)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    harness_server.close()
    if sink.errors:
        raise RuntimeError(f"throughput run aborted: {sink.errors[:3]}")

    n_minutes = duration_seconds // 60
    per_minute = [0] * max(n_minutes, 1)
    for at in completions:
        bucket = int(at // 60)
        if bucket < len(per_minute):
            per_minute[bucket] += 1
    return {
        "total": len(completions),
        "duration_seconds": duration_seconds,
        "per_minute": per_minute,
        "min_per_minute": min(per_minute) if per_minute else 0,
        "rate_per_minute": len(completions) / duration_seconds * 60,
    }


def run_resolve_microbench(n_records: int = 50, n_resolves: int = 50_000,
                           seed: int = 42) -> dict:
    """In-process resolve rate against a populated registry."""
    ca = build_ca()
    registry = Registry(policies=harness_policies(), trust_anchors=ca.anchors)
    now = int(time.time())
    rng = random.Random(seed)
    for i in range(n_records):
        name, namespace = _agent_name(i, 5, rng)
        identity = _make_identity(ca, name)
        registry.register(client.build_registration_request(identity, namespace), now)
    queries = [NameQuery(capability=c) for c in CAPABILITY_POOL]
    start = time.perf_counter()
    for i in range(n_resolves):
        registry.resolve(queries[i % len(queries)], now)
    elapsed = time.perf_counter() - start
    return {"resolves": n_resolves, "seconds": elapsed,
            "per_second": n_resolves / elapsed}


def run_policy_microbench(n_evals: int = 300_000) -> dict:
    """Pure policy-engine evaluation rate on a 10-rule set."""
    from .policy import EvaluationContext, PHASE_RUNTIME, PolicySubject, evaluate

    rules = [
        PolicyRule(id=f"r{i}", effect="allow",
                   match=RuleMatch(namespace=f"ns-{i}"),
                   conditions=RuleConditions(allowed_environments=("prod", "staging")))
        for i in range(9)
    ]
    rules.append(PolicyRule(id="deny-admin", effect="deny",
                            match=RuleMatch(capability="admin-*")))
    policies = [Policy(id="micro", description="", rules=tuple(rules))]
    subject = PolicySubject(
        protocol="a2a", agent_id="agent-000", capability="cap-a",
        capabilities=("cap-a", "telemetry-export"), provider="prov-0",
        environment="prod", namespace="ns-3", cert_validity_seconds=90 * 86400,
    )
    ctx = EvaluationContext(subject, PHASE_RUNTIME, int(time.time()))
    start = time.perf_counter()
    for _ in range(n_evals):
        evaluate(ctx, policies)
    elapsed = time.perf_counter() - start
    return {"evals": n_evals, "seconds": elapsed, "per_second": n_evals / elapsed}


# -- security suite --------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioResult:
    scenario_id: str
    expected: str
    observed: str
    passed: bool
    evidence: str

    def to_doc(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "expected": self.expected,
            "observed": self.observed,
            "pass": self.passed,
            "evidence": self.evidence,
        }


def _result(scenario_id: str, expected: str, observed: str, evidence: str) -> ScenarioResult:
    return ScenarioResult(scenario_id, expected, observed, expected == observed, evidence)


def _fresh_registry(ca: CaSetup) -> Registry:
    return Registry(policies=harness_policies(), trust_anchors=ca.anchors)


def _registered_identity(ca: CaSetup, registry: Registry, index: int, now: int) -> AgentIdentity:
    name, namespace = _agent_name(index, 5, random.Random(index))
    identity = _make_identity(ca, name, now=now)
    registry.register(client.build_registration_request(identity, namespace), now)
    return identity


def _scenario_impersonation(now: int) -> ScenarioResult:
    ca = build_ca(now)
    registry = _fresh_registry(ca)
    victim = _registered_identity(ca, registry, 0, now)
    responder = _registered_identity(ca, registry, 1, now)
    # stolen certificate chain, wrong private key
    imposter = AgentIdentity(
        name=victim.name,
        identity_keys=KeyPair.generate(),
        chain=victim.chain,
        capabilities={},
        endpoint=victim.endpoint,
    )
    t_init, t_resp = LoopbackTransport.pair()
    observed = {}

    def run_responder() -> None:
        try:
            client.respond_handshake(responder, t_resp, ca.anchors, now=now)
            observed["code"] = "SESSION"
        except AnsError as exc:
            observed["code"] = exc.code
            observed["message"] = exc.message

    thread = threading.Thread(target=run_responder)
    thread.start()
    try:
        client.initiate_handshake(imposter, t_init, ca.anchors, now=now)
    except AnsError:
        pass
    thread.join()
    return _result("S1", "BAD_SIGNATURE", observed.get("code", "NONE"),
                   f"responder: {observed.get('code')} ({observed.get('message', '')})")


def _scenario_escalation(now: int) -> ScenarioResult:
    ca = build_ca(now)
    prover_name, _ = _agent_name(2, 5, random.Random(2))
    verifier_name, _ = _agent_name(3, 5, random.Random(3))
    prover = _make_identity(ca, prover_name, now=now)
    verifier = _make_identity(ca, verifier_name, now=now)
    t_init, t_resp = LoopbackTransport.pair()
    outcome = {}

    def run_verifier() -> None:
        session = client.respond_handshake(verifier, t_resp, ca.anchors, now=now)
        store = ChallengeStore()
        outcome["verdict"] = client.serve_capability_request(
            session, t_resp, ca.anchors, store, now=now)

    thread = threading.Thread(target=run_verifier)
    thread.start()
    session = client.initiate_handshake(prover, t_init, ca.anchors, now=now)
    verdict = client.request_capability(session, t_init, "admin-root", prover, now=now)
    thread.join()
    observed = verdict.reason or "GRANTED"
    return _result("S2", "UNKNOWN_CAPABILITY", observed,
                   f"uncommitted capability request denied: {verdict.message}")


def _scenario_expired_cert(now: int) -> ScenarioResult:
    past = now - 200 * 86400
    ca = build_ca(past)
    registry = _fresh_registry(ca)
    name, namespace = _agent_name(4, 5, random.Random(4))
    # certificate window ended ~110 days ago
    stale = bootstrap_identity(name, "http://127.0.0.1:0", (), ca.intermediate_keys,
                               ca.intermediate_cert, ca.root_cert, now=past)
    try:
        registry.register(client.build_registration_request(stale, namespace), now)
        reg_code = "ACCEPTED"
    except AnsError as exc:
        reg_code = exc.code

    fresh_ca = build_ca(now)
    honest = _make_identity(fresh_ca, _agent_name(5, 5, random.Random(5))[0], now=now)
    t_init, t_resp = LoopbackTransport.pair()
    observed = {}

    def run_responder() -> None:
        try:
            client.respond_handshake(honest, t_resp, (fresh_ca.root_cert, ca.root_cert), now=now)
            observed["code"] = "SESSION"
        except AnsError as exc:
            observed["code"] = exc.code

    thread = threading.Thread(target=run_responder)
    thread.start()
    try:
        client.initiate_handshake(stale, t_init, (fresh_ca.root_cert, ca.root_cert), now=now)
    except AnsError:
        pass
    thread.join()
    hs_code = observed.get("code", "NONE")
    combined = f"{reg_code}+{hs_code}"
    return _result("S3", "CERT_EXPIRED+CERT_EXPIRED", combined,
                   f"registration: {reg_code}, handshake: {hs_code}")


def _scenario_replay(now: int) -> ScenarioResult:
    ca = build_ca(now)
    registry = _fresh_registry(ca)
    identity = _registered_identity(ca, registry, 6, now)
    store = ChallengeStore()
    challenge = store.issue(identity.name, now)
    secret = identity.capabilities[identity.name.capability]
    proof = attestation.prove(challenge, secret, identity.identity_keys, identity.name, now)
    commitment = next(c for c in identity.commitments()
                      if c.capability == identity.name.capability)
    first = attestation.verify(proof, commitment, identity.chain, ca.anchors, store, now)
    second = attestation.verify(proof, commitment, identity.chain, ca.anchors, store, now)
    observed = "NONE"
    if first.granted and not second.granted:
        observed = second.reason or "DENIED"
    return _result("S4", "NONCE_REPLAY", observed,
                   "second submission rejected" if observed == "NONCE_REPLAY"
                   else f"first={first}, second={second}")


def _scenario_policy_violation(now: int) -> ScenarioResult:
    ca = build_ca(now)
    registry = _fresh_registry(ca)
    name = AnsName("a2a", "rogue-agent", "cap-a", "prov-0", Version(1, 0), "forbidden")
    identity = _make_identity(ca, name, now=now)
    try:
        registry.register(client.build_registration_request(identity, "ns-0"), now)
        observed, evidence = "ACCEPTED", "registration was accepted"
    except AnsError as exc:
        observed = exc.code
        detail = (exc.details or {}).get("explain", "") if isinstance(exc.details, dict) else ""
        evidence = f"matched deny rule: {'deny-forbidden-env' in detail}, {exc.message}"
    return _result("S5", "POLICY_DENIED", observed, evidence)


def _scenario_tampered_chain(now: int) -> ScenarioResult:
    from dataclasses import replace as dc_replace

    ca = build_ca(now)
    registry = _fresh_registry(ca)
    name, namespace = _agent_name(7, 5, random.Random(7))
    identity = _make_identity(ca, name, now=now)
    tampered_inter = dc_replace(identity.chain.intermediate,
                                serial=identity.chain.intermediate.serial + 1)
    tampered = AgentIdentity(
        name=identity.name,
        identity_keys=identity.identity_keys,
        chain=dc_replace(identity.chain, intermediate=tampered_inter),
        capabilities=identity.capabilities,
        endpoint=identity.endpoint,
    )
    try:
        registry.register(client.build_registration_request(tampered, namespace), now)
        observed, evidence = "ACCEPTED", "registration was accepted"
    except AnsError as exc:
        observed, evidence = exc.code, exc.message
    return _result("S6", "CHAIN_INVALID", observed, evidence)


def run_security_suite(now: int | None = None) -> list[ScenarioResult]:
    """Attack scenarios S1-S6, each against a fresh registry. Failures are
    reported in the results, never thrown."""
    if now is None:
        now = int(time.time())
    return [
        _scenario_impersonation(now),
        _scenario_escalation(now),
        _scenario_expired_cert(now),
        _scenario_replay(now),
        _scenario_policy_violation(now),
        _scenario_tampered_chain(now),
    ]


# -- scripted demo -----------------------------------------------------------------


@dataclass(frozen=True)
class DemoReport:
    agents: int
    succeeded: int
    success_rate: float
    invalid_manifest_rejected: bool
    rollback_ok: bool
    phases: dict[str, OpStats]
    event_kinds: list[str]
    elapsed_seconds: float

    def to_doc(self) -> dict:
        return {
            "agents": self.agents,
            "succeeded": self.succeeded,
            "success_rate": self.success_rate,
            "invalid_manifest_rejected": self.invalid_manifest_rejected,
            "rollback_ok": self.rollback_ok,
            "phases": {k: v.to_doc() for k, v in self.phases.items()},
            "event_kinds": self.event_kinds,
            "elapsed_seconds": round(self.elapsed_seconds, 3),
        }


def _resolve_sweep(url: str, registry_client: RegistryClient) -> str:
    """Canonical serialization of the answers to a fixed query battery;
    equality of two sweeps means observably identical resolve behavior."""
    battery: list[NameQuery] = []
    for capability in CAPABILITY_POOL:
        battery.append(NameQuery(capability=capability))
        battery.append(NameQuery(capability=capability,
                                 version_req=names.VersionRequirement.latest()))
    for i in range(5):
        battery.append(NameQuery(provider=f"prov-{i}"))
    for protocol in ("a2a", "mcp", "acp"):
        battery.append(NameQuery(protocol=protocol))
    for env in ("prod", "staging"):
        battery.append(NameQuery(extension=env))
    answers = []
    for query in battery:
        records = client.discover(url, query, client=registry_client)
        answers.append([r.to_doc() for r in records])
    return canonical_json(answers)


def run_demo(config: BenchConfig = BenchConfig(n_agents=50, n_namespaces=5, seed=7)) -> DemoReport:
    """Scripted lifecycle for n_agents: admission-validate the manifest,
    register, discover peers, mutual handshake ring, capability check, renew.
    One invalid manifest is injected and must be rejected with resolve
    behavior unchanged (checked by a query sweep before and after)."""
    started = time.perf_counter()
    ca = build_ca()
    harness_server = _TempServer(ca, harness_policies())
    url = harness_server.url
    rng = random.Random(config.seed)
    phase_samples: dict[str, list[float]] = {
        p: [] for p in ("admission", "registration", "discovery",
                        "handshake", "capability", "renewal")
    }
    peers: list[PeerServer] = []
    registry_client = RegistryClient(url)

    def timed(phase: str, fn):
        start = time.perf_counter()
        out = fn()
        phase_samples[phase].append((time.perf_counter() - start) * 1e3)
        return out

    succeeded = 0
    try:
        identities: list[AgentIdentity] = []
        namespaces: list[str] = []
        for i in range(config.n_agents):
            name, namespace = _agent_name(i, config.n_namespaces, rng)
            identities.append(_make_identity(ca, name))
            namespaces.append(namespace)

        for i, identity in enumerate(identities):
            manifest = manifest_for_name(
                identity.name, namespaces[i],
                capabilities=tuple(identity.capabilities),
                policies=("agent-security-policy", "data-access-policy"),
            )
            decision = timed("admission",
                             lambda: registry_client.post("/v1/admission/validate",
                                                          manifest.to_doc()))
            if not decision["allowed"]:
                continue
            timed("registration",
                  lambda: client.register_with(identity, url, namespaces[i],
                                               client=registry_client))
            found = timed("discovery",
                          lambda: client.discover(url,
                                                  NameQuery(capability=identity.name.capability),
                                                  client=registry_client))
            if not any(r.name == identity.name for r in found):
                continue
            succeeded += 1

        # mutual handshake ring with capability checks
        for identity in identities:
            peers.append(PeerServer(identity, ca.anchors).start())
        handshake_ok = 0
        for i, identity in enumerate(identities):
            peer = identities[(i + 1) % len(identities)]
            host, port = peers[(i + 1) % len(peers)].address
            transport = TcpTransport.connect(host, port)
            try:
                session = timed("handshake",
                                lambda: client.initiate_handshake(
                                    identity, transport, ca.anchors,
                                    expected_name=peer.name))
                verdict = timed("capability",
                                lambda: client.request_capability(
                                    session, transport, identity.name.capability, identity))
                if verdict.granted:
                    handshake_ok += 1
            finally:
                transport.close()

        for identity in identities:
            timed("renewal", lambda: client.renew_with(identity, url, client=registry_client))

        succeeded = min(succeeded, handshake_ok)

        # injected failure: quarantined environment; admission denies it and a
        # forced registration attempt must bounce without changing resolution
        bad_name = AnsName("a2a", "rogue-agent", "cap-a", "prov-0", Version(9, 9), "forbidden")
        bad_manifest = manifest_for_name(bad_name, "ns-0")
        bad_decision = registry_client.post("/v1/admission/validate", bad_manifest.to_doc())
        invalid_rejected = not bad_decision["allowed"]

        before = _resolve_sweep(url, registry_client)
        bad_identity = _make_identity(ca, bad_name)
        try:
            client.register_with(bad_identity, url, "ns-0", client=registry_client)
            invalid_rejected = False
        except AnsError:
            pass
        after = _resolve_sweep(url, registry_client)
        rollback_ok = before == after

        from .registry import EventLog

        event_kinds = [e.kind for e in EventLog.read_events(harness_server.log_path)]
        return DemoReport(
            agents=config.n_agents,
            succeeded=succeeded,
            success_rate=succeeded / config.n_agents,
            invalid_manifest_rejected=invalid_rejected,
            rollback_ok=rollback_ok,
            phases={p: _stats(s) for p, s in phase_samples.items()},
            event_kinds=event_kinds,
            elapsed_seconds=time.perf_counter() - started,
        )
    finally:
        registry_client.close()
        for peer in peers:
            peer.stop()
        harness_server.close()
