import json
import time
import urllib.parse
import urllib.request

import pytest
import yaml

from ans import attestation, names
from ans.canonical import canonical_bytes, canonical_json
from ans.client import RegistryClient, build_registration_request
from ans.errors import ERROR_CODES, AnsError
from ans.policy import policies_to_doc
from ans.registry import AgentRecord, renewal_payload, revocation_payload
from ans.server import STATUS_BY_CODE, AnsServer, ServerConfig
from conftest import NOW, make_identity, make_name
from test_manifest import LISTING_MANIFEST_YAML


def _get(server, path):
    with urllib.request.urlopen(server.url + path) as response:
        return response.status, response.read().decode()


@pytest.fixture()
def rc(server):
    client = RegistryClient(server.url)
    yield client
    client.close()


def _register(server, rc, ca, name=None, namespace="ns-0", **kwargs):
    identity = make_identity(ca, name or make_name(0), **kwargs)
    doc = rc.post("/v1/agents", build_registration_request(identity, namespace).to_doc())
    return identity, doc


def _post_raw(server, path, body: dict):
    data = json.dumps(body).encode()
    request = urllib.request.Request(server.url + path, data=data, method="POST",
                                     headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(request) as response:
            return response.status, json.loads(response.read())
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read())


# -- liveness and lifecycle -------------------------------------------------------


def test_healthz(server):
    assert _get(server, "/v1/healthz") == (200, "ok")


def test_corrupt_log_refuses_to_serve(tmp_path, ca, allow_policies):
    log = tmp_path / "events.log"
    log.write_text('{"seq": 5, "kind": "Registered", "payload": {}, "at": 1}\n')
    anchors = tmp_path / "anchors.json"
    anchors.write_text(canonical_json([ca.root_cert.to_doc()]))
    config = ServerConfig(listen="127.0.0.1:0", anchors_path=str(anchors),
                          log_path=str(log))
    with pytest.raises(AnsError) as err:
        AnsServer(config)
    assert err.value.code == "LOG_CORRUPT"


def test_shutdown_writes_snapshot(tmp_path, ca, allow_policies):
    anchors = tmp_path / "anchors.json"
    anchors.write_text(canonical_json([ca.root_cert.to_doc()]))
    policy = tmp_path / "policy.json"
    policy.write_text(canonical_json(policies_to_doc(allow_policies)))
    snap = tmp_path / "snap.json"
    config = ServerConfig(listen="127.0.0.1:0", anchors_path=str(anchors),
                          policy_path=str(policy), log_path=str(tmp_path / "e.log"),
                          snapshot_path=str(snap), fsync=False)
    server = AnsServer(config)
    server.start()
    rc = RegistryClient(server.url)
    try:
        _register(server, rc, ca)
    finally:
        rc.close()
    server.shutdown()
    doc = json.loads(snap.read_text())
    assert doc["last_seq"] == 1 and len(doc["records"]) == 1


def test_config_env_overrides(tmp_path):
    config_file = tmp_path / "server.json"
    config_file.write_text(json.dumps({
        "listen": "127.0.0.1:1111", "policy_path": "/from/file.json", "fsync": False,
    }))
    loaded = ServerConfig.load(str(config_file), env={
        "ANS_LISTEN": "127.0.0.1:2222", "ANS_LOG_PATH": "/from/env.log"})
    assert loaded.listen == "127.0.0.1:2222"  # env beats file
    assert loaded.policy_path == "/from/file.json"
    assert loaded.log_path == "/from/env.log"
    assert loaded.fsync is False


# -- registration ------------------------------------------------------------------


def test_register_created_with_server_timestamps(server, rc, ca):
    _, doc = _register(server, rc, ca)
    record = AgentRecord.from_doc(doc)
    assert record.status == "active"
    assert record.expires_at == record.registered_at + server.config.record_ttl_seconds
    # wire round trip: re-serialization is identical
    assert record.to_doc() == doc


def test_register_duplicate_409(server, rc, ca):
    _register(server, rc, ca, make_name(1))
    identity = make_identity(ca, make_name(1))
    status, body = _post_raw(server, "/v1/agents",
                             build_registration_request(identity, "ns-0").to_doc())
    assert status == 409 and body["error"] == "DUPLICATE_AGENT"


def test_register_policy_denied_403_with_explanation(server, ca):
    identity = make_identity(ca, make_name(2, env="forbidden"))
    status, body = _post_raw(server, "/v1/agents",
                             build_registration_request(identity, "ns-0").to_doc())
    assert status == 403 and body["error"] == "POLICY_DENIED"
    assert "deny-forbidden-env" in body["details"]["explain"]


def test_register_malformed_body_400(server):
    status, body = _post_raw(server, "/v1/agents", {"nope": 1})
    assert status == 400 and body["error"] == "MALFORMED"


# -- resolve ------------------------------------------------------------------------


def test_resolve_by_capability(server, rc, ca):
    name = names.parse(
        "a2a://concept-drift-detector.concept-drift-detection.research-lab.v2.1.prod")
    _register(server, rc, ca, name, namespace="mlops-system")
    records = rc.get("/v1/resolve?capability=concept-drift-detection")
    assert [r["name"] for r in records] == [name.render()]


def test_resolve_latest_picks_newest(server, rc, ca):
    import dataclasses

    base = make_name(3, capability="cap-l")
    _register(server, rc, ca, dataclasses.replace(base, version=names.Version(1, 0)))
    _register(server, rc, ca, dataclasses.replace(base, version=names.Version(2, 0)))
    records = rc.get("/v1/resolve?capability=cap-l&version=latest")
    assert {r["name"].split(".v")[1] for r in records} == {"2.0.prod"}


def test_resolve_bad_protocol_400(server):
    try:
        urllib.request.urlopen(server.url + "/v1/resolve?protocol=xyz")
        assert False, "should have raised"
    except urllib.error.HTTPError as err:
        assert err.code == 400
        assert json.loads(err.read())["error"] == "INVALID_PROTOCOL"


def test_resolve_bad_version_constraint_400(server):
    try:
        urllib.request.urlopen(server.url + "/v1/resolve?version=not-a-version")
        assert False, "should have raised"
    except urllib.error.HTTPError as err:
        assert err.code == 400
        assert json.loads(err.read())["error"] == "INVALID_NAME"


# -- renew / revoke ------------------------------------------------------------------


def test_renew_endpoint(server, rc, ca):
    identity, doc = _register(server, rc, ca, make_name(4))
    time.sleep(1.1)  # server clock must advance for expires_at to move
    name_text = doc["name"]
    ts = int(time.time())
    signature = identity.identity_keys.sign(canonical_bytes(renewal_payload(name_text, ts)))
    quoted = urllib.parse.quote(name_text, safe="")
    renewed = rc.post(f"/v1/agents/{quoted}/renew", {"ts": ts, "signature": signature.hex()})
    assert renewed["expires_at"] > doc["expires_at"]


def test_revoke_endpoint_hides_record(server, rc, ca):
    identity, doc = _register(server, rc, ca, make_name(5, capability="cap-rv"))
    name_text = doc["name"]
    ts = int(time.time())
    signature = identity.identity_keys.sign(
        canonical_bytes(revocation_payload(name_text, ts)))
    quoted = urllib.parse.quote(name_text, safe="")
    assert rc.delete(f"/v1/agents/{quoted}", {"ts": ts, "signature": signature.hex()}) == \
        {"revoked": name_text}
    assert rc.get("/v1/resolve?capability=cap-rv") == []


def test_renew_unknown_404(server, rc):
    quoted = urllib.parse.quote(make_name(99).render(), safe="")
    status, body = _post_raw(server, f"/v1/agents/{quoted}/renew",
                             {"ts": int(time.time()), "signature": "00"})
    assert status == 404 and body["error"] == "UNKNOWN_AGENT"


# -- challenge / attest ----------------------------------------------------------------


def _attest_flow(server, rc, ca, capability=None, proof_mutator=None):
    identity, doc = _register(server, rc, ca, make_name(6, capability="cap-att"))
    capability = capability or "cap-att"
    challenge_doc = rc.post("/v1/challenge", {"name": doc["name"]})
    challenge = attestation.Challenge.from_doc(challenge_doc)
    secret = identity.capabilities.get(capability,
                                       identity.capabilities["cap-att"])
    proof = attestation.prove(challenge, secret, identity.identity_keys,
                              identity.name, int(time.time()))
    proof_doc = proof.to_doc()
    if capability != "cap-att":
        proof_doc["capability"] = capability
    if proof_mutator:
        proof_doc = proof_mutator(proof_doc)
    return _post_raw(server, "/v1/attest", proof_doc)


def test_attest_full_flow_granted(server, rc, ca):
    status, body = _attest_flow(server, rc, ca)
    assert status == 200 and body["granted"] is True


def test_attest_replay_401(server, rc, ca):
    identity, doc = _register(server, rc, ca, make_name(7, capability="cap-rp"))
    challenge = attestation.Challenge.from_doc(rc.post("/v1/challenge", {"name": doc["name"]}))
    proof = attestation.prove(challenge, identity.capabilities["cap-rp"],
                              identity.identity_keys, identity.name, int(time.time()))
    first = _post_raw(server, "/v1/attest", proof.to_doc())
    second = _post_raw(server, "/v1/attest", proof.to_doc())
    assert first[0] == 200
    assert second[0] == 401 and second[1]["error"] == "NONCE_REPLAY"


def test_attest_uncommitted_capability_403(server, rc, ca):
    status, body = _attest_flow(server, rc, ca, capability="never-committed")
    assert status == 403 and body["error"] == "CAPABILITY_MISMATCH"


def test_challenge_unknown_agent_404(server):
    status, body = _post_raw(server, "/v1/challenge", {"name": make_name(42).render()})
    assert status == 404 and body["error"] == "UNKNOWN_AGENT"


# -- admission -----------------------------------------------------------------------


def test_admission_reference_manifest_allowed(server, rc, ca):
    doc = yaml.safe_load(LISTING_MANIFEST_YAML)
    name = names.parse(doc["spec"]["ansName"])
    identity = make_identity(ca, name,
                             extra_caps=("statistical-analysis", "alert-generation"))
    result = rc.post("/v1/admission/validate",
                     {"manifest": doc, "chain": identity.chain.to_doc()})
    assert result["allowed"] is True, result["reasons"]


def test_admission_capability_not_listed_denied(server, rc):
    doc = yaml.safe_load(LISTING_MANIFEST_YAML)
    doc["spec"]["capabilities"] = ["statistical-analysis"]
    result = rc.post("/v1/admission/validate", doc)
    assert result["allowed"] is False
    assert any("NAME_MISMATCH" in r for r in result["reasons"])


def test_admission_environment_mismatch_denied(server, rc):
    doc = yaml.safe_load(LISTING_MANIFEST_YAML)
    doc["spec"]["environment"] = "staging"  # name still says .prod
    result = rc.post("/v1/admission/validate", doc)
    assert result["allowed"] is False


def test_admission_schema_violation_400(server):
    status, body = _post_raw(server, "/v1/admission/validate", {"kind": "Agent"})
    assert status == 400 and body["error"] == "MALFORMED"


def test_admission_does_not_mutate_registry(server, rc, ca):
    doc = yaml.safe_load(LISTING_MANIFEST_YAML)
    before = rc.get("/v1/resolve?capability=concept-drift-detection")
    rc.post("/v1/admission/validate", doc)
    after = rc.get("/v1/resolve?capability=concept-drift-detection")
    assert before == after == []


# -- metrics -------------------------------------------------------------------------


def test_metrics_counters_and_monotonicity(server, rc, ca):
    _register(server, rc, ca, make_name(8))
    _, text1 = _get(server, "/v1/metrics")
    assert "registrations_total 1" in text1
    rc.get("/v1/resolve?capability=cap-a")
    _, text2 = _get(server, "/v1/metrics")

    def counters(text):
        return {line.split(" ")[0]: float(line.split(" ")[1])
                for line in text.splitlines() if line and "{" not in line}

    first, second = counters(text1), counters(text2)
    for name, value in first.items():
        if name.endswith("_total"):
            assert second[name] >= value
    assert second["discovery_queries_total"] >= 1


def test_metrics_histogram_counts_operations(server, rc, ca):
    for _ in range(5):
        rc.get("/v1/resolve?capability=cap-z")
    _, text = _get(server, "/v1/metrics")
    line = next(l for l in text.splitlines()
                if l.startswith('operation_latency_ms_count{operation="discovery"}'))
    assert int(line.rsplit(" ", 1)[1]) == 5


# -- error mapping -------------------------------------------------------------------


def test_every_error_code_has_a_status():
    assert set(STATUS_BY_CODE) == ERROR_CODES
    for code, status in STATUS_BY_CODE.items():
        assert status in (400, 401, 403, 404, 409, 500), code


def test_unknown_route_404(server):
    try:
        urllib.request.urlopen(server.url + "/v1/nope")
        assert False
    except urllib.error.HTTPError as err:
        assert err.code == 404
