from __future__ import annotations

import time

import pytest

from ans import client
from ans.canonical import canonical_json
from ans.harness import CaSetup, build_ca, harness_policies
from ans.names import AnsName, Version
from ans.policy import policies_to_doc
from ans.server import AnsServer, ServerConfig

NOW = int(time.time())


@pytest.fixture(scope="session")
def ca() -> CaSetup:
    return build_ca(NOW - 3600)


@pytest.fixture()
def allow_policies():
    return harness_policies()


def make_name(i: int = 0, capability: str = "cap-a", env: str = "prod",
              version: Version | None = None, protocol: str = "a2a") -> AnsName:
    return AnsName(
        protocol=protocol,
        agent_id=f"agent-{i:03d}",
        capability=capability,
        provider=f"prov-{i % 5}",
        version=version or Version(1, 0),
        extension=env,
    )


def make_identity(ca: CaSetup, name: AnsName, extra_caps=("telemetry-export",),
                  endpoint: str = "http://127.0.0.1:0", now: int = NOW):
    return client.bootstrap_identity(
        name, endpoint, tuple(extra_caps), ca.intermediate_keys,
        ca.intermediate_cert, ca.root_cert, now=now,
    )


@pytest.fixture()
def server(ca, allow_policies, tmp_path):
    anchors_path = tmp_path / "anchors.json"
    anchors_path.write_text(canonical_json([ca.root_cert.to_doc()]))
    policy_path = tmp_path / "policy.json"
    policy_path.write_text(canonical_json(policies_to_doc(allow_policies)))
    config = ServerConfig(
        listen="127.0.0.1:0",
        anchors_path=str(anchors_path),
        policy_path=str(policy_path),
        log_path=str(tmp_path / "events.log"),
        snapshot_path=str(tmp_path / "snapshot.json"),
        fsync=False,
    )
    srv = AnsServer(config)
    srv.start()
    yield srv
    srv.shutdown()
