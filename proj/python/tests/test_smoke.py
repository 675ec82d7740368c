import numpy as np
import pytest

import ecomp


@pytest.fixture(scope="module")
def trained():
    return ecomp.train_toy(seed=3407, steps=150)


def test_svd_reconstructs():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((7, 4))
    u, s, v = ecomp.svd(w)
    assert np.all(np.diff(s) <= 0)
    np.testing.assert_allclose(u @ np.diag(s) @ v.T, w, atol=1e-12)
    np.testing.assert_allclose(s, np.linalg.svd(w, compute_uv=False), atol=1e-12)


def test_trained_manifest_verifies_and_round_trips(trained, tmp_path):
    m, report = trained
    assert not report["diverged"]
    assert m.verify()["ok"]
    path = tmp_path / "m.json"
    m.save(str(path))
    back = ecomp.Manifest.load(str(path))
    assert back.to_json() == m.to_json()


def test_logits_and_certificate(trained):
    m, report = trained
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, m.input_dim))
    full = m.logits(x)
    assert full.shape[0] == 5
    for pid in report["profile_ids"]:
        drift = np.linalg.norm(m.logits(x, pid) - full, axis=1)
        assert np.all(np.isfinite(drift))
        assert m.delta_hat(pid) >= 0.0
        assert ecomp.expected_bytes(m, pid) > 0


def test_errors_surface_as_value_errors(trained):
    m, _ = trained
    with pytest.raises(ValueError):
        m.delta_hat("no-such-profile")
    with pytest.raises(ValueError):
        ecomp.Manifest.from_json('{"format":')
    with pytest.raises(ValueError):
        m.select(latency_ms=1.0)  # trained manifests carry no lattice


def test_planned_lattice_and_selection(trained):
    m, _ = trained
    planned = ecomp.plan_synthetic(m, budgets=3)
    assert planned.verify()["ok"]
    entries = planned.lattice
    assert len(entries) >= 1
    lat = [e["latency_ms"] for e in entries]
    assert lat == sorted(lat)
    pid, status = planned.select(latency_ms=1e9, epsilon=float("inf"))
    assert (pid, status) == (entries[0]["id"], "ok")
    _, status = planned.select(latency_ms=1e-9)
    assert status == "cert_warning"
