import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from collabgen.comm import (AccountingLedger, CollaborationGraph, NoiseSpec, WireMessage, apply_pose_noise,
                            comm_volume_log2, degradation_mask, degrade_message, delay_messages,
                            generation_noise, run_episode, run_episodes, warp_message)
from collabgen.data import SceneCache
from collabgen.dme import ExtractorRegistry, SpatialMessage
from collabgen.model import AgentModel, ModelHyper
from collabgen.scene import Pose, SceneConfig, generate_dataset
from collabgen.training import param_checksums

from conftest import small_spec


def test_volume_matches_table_values():
    assert comm_volume_log2(2, 64, 128, 4) == 16.0
    assert comm_volume_log2(128, 64, 128, 4) == 22.0
    assert 2 ** (comm_volume_log2(128, 64, 128) - comm_volume_log2(2, 64, 128)) == 64.0
    with pytest.raises(ValueError):
        comm_volume_log2(0, 1, 1)


def test_pose_noise_zero_and_std():
    p = Pose(1.0, 2.0, 0.3)
    assert apply_pose_noise(p, NoiseSpec(), 5) == p
    spec = NoiseSpec(sigma_xy=0.2, sigma_yaw=0.2)
    dx = np.array([apply_pose_noise(p, spec, [9, k]).x - p.x for k in range(100_000)])
    assert dx.std() == pytest.approx(0.2, abs=0.005)
    assert apply_pose_noise(p, spec, [1, 2]) == apply_pose_noise(p, spec, [1, 2])


def _wire(seed=0, shape=(2, 64, 128)):
    data = torch.randn(*shape, generator=torch.Generator().manual_seed(seed)) + 5.0
    return WireMessage.from_tensor(2, 1, data)


def test_degradation_examples():
    w = _wire()
    assert degrade_message(w, 0.0, 1) is w
    assert (degrade_message(w, 1.0, 1).array() == 0).all()
    frac = (degrade_message(w, 0.4, 3).array() == 0).mean()
    assert abs(frac - 0.4) <= 0.01
    with pytest.raises(ValueError):
        degrade_message(w, 1.2, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 500), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_degradation_masks_nested(n, r1, r2, seed):
    lo, hi = sorted((r1, r2))
    a, b = degradation_mask(n, lo, seed), degradation_mask(n, hi, seed)
    assert (a <= b).all()
    assert a.sum() == round(lo * n)


def test_delay_examples():
    stream = {0: ["m0"], 1: ["m1"]}
    assert delay_messages(stream, 0) == stream
    assert delay_messages(stream, 1) == {0: [], 1: ["m0"]}


def test_wire_roundtrip_and_accounting():
    w = _wire(shape=(2, 16, 32))
    back = WireMessage.from_bytes(w.to_bytes())
    assert back == w
    assert w.nbytes == 2 * 16 * 32 * 4
    torch.testing.assert_close(back.tensor(), torch.from_numpy(w.array().copy()))
    with pytest.raises(ValueError):
        WireMessage(1, 2, 2, 4, 4, b"\x00" * 3)
    m = WireMessage.from_message(SpatialMessage(3, 1, torch.zeros(2, 4, 4)))
    assert (m.sender, m.receiver) == (3, 1)
    led = AccountingLedger()
    led.record(0, 2, 1, w.nbytes)
    led.record(0, 3, 1, m.nbytes)
    assert led.total_bytes == w.nbytes + m.nbytes


def test_warp_identity_and_translation():
    extent = (16.0, 8.0)
    data = np.arange(2 * 4 * 8, dtype=np.float32).reshape(2, 4, 8)
    p = Pose(0.0, 0.0, 0.0)
    assert warp_message(data, p, p, extent) is data
    # believing the sender one cell further east shifts content one column east
    shifted = warp_message(data, p, Pose(2.0, 0.0, 0.0), extent)
    np.testing.assert_array_equal(shifted[:, :, 1:], data[:, :, :-1])
    assert (shifted[:, :, 0] == 0).all()


def test_warp_half_turn_about_sender():
    extent = (8.0, 8.0)
    data = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    out = warp_message(data, Pose(0.0, 0.0, 0.0), Pose(0.0, 0.0, math.pi), extent)
    np.testing.assert_array_equal(out[0], data[0, ::-1, ::-1])


# episodes -------------------------------------------------------------------


@pytest.fixture(scope="module")
def world():
    scenes = generate_dataset(SceneConfig(), 4, {"test": 3}, {"test": 3})["test"]
    cache = SceneCache(scenes)
    hyper = ModelHyper(denoiser_base=8, head_neck_layers=1)
    torch.manual_seed(0)
    ego = AgentModel(small_spec(1, channels=8), scenes[0].extent, hyper=hyper).eval()
    col = AgentModel(small_spec(2, channels=6), scenes[0].extent, hyper=hyper).eval()
    far = AgentModel(small_spec(3, channels=6), scenes[0].extent, hyper=hyper).eval()
    with torch.no_grad():
        ego.head.cls.bias.fill_(2.0)  # produce detections from untrained weights
    return cache, ego, col, far


def make_graph(ego, pairs, max_range=70.0):
    reg = ExtractorRegistry()
    g = CollaborationGraph(ego.spec.agent_id, reg, max_range)
    g.add_agent(ego, 0)
    for model, slot, ext in pairs:
        g.add_agent(model, slot)
        if ext is not None:
            reg.register(model.spec.agent_id, ego.spec.agent_id, ext, ego.feature_hw)
    return g


def test_ego_only_sends_nothing(world):
    cache, ego, _, _ = world
    out = run_episodes(make_graph(ego, []), cache, [0, 1], frame=2)
    assert out.ledger.total_bytes == 0
    assert out.edges == [[], []]
    assert set(run_episode(make_graph(ego, []), cache, 0)) == {1}


def test_zero_noise_equals_clean_pipeline(world):
    cache, ego, col, _ = world
    g = make_graph(ego, [(col, 1, col.extractor)])
    a = run_episodes(g, cache, [0, 1, 2], NoiseSpec(), frame=2, seed=5, raw=True)
    b = run_episodes(g, cache, [0, 1, 2], None, frame=2, seed=5, raw=True)
    with torch.no_grad():
        f_ego = ego.encode(cache.obs(ego.spec, 0, 2))
        msgs = col.extractor(col.encode(cache.obs(col.spec, 1, 2)), ego.feature_hw)
        z = torch.stack([generation_noise(ego, s.scene_id, 5) for s in cache.scenes])
        (cls, reg), _ = ego.collaborate(f_ego, msgs, torch.arange(3), z)
    for x, y, ref in zip(a, b, (cls, reg)):
        assert torch.equal(x, y) and torch.equal(x, ref)


def test_bytes_equal_sum_of_payloads(world):
    cache, ego, col, far = world
    g = make_graph(ego, [(col, 1, col.extractor), (far, 2, far.extractor)])
    out = run_episodes(g, cache, [0, 1, 2], frame=2)
    per = 2 * ego.feature_hw[0] * ego.feature_hw[1] * 4
    assert out.ledger.total_bytes == per * sum(len(e) for e in out.edges)
    assert all(r["bytes"] == per for r in out.ledger.records)


def test_noise_seeding_repeatable(world):
    cache, ego, col, _ = world
    g = make_graph(ego, [(col, 1, col.extractor)])
    n = NoiseSpec(sigma_xy=0.3, sigma_yaw=0.3, degradation=0.5)
    a = run_episodes(g, cache, [0, 1], n, frame=2, seed=1, raw=True)
    b = run_episodes(g, cache, [0, 1], n, frame=2, seed=1, raw=True)
    assert torch.equal(a[0], b[0])


def test_delay_beyond_history_drops_messages(world):
    cache, ego, col, _ = world
    g = make_graph(ego, [(col, 1, col.extractor)])
    late = run_episodes(g, cache, [0], NoiseSpec(delay_frames=3), frame=2)
    assert late.ledger.total_bytes == 0
    delayed = run_episodes(g, cache, [0], NoiseSpec(delay_frames=2), frame=2)
    assert delayed.ledger.records[0]["frame"] == 2 and delayed.ledger.total_bytes > 0


def test_missing_extractor_and_range_filter(world, caplog):
    cache, ego, col, far = world
    g = make_graph(ego, [(col, 1, col.extractor), (far, 2, None)])
    led = AccountingLedger()
    assert g.edges(cache.scenes[0].agent_poses, led) == [2]
    assert any(r.get("note") for r in led.records)
    tight = make_graph(ego, [(col, 1, col.extractor)], max_range=1.0)
    assert tight.edges(cache.scenes[0].agent_poses) == []
    assert tight.edges() == [2]


def test_graph_mutation_keeps_pair_checksums(world):
    _, ego, col, far = world
    g = make_graph(ego, [(col, 1, col.extractor)])
    before = param_checksums({"pair": g.registry.get(2, 1)[0]})
    g.add_agent(far, 2)
    g.registry.register(3, 1, far.extractor, ego.feature_hw)
    g.remove_agent(3)
    g.registry.unregister(3, 1)
    assert param_checksums({"pair": g.registry.get(2, 1)[0]}) == before
    with pytest.raises(ValueError):
        g.remove_agent(1)
    with pytest.raises(ValueError):
        g.add_agent(col, 3)
