import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _instances import ctx_from_params as _ctx_from
from _oracles import MB, monolithic_total, random_latency_params
from premig.latency import (
    ChannelParams,
    CloudSpec,
    InfeasibleLinkError,
    LinkEnd,
    MigrationDecision,
    SlotContext,
    TaskSpec,
    channel_gain,
    cloud_latency,
    cloud_residual,
    download_latency,
    evaluate,
    link_rate,
    local_processing_latency,
    migration_latency,
    premigrated_processing_latency,
    total_latency,
    upload_latency,
)

G = 1e9
E_V = 0.5 * G / MB  # 0.5 Gcycles/MB in cycles/bit


def test_channel_gain_inverse_square():
    ch = ChannelParams()
    g1, _ = channel_gain(50.0, ch)
    g2, _ = channel_gain(100.0, ch)
    assert g1 / g2 == pytest.approx(4.0, rel=1e-14)


def test_channel_gain_hand_value():
    ch = ChannelParams(4.11, 2.0e9)
    # 4.11 * (2.99792458e8 / (4*pi*2e9*100))^2
    expected = 4.11 * (2.99792458e8 / (4 * math.pi * 2.0e9 * 100.0)) ** 2
    g, clamped = channel_gain(100.0, ch)
    assert g == pytest.approx(expected, rel=1e-15)
    assert g == pytest.approx(5.8479e-8, rel=1e-4)
    assert not clamped


def test_channel_gain_clamp():
    ch = ChannelParams()
    g0, flag = channel_gain(0.0, ch)
    g1, flag1 = channel_gain(1.0, ch)
    assert flag and not flag1 and g0 == g1


def test_link_rate_examples():
    assert link_rate(1.0, 1.0, 1.0, 1.0) == pytest.approx(1.0)
    assert link_rate(1e6, 3.0, 1.0, 1.0) == pytest.approx(2e6)


def test_link_rate_random_snr():
    rng = np.random.default_rng(0)
    for _ in range(200):
        snr = rng.uniform(0.1, 100)
        bw = rng.uniform(1e6, 1e9)
        assert link_rate(bw, snr, 1.0, 1.0) == pytest.approx(bw * math.log(1 + snr) / math.log(2), rel=1e-14)


def test_upload_latency():
    assert upload_latency(0.0, 1e6) == 0.0
    assert upload_latency(16e6 * 8, 8e6) == pytest.approx(16.0)
    with pytest.raises(InfeasibleLinkError):
        upload_latency(1.0, 0.0)


def test_migration_latency():
    assert migration_latency(0.0, None) == 0.0
    assert migration_latency(100 * MB, 800e6) == pytest.approx(1.0)
    with pytest.raises(InfeasibleLinkError):
        migration_latency(1.0, None)


def test_local_processing_examples():
    assert local_processing_latency(0.0, 100 * MB, 1.0, E_V, 10 * G) == 0.0
    assert local_processing_latency(0.0, 100 * MB, 0.0, E_V, 10 * G) == pytest.approx(5.0)
    assert local_processing_latency(50 * G, 200 * MB, 0.5, E_V, 20 * G) == pytest.approx(5.0)


def test_premigrated_processing_examples():
    assert premigrated_processing_latency(0.0, 0.0, 0.0, E_V, 10 * G) == 0.0
    assert premigrated_processing_latency(1.0, 10 * G, 100 * MB, E_V, 20 * G) == pytest.approx(4.0)
    a = premigrated_processing_latency(1.0, 10 * G, 100 * MB, E_V, 20 * G)
    b = premigrated_processing_latency(1.0, 10 * G, 100 * MB, E_V, 40 * G)
    assert (a - 1.0) == pytest.approx(2 * (b - 1.0))


def test_cloud_residual_examples():
    assert cloud_residual(1.0, 5.0, 6.0, 0.0, 100 * MB, 0.0, E_V, 10 * G) == 0.0
    assert cloud_residual(1.0, 5.0, 2.0, 0.0, 100 * MB, 0.0, E_V, 10 * G) == pytest.approx(60 * MB)
    # negative raw value clamps to 0: branch taken by a long upload, tiny work
    assert cloud_residual(10.0, 0.1, 5.0, 0.0, 1 * MB, 0.0, E_V, 10 * G) == 0.0
    # raw value above the kept portion clamps to it
    assert cloud_residual(1.0, 50.0, 0.0, 500 * G, 100 * MB, 0.5, E_V, 10 * G) == pytest.approx(50 * MB)


def test_cloud_residual_branch_boundary():
    # construct workload + kept*e = C_m * dwell with upload 0: both branches agree at 0
    task, C = 100 * MB, 10 * G
    dwell = task * E_V / C
    local = local_processing_latency(0.0, task, 0.0, E_V, C)
    assert local == pytest.approx(dwell)
    assert cloud_residual(0.0, local, dwell, 0.0, task, 0.0, E_V, C) == 0.0
    just_over = cloud_residual(0.0, local, dwell * (1 - 1e-12), 0.0, task, 0.0, E_V, C)
    assert just_over == pytest.approx(0.0, abs=1e-3 * MB)


def test_cloud_latency_examples():
    assert cloud_latency(0.0, None, E_V, None) == 0.0
    assert cloud_latency(60 * MB, 480e6, E_V, 60 * G) == pytest.approx(1.5)
    a = cloud_latency(60 * MB, 480e6, E_V, 60 * G)
    b = cloud_latency(60 * MB, 480e6, E_V, 120 * G)
    assert a - 1.0 == pytest.approx(2 * (b - 1.0))
    with pytest.raises(InfeasibleLinkError):
        cloud_latency(1.0, None, E_V, 60 * G)


def test_download_latency_examples():
    assert download_latency(0, 0, 0, None, None, None) == 0.0
    r = 80 * MB
    assert download_latency(100 * MB, 40 * MB, 0.0, r, r, None, rho=1.0) == pytest.approx(1.25)
    assert download_latency(100 * MB, 40 * MB, 10 * MB, r, r, r, rho=0.0) == 0.0
    with pytest.raises(InfeasibleLinkError):
        download_latency(100 * MB, 40 * MB, 0.0, r, None, None)


def test_total_latency_examples():
    assert total_latency(0, 0, 0, 0, 0, 0).total == 0.0
    b = total_latency(1.0, 5.0, 4.0, 0.5, 0.0, 2.0)
    assert b.total == pytest.approx(8.0)


def test_migration_decision_forces_zero_fraction():
    assert MigrationDecision(None, 0.7).fraction == 0.0
    with pytest.raises(ValueError):
        MigrationDecision(3, 1.2)


def test_composed_matches_monolithic_oracle_1000_cases():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        p = random_latency_params(rng)
        ctx, target = _ctx_from(p)
        got = evaluate(ctx, p["frac"], target, p["B_mig"]).total
        assert got == pytest.approx(monolithic_total(p), rel=1e-9)


MONO_KEYS = [("C_m", +1), ("C_p", +1), ("C_cloud", +1), ("Bup_m", +1), ("Bd_m", +1),
             ("Bd_p", +1), ("B_mig", +1), ("B_mc", +1), ("R_vc", +1)]


@pytest.mark.parametrize("key,_", MONO_KEYS)
def test_total_non_increasing_in_capacities(key, _):
    rng = np.random.default_rng(zlib.crc32(key.encode()))
    for _ in range(200):
        p = random_latency_params(rng)
        # keep the residual branch fixed so the comparison isolates the capacity effect
        p["dwell"] = 1e6
        ctx, target = _ctx_from(p)
        base = evaluate(ctx, p["frac"], target, p["B_mig"]).total
        q = dict(p)
        q[key] *= rng.uniform(1.0, 3.0)
        ctx2, target2 = _ctx_from(q)
        assert evaluate(ctx2, q["frac"], target2, q["B_mig"]).total <= base * (1 + 1e-12)


def test_no_target_reproduces_npm():
    rng = np.random.default_rng(5)
    p = random_latency_params(rng)
    ctx, target = _ctx_from(p)
    npm = evaluate(ctx, 0.0, None)
    assert evaluate(ctx, 0.9, None) == npm
    assert npm.migration == 0 and npm.premigrated_processing == 0


def test_full_fraction_local_depends_only_on_workload():
    assert local_processing_latency(7 * G, 123 * MB, 1.0, E_V, 10 * G) == pytest.approx(0.7)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_components_nonnegative_and_mass_conserved(seed):
    rng = np.random.default_rng(seed)
    p = random_latency_params(rng)
    ctx, target = _ctx_from(p)
    b = evaluate(ctx, p["frac"], target, p["B_mig"])
    for v in (b.upload, b.local_processing, b.premigrated_processing, b.migration, b.cloud, b.download, b.total):
        assert v >= 0
    frac = p["frac"] if target is not None else 0.0
    kept = (1 - frac) * p["s_task"]
    assert 0 <= b.cloud_residual <= kept
    local_done = kept - b.cloud_residual
    assert local_done + b.cloud_residual == pytest.approx(kept, rel=1e-15)
    assert b.total == pytest.approx(b.upload + max(b.local_processing, b.premigrated_processing)
                                    + b.cloud + b.download, rel=1e-15)


def test_serving_cap_spills_overflow_to_cloud():
    serving = LinkEnd(50.0, 400e6, 400e6, 1e-11, 10 * G, 90 * G)
    ctx = SlotContext(TaskSpec(16 * MB, 100 * MB), 0.2, E_V, serving, 1e6, 1e9, CloudSpec(80 * G, 200e6),
                      serving_cap=100 * G)
    b = evaluate(ctx, 0.0)
    # 90 G + 50 G - 100 G = 40 G over the cap -> 80 MB to the cloud
    assert b.cloud_residual == pytest.approx(80 * MB)
