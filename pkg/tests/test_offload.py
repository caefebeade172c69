import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tiledattn.hardware import builtin_profile
from tiledattn.offload import (
    WORKERS_ENV,
    ModelConfig,
    builtin_model,
    cpu_decode_attention,
    decode_latency_compare,
    default_workers,
    latency_table,
    load_model,
    plan,
    prefill_offload_overlap,
    table_rows,
)
from oracles import accounting_l_gpu
from tiledattn.reference import KvCache, std_attention

GIB = 2**30
V100 = builtin_profile("v100_like")
PANGU = builtin_model("pangu_38b")


model_st = st.builds(
    lambda L, N, D, h2, V, B, S, O, w: ModelConfig(L=L, H1=N * D, H2=h2, N=N, D=D, V=V, B=B, S=S, O=O,
                                                   bytes_per_scalar=w),
    st.integers(1, 96), st.integers(1, 64), st.sampled_from([32, 64, 128]), st.integers(1, 30000),
    st.integers(1, 60000), st.integers(1, 8), st.integers(1, 300000), st.integers(1, 512), st.sampled_from([1, 2, 4]),
)


@given(model_st, st.floats(0.5, 128.0), st.sampled_from([1, 2, 4, 8]))
def test_plan_matches_byte_accounting(m, gib, n):
    p = plan(m, gib * GIB, 1e15, n)
    assert p.L_GPU == accounting_l_gpu(m, gib * GIB, n)
    assert p.L_GPU + p.L_CPU == m.L
    assert 0 <= p.L_GPU <= m.L


def test_pangu_256k_term_by_term():
    m = PANGU.with_(S=262144)
    # weights: 40 * (4*5120^2 + 2*5120*20480) * 2
    m_w = 40 * (4 * 26214400 + 2 * 104857600) * 2
    assert m_w == 25165824000
    mid = 3 * 262144 * 5120 * 2
    vocab = 8 * 40000 * 5120 * 2
    kv = 2 * 5120 * (262144 + 128) * 2
    numerator = 8 * 32 * GIB - m_w - mid - vocab
    assert numerator // kv == 44
    p = plan(m, 32 * GIB, 512 * GIB, 8)
    assert p.L_GPU_formula == 44
    assert (p.L_GPU, p.L_CPU, p.feasible) == (40, 0, True)
    assert p.m_w == m_w and p.m_vocab_literal == 40000 * 5120


def test_huge_memory_keeps_everything_on_device():
    p = plan(PANGU, 1e18, 0, 8)
    assert (p.L_GPU, p.L_CPU, p.cpu_kv_bytes, p.feasible) == (PANGU.L, 0, 0, True)


def test_tiny_memory_clamps_to_zero():
    p = plan(PANGU, 1.0, 1e18, 8)
    assert p.L_GPU == 0 and p.L_CPU == PANGU.L
    assert p.L_GPU_formula < 0
    assert not p.feasible  # the weights alone do not fit


def test_cpu_memory_limits_feasibility():
    m = PANGU.with_(S=262144)
    p = plan(m, 4.75 * GIB, 1.0, 8)
    assert p.L_CPU > 0 and not p.feasible


def test_plan_rejects_zero_devices():
    with pytest.raises(ValueError):
        plan(PANGU, GIB, GIB, 0)


def test_model_validation():
    with pytest.raises(ValueError):
        ModelConfig(L=1, H1=100, H2=10, N=3, D=32, V=10)
    with pytest.raises(ValueError):
        ModelConfig(L=0, H1=64, H2=10, N=2, D=32, V=10)


@pytest.mark.parametrize("name", ["pangu_38b", "opt_30b", "llama2_7b", "llama2_70b", "llama_65b"])
def test_builtin_models_load(name):
    m = builtin_model(name)
    assert m.H1 == m.N * m.D and m.D == 128


def test_model_file_rejects_unknown_keys(tmp_path):
    f = tmp_path / "m.yaml"
    f.write_text("schema_version: 1\nmodel: {L: 1, H1: 64, H2: 8, N: 2, D: 32, V: 4}\nextra: 1\n")
    with pytest.raises(ValueError):
        load_model(f)
    f.write_text("schema_version: 1\nmodel: {L: 1, H1: 64, H2: 8, N: 2, D: 32, V: 4, bogus: 3}\n")
    with pytest.raises(ValueError):
        load_model(f)


def test_unknown_builtin_model():
    with pytest.raises(FileNotFoundError):
        builtin_model("gpt5")


# ---------------------------------------------------------------- host attention


def decode_problem(rng, b, n, d, length):
    q = rng.standard_normal((b, 1, n, d))
    cache = KvCache()
    cache.append(rng.standard_normal((b, length, n * d)), rng.standard_normal((b, length, n * d)))
    return q, cache


def oracle(q, cache):
    b, _, n, d = q.shape
    k = cache.k.reshape(b, cache.length, n, d)
    v = cache.v.reshape(b, cache.length, n, d)
    return std_attention(q, k, v)


def test_workers_bitwise_invariant(rng):
    q, cache = decode_problem(rng, 2, 4, 32, 300)
    assert np.array_equal(cpu_decode_attention(q, cache, 1), cpu_decode_attention(q, cache, 8))


def test_cache_length_one_returns_v(rng):
    q, cache = decode_problem(rng, 2, 3, 8, 1)
    out = cpu_decode_attention(q, cache, 2)
    assert np.allclose(out.reshape(2, 24), cache.v[:, 0, :], rtol=0, atol=1e-15)


def test_matches_oracle(rng):
    q, cache = decode_problem(rng, 2, 4, 32, 512)
    assert np.max(np.abs(cpu_decode_attention(q, cache, 4) - oracle(q, cache))) <= 1e-12


def test_zero_workers_rejected(rng):
    q, cache = decode_problem(rng, 1, 1, 4, 3)
    with pytest.raises(ValueError):
        cpu_decode_attention(q, cache, 0)


def test_empty_cache_rejected():
    with pytest.raises(ValueError):
        cpu_decode_attention(np.zeros((1, 1, 1, 4)), KvCache())


def test_workers_env(monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert default_workers() == 3
    monkeypatch.delenv(WORKERS_ENV)
    assert default_workers() >= 1


# ---------------------------------------------------------------- latency table

TABLE_SEQS = [1024, 2048, 4096, 8192, 16384, 32768, 65536, 131072, 262144]


def table():
    return latency_table(PANGU, TABLE_SEQS, 4.75 * GIB, 512 * GIB, 8, V100)


def test_off_upload_constant():
    ups = {r["cooperative"]["off_upload"] for r in table() if r["S"] >= 16384}
    assert len(ups) == 1


def test_cooperative_beats_classical_long_sequences():
    for r in table():
        if r["S"] >= 16384:
            ratio = r["classical"]["total"] / r["cooperative"]["total"]
            assert 1.2 <= ratio <= 1.6


def test_short_sequences_not_offloaded():
    rows = table()
    short = [r for r in rows if r["S"] <= 8192]
    assert short and all(not r["offloaded"] for r in short)
    for r in short:
        assert r["classical"]["total"] == r["gpu_layers"]["gpu_calc"]
        assert r["cooperative"]["total"] is None
    assert table_rows(short)[0][1] == "-"


def test_classical_arithmetic():
    m = PANGU.with_(S=65536)
    r = decode_latency_compare(m, plan(m, 4.75 * GIB, 512 * GIB, 8), V100, 8)
    kv = 2 * m.H1 * m.S * 2 / 8
    assert r["classical"]["upload"] == pytest.approx(kv / V100.pcie_bw + V100.pcie_latency, rel=1e-15)
    assert r["classical"]["total"] == r["classical"]["upload"] + r["classical"]["gpu_calc"]
    assert r["cooperative"]["cpu_calc"] == pytest.approx(4 * m.S * m.H1 / 8 / V100.cpu_rate, rel=1e-15)


# ---------------------------------------------------------------- prefill overlap


def offload_model():
    m = PANGU.with_(L=4, S=4096)
    p = plan(m, 1.0, 1e18, 8)
    assert p.L_CPU == 4
    return m, p


def rest_and_bytes(m, n=8):
    rest = (4.0 * m.S * m.H1**2 + 2.0 * m.S**2 * m.H1 + 4.0 * m.S * m.H1 * m.H2) / n / V100.device_flops
    return rest, 2 * m.S * m.H1 * m.bytes_per_scalar / n


def test_prefill_infinite_pcie_hides_everything():
    m, p = offload_model()
    tl = prefill_offload_overlap(m, p, V100.with_(pcie_bw=math.inf, pcie_latency=0.0), 8)
    assert tl.meta["added_latency"] == 0.0
    assert tl.makespan == pytest.approx(tl.meta["compute_only"], rel=1e-12)


def test_prefill_boundary_equal_times():
    m, p = offload_model()
    rest, nbytes = rest_and_bytes(m)
    bw = nbytes / rest
    while nbytes / bw > rest:
        bw = np.nextafter(bw, math.inf)
    tl = prefill_offload_overlap(m, p, V100.with_(pcie_bw=bw, pcie_latency=0.0), 8)
    assert tl.meta["added_latency"] == 0.0


def test_prefill_double_offload_exposes_half():
    m, p = offload_model()
    rest, nbytes = rest_and_bytes(m)
    tl = prefill_offload_overlap(m, p, V100.with_(pcie_bw=nbytes / (2 * rest), pcie_latency=0.0), 8)
    assert tl.meta["added_latency"] == pytest.approx(m.L * rest, rel=1e-9)


def test_prefill_offload_starts_after_kv_projection():
    m, p = offload_model()
    tl = prefill_offload_overlap(m, p, V100, 8)
    ev = {e.label: e for e in tl.events}
    for layer in range(m.L):
        assert ev[f"offload_kv L{layer}"].start >= ev[f"kv_proj L{layer}"].end
