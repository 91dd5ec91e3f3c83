"""Compiled and fallback kernels must agree with each other and with brute force."""
from pathlib import Path

import numpy as np
import pytest

from pmal import _fallback, kernels

try:
    from pmal import _kernels as compiled
except ImportError:
    compiled = None

backends = [pytest.param(_fallback, id="python")]
if compiled is not None:
    backends.append(pytest.param(compiled, id="cython"))


def brute_gap(p1, r1, p2, r2):
    out = []
    for i in range(len(p1)):
        s = 0.0
        for j in range(len(r1)):
            s += (np.linalg.norm(p1[i] - r1[j]) - np.linalg.norm(p2[i] - r2[j])) ** 2
        out.append(np.sqrt(s))
    return np.array(out)


@pytest.mark.parametrize("impl", backends)
def test_topology_gap(impl):
    rng = np.random.default_rng(1)
    p1, p2 = rng.standard_normal((30, 4)), rng.standard_normal((30, 6))
    r1, r2 = p1[::3].copy(), p2[::3].copy()
    np.testing.assert_allclose(impl.topology_gap(p1, r1, p2, r2), brute_gap(p1, r1, p2, r2), rtol=1e-12)


@pytest.mark.parametrize("impl", backends)
def test_nearest_higher(impl):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((25, 3))
    d = np.linalg.norm(x[:, None] - x[None], axis=2)
    r = rng.random(25)
    r[3] = r[4]
    e = impl.nearest_higher(d, r, 99.0)
    for i in range(25):
        higher = [d[i, j] for j in range(25) if r[j] > r[i]]
        assert e[i] == (min(higher) if higher else 99.0)


@pytest.mark.parametrize("impl", backends)
def test_fnv1a_reference_values(impl):
    # published FNV-1a 64 test vectors
    assert impl.fnv1a64(np.frombuffer(b"", np.uint8)) == 0xCBF29CE484222325
    assert impl.fnv1a64(np.frombuffer(b"a", np.uint8)) == 0xAF63DC4C8601EC8C
    assert impl.fnv1a64(np.frombuffer(b"foobar", np.uint8)) == 0x85944171F73967E8


def test_fnv_chaining():
    assert kernels.fnv1a64(b"bar", kernels.fnv1a64(b"foo")) == kernels.fnv1a64(b"foobar")


@pytest.mark.skipif(compiled is None, reason="compiled core not built")
def test_backends_agree_on_random_inputs():
    rng = np.random.default_rng(3)
    p1, p2 = rng.standard_normal((200, 8)), rng.standard_normal((200, 8))
    np.testing.assert_allclose(
        compiled.topology_gap(p1, p1, p2, p2), _fallback.topology_gap(p1, p1, p2, p2), rtol=1e-10
    )
    d = np.abs(rng.standard_normal((50, 50)))
    r = rng.random(50)
    assert np.array_equal(compiled.nearest_higher(d, r, 5.0), _fallback.nearest_higher(d, r, 5.0))
    buf = rng.integers(0, 256, 1000).astype(np.uint8)
    assert compiled.fnv1a64(buf) == _fallback.fnv1a64(buf)


def test_backend_name():
    assert kernels.BACKEND in ("cython", "python")


def test_benchmark_smoke_run(capsys):
    import runpy

    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    bench = runpy.run_path(str(path))
    assert bench["main"](["--quick", "--repeat", "1"]) == 0
    out = capsys.readouterr().out
    assert "topology_gap" in out and "fnv1a64" in out and "inf" not in out
