import numpy as np
import pytest

from idcf import kernels
from idcf.kernels import _pykernels

try:
    from idcf.kernels import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def test_backend_reported():
    assert kernels.BACKEND in ("python", "cython")


def test_python_kernels_match_numpy(rng):
    a, b = rng.normal(size=(9, 4)), rng.normal(size=(4, 6))
    np.testing.assert_allclose(_pykernels.matmul(a, b), a @ b, rtol=1e-13)
    np.testing.assert_allclose(_pykernels.rowdot(a, a), (a * a).sum(1), rtol=1e-13)
    x = rng.normal(size=(5, 3))
    ptr = np.array([0, 2, 2, 5])
    idx = np.array([0, 4, 1, 1, 3])
    out = _pykernels.segment_sum(ptr, idx, x)
    np.testing.assert_allclose(out, [x[0] + x[4], np.zeros(3), 2 * x[1] + x[3]])


@needs_ext
def test_backends_bit_identical(rng):
    a, b = rng.normal(size=(33, 17)), rng.normal(size=(17, 9))
    assert np.array_equal(_pykernels.matmul(a, b), _ckernels.matmul(a, b))
    assert np.array_equal(_pykernels.rowdot(a, a), _ckernels.rowdot(a, a))
    x = rng.normal(size=(50, 8))
    lens = rng.integers(0, 7, size=20)
    ptr = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    idx = rng.integers(0, 50, size=ptr[-1]).astype(np.int64)
    assert np.array_equal(_pykernels.segment_sum(ptr, idx, x), _ckernels.segment_sum(ptr, idx, x))
    rows = rng.normal(size=(40, 8))
    tgt = rng.integers(0, 10, size=40).astype(np.int64)
    t1, t2 = np.zeros((10, 8)), np.zeros((10, 8))
    _pykernels.scatter_add_rows(t1, tgt, rows)
    _ckernels.scatter_add_rows(t2, tgt, rows)
    assert np.array_equal(t1, t2)


@needs_ext
def test_adam_bit_identical(rng):
    states = []
    for backend in ("python", "cython"):
        prev = kernels.set_backend(backend)
        try:
            v = np.linspace(-1, 1, 12).reshape(3, 4)
            m, s = np.zeros_like(v), np.zeros_like(v)
            for step in range(1, 6):
                g = np.sin(v * step)
                kernels.adam_update(v, g, m, s, 1e-2, 0.9, 0.999, step, 1e-8)
            states.append((v, m, s))
        finally:
            kernels.set_backend(prev)
    for x, y in zip(*states):
        assert np.array_equal(x, y)


@needs_ext
def test_training_bit_identical_across_backends(toy_ds):
    from idcf.config import ModelConfig, PretrainConfig
    from idcf.mf import pretrain

    outs = []
    for backend in ("python", "cython"):
        prev = kernels.set_backend(backend)
        try:
            mf = pretrain(toy_ds, ModelConfig("nn", 4, 6), PretrainConfig("all", 1e-2, 8, 0.01, 0.0, 5, 5))
            outs.append(mf)
        finally:
            kernels.set_backend(prev)
    for a, b in zip(outs[0].tensors(), outs[1].tensors()):
        assert np.array_equal(a.value, b.value)


def test_scatter_add_requires_float64():
    with pytest.raises(TypeError):
        kernels.scatter_add_rows(np.zeros((2, 2), dtype=np.float32), [0], np.ones((1, 2)))
