import os
import subprocess
import sys

import numpy as np

from falkon_ooc import _fused_py, backend
from falkon_ooc.kernels import KernelSpec, kernel_vecmul_fused


def test_backend_name_matches_module():
    assert backend.NAME in ("compiled", "python")
    assert backend.fused.compiled() == (backend.NAME == "compiled")
    assert not _fused_py.compiled()


def test_compiled_and_fallback_agree(rng):
    X1, X2, v = rng.standard_normal((400, 8)), rng.standard_normal((300, 8)), rng.standard_normal(300)
    k = KernelSpec.gaussian(2.0)
    a = kernel_vecmul_fused(k, X1, X2, v, impl=backend.fused)
    b = kernel_vecmul_fused(k, X1, X2, v, impl=backend.fused_fallback)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_env_forces_fallback():
    env = dict(os.environ, FALKON_OOC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from falkon_ooc import backend; print(backend.NAME)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
