"""Pure-numpy fallback for the compiled fused kernel-vector product."""
import numpy as np

ROW_TILE = 256


def gaussian_matvec(x1, x2t, n1, n2, v, gamma, out):
    """Same contract as the compiled version; at most one ROW_TILE x r slab is live."""
    q, d = x1.shape
    if x2t.shape[0] != d or n1.shape[0] != q or n2.shape[0] != x2t.shape[1] \
            or v.shape[0] != x2t.shape[1] or out.shape[0] != q:
        raise ValueError("dimension mismatch")
    for a in range(0, q, ROW_TILE):
        b = min(a + ROW_TILE, q)
        slab = x1[a:b] @ x2t
        slab *= -2.0
        slab += n1[a:b, None]
        slab += n2[None, :]
        np.maximum(slab, 0.0, out=slab)
        slab *= -gamma
        np.exp(slab, out=slab)
        out[a:b] = slab @ v


def compiled() -> bool:
    return False
