"""Multimodal feature transformation: 2-D DCT, per-modality and shared projectors."""
import numpy as np

from .errors import ShapeError
from .tensor import (Parameter, add_bias, concat_cols, leaky_relu, matmul,
                     xavier_uniform, DEFAULT_SLOPE)

DEFAULT_HIDDEN = 256
DEFAULT_DIM = 64


def _ortho_scale(n, dtype):
    s = np.full(n, np.sqrt(1.0 / (2.0 * n)), dtype=dtype)
    s[0] = np.sqrt(1.0 / (4.0 * n))
    return s


def dct_axis0(x, block=512):
    """Orthonormal DCT-II along axis 0 via the even/odd reordering + one FFT.

    Columns are processed in blocks of ``block`` to bound the complex buffer.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        return x.copy()
    flat = x.reshape(n, -1)
    out = np.empty_like(flat)
    twiddle = np.exp(-1j * np.pi * np.arange(n) / (2.0 * n))[:, None]
    scale = _ortho_scale(n, np.float64)[:, None]
    for c in range(0, flat.shape[1], block):
        cols = flat[:, c:c + block]
        v = np.concatenate([cols[0::2], cols[1::2][::-1]], axis=0)
        spectrum = np.fft.fft(v, axis=0)
        out[:, c:c + block] = 2.0 * np.real(twiddle * spectrum) * scale
    return out.reshape(x.shape)


def idct_axis0(y, block=512):
    """Inverse of :func:`dct_axis0` (orthonormal DCT-III)."""
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n == 0:
        return y.copy()
    flat = y.reshape(n, -1)
    out = np.empty_like(flat)
    untwiddle = np.exp(1j * np.pi * np.arange(n) / (2.0 * n))[:, None]
    scale = _ortho_scale(n, np.float64)[:, None]
    half = (n + 1) // 2
    for c in range(0, flat.shape[1], block):
        coeffs = flat[:, c:c + block] / scale
        mirrored = np.zeros_like(coeffs)
        mirrored[1:] = coeffs[:0:-1]
        spectrum = 0.5 * (coeffs - 1j * mirrored) * untwiddle
        v = np.real(np.fft.ifft(spectrum, axis=0))
        block_out = np.empty_like(v)
        block_out[0::2] = v[:half]
        block_out[1::2] = v[half:][::-1]
        out[:, c:c + block] = block_out
    return out.reshape(y.shape)


def dct_matrix(n):
    """Dense orthonormal DCT-II matrix ``C`` with ``C @ x`` the transform of ``x``."""
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * j + 1) * k / (2.0 * n))
    c[0] *= np.sqrt(1.0 / n)
    c[1:] *= np.sqrt(2.0 / n)
    return c


def dct2_direct(x):
    """O(N^2) reference 2-D DCT-II by explicit matrix products."""
    x = np.asarray(x, dtype=np.float64)
    return dct_matrix(x.shape[0]) @ x @ dct_matrix(x.shape[1]).T


def dct2(x):
    """Separable orthonormal type-II DCT over both axes of a 2-D matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"dct2 expects a 2-D matrix, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("dct2 input contains NaN/Inf")
    return dct_axis0(dct_axis0(x).T).T


def idct2(y):
    y = np.asarray(y, dtype=np.float64)
    return idct_axis0(idct_axis0(y.T).T)


class Projector:
    """Two-layer map ``leaky(X W1 + b1) W2`` (second layer bias-free)."""

    def __init__(self, name, in_dim, hidden, out_dim, rng, dtype=np.float32, slope=DEFAULT_SLOPE):
        self.name = name
        self.slope = slope
        self.w1 = Parameter(xavier_uniform(rng, (in_dim, hidden), dtype), f"{name}.w1")
        self.b1 = Parameter(np.zeros(hidden, dtype=dtype), f"{name}.b1")
        self.w2 = Parameter(xavier_uniform(rng, (hidden, out_dim), dtype), f"{name}.w2")

    @property
    def in_dim(self):
        return self.w1.shape[0]

    def parameters(self):
        return [self.w1, self.b1, self.w2]

    def __call__(self, x):
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}: input width {x.shape[1]} != {self.in_dim}")
        return matmul(leaky_relu(add_bias(matmul(x, self.w1), self.b1), self.slope), self.w2)


def project_modality(projector, features):
    return projector(features)


def project_shared(projector, transformed):
    """Shared projection of the column-concatenated DCT features of every modality."""
    if isinstance(transformed, (list, tuple)):
        transformed = np.concatenate([np.asarray(t) for t in transformed], axis=1)
    return projector(transformed)


def assemble_item_latent(modality_blocks, shared_block=None):
    blocks = list(modality_blocks)
    if shared_block is not None:
        blocks.append(shared_block)
    return concat_cols(blocks)


class MultimodalTransform:
    """All projectors of the item side, producing the latent item matrix.

    ``raw`` maps modality -> raw feature matrix (|I| x d_m); ``shared_input`` is
    the concatenation of the per-modality 2-D DCTs (None disables the shared
    block, i.e. the no-DCT ablation).
    """

    def __init__(self, raw, shared_input, dim, hidden, rng, dtype=np.float32, slope=DEFAULT_SLOPE):
        self.modalities = list(raw)
        self.raw = {m: np.ascontiguousarray(raw[m], dtype=dtype) for m in self.modalities}
        self.projectors = {
            m: Projector(f"mft.{m}", self.raw[m].shape[1], hidden, dim, rng, dtype, slope)
            for m in self.modalities
        }
        self.shared_input = None if shared_input is None else np.ascontiguousarray(shared_input, dtype=dtype)
        self.shared = None
        if self.shared_input is not None:
            self.shared = Projector("mft.shared", self.shared_input.shape[1], hidden, dim, rng, dtype, slope)
        self.dim = dim

    @property
    def num_blocks(self):
        return len(self.modalities) + (1 if self.shared is not None else 0)

    def parameters(self):
        params = [p for m in self.modalities for p in self.projectors[m].parameters()]
        if self.shared is not None:
            params += self.shared.parameters()
        return params

    def __call__(self):
        blocks = [project_modality(self.projectors[m], self.raw[m]) for m in self.modalities]
        shared = None if self.shared is None else project_shared(self.shared, self.shared_input)
        return assemble_item_latent(blocks, shared)


def shared_dct_input(features, dtype=np.float32):
    """Column-concatenated 2-D DCT of each modality's feature matrix (preprocessing)."""
    return np.concatenate([dct2(features[m]).astype(dtype) for m in features], axis=1)
