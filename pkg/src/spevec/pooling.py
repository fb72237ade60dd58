"""Pooling heads mapping a (B, H, W, D) feature map to a fixed-length vector.

* TAP: mean over every position of the map.
* SPP: TAP inside each pyramid bin, concatenated, then a linear layer.
* LDE: soft-assignment residual encoding against a learned codebook.
* SPE: per-bin LDE with a shared 1x1 channel reduction, shared codebook and
  shared projection, concatenated over the pyramid and projected again.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Linear
from .numerics import Module, ShapeError


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class PyramidSpec:
    levels: tuple[tuple[int, int], ...] = ((1, 1), (1, 4))

    @classmethod
    def one_d(cls) -> "PyramidSpec":
        return cls(((1, 1), (1, 4)))

    @classmethod
    def two_d(cls) -> "PyramidSpec":
        return cls(((1, 1), (2, 2)))

    @property
    def num_bins(self) -> int:
        return sum(r * c for r, c in self.levels)


def split_sizes(n: int, k: int) -> list[int]:
    """Split ``n`` into ``k`` contiguous sizes, remainder going to the leftmost."""
    if k < 1 or n < k:
        raise PartitionError(f"cannot split extent {n} into {k} non-empty bins")
    base, rem = divmod(n, k)
    return [base + 1] * rem + [base] * (k - rem)


def bin_slices(H: int, W: int, spec: PyramidSpec) -> list[tuple[slice, slice]]:
    out = []
    for rows, cols in spec.levels:
        hs = np.cumsum([0] + split_sizes(H, rows))
        ws = np.cumsum([0] + split_sizes(W, cols))
        for i in range(rows):
            for j in range(cols):
                out.append((slice(hs[i], hs[i + 1]), slice(ws[j], ws[j + 1])))
    return out


def spd_partition(fmap: np.ndarray, spec: PyramidSpec) -> list[np.ndarray]:
    """Spatial pyramid division of a (B, H, W, D) map into sub-maps, level by level."""
    _, H, W, _ = fmap.shape
    return [fmap[:, hs, ws] for hs, ws in bin_slices(H, W, spec)]


# ---------------------------------------------------------------------------
# temporal average pooling


def tap_forward(fmap: np.ndarray) -> np.ndarray:
    return fmap.mean(axis=(1, 2))


def tap_backward(dout: np.ndarray, shape) -> np.ndarray:
    B, H, W, D = shape
    return np.broadcast_to(dout[:, None, None, :] / (H * W), shape).copy()


# ---------------------------------------------------------------------------
# learnable dictionary encoding


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Codebook(Module):
    """C codewords in D dims plus C smoothing factors s = softplus(s_raw)."""

    def __init__(self, num_codewords: int, dim: int, rng: np.random.Generator | None = None):
        super().__init__()
        if num_codewords < 1:
            raise ValueError("need at least one codeword")
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(dim)
        self.add_param("mu", rng.uniform(-bound, bound, (num_codewords, dim)))
        self.add_param("s_raw", np.zeros(num_codewords))

    @property
    def mu(self) -> np.ndarray:
        return self.params["mu"]

    @property
    def s(self) -> np.ndarray:
        return softplus(self.params["s_raw"])

    @property
    def num_codewords(self) -> int:
        return self.mu.shape[0]


def _sq_dist(X: np.ndarray, mu: np.ndarray) -> np.ndarray:
    d = (X ** 2).sum(-1)[..., None] + (mu ** 2).sum(-1) - 2.0 * (X @ mu.T)
    return np.maximum(d, 0.0)


def _assign(d: np.ndarray, s: np.ndarray) -> np.ndarray:
    a = -s * d
    a = a - a.max(axis=-1, keepdims=True)
    w = np.exp(a)
    return w / w.sum(axis=-1, keepdims=True)


def lde_assign_weights(X: np.ndarray, cb: Codebook) -> np.ndarray:
    """Soft-assignment weights, shape (..., L, C); rows sum to one."""
    if X.shape[-1] != cb.mu.shape[1]:
        raise ShapeError(f"feature dim {X.shape[-1]} != codebook dim {cb.mu.shape[1]}")
    return _assign(_sq_dist(X, cb.mu), cb.s)


def lde_encode(X: np.ndarray, mu: np.ndarray, s_raw: np.ndarray):
    """Residual encodings for a batch of feature sets.

    X is (B, L, D). Returns E with shape (B, C, D) and a cache for
    :func:`lde_encode_backward`. Each e_c is the weighted residual sum divided
    by L, the number of features, not by the total weight.
    """
    L = X.shape[1]
    s = softplus(s_raw)
    d = _sq_dist(X, mu)
    w = _assign(d, s)
    colsum = w.sum(axis=1)  # B, C
    E = (np.swapaxes(w, 1, 2) @ X - colsum[..., None] * mu) / L
    return E, (X, mu, s_raw, s, d, w, colsum)


def lde_encode_backward(dE: np.ndarray, cache):
    X, mu, s_raw, s, d, w, colsum = cache
    L = X.shape[1]
    # direct terms through the residuals
    dX = (w @ dE) / L
    dmu = -(colsum[..., None] * dE).sum(0) / L
    gw = (X @ np.swapaxes(dE, 1, 2) - (dE * mu).sum(-1)[:, None, :]) / L
    # softmax over codewords
    ga = w * (gw - (w * gw).sum(-1, keepdims=True))
    ds = -(ga * d).sum(axis=(0, 1))
    gd = -s * ga
    dX += 2.0 * (X * gd.sum(-1, keepdims=True) - gd @ mu)
    dmu += -2.0 * ((np.swapaxes(gd, 1, 2) @ X).sum(0) - gd.sum(axis=(0, 1))[:, None] * mu)
    return dX, dmu, ds * sigmoid(s_raw)


def lde_forward(X: np.ndarray, cb: Codebook) -> np.ndarray:
    """Flattened C*D supervector for one (L, D) feature set, or (B, C*D) for (B, L, D)."""
    single = X.ndim == 2
    Xb = X[None] if single else X
    if Xb.shape[1] < 1:
        raise ShapeError("need at least one feature vector")
    if Xb.shape[-1] != cb.mu.shape[1]:
        raise ShapeError(f"feature dim {Xb.shape[-1]} != codebook dim {cb.mu.shape[1]}")
    E, _ = lde_encode(Xb, cb.params["mu"], cb.params["s_raw"])
    E = E.reshape(E.shape[0], -1)
    return E[0] if single else E


def l2_normalize(x: np.ndarray, eps: float = 1e-12):
    n = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)
    y = x / n
    return y, (y, n)


def l2_normalize_backward(dy: np.ndarray, cache) -> np.ndarray:
    y, n = cache
    return (dy - y * (dy * y).sum(-1, keepdims=True)) / n


# ---------------------------------------------------------------------------
# pooling heads


class TAPHead(Module):
    def __init__(self, in_channels: int):
        super().__init__()
        self.out_dim = in_channels
        self._shape = None

    def forward(self, fmap):
        self._shape = fmap.shape
        return tap_forward(fmap)

    def backward(self, dout):
        return tap_backward(dout, self._shape)


class SPPHead(Module):
    def __init__(self, in_channels: int, spec: PyramidSpec = PyramidSpec(),
                 embedding_dim: int = 256, rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = spec
        self.out_dim = embedding_dim
        self.fc = Linear(spec.num_bins * in_channels, embedding_dim, rng)
        self._cache = None

    def pooled(self, fmap: np.ndarray) -> np.ndarray:
        """Concatenated per-bin means, before the projection."""
        return np.concatenate([tap_forward(b) for b in spd_partition(fmap, self.spec)], axis=-1)

    def forward(self, fmap):
        _, H, W, _ = fmap.shape
        self._cache = (fmap.shape, bin_slices(H, W, self.spec))
        return self.fc.forward(self.pooled(fmap))

    def backward(self, dout):
        shape, slices = self._cache
        D = shape[-1]
        dp = self.fc.backward(dout)
        dmap = np.zeros(shape)
        for i, (hs, ws) in enumerate(slices):
            sub = dmap[:, hs, ws]
            dmap[:, hs, ws] += tap_backward(dp[:, i * D:(i + 1) * D], sub.shape)
        return dmap


class SPEHead(Module):
    """Spatial pyramid encoding.

    Per bin: shared 1x1 channel reduction, shared-codebook LDE, L2 normalization
    of the C*P supervector (scaled to radius sqrt(C*P), so the projection sees
    unit-RMS inputs) and a shared projection to ``embedding_dim``. The bin
    embeddings are concatenated and mapped to ``embedding_dim`` by a final FC.
    With a single-level {1x1} pyramid this is a plain LDE head.
    """

    def __init__(self, in_channels: int, spec: PyramidSpec = PyramidSpec(),
                 reduced_channels: int = 64, num_codewords: int = 64,
                 embedding_dim: int = 256, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.spec = spec
        self.in_channels = in_channels
        self.out_dim = embedding_dim
        self.reduce = Linear(in_channels, reduced_channels, rng)
        self.codebook = Codebook(num_codewords, reduced_channels, rng)
        self.bin_fc = Linear(num_codewords * reduced_channels, embedding_dim, rng)
        self.final_fc = Linear(spec.num_bins * embedding_dim, embedding_dim, rng)
        self._cache = None

    @property
    def supervector_dim(self) -> int:
        return self.codebook.mu.size

    @property
    def radius(self) -> float:
        """Normalized supervectors are scaled to unit RMS per dimension."""
        return float(np.sqrt(self.supervector_dim))

    def supervectors(self, fmap: np.ndarray) -> np.ndarray:
        """Per-bin supervectors before normalization, shape (num_bins, B, C*P)."""
        z = self.reduce.forward(fmap)
        B = z.shape[0]
        mu, s_raw = self.codebook.params["mu"], self.codebook.params["s_raw"]
        out = []
        for sub in spd_partition(z, self.spec):
            E, _ = lde_encode(sub.reshape(B, -1, z.shape[-1]), mu, s_raw)
            out.append(E.reshape(B, -1))
        return np.stack(out)

    def forward(self, fmap):
        if fmap.ndim != 4 or fmap.shape[-1] != self.in_channels:
            raise ShapeError(f"SPE expects (B, H, W, {self.in_channels}), got {fmap.shape}")
        B, H, W, _ = fmap.shape
        slices = bin_slices(H, W, self.spec)
        z = self.reduce.forward(fmap)
        P = z.shape[-1]
        mu, s_raw = self.codebook.params["mu"], self.codebook.params["s_raw"]
        lde_caches, norm_caches, units = [], [], []
        for hs, ws in slices:
            X = z[:, hs, ws].reshape(B, -1, P)
            E, c = lde_encode(X, mu, s_raw)
            u, nc = l2_normalize(E.reshape(B, -1))
            lde_caches.append(c)
            norm_caches.append(nc)
            units.append(u)
        h = self.bin_fc.forward(np.stack(units) * self.radius)  # bins, B, E
        cat = h.transpose(1, 0, 2).reshape(B, -1)
        self._cache = (z.shape, slices, lde_caches, norm_caches, h.shape)
        return self.final_fc.forward(cat)

    def backward(self, dout):
        zshape, slices, lde_caches, norm_caches, hshape = self._cache
        nb, B, E = hshape
        dcat = self.final_fc.backward(dout)
        dh = dcat.reshape(B, nb, E).transpose(1, 0, 2)
        dunits = self.bin_fc.backward(dh) * self.radius
        dz = np.zeros(zshape)
        cb = self.codebook
        C, P = cb.mu.shape
        for i, (hs, ws) in enumerate(slices):
            dE = l2_normalize_backward(dunits[i], norm_caches[i]).reshape(B, C, P)
            dX, dmu, ds_raw = lde_encode_backward(dE, lde_caches[i])
            cb.grads["mu"] += dmu
            cb.grads["s_raw"] += ds_raw
            sub = dz[:, hs, ws]
            dz[:, hs, ws] += dX.reshape(sub.shape)
        return self.reduce.backward(dz)


def spp_forward(fmap: np.ndarray, head: SPPHead) -> np.ndarray:
    return head.forward(fmap)


def spe_forward(fmap: np.ndarray, head: SPEHead) -> np.ndarray:
    return head.forward(fmap)


def build_head(kind: str, in_channels: int, spec: PyramidSpec | None = None,
               embedding_dim: int = 256, reduced_channels: int = 64,
               num_codewords: int = 64, rng: np.random.Generator | None = None) -> Module:
    """Construct a pooling head by name: tap, spp, lde or spe."""
    spec = spec or PyramidSpec()
    if kind == "tap":
        return TAPHead(in_channels)
    if kind == "spp":
        return SPPHead(in_channels, spec, embedding_dim, rng)
    if kind == "lde":
        return SPEHead(in_channels, PyramidSpec(((1, 1),)), reduced_channels,
                       num_codewords, embedding_dim, rng)
    if kind == "spe":
        return SPEHead(in_channels, spec, reduced_channels, num_codewords, embedding_dim, rng)
    raise ValueError(f"unknown pooling '{kind}' (expected tap, spp, lde or spe)")
