"""Frozen toy image encoders, their additive adapters, and category embeddings.

Two miniature encoder families share one adapter interface. The patch
transformer splits the image into non-overlapping patches, maps each
through a frozen linear embedding, and runs a stack of attention blocks;
the adapter adds one learnable token per patch immediately before a
configurable block. The conv encoder runs a 3x3 conv stack; each adapter
token is tiled s x s and added to its spatial patch of the first feature
map, so an s x s neighbourhood shares one token.

Weights are drawn from a seeded generator at construction, marked
read-only, and never change afterwards; adaptation only ever touches the
adapter tokens. All forward code routes through the graph primitives in
:mod:`ssam.numerics`, so the same functions serve both the plain-array
evaluation path and the reverse-mode gradient path.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as num
from .errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    NumericError,
)

EMB_MAGIC = b"SSAMEMB1"


# ---------------------------------------------------------------------------
# batched graph ops (images are constants; only adapter tokens carry grad)


def _tokens_linear(x, w: np.ndarray):
    """(..., D1) @ (D1, D2) applied to every token."""
    xv = num.value_of(x)
    return num.custom_node("tokens_linear", xv @ w, ((x, lambda g: g @ w.T),))


def _batch_matmul(a, b):
    """(B, N, K) @ (B, K, M)."""
    av, bv = num.value_of(a), num.value_of(b)
    return num.custom_node(
        "batch_matmul",
        av @ bv,
        (
            (a, lambda g: g @ bv.swapaxes(-1, -2)),
            (b, lambda g: av.swapaxes(-1, -2) @ g),
        ),
    )


def _batch_matmul_nt(a, b):
    """(B, N, D) @ (B, M, D)^T per batch element."""
    av, bv = num.value_of(a), num.value_of(b)
    return num.custom_node(
        "batch_matmul_nt",
        av @ bv.swapaxes(-1, -2),
        (
            (a, lambda g: g @ bv),
            (b, lambda g: g.swapaxes(-1, -2) @ av),
        ),
    )


def _softmax_last(x):
    xv = num.value_of(x)
    z = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return num.custom_node("softmax_last", y, ((x, vjp),))


def _center_last(x):
    """Subtract the per-token feature mean (layer-norm stand-in)."""
    xv = num.value_of(x)
    out = xv - xv.mean(axis=-1, keepdims=True)

    def vjp(g):
        return g - g.mean(axis=-1, keepdims=True)

    return num.custom_node("center_last", out, ((x, vjp),))


def _conv3x3_same(x, w: np.ndarray):
    """3x3 same-padding conv, (B, C, H, W) x (D, C, 3, 3) -> (B, D, H, W).

    Forward is one im2col matmul; this path sits inside finite-difference
    loops, so per-call overhead matters more than memory.
    """
    xv = num.value_of(x)
    bsz, cin, h, wd = xv.shape
    dout = w.shape[0]
    pad = np.pad(xv, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * h * wd, cin * 9)
    out = (cols @ w.reshape(dout, cin * 9).T).reshape(bsz, h, wd, dout)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def vjp(g):
        gpad = np.zeros_like(pad)
        for i in range(3):
            for j in range(3):
                gpad[:, :, i : i + h, j : j + wd] += np.einsum(
                    "dc,bdhw->bchw", w[:, :, i, j], g
                )
        return gpad[:, :, 1:-1, 1:-1]

    return num.custom_node("conv3x3_same", out, ((x, vjp),))


def tile_tokens(tokens, grid: tuple[int, int], s: int):
    """Tile tokens (N, D) into a (D, grid_h*s, grid_w*s) map.

    Token i (row-major over the grid) fills the s x s block at grid cell i
    in every channel, so the blocks partition the spatial extent: each
    coordinate receives exactly one token.
    """
    gh, gw = grid
    tv = num.value_of(tokens)
    n, d = tv.shape
    if n != gh * gw:
        raise DimensionError(f"tile_tokens: {n} tokens cannot fill a {gh}x{gw} grid")
    planes = tv.reshape(gh, gw, d).transpose(2, 0, 1)
    out = np.repeat(np.repeat(planes, s, axis=1), s, axis=2)

    def vjp(g):
        pooled = g.reshape(d, gh, s, gw, s).sum(axis=(2, 4))
        return pooled.transpose(1, 2, 0).reshape(n, d)

    return num.custom_node("tile_tokens", out, ((tokens, vjp),))


# ---------------------------------------------------------------------------
# adapters


@dataclass
class AdapterParams:
    """Learnable adapter tokens, one D-vector per patch."""

    tokens: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float64)
        if t.ndim != 2:
            raise DimensionError(f"adapter tokens must be N x D, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise NumericError("adapter tokens contain non-finite entries")
        self.tokens = t

    @classmethod
    def zeros(cls, num_tokens: int, dim: int) -> "AdapterParams":
        return cls(np.zeros((num_tokens, dim)))

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def copy(self) -> "AdapterParams":
        return AdapterParams(self.tokens.copy())


def _tokens_of(adapter):
    return adapter.tokens if isinstance(adapter, AdapterParams) else adapter


def apply_adapter_vit(patches, adapter):
    """q_i = p_i + a_i on (..., N, D) patch embeddings."""
    tokens = _tokens_of(adapter)
    pv, tv = num.value_of(patches), num.value_of(tokens)
    if pv.shape[-2:] != tv.shape:
        raise DimensionError(
            f"adapter shape {tv.shape} does not match patches {pv.shape}"
        )
    return num.add(patches, tokens)


def apply_adapter_conv(featmap, adapter, s: int):
    """Add each token, tiled s x s, to its spatial patch of the feature map."""
    tokens = _tokens_of(adapter)
    fv, tv = num.value_of(featmap), num.value_of(tokens)
    d, h, w = fv.shape[-3:]
    if h % s or w % s:
        raise ConfigError(f"feature map {h}x{w} not divisible by patch side {s}")
    grid = (h // s, w // s)
    if tv.shape != (grid[0] * grid[1], d):
        raise DimensionError(
            f"adapter shape {tv.shape} does not match grid {grid} with {d} channels"
        )
    return num.add(featmap, tile_tokens(tokens, grid, s))


# ---------------------------------------------------------------------------
# encoders


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class ToyViTEncoder:
    """Patch transformer at desk scale: linear patch embedding, then
    ``num_blocks`` blocks of mean-centered single-head attention and a
    2-layer tanh MLP, mean-pooled over tokens. No class token; pooling is
    the token mean. The adapter is added to the running token matrix
    immediately before block ``insertion_layer`` (``== num_blocks`` means
    after the last block, before pooling)."""

    family = "vit"

    def __init__(
        self,
        image_shape: tuple[int, int, int] = (3, 8, 8),
        patch_grid: tuple[int, int] = (4, 4),
        dim: int = 16,
        num_blocks: int = 3,
        insertion_layer: int = 0,
        seed: int = 0,
    ):
        c, h, w = image_shape
        gr, gc = patch_grid
        if h % gr or w % gc:
            raise ConfigError(
                f"image {h}x{w} not divisible into a {gr}x{gc} patch grid"
            )
        if not 0 <= insertion_layer <= num_blocks:
            raise ConfigError(
                f"insertion_layer {insertion_layer} outside [0, {num_blocks}]"
            )
        self.image_shape = (c, h, w)
        self.patch_grid = (gr, gc)
        self.patch_shape = (h // gr, w // gc)
        self.num_patches = gr * gc
        self.dim = dim
        self.num_blocks = num_blocks
        self.insertion_layer = insertion_layer
        self.seed = seed

        patch_len = c * self.patch_shape[0] * self.patch_shape[1]
        rng = np.random.default_rng(seed)
        self.w_embed = _freeze(rng.normal(0.0, patch_len**-0.5, (patch_len, dim)))
        self.blocks = []
        for _ in range(num_blocks):
            blk = {
                "wq": rng.normal(0.0, dim**-0.5, (dim, dim)),
                "wk": rng.normal(0.0, dim**-0.5, (dim, dim)),
                "wv": rng.normal(0.0, dim**-0.5, (dim, dim)),
                "wo": rng.normal(0.0, dim**-0.5, (dim, dim)),
                "w1": rng.normal(0.0, dim**-0.5, (dim, 2 * dim)),
                "w2": rng.normal(0.0, (2 * dim) ** -0.5, (2 * dim, dim)),
            }
            self.blocks.append({k: _freeze(v) for k, v in blk.items()})
        self._attn_scale = dim**-0.5

    @property
    def adapter_shape(self) -> tuple[int, int]:
        return (self.num_patches, self.dim)

    def new_adapter(self) -> AdapterParams:
        return AdapterParams.zeros(*self.adapter_shape)

    def _weight_arrays(self):
        yield self.w_embed
        for blk in self.blocks:
            for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
                yield blk[name]

    def weights_checksum(self) -> str:
        digest = hashlib.sha256()
        for arr in self._weight_arrays():
            digest.update(arr.tobytes())
        return digest.hexdigest()

    def extract_patch_blocks(self, img: np.ndarray) -> np.ndarray:
        """Raw flattened patches, (N, C*ph*pw), row-major over the grid."""
        arr = self._check_images(img, single=True)
        return self._blocks_of(arr[None])[0]

    def patchify(self, img: np.ndarray) -> np.ndarray:
        """Patch embeddings p_1..p_N, (N, D): flatten then frozen linear map."""
        return self.extract_patch_blocks(img) @ self.w_embed

    def _blocks_of(self, imgs: np.ndarray) -> np.ndarray:
        b = imgs.shape[0]
        c, h, w = self.image_shape
        gr, gc = self.patch_grid
        ph, pw = self.patch_shape
        x = imgs.reshape(b, c, gr, ph, gc, pw).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b, gr * gc, c * ph * pw)

    def _check_images(self, images, single: bool = False) -> np.ndarray:
        arr = np.asarray(images, dtype=np.float64)
        want = self.image_shape if single else (None,) + self.image_shape
        if single:
            ok = arr.shape == self.image_shape
        else:
            ok = arr.ndim == 4 and arr.shape[1:] == self.image_shape
        if not ok:
            raise DimensionError(f"expected images shaped {want}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("images contain non-finite values")
        return arr

    def _check_adapter(self, adapter):
        tokens = _tokens_of(adapter)
        tv = num.value_of(tokens)
        if tv.shape != self.adapter_shape:
            raise DimensionError(
                f"adapter shape {tv.shape} does not match encoder {self.adapter_shape}"
            )
        return tokens

    def _block_forward(self, x, blk):
        xc = _center_last(x)
        q = _tokens_linear(xc, blk["wq"])
        k = _tokens_linear(xc, blk["wk"])
        v = _tokens_linear(xc, blk["wv"])
        scores = num.mul(_batch_matmul_nt(q, k), self._attn_scale)
        mixed = _tokens_linear(_batch_matmul(_softmax_last(scores), v), blk["wo"])
        x = num.add(x, mixed)
        hidden = num.tanh(_tokens_linear(_center_last(x), blk["w1"]))
        return num.add(x, _tokens_linear(hidden, blk["w2"]))

    def encode_batch(self, images, adapter):
        """Encode (B, C, H, W) images to (B, D) features; differentiable in
        the adapter tokens."""
        imgs = self._check_images(images)
        tokens = self._check_adapter(adapter)
        x = self._blocks_of(imgs) @ self.w_embed
        for i, blk in enumerate(self.blocks):
            if i == self.insertion_layer:
                x = apply_adapter_vit(x, tokens)
            x = self._block_forward(x, blk)
        if self.insertion_layer == self.num_blocks:
            x = apply_adapter_vit(x, tokens)
        return num.mean_axis(x, axis=1)

    def encode(self, img, adapter):
        arr = self._check_images(img, single=True)
        out = self.encode_batch(arr[None], adapter)
        return num.reshape(out, (self.dim,))


class ToyConvEncoder:
    """Small conv encoder: a first 3x3 conv produces the hidden map the
    adapter is tiled onto, then two more 3x3 convs (tanh between) and a
    global average pool."""

    family = "conv"

    def __init__(
        self,
        image_shape: tuple[int, int, int] = (3, 8, 8),
        dim: int = 16,
        patch_side: int = 2,
        seed: int = 0,
    ):
        c, h, w = image_shape
        if h % patch_side or w % patch_side:
            raise ConfigError(
                f"image {h}x{w} not divisible by adapter patch side {patch_side}"
            )
        self.image_shape = (c, h, w)
        self.dim = dim
        self.patch_side = patch_side
        self.grid = (h // patch_side, w // patch_side)
        self.num_tokens = self.grid[0] * self.grid[1]
        self.seed = seed

        rng = np.random.default_rng(seed)
        self.w1 = _freeze(rng.normal(0.0, (c * 9) ** -0.5, (dim, c, 3, 3)))
        self.w2 = _freeze(rng.normal(0.0, (dim * 9) ** -0.5, (dim, dim, 3, 3)))
        self.w3 = _freeze(rng.normal(0.0, (dim * 9) ** -0.5, (dim, dim, 3, 3)))

    @property
    def adapter_shape(self) -> tuple[int, int]:
        return (self.num_tokens, self.dim)

    def new_adapter(self) -> AdapterParams:
        return AdapterParams.zeros(*self.adapter_shape)

    def _weight_arrays(self):
        yield self.w1
        yield self.w2
        yield self.w3

    def weights_checksum(self) -> str:
        digest = hashlib.sha256()
        for arr in self._weight_arrays():
            digest.update(arr.tobytes())
        return digest.hexdigest()

    def _check_images(self, images, single: bool = False) -> np.ndarray:
        arr = np.asarray(images, dtype=np.float64)
        if single:
            ok = arr.shape == self.image_shape
        else:
            ok = arr.ndim == 4 and arr.shape[1:] == self.image_shape
        if not ok:
            raise DimensionError(
                f"expected images shaped {self.image_shape}, got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericError("images contain non-finite values")
        return arr

    def encode_batch(self, images, adapter):
        imgs = self._check_images(images)
        tokens = _tokens_of(adapter)
        tv = num.value_of(tokens)
        if tv.shape != self.adapter_shape:
            raise DimensionError(
                f"adapter shape {tv.shape} does not match encoder {self.adapter_shape}"
            )
        z = _conv3x3_same(imgs, self.w1)
        z = apply_adapter_conv(z, tokens, self.patch_side)
        h = num.tanh(z)
        h = num.tanh(_conv3x3_same(h, self.w2))
        h = num.tanh(_conv3x3_same(h, self.w3))
        return num.mean_axis(num.mean_axis(h, axis=3), axis=2)

    def encode(self, img, adapter):
        arr = self._check_images(img, single=True)
        out = self.encode_batch(arr[None], adapter)
        return num.reshape(out, (self.dim,))


# ---------------------------------------------------------------------------
# category embeddings


class CategoryEmbeddings:
    """Fixed matrix T of per-category unit vectors (M x D, one row each).

    Immutable once built. ``payload32`` is the float32 row-major image of
    the matrix used by the binary file format; for loaded instances it is
    kept verbatim so save(load(f)) reproduces f byte for byte.
    """

    def __init__(self, matrix: np.ndarray, source: str, payload32=None):
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2:
            raise DimensionError(f"category matrix must be M x D, got {m.shape}")
        if m.shape[0] < 2:
            raise ConfigError(f"need at least 2 categories, got {m.shape[0]}")
        if not np.all(np.isfinite(m)):
            raise NumericError("category matrix contains non-finite entries")
        norms = np.linalg.norm(m, axis=1)
        if norms.min() <= num.ZERO_NORM_EPS:
            row = int(np.argmin(norms))
            raise DegenerateInputError(f"category row {row} has near-zero norm")
        self.matrix = _freeze(m / norms[:, None])
        self.source = source
        if payload32 is None:
            payload32 = self.matrix.astype("<f4")
        self.payload32 = _freeze(np.asarray(payload32, dtype="<f4"))

    @property
    def num_categories(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def save(self, path) -> None:
        m, d = self.matrix.shape
        with open(path, "wb") as fh:
            fh.write(EMB_MAGIC)
            fh.write(struct.pack("<II", m, d))
            fh.write(self.payload32.tobytes())

    @classmethod
    def load(cls, path) -> "CategoryEmbeddings":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 16:
            raise FormatError(
                f"{path}: header truncated at byte {len(blob)} (need 16 bytes)"
            )
        if blob[:8] != EMB_MAGIC:
            raise FormatError(f"{path}: bad magic at byte 0, got {blob[:8]!r}")
        m, d = struct.unpack_from("<II", blob, 8)
        if m < 2:
            raise FormatError(f"{path}: category count {m} < 2 at byte 8")
        if d < 1:
            raise FormatError(f"{path}: feature dim {d} < 1 at byte 12")
        expected = 16 + 4 * m * d
        if len(blob) != expected:
            raise FormatError(
                f"{path}: payload size mismatch, expected {expected} bytes, "
                f"got {len(blob)} (payload starts at byte 16)"
            )
        payload = np.frombuffer(blob, dtype="<f4", offset=16).reshape(m, d)
        mat = payload.astype(np.float64)
        if not np.all(np.isfinite(mat)):
            flat = int(np.flatnonzero(~np.isfinite(mat))[0])
            raise FormatError(
                f"{path}: non-finite value at byte {16 + 4 * flat}"
            )
        return cls(mat, source="loaded-from-file", payload32=payload)


def embed_categories(num_categories: int, dim: int, seed: int = 0) -> CategoryEmbeddings:
    """Seeded orthonormal category directions (requires M <= D).

    QR of a seeded Gaussian, signs fixed so the result is deterministic;
    orthonormal rows satisfy the pairwise |cos| < 0.5 separation cap by a
    wide margin.
    """
    if num_categories < 2:
        raise ConfigError(f"need at least 2 categories, got {num_categories}")
    if dim < 2:
        raise ConfigError(f"need feature dim >= 2, got {dim}")
    if num_categories > dim:
        raise ConfigError(
            f"cannot pick {num_categories} orthonormal directions in dim {dim}"
        )
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(dim, num_categories))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    t = (q * signs).T
    gram = t @ t.T
    off = np.abs(gram - np.eye(num_categories)).max()
    if off >= 0.5:
        raise ConfigError("category directions insufficiently separated")
    return CategoryEmbeddings(t, source="seeded-random-orthonormal")
