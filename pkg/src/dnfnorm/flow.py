"""Masked autoregressive flow.

Each block permutes its input and applies an affine autoregressive map in the
normalizing direction::

    u_j = (v_j - mu_j(v_<j)) * exp(-alpha_j(v_<j))

where ``v`` is the permuted input and ``mu``, ``alpha`` come from a masked
three-hidden-layer ReLU network.  ``normalize`` maps data to latent codes in a
single pass per block; ``generate`` inverts a block coordinate by coordinate.
All routines accept a single vector or a batch of row vectors.
"""

import io
import struct

import numpy as np

from .errors import (DimensionMismatchError, NonFiniteGradientError, NumericOverflowError,
                     ParseError)

ALPHA_CLAMP = 7.0
FLOW_MAGIC = b"DNF1"
FORMAT_VERSION = 1

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "Wmu", "bmu", "Walpha", "balpha")
_MASK_INDEX = {"W1": 0, "W2": 1, "W3": 2, "Wmu": 3, "Walpha": 4}


def made_masks(dim, hidden_sizes):
    """Binary masks for a MADE network with inputs ordered 1..dim.

    Hidden unit ``k`` of every layer gets degree ``k mod (dim-1) + 1``; output
    ``j`` (1-based) may only see hidden units of degree < j, so outputs depend
    strictly on earlier inputs.
    """
    in_deg = np.arange(1, dim + 1)
    degs = [np.arange(h) % max(dim - 1, 1) + 1 for h in hidden_sizes]
    masks = []
    prev = in_deg
    for d in degs:
        masks.append((d[:, None] >= prev[None, :]).astype(np.float64))
        prev = d
    out_mask = (in_deg[:, None] > prev[None, :]).astype(np.float64)
    return masks, out_mask


class MaskedConditioner:
    """Masked MLP producing shift ``mu`` and log-scale ``alpha`` for every coordinate."""

    def __init__(self, dim, hidden_sizes=None, params=None, rng=None):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.hidden_sizes = tuple(hidden_sizes) if hidden_sizes else (dim, dim, dim)
        if len(self.hidden_sizes) != 3:
            raise ValueError("conditioner has exactly three hidden layers")
        masks, out_mask = made_masks(dim, self.hidden_sizes)
        self.masks = masks + [out_mask, out_mask]
        if params is None:
            params = self._init_params(rng)
        self.params = {name: np.array(params[name], dtype=np.float64) for name in PARAM_NAMES}
        for (name, shape) in zip(PARAM_NAMES, self.param_shapes()):
            if self.params[name].shape != shape:
                raise DimensionMismatchError(
                    f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        # masked-out weights are held at exactly zero
        for name, i in _MASK_INDEX.items():
            self.params[name] *= self.masks[i]

    def param_shapes(self):
        h1, h2, h3 = self.hidden_sizes
        D = self.dim
        return [(h1, D), (h1,), (h2, h1), (h2,), (h3, h2), (h3,), (D, h3), (D,), (D, h3), (D,)]

    def _init_params(self, rng):
        p = {}
        sizes = (self.dim,) + self.hidden_sizes
        for i in range(3):
            fan_in = sizes[i]
            shape = (sizes[i + 1], fan_in)
            if rng is None:
                p[f"W{i + 1}"] = np.zeros(shape)
            else:
                p[f"W{i + 1}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
            p[f"b{i + 1}"] = np.zeros(sizes[i + 1])
        h3 = self.hidden_sizes[2]
        p["Wmu"] = np.zeros((self.dim, h3))
        p["bmu"] = np.zeros(self.dim)
        p["Walpha"] = np.zeros((self.dim, h3))
        p["balpha"] = np.zeros(self.dim)
        return p

    def forward(self, v, cache=False):
        """Return ``(mu, alpha)`` for a batch ``v`` of shape (N, D).

        With ``cache=True`` also returns the intermediates the backward pass
        needs.
        """
        p = self.params
        # overflow surfaces as non-finite output, checked by the caller
        with np.errstate(over="ignore", invalid="ignore"):
            a1 = v @ p["W1"].T + p["b1"]
            h1 = np.maximum(a1, 0.0)
            a2 = h1 @ p["W2"].T + p["b2"]
            h2 = np.maximum(a2, 0.0)
            a3 = h2 @ p["W3"].T + p["b3"]
            h3 = np.maximum(a3, 0.0)
            mu = h3 @ p["Wmu"].T + p["bmu"]
            alpha_raw = h3 @ p["Walpha"].T + p["balpha"]
        alpha = np.clip(alpha_raw, -ALPHA_CLAMP, ALPHA_CLAMP)
        if not cache:
            return mu, alpha
        return mu, alpha, (v, a1, h1, a2, h2, a3, h3, alpha_raw)

    def backward(self, cached, d_mu, d_alpha):
        """Backpropagate output gradients; returns ``(param_grads, d_v)``."""
        p = self.params
        v, a1, h1, a2, h2, a3, h3, alpha_raw = cached
        inside = (alpha_raw > -ALPHA_CLAMP) & (alpha_raw < ALPHA_CLAMP)
        d_araw = d_alpha * inside
        g = {}
        g["Wmu"] = (d_mu.T @ h3) * self.masks[3]
        g["bmu"] = d_mu.sum(axis=0)
        g["Walpha"] = (d_araw.T @ h3) * self.masks[4]
        g["balpha"] = d_araw.sum(axis=0)
        d_h3 = d_mu @ p["Wmu"] + d_araw @ p["Walpha"]
        d_a3 = d_h3 * (a3 > 0)
        g["W3"] = (d_a3.T @ h2) * self.masks[2]
        g["b3"] = d_a3.sum(axis=0)
        d_a2 = (d_a3 @ p["W3"]) * (a2 > 0)
        g["W2"] = (d_a2.T @ h1) * self.masks[1]
        g["b2"] = d_a2.sum(axis=0)
        d_a1 = (d_a2 @ p["W2"]) * (a1 > 0)
        g["W1"] = (d_a1.T @ v) * self.masks[0]
        g["b1"] = d_a1.sum(axis=0)
        d_v = d_a1 @ p["W1"]
        return g, d_v

    def copy(self):
        return MaskedConditioner(self.dim, self.hidden_sizes,
                                 params={k: v.copy() for k, v in self.params.items()})


class MafBlock:
    """One autoregressive affine layer ``u = (v - mu(v)) * exp(-alpha(v))``.

    ``v = x[permutation]`` fixes the autoregressive order; the output is put
    back into the input coordinate order, so a block with zero conditioner
    outputs is the identity whatever its permutation.
    """

    def __init__(self, conditioner, permutation=None):
        D = conditioner.dim
        perm = np.arange(D) if permutation is None else np.asarray(permutation, dtype=np.intp)
        if perm.shape != (D,) or not np.array_equal(np.sort(perm), np.arange(D)):
            raise ValueError("block permutation must be a bijection on 0..D-1")
        self.conditioner = conditioner
        self.permutation = perm
        self.inverse_permutation = np.argsort(perm)

    @property
    def dim(self):
        return self.conditioner.dim

    def normalize(self, x, index=0, cache=False):
        v = x[:, self.permutation]
        if cache:
            mu, alpha, net_cache = self.conditioner.forward(v, cache=True)
        else:
            mu, alpha = self.conditioner.forward(v)
        with np.errstate(over="ignore", invalid="ignore"):
            u = (v - mu) * np.exp(-alpha)
        if not np.all(np.isfinite(u)):
            raise NumericOverflowError(index)
        logdet = -alpha.sum(axis=1)
        out = u[:, self.inverse_permutation]
        if cache:
            return out, logdet, (net_cache, mu, alpha, u)
        return out, logdet

    def generate(self, u, index=0):
        u = u[:, self.permutation]
        N, D = u.shape
        v = np.zeros_like(u)
        for j in range(D):
            mu, alpha = self.conditioner.forward(v)
            with np.errstate(over="ignore", invalid="ignore"):
                v[:, j] = mu[:, j] + u[:, j] * np.exp(alpha[:, j])
        if not np.all(np.isfinite(v)):
            raise NumericOverflowError(index)
        return v[:, self.inverse_permutation]

    def backward(self, cached, d_u, d_logdet):
        net_cache, mu, alpha, u = cached
        d_u = d_u[:, self.permutation]
        scale = np.exp(-alpha)
        d_mu = -d_u * scale
        d_alpha = -d_u * u - d_logdet[:, None]
        grads, d_v_net = self.conditioner.backward(net_cache, d_mu, d_alpha)
        d_v = d_u * scale + d_v_net
        d_x = np.empty_like(d_v)
        d_x[:, self.permutation] = d_v
        return grads, d_x

    def copy(self):
        return MafBlock(self.conditioner.copy(), self.permutation.copy())


class FlowStack:
    """Ordered MAF blocks; block 0 is applied first when normalizing."""

    def __init__(self, blocks):
        if not blocks:
            raise ValueError("a flow needs at least one block")
        dims = {b.dim for b in blocks}
        if len(dims) != 1:
            raise DimensionMismatchError(f"blocks disagree on dimension: {sorted(dims)}")
        self.blocks = list(blocks)
        self.dim = blocks[0].dim

    @classmethod
    def create(cls, dim, n_blocks=10, hidden_sizes=None, rng=None):
        """Fresh stack that is exactly the identity map.

        Hidden weights are drawn from N(0, 1/fan_in) when ``rng`` is given;
        output heads start at zero.  Consecutive blocks alternate between the
        natural and the reversed coordinate order.
        """
        blocks = []
        for i in range(n_blocks):
            perm = np.arange(dim) if i % 2 == 0 else np.arange(dim)[::-1].copy()
            blocks.append(MafBlock(MaskedConditioner(dim, hidden_sizes, rng=rng), perm))
        return cls(blocks)

    def __len__(self):
        return len(self.blocks)

    def copy(self):
        return FlowStack([b.copy() for b in self.blocks])

    # flat parameter view, used by the optimizer and by gradient checks

    def num_params(self):
        return sum(v.size for b in self.blocks for v in b.conditioner.params.values())

    def get_flat(self):
        return np.concatenate([b.conditioner.params[n].ravel()
                               for b in self.blocks for n in PARAM_NAMES])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params():
            raise DimensionMismatchError(
                f"expected {self.num_params()} parameters, got {flat.size}")
        pos = 0
        for b in self.blocks:
            c = b.conditioner
            for name in PARAM_NAMES:
                shape = c.params[name].shape
                size = int(np.prod(shape))
                val = flat[pos:pos + size].reshape(shape)
                if name in _MASK_INDEX:
                    val = val * c.masks[_MASK_INDEX[name]]
                c.params[name] = val.copy()
                pos += size

    def param_paths(self):
        """Human-readable name of every flat parameter entry."""
        paths = []
        for bi, b in enumerate(self.blocks):
            for name in PARAM_NAMES:
                for idx in np.ndindex(b.conditioner.params[name].shape):
                    paths.append(f"block{bi}.{name}{list(idx)}")
        return paths

    # transforms

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise DimensionMismatchError(f"expected vectors of length {self.dim}, got {x.shape}")
        if not np.all(np.isfinite(X)):
            raise NumericOverflowError(-1, "non-finite input")
        return X, single

    def normalize(self, x):
        """Map data to latent codes.

        Returns ``(z, logdet)`` where ``logdet`` is ln|det dz/dx|.
        """
        X, single = self._check(x)
        logdet = np.zeros(X.shape[0])
        h = X
        for i, b in enumerate(self.blocks):
            h, ld = b.normalize(h, index=i)
            logdet = logdet + ld
        if single:
            return h[0], float(logdet[0])
        return h, logdet

    def normalize_trace(self, x):
        """Per-block outputs and log-determinants of ``normalize``."""
        X, _ = self._check(x)
        outs, lds = [], []
        h = X
        for i, b in enumerate(self.blocks):
            h, ld = b.normalize(h, index=i)
            outs.append(h)
            lds.append(ld)
        return outs, lds

    def generate(self, z):
        Z, single = self._check(z)
        h = Z
        for i in range(len(self.blocks) - 1, -1, -1):
            h = self.blocks[i].generate(h, index=i)
        return h[0] if single else h

    def forward_with_cache(self, X):
        X, _ = self._check(X)
        caches = []
        logdet = np.zeros(X.shape[0])
        h = X
        for i, b in enumerate(self.blocks):
            h, ld, c = b.normalize(h, index=i, cache=True)
            caches.append(c)
            logdet = logdet + ld
        return h, logdet, caches

    def backward(self, caches, d_z, d_logdet):
        """Gradient of ``sum(d_z * z) + sum(d_logdet * logdet)``.

        Returns ``(flat_param_grad, d_x)``.
        """
        d_z = np.asarray(d_z, dtype=np.float64)
        d_logdet = np.asarray(d_logdet, dtype=np.float64)
        per_block = [None] * len(self.blocks)
        g = d_z
        for i in range(len(self.blocks) - 1, -1, -1):
            grads, g = self.blocks[i].backward(caches[i], g, d_logdet)
            per_block[i] = np.concatenate([grads[n].ravel() for n in PARAM_NAMES])
        flat = np.concatenate(per_block)
        bad = np.flatnonzero(~np.isfinite(flat))
        if bad.size:
            raise NonFiniteGradientError(int(bad[0]), self.param_paths()[int(bad[0])])
        return flat, g


def flow_backward(stack, x, upstream_dz, upstream_dlogdet):
    """Gradients of ``<upstream_dz, z> + upstream_dlogdet * logdet`` for ``z, logdet = normalize(x)``.

    Works on a single vector or a batch (then ``upstream_dlogdet`` is per row).
    Returns ``(flat_param_grad, d_x)`` with the same batch shape as ``x``.
    """
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
        upstream_dz = np.asarray(upstream_dz, dtype=np.float64)[None, :]
        upstream_dlogdet = np.array([upstream_dlogdet], dtype=np.float64)
    _, _, caches = stack.forward_with_cache(X)
    g, dx = stack.backward(caches, upstream_dz, np.broadcast_to(upstream_dlogdet, (X.shape[0],)))
    return g, (dx[0] if single else dx)


def normalize(stack, x):
    return stack.normalize(x)


def generate(stack, z):
    return stack.generate(z)


# serialization

def write_flow(stream, stack):
    """Binary layout (little-endian)::

        "DNF1" u32 version u32 dim u32 n_blocks
        per block: u32 perm[dim], u32 h1 h2 h3, then f64 parameters in
        W1 b1 W2 b2 W3 b3 Wmu bmu Walpha balpha order (row-major)
    """
    stream.write(FLOW_MAGIC)
    stream.write(struct.pack("<III", FORMAT_VERSION, stack.dim, len(stack.blocks)))
    for b in stack.blocks:
        stream.write(np.asarray(b.permutation, dtype="<u4").tobytes())
        stream.write(struct.pack("<III", *b.conditioner.hidden_sizes))
        for name in PARAM_NAMES:
            stream.write(np.ascontiguousarray(b.conditioner.params[name], dtype="<f8").tobytes())


def _read_exact(stream, n, path):
    data = stream.read(n)
    if len(data) != n:
        raise ParseError("unexpected end of file", path, stream.tell())
    return data


def read_flow(stream, path=None):
    magic = stream.read(4)
    if magic != FLOW_MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {FLOW_MAGIC.decode()!r}", path, 0)
    version, dim, n_blocks = struct.unpack("<III", _read_exact(stream, 12, path))
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported flow format version {version}", path, 4)
    blocks = []
    for _ in range(n_blocks):
        perm = np.frombuffer(_read_exact(stream, 4 * dim, path), dtype="<u4").astype(np.intp)
        hidden = struct.unpack("<III", _read_exact(stream, 12, path))
        shell = MaskedConditioner(dim, hidden)
        params = {}
        for name, shape in zip(PARAM_NAMES, shell.param_shapes()):
            n = int(np.prod(shape))
            params[name] = np.frombuffer(_read_exact(stream, 8 * n, path), dtype="<f8").reshape(shape)
        blocks.append(MafBlock(MaskedConditioner(dim, hidden, params=params), perm))
    return FlowStack(blocks)


def dump_flow_text(stack):
    """Plain-text rendering of a flow, for inspection and diffs."""
    out = io.StringIO()
    out.write(f"DNF1 text dim={stack.dim} blocks={len(stack.blocks)}\n")
    for i, b in enumerate(stack.blocks):
        c = b.conditioner
        out.write(f"block {i} permutation {' '.join(map(str, b.permutation))}\n")
        out.write(f"block {i} hidden {' '.join(map(str, c.hidden_sizes))}\n")
        for name in PARAM_NAMES:
            vals = " ".join(f"{v:.17g}" for v in c.params[name].ravel())
            out.write(f"block {i} {name} {' '.join(map(str, c.params[name].shape))} : {vals}\n")
    return out.getvalue()
