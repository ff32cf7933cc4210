"""Morphable models: a PCA-based linear model and an MLP decoder.

Both map a low-dimensional latent vector to a flat feature vector (stacked
vertex coordinates or stacked texels); reshaping to (Q, 3) or (rows, cols, 3)
is the caller's business.
"""

import json
from dataclasses import dataclass, field

import numpy as np


class RankDeficient(ValueError):
    """Requested more PCA components than the data supports."""


@dataclass(frozen=True)
class LinearModel:
    """Mean + orthonormal basis: decode(w) = mean + basis @ w.

    mean: (n,); basis: (n, l) with orthonormal columns; singular_values: (l,)
    singular values of the centered data matrix, largest first.
    """

    mean: np.ndarray
    basis: np.ndarray
    singular_values: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64).ravel()
        b = np.asarray(self.basis, dtype=np.float64)
        s = np.asarray(self.singular_values, dtype=np.float64).ravel()
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "basis", b)
        object.__setattr__(self, "singular_values", s)
        if b.ndim != 2 or b.shape[0] != m.shape[0] or b.shape[1] != s.shape[0]:
            raise ValueError("mean/basis/singular_values shapes disagree")

    @property
    def latent_dim(self):
        return self.basis.shape[1]


def pca_fit(samples, num_components):
    """Fit a LinearModel to (k, n) row-wise samples via SVD.

    Components are ordered by decreasing singular value.  Each basis column's
    sign is fixed so its largest-magnitude entry is positive, which makes the
    fit reproducible across SVD implementations.  Raises RankDeficient when
    the centered data cannot support num_components directions.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be a (k, n) matrix")
    k, n = x.shape
    if num_components < 1 or num_components > min(k, n):
        raise RankDeficient(
            f"cannot extract {num_components} components from {k} samples of dim {n}"
        )
    mean = x.mean(axis=0)
    xc = x - mean
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    if s[num_components - 1] <= 1e-10 * max(s[0], 1e-300):
        raise RankDeficient(
            f"data rank below {num_components} (singular value underflow)"
        )
    basis = vt[:num_components].T.copy()
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(num_components)])
    basis *= flip
    return LinearModel(mean=mean, basis=basis, singular_values=s[:num_components])


def linear_decode(model, w):
    """mean + basis @ w; w may be (l,) or a batch (k, l)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        return model.mean + model.basis @ w
    return model.mean + w @ model.basis.T


def linear_encode(model, x):
    """Least-squares latent for x: basis.T @ (x - mean).  Batched like decode."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return model.basis.T @ (x - model.mean)
    return (x - model.mean) @ model.basis


def save_linear(path, model):
    """Binary format: magic, u32 n and l, then mean, basis, singular values."""
    with open(path, "wb") as fh:
        fh.write(b"LMM1")
        n, l = model.basis.shape
        fh.write(np.array([n, l], dtype="<u4").tobytes())
        fh.write(model.mean.astype("<f8").tobytes())
        fh.write(model.basis.astype("<f8").tobytes())
        fh.write(model.singular_values.astype("<f8").tobytes())


def load_linear(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != b"LMM1":
        raise ValueError(f"{path}: not a linear model file")
    n, l = (int(v) for v in np.frombuffer(blob, dtype="<u4", count=2, offset=4))
    off = 12
    mean = np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy()
    off += 8 * n
    basis = np.frombuffer(blob, dtype="<f8", count=n * l, offset=off).reshape(n, l)
    off += 8 * n * l
    sv = np.frombuffer(blob, dtype="<f8", count=l, offset=off).copy()
    if len(blob) != off + 8 * l:
        raise ValueError(f"{path}: truncated or oversized linear model")
    return LinearModel(mean=mean, basis=basis.copy(), singular_values=sv)


def elu(x):
    """Exponential linear unit, alpha = 1."""
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


@dataclass
class MlpDecoder:
    """Fully connected decoder; eLU on hidden layers, linear final layer.

    layers: list of (weight (out, in), bias (out,)) pairs.
    """

    layers: list

    @staticmethod
    def create(sizes, seed=0):
        """Xavier-uniform init: weights in +/- sqrt(6 / (fan_in + fan_out))."""
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            layers.append((w, np.zeros(fan_out)))
        return MlpDecoder(layers=layers)

    @property
    def input_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self):
        return self.layers[-1][0].shape[0]


def mlp_forward(decoder, x):
    """Evaluate the decoder; x is (l,) or a batch (k, l).

    Returns (output, cache); pass the cache to mlp_backward.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = np.atleast_2d(x)
    pre = []
    acts = [a]
    last = len(decoder.layers) - 1
    for i, (w, b) in enumerate(decoder.layers):
        z = a @ w.T + b
        pre.append(z)
        a = z if i == last else elu(z)
        acts.append(a)
    out = acts[-1][0] if single else acts[-1]
    return out, (pre, acts, single)


def mlp_backward(decoder, cache, d_out):
    """Reverse-mode gradients from d_out (same shape as the forward output).

    Returns (param_grads, d_input): param_grads is a list of (dW, db) pairs
    aligned with decoder.layers; gradients are summed over the batch.
    """
    pre, acts, single = cache
    g = np.atleast_2d(np.asarray(d_out, dtype=np.float64))
    grads = [None] * len(decoder.layers)
    last = len(decoder.layers) - 1
    for i in range(last, -1, -1):
        w, _ = decoder.layers[i]
        if i != last:
            g = g * elu_grad(pre[i])
        grads[i] = (g.T @ acts[i], g.sum(axis=0))
        g = g @ w
    return grads, (g[0] if single else g)


def save_mlp(path, decoder):
    """Binary format: magic, u32 layer count and sizes, then per-layer W and b."""
    sizes = [decoder.input_dim] + [w.shape[0] for w, _ in decoder.layers]
    with open(path, "wb") as fh:
        fh.write(b"MLP1")
        fh.write(np.array([len(sizes)], dtype="<u4").tobytes())
        fh.write(np.array(sizes, dtype="<u4").tobytes())
        for w, b in decoder.layers:
            fh.write(w.astype("<f8").tobytes())
            fh.write(b.astype("<f8").tobytes())


def load_mlp(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != b"MLP1":
        raise ValueError(f"{path}: not an MLP decoder file")
    nsizes = int(np.frombuffer(blob, dtype="<u4", count=1, offset=4)[0])
    sizes = np.frombuffer(blob, dtype="<u4", count=nsizes, offset=8).astype(int)
    off = 8 + 4 * nsizes
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(blob, dtype="<f8", count=fan_out * fan_in, offset=off)
        off += 8 * fan_out * fan_in
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        layers.append((w.reshape(fan_out, fan_in).copy(), b.copy()))
    if len(blob) != off:
        raise ValueError(f"{path}: truncated or oversized MLP file")
    return MlpDecoder(layers=layers)


@dataclass
class LatentParams:
    """Shape and texture latent vectors for one subject."""

    shape: np.ndarray = field(default_factory=lambda: np.zeros(160))
    texture: np.ndarray = field(default_factory=lambda: np.zeros(160))

    def __post_init__(self):
        self.shape = np.asarray(self.shape, dtype=np.float64).ravel()
        self.texture = np.asarray(self.texture, dtype=np.float64).ravel()


def save_latents(path, params):
    doc = {"shape": params.shape.tolist(), "texture": params.texture.tolist()}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_latents(path):
    with open(path, "r") as fh:
        doc = json.load(fh)
    return LatentParams(shape=np.array(doc["shape"]), texture=np.array(doc["texture"]))
