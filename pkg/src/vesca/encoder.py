"""Desk-scale ViT image encoder with hand-written backpropagation.

The encoder maps an ``(H, W, C)`` image in [0, 1] to a fixed-length embedding:
the flattened map of final token states, or their mean with
``pooling="mean"``. Blocks are pre-norm: layer norm,
single-head self-attention, layer norm, two-layer GELU MLP, each with a
residual connection. Adapter-tuned variants insert a zero-initialised residual
MLP after every block. A linear per-token head turns the final token states
into patch-level class logits for the downstream segmentation task.

Everything runs on numpy; the backward pass returns the gradient with respect
to the input pixels and, on request, to every parameter.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import ParameterError, RngState, ShapeError

LOSS_KINDS = ("l1", "l2", "neg_l1")
POOLINGS = ("tokens", "mean")
MODES = ("frozen", "adapter", "full")
_LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class NumericError(ArithmeticError):
    """Non-finite values appeared during a forward or backward pass."""


class TrainingError(RuntimeError):
    """Downstream training diverged."""


@dataclass(frozen=True)
class EncoderSpec:
    image_side: int = 32
    channels: int = 3
    patch_side: int = 4
    embed_dim: int = 32
    num_blocks: int = 2
    mlp_ratio: int = 2
    adapter_dim: int = 8
    num_classes: int = 2
    pooling: str = "tokens"

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ParameterError(f"pooling must be one of {POOLINGS}")
        if self.image_side % self.patch_side:
            raise ParameterError("patch_side must divide image_side")
        for name in ("image_side", "channels", "patch_side", "embed_dim", "num_blocks",
                     "mlp_ratio", "adapter_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_side ** 2 * self.channels

    @property
    def embedding_dim(self) -> int:
        if self.pooling == "mean":
            return self.embed_dim
        return self.num_tokens * self.embed_dim

    @property
    def image_shape(self) -> tuple:
        return (self.image_side, self.image_side, self.channels)

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(spec: EncoderSpec, adapters: bool = False) -> dict:
    """Ordered mapping of parameter name to shape."""
    d, h = spec.embed_dim, spec.embed_dim * spec.mlp_ratio
    shapes = {
        "patch.w": (spec.patch_dim, d),
        "patch.b": (d,),
        "pos": (spec.num_tokens, d),
    }
    for i in range(spec.num_blocks):
        p = f"block{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, h), p + "mlp.b1": (h,),
            p + "mlp.w2": (h, d), p + "mlp.b2": (d,),
        })
        if adapters:
            a = spec.adapter_dim
            shapes.update({
                p + "adapter.w1": (d, a), p + "adapter.b1": (a,),
                p + "adapter.w2": (a, d), p + "adapter.b2": (d,),
            })
    shapes.update({"final.g": (d,), "final.b": (d,),
                   "head.w": (d, spec.num_classes), "head.b": (spec.num_classes,)})
    return shapes


def init_params(spec: EncoderSpec, rng: RngState, adapters: bool = False) -> dict:
    params = {}
    for name, shape in param_shapes(spec, adapters).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            value = np.ones(shape)
        elif name == "pos":
            value = rng.normal(shape, scale=0.1)
        elif len(shape) == 2 and "adapter.w2" not in name:
            value = rng.normal(shape, scale=1.0 / math.sqrt(shape[0]))
        else:
            value = np.zeros(shape)
        params[name] = value.astype(np.float32)
    return params


def add_adapters(spec: EncoderSpec, params: dict, rng: RngState) -> dict:
    """Copy of ``params`` with residual adapters; the output layer is zero."""
    out = {k: v.copy() for k, v in params.items()}
    fresh = init_params(spec, rng, adapters=True)
    for name in param_shapes(spec, adapters=True):
        if "adapter." in name:
            out[name] = fresh[name]
    return {k: out[k] for k in param_shapes(spec, adapters=True)}


# --- layer primitives -----------------------------------------------------

def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _sum_bt(x):
    return x.reshape(-1, x.shape[-1]).sum(0)


def _matgrad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


class Encoder:
    """Surrogate image encoder ``f``.

    Args:
        spec: architecture description.
        params: name -> array mapping as produced by :func:`init_params`.
        dtype: compute precision. Parameters are stored as float32; passing
            ``np.float64`` runs the same weights in double precision.
    """

    def __init__(self, spec: EncoderSpec, params: dict, dtype=np.float32):
        self.spec = spec
        self.adapters = any("adapter." in k for k in params)
        expected = param_shapes(spec, self.adapters)
        if set(expected) != set(params):
            raise ShapeError("parameter names do not match the encoder spec")
        for k, shape in expected.items():
            if tuple(params[k].shape) != shape:
                raise ShapeError(f"{k}: expected shape {shape}, got {params[k].shape}")
            if not np.all(np.isfinite(params[k])):
                raise NumericError(f"non-finite weights in {k}")
        self.params = {k: np.asarray(params[k], dtype=np.float32) for k in expected}
        self.dtype = np.dtype(dtype)
        self._p = {k: v.astype(self.dtype) for k, v in self.params.items()}

    def with_dtype(self, dtype) -> "Encoder":
        return type(self)(self.spec, self.params, dtype)

    # --- layout helpers ---------------------------------------------------

    def patchify(self, x):
        s, g = self.spec.patch_side, self.spec.grid
        b = x.shape[0]
        x = x.reshape(b, g, s, g, s, self.spec.channels).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, self.spec.patch_dim)

    def unpatchify(self, t):
        s, g = self.spec.patch_side, self.spec.grid
        b = t.shape[0]
        t = t.reshape(b, g, g, s, s, self.spec.channels).transpose(0, 1, 3, 2, 4, 5)
        return t.reshape(b, g * s, g * s, self.spec.channels)

    def _batch(self, images):
        x = np.asarray(images)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != self.spec.image_shape:
            raise ShapeError(f"image shape {x.shape[1:]} != {self.spec.image_shape}")
        return x.astype(self.dtype, copy=False), single

    # --- forward ----------------------------------------------------------

    def _ln(self, x, g, b):
        mu = x.mean(-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + _LN_EPS)
        xh = xc * inv
        return xh * g + b, (xh, inv, g)

    def _ln_back(self, dy, cache):
        xh, inv, g = cache
        dxh = dy * g
        n = xh.shape[-1]
        dx = inv * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
        return dx, _sum_bt(dy * xh), _sum_bt(dy)

    def _gelu_grad(self, x, t):
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)

    def _mlp(self, x, w1, b1, w2, b2):
        hpre = x @ w1 + b1
        h, t = _gelu(hpre)
        return h @ w2 + b2, (x, hpre, t, h)

    def _mlp_back(self, dy, cache, w1, w2, want):
        x, hpre, t, h = cache
        dh = dy @ w2.T
        dhpre = dh * self._gelu_grad(hpre, t)
        dx = dhpre @ w1.T
        grads = None
        if want:
            grads = (_matgrad(x, dhpre), _sum_bt(dhpre), _matgrad(h, dy), _sum_bt(dy))
        return dx, grads

    def _attn(self, x, p):
        q = x @ p["attn.wq"] + p["attn.bq"]
        k = x @ p["attn.wk"] + p["attn.bk"]
        v = x @ p["attn.wv"] + p["attn.bv"]
        scale = 1.0 / math.sqrt(self.spec.embed_dim)
        a = _softmax((q @ k.transpose(0, 2, 1)) * self.dtype.type(scale))
        o = a @ v
        return o @ p["attn.wo"] + p["attn.bo"], (x, q, k, v, a, o, scale)

    def _attn_back(self, dy, cache, p, want):
        x, q, k, v, a, o, scale = cache
        do = dy @ p["attn.wo"].T
        da = do @ v.transpose(0, 2, 1)
        dv = a.transpose(0, 2, 1) @ do
        ds = a * (da - (da * a).sum(-1, keepdims=True)) * self.dtype.type(scale)
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        dx = dq @ p["attn.wq"].T + dk @ p["attn.wk"].T + dv @ p["attn.wv"].T
        grads = None
        if want:
            grads = {
                "attn.wq": _matgrad(x, dq), "attn.bq": _sum_bt(dq),
                "attn.wk": _matgrad(x, dk), "attn.bk": _sum_bt(dk),
                "attn.wv": _matgrad(x, dv), "attn.bv": _sum_bt(dv),
                "attn.wo": _matgrad(o, dy), "attn.bo": _sum_bt(dy),
            }
        return dx, grads

    def tokens(self, images, keep_cache: bool = False):
        """Final (layer-normed) token states, shape ``(B, T, D)``."""
        x, single = self._batch(images)
        P = self._p
        caches = []
        patches = self.patchify(x)
        z = patches @ P["patch.w"] + P["patch.b"] + P["pos"]
        for i in range(self.spec.num_blocks):
            p = {k[len(f"block{i}."):]: v for k, v in P.items() if k.startswith(f"block{i}.")}
            h1, c_ln1 = self._ln(z, p["ln1.g"], p["ln1.b"])
            a, c_attn = self._attn(h1, p)
            z = z + a
            h2, c_ln2 = self._ln(z, p["ln2.g"], p["ln2.b"])
            m, c_mlp = self._mlp(h2, p["mlp.w1"], p["mlp.b1"], p["mlp.w2"], p["mlp.b2"])
            z = z + m
            c_ad = None
            if self.adapters:
                ad, c_ad = self._mlp(z, p["adapter.w1"], p["adapter.b1"],
                                     p["adapter.w2"], p["adapter.b2"])
                z = z + ad
            caches.append((p, c_ln1, c_attn, c_ln2, c_mlp, c_ad))
        out, c_final = self._ln(z, P["final.g"], P["final.b"])
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite token states in forward pass")
        if keep_cache:
            return out, (single, patches, caches, c_final)
        return out

    def pool(self, tok):
        if self.spec.pooling == "mean":
            return tok.mean(axis=1).astype(np.float64)
        return tok.reshape(tok.shape[0], -1).astype(np.float64)

    def unpool(self, demb, tok_shape):
        if self.spec.pooling == "mean":
            return np.broadcast_to((demb / tok_shape[1])[:, None, :], tok_shape)
        return demb.reshape(tok_shape)

    def embed(self, images) -> np.ndarray:
        """Embeddings for a batch ``(B, H, W, C)`` -> ``(B, E)`` float64."""
        return self.pool(self.tokens(images))

    def forward(self, image) -> np.ndarray:
        """Embedding of a single image as a float64 vector."""
        image = np.asarray(image)
        if image.shape != self.spec.image_shape:
            raise ShapeError(f"image shape {image.shape} != {self.spec.image_shape}")
        return self.embed(image[None])[0]

    # --- backward ---------------------------------------------------------

    def backward(self, dtokens, cache, want_params: bool = False):
        """Backpropagate ``dL/dtokens`` to the input pixels (and parameters).

        Returns:
            ``(dimages, param_grads)``; ``param_grads`` is None unless
            ``want_params`` is set.
        """
        single, patches, caches, c_final = cache
        P = self._p
        grads = {} if want_params else None
        dz, dg, db = self._ln_back(np.asarray(dtokens, dtype=self.dtype), c_final)
        if want_params:
            grads["final.g"], grads["final.b"] = dg, db
        self._check(dz, "final layer norm")
        for i in reversed(range(self.spec.num_blocks)):
            p, c_ln1, c_attn, c_ln2, c_mlp, c_ad = caches[i]
            pre = f"block{i}."
            if c_ad is not None:
                dzz, g = self._mlp_back(dz, c_ad, p["adapter.w1"], p["adapter.w2"], want_params)
                dz = dz + dzz
                if want_params:
                    for n, v in zip(("w1", "b1", "w2", "b2"), g):
                        grads[pre + "adapter." + n] = v
                self._check(dz, f"block{i} adapter")
            dh2, g = self._mlp_back(dz, c_mlp, p["mlp.w1"], p["mlp.w2"], want_params)
            if want_params:
                for n, v in zip(("w1", "b1", "w2", "b2"), g):
                    grads[pre + "mlp." + n] = v
            dzz, dg, db = self._ln_back(dh2, c_ln2)
            dz = dz + dzz
            if want_params:
                grads[pre + "ln2.g"], grads[pre + "ln2.b"] = dg, db
            self._check(dz, f"block{i} mlp")
            dh1, g = self._attn_back(dz, c_attn, p, want_params)
            if want_params:
                grads.update({pre + k: v for k, v in g.items()})
            dzz, dg, db = self._ln_back(dh1, c_ln1)
            dz = dz + dzz
            if want_params:
                grads[pre + "ln1.g"], grads[pre + "ln1.b"] = dg, db
            self._check(dz, f"block{i} attention")
        if want_params:
            grads["pos"] = dz.sum(0)
            grads["patch.w"] = _matgrad(patches, dz)
            grads["patch.b"] = _sum_bt(dz)
        dx = self.unpatchify(dz @ P["patch.w"].T)
        self._check(dx, "patch embedding")
        if single:
            dx = dx[0]
        return dx, grads

    @staticmethod
    def _check(arr, where):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite gradient in {where}")

    # --- losses -----------------------------------------------------------

    def loss_and_input_grad(self, images, anchor, kind: str = "l1"):
        """Feature-space loss against ``anchor`` and its exact input gradient.

        ``l1`` is the mean absolute difference over embedding coordinates,
        ``l2`` the Euclidean distance and ``neg_l1`` is ``-l1``. The l1
        subgradient at zero is taken as zero. A batch of images gives one
        loss per image and a gradient of the same shape as ``images``.
        """
        if kind not in LOSS_KINDS:
            raise ParameterError(f"unknown loss kind {kind!r}")
        anchor = np.asarray(anchor, dtype=np.float64)
        if anchor.shape != (self.spec.embedding_dim,):
            raise ShapeError(f"anchor must have length {self.spec.embedding_dim}")
        tok, cache = self.tokens(images, keep_cache=True)
        emb = self.pool(tok)
        diff = emb - anchor
        if kind == "l2":
            loss = np.sqrt((diff * diff).sum(-1))
            safe = np.where(loss > 0, loss, 1.0)
            demb = np.where(loss[:, None] > 0, diff / safe[:, None], 0.0)
        else:
            loss = np.abs(diff).mean(-1)
            demb = np.sign(diff) / diff.shape[-1]
            if kind == "neg_l1":
                loss, demb = -loss, -demb
        grad, _ = self.backward(self.unpool(demb, tok.shape), cache)
        if cache[0]:
            return float(loss[0]), grad
        return loss, grad

    def feature_loss(self, images, anchor, kind: str = "l1"):
        emb = self.embed(np.asarray(images).reshape((-1,) + self.spec.image_shape))
        diff = emb - np.asarray(anchor, dtype=np.float64)
        if kind == "l2":
            loss = np.sqrt((diff * diff).sum(-1))
        else:
            loss = np.abs(diff).mean(-1)
            if kind == "neg_l1":
                loss = -loss
        return loss

    # --- segmentation head ------------------------------------------------

    def logits(self, images) -> np.ndarray:
        tok = self.tokens(images)
        return tok @ self._p["head.w"] + self._p["head.b"]

    def predict(self, images) -> np.ndarray:
        """Per-patch class predictions, shape ``(B, T)``."""
        return self.logits(images).argmax(-1)


def mean_reference_embedding(encoder: Encoder, references) -> np.ndarray:
    """Arithmetic mean of the reference images' embeddings."""
    refs = np.asarray(references)
    if refs.ndim == 3:
        refs = refs[None]
    if len(refs) == 0:
        raise ParameterError("reference set is empty")
    return encoder.embed(refs).mean(axis=0)


@dataclass
class GradCheckReport:
    passed: bool
    tolerance: float
    pixels: list
    analytic: list
    numeric: list
    rel_errors: list
    kind: str = "l1"

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors) if self.rel_errors else 0.0


def relative_error(a, n, floor) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(encoder: Encoder, image, tolerance: float, anchor=None, kind: str = "l1",
               num_pixels: int = 20, step: float = 1e-4, rng: RngState | None = None,
               ) -> GradCheckReport:
    """Compare the analytic input gradient with central finite differences.

    The analytic gradient comes from ``encoder`` at its own precision; the
    finite differences are taken on a float64 copy of the same weights so the
    oracle is not limited by single-precision roundoff. Relative errors are
    measured against ``max(|analytic|, |numeric|)`` with a floor of 1% of the
    largest gradient magnitude among the checked pixels. The default anchor
    sits at least 0.5 from ``f(image)`` in every coordinate so that no l1
    kink lies within one finite-difference step.
    """
    if not tolerance > 0:
        raise ParameterError("tolerance must be positive")
    rng = rng or RngState(0)
    image = np.asarray(image, dtype=np.float64)
    if anchor is None:
        # keep every coordinate of f(x) - anchor away from the l1 kink at zero
        emb = encoder.forward(image)
        sign = np.where(rng.uniform(emb.shape) < 0.5, -1.0, 1.0)
        anchor = emb + sign * rng.uniform(emb.shape, 0.5, 1.0)
    _, grad = encoder.loss_and_input_grad(image, anchor, kind)
    oracle = encoder.with_dtype(np.float64)
    flat_idx = rng.permutation(image.size)[:num_pixels]
    analytic, numeric = [], []
    for idx in flat_idx:
        pix = np.unravel_index(int(idx), image.shape)
        up, dn = image.copy(), image.copy()
        up[pix] += step
        dn[pix] -= step
        lu = oracle.feature_loss(up[None], anchor, kind)[0]
        ld = oracle.feature_loss(dn[None], anchor, kind)[0]
        numeric.append((lu - ld) / (2 * step))
        analytic.append(float(grad[pix]))
    floor = max(1e-2 * max(np.max(np.abs(numeric)), np.max(np.abs(analytic))), 1e-12)
    rel = relative_error(analytic, numeric, floor)
    passed = bool(np.all(rel <= tolerance)) if math.isfinite(tolerance) else True
    return GradCheckReport(passed, tolerance, [int(i) for i in flat_idx], analytic,
                           [float(v) for v in numeric], [float(r) for r in rel], kind)


# --- downstream models ----------------------------------------------------

@dataclass
class DownstreamModel:
    variant: str
    encoder: Encoder
    history: list

    def predict(self, images) -> np.ndarray:
        return self.encoder.predict(images)

    def patch_accuracy(self, images, labels) -> np.ndarray:
        """Per-image fraction of correctly labelled patches."""
        pred = self.predict(images)
        return (pred == np.asarray(labels).reshape(pred.shape)).mean(axis=1)


def _trainable(name: str, mode: str) -> bool:
    if mode == "full":
        return True
    if name.startswith("head."):
        return True
    return mode == "adapter" and ".adapter." in name


def _ce_loss_and_grad(logits, labels):
    z = logits.astype(np.float64)
    z = z - z.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    b, t, c = logits.shape
    onehot = np.eye(c)[labels.reshape(b, t)]
    loss = -(onehot * logp).sum(-1).mean()
    dlogits = (np.exp(logp) - onehot) / (b * t)
    return float(loss), dlogits


def train_step(encoder: Encoder, images, labels, mode: str, lr: float) -> tuple:
    """One plain gradient step on cross-entropy; returns (loss, new encoder)."""
    tok, cache = encoder.tokens(images, keep_cache=True)
    P = encoder._p
    logits = tok @ P["head.w"] + P["head.b"]
    loss, dlogits = _ce_loss_and_grad(logits, labels)
    if not math.isfinite(loss):
        raise TrainingError("training loss is not finite")
    dlogits = dlogits.astype(encoder.dtype)
    grads = {"head.w": _matgrad(tok, dlogits), "head.b": _sum_bt(dlogits)}
    if mode != "frozen":
        _, g = encoder.backward(dlogits @ P["head.w"].T, cache, want_params=True)
        grads.update(g)
    new = dict(encoder.params)
    for name, g in grads.items():
        if _trainable(name, mode):
            new[name] = (encoder.params[name] - lr * np.asarray(g, np.float64)).astype(np.float32)
    return loss, type(encoder)(encoder.spec, new, encoder.dtype)


def make_downstream(surrogate: Encoder, mode: str, images, labels, epochs: int,
                    rng: RngState, lr: float = 0.5, batch_size: int = 32) -> DownstreamModel:
    """Derive a downstream segmentation model from the surrogate encoder.

    ``frozen`` trains only the head, ``adapter`` also trains inserted
    residual adapters, ``full`` trains every weight. Training is seeded
    mini-batch gradient descent; ``history`` holds the mean loss per epoch.
    """
    if mode not in MODES:
        raise ParameterError(f"unknown downstream mode {mode!r}")
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0 or len(images) != len(labels):
        raise ParameterError("training set must be nonempty with one label grid per image")
    params = surrogate.params
    if mode == "adapter":
        params = add_adapters(surrogate.spec, params, rng.derive(1))
    model = Encoder(surrogate.spec, params, surrogate.dtype)
    order_rng = rng.derive(2)
    history = []
    for _ in range(epochs):
        order = order_rng.permutation(len(images))
        losses = []
        for start in range(0, len(images), batch_size):
            idx = order[start:start + batch_size]
            loss, model = train_step(model, images[idx], labels[idx], mode, lr)
            losses.append(loss * len(idx))
        history.append(sum(losses) / len(images))
    return DownstreamModel(mode, model, history)
