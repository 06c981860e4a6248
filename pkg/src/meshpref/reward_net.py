"""Compact reward scorer with exact backpropagation.

Architecture, per item::

    patch grid (256, 64, 10) -> flatten slots -> (256, 640)
        -> linear projection -> 256 mesh tokens (128-d)
    class token (128-d) prepended to the mesh tokens
    cross-attention: the class-token query attends over [text tokens; mesh tokens]
        with a residual connection -> class embedding z
    head: tanh(z W1 + b1) W2 + b2 -> scalar reward

Only the class-token row feeds the head, so the other query rows are never
formed. Patches with no occupied slot are excluded from the attention keys.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .cs_divergence import KernelConfig, cs_divergence, cs_divergence_grad
from .errors import ConfigError, FormatError, PopulationError, ShapeError, StaleCacheError
from .features import featurize
from .mesh_core import TriangleMesh
from .mesh_prep import MAX_FACES, PatchTensor, patchify

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    d_model: int = 128
    n_patches: int = 256
    patch_slots: int = 64
    face_features: int = 10
    text_tokens: int = 16
    head_hidden: int = 64

    @property
    def patch_feature_dim(self) -> int:
        return self.patch_slots * self.face_features


DIMS = ModelDims()

PARAM_SHAPES = {
    "patch_projection": lambda d: (d.patch_feature_dim, d.d_model),
    "patch_bias": lambda d: (d.d_model,),
    "class_token": lambda d: (d.d_model,),
    "w_query": lambda d: (d.d_model, d.d_model),
    "w_key": lambda d: (d.d_model, d.d_model),
    "w_value": lambda d: (d.d_model, d.d_model),
    "w_out": lambda d: (d.d_model, d.d_model),
    "head_w1": lambda d: (d.d_model, d.head_hidden),
    "head_b1": lambda d: (d.head_hidden,),
    "head_w2": lambda d: (d.head_hidden, 1),
    "head_b2": lambda d: (1,),
}
_FAN_IN = {
    "patch_projection": "patch_feature_dim",
    "patch_bias": "patch_feature_dim",
    "class_token": "d_model",
    "w_query": "d_model",
    "w_key": "d_model",
    "w_value": "d_model",
    "w_out": "d_model",
    "head_w1": "d_model",
    "head_b1": "d_model",
    "head_w2": "head_hidden",
    "head_b2": "head_hidden",
}


@dataclass
class RewardParams:
    patch_projection: np.ndarray
    patch_bias: np.ndarray
    class_token: np.ndarray
    w_query: np.ndarray
    w_key: np.ndarray
    w_value: np.ndarray
    w_out: np.ndarray
    head_w1: np.ndarray
    head_b1: np.ndarray
    head_w2: np.ndarray
    head_b2: np.ndarray
    dims: ModelDims = field(default=DIMS, compare=False)

    @staticmethod
    def names():
        return tuple(PARAM_SHAPES)

    def arrays(self):
        return [getattr(self, n) for n in PARAM_SHAPES]

    def map(self, fn, *others) -> "RewardParams":
        return RewardParams(
            *[fn(getattr(self, n), *(getattr(o, n) for o in others)) for n in PARAM_SHAPES], dims=self.dims
        )

    def zeros_like(self) -> "RewardParams":
        return self.map(np.zeros_like)

    def copy(self) -> "RewardParams":
        return self.map(np.array)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def to_json(self) -> str:
        doc = {
            "format_version": FORMAT_VERSION,
            "dims": {f.name: getattr(self.dims, f.name) for f in fields(ModelDims)},
            "params": {
                n: {"shape": list(getattr(self, n).shape), "data": getattr(self, n).ravel().tolist()}
                for n in PARAM_SHAPES
            },
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "RewardParams":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"parameter file is not JSON: {exc}") from None
        if doc.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported parameter format_version {doc.get('format_version')!r}")
        dims = ModelDims(**doc["dims"])
        arrays = {}
        for n, shape_fn in PARAM_SHAPES.items():
            entry = doc["params"].get(n)
            if entry is None:
                raise FormatError(f"parameter {n!r} missing")
            shape = tuple(entry["shape"])
            if shape != shape_fn(dims):
                raise FormatError(f"parameter {n!r} has shape {shape}, expected {shape_fn(dims)}")
            arrays[n] = np.array(entry["data"], dtype=np.float64).reshape(shape)
        return cls(**arrays, dims=dims)


def init_params(seed: int, dims: ModelDims = DIMS) -> RewardParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) draws from PCG64 seeded with ``seed``."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for n, shape_fn in PARAM_SHAPES.items():
        bound = 1.0 / math.sqrt(getattr(dims, _FAN_IN[n]))
        arrays[n] = rng.uniform(-bound, bound, size=shape_fn(dims))
    return RewardParams(**arrays, dims=dims)


def text_featurize(prompt: str, seed: int = 0, dims: ModelDims = DIMS) -> np.ndarray:
    """Hash each lowercase word to a unit vector; (16, 128), zero-padded.

    A word's vector is a PCG64 standard-normal draw seeded with the 64-bit
    BLAKE2b digest of the word keyed by ``seed``, normalised to unit length.
    """
    out = np.zeros((dims.text_tokens, dims.d_model))
    key = int(seed).to_bytes(8, "little", signed=True)
    for i, word in enumerate(prompt.lower().split()[: dims.text_tokens]):
        h = int.from_bytes(hashlib.blake2b(word.encode("utf-8"), digest_size=8, key=key).digest(), "little")
        v = np.random.default_rng(h).standard_normal(dims.d_model)
        out[i] = v / np.linalg.norm(v)
    return out


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    params: RewardParams
    active: np.ndarray
    x: np.ndarray
    masks: np.ndarray
    text: np.ndarray
    key_mask: np.ndarray
    q: np.ndarray
    qk: np.ndarray
    tokens: np.ndarray
    attn_text: np.ndarray
    attn_mesh: np.ndarray
    mixed: np.ndarray
    ctx: np.ndarray
    z: np.ndarray
    h: np.ndarray


def _as_batch(values, masks, texts, dims):
    values = np.asarray(values, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    texts = np.asarray(texts, dtype=np.float64)
    if values.ndim == 3:
        values, masks, texts = values[None], masks[None], texts[None]
    want = (dims.n_patches, dims.patch_slots, dims.face_features)
    if values.shape[1:] != want or masks.shape != values.shape[:3]:
        raise ShapeError(f"patch values must be (B, {want}) with matching mask, got {values.shape}, {masks.shape}")
    if texts.shape != (len(values), dims.text_tokens, dims.d_model):
        raise ShapeError(f"text tokens must be (B, {dims.text_tokens}, {dims.d_model}), got {texts.shape}")
    return values, masks, texts


def forward_batch(params: RewardParams, values, masks, texts):
    """Rewards (B,), class embeddings (B, 128) and the cache for :func:`backward_batch`."""
    d = params.dims
    values, masks, texts = _as_batch(values, masks, texts, d)
    B = len(values)
    slots = np.flatnonzero(masks.any(axis=(0, 1)))
    active = (slots[:, None] * d.face_features + np.arange(d.face_features)).ravel()
    x = values.reshape(B, d.n_patches, d.patch_feature_dim)[:, :, active]
    tokens = x @ params.patch_projection[active] + params.patch_bias

    scale = 1.0 / math.sqrt(d.d_model)
    q = params.class_token @ params.w_query
    qk = (params.w_key @ q) * scale
    key_mask = masks.any(axis=2)
    s_text = texts @ qk
    s_mesh = np.where(key_mask, tokens @ qk, -np.inf)
    top = np.maximum(s_text.max(axis=1), s_mesh.max(axis=1))[:, None]
    e_text = np.exp(s_text - top)
    e_mesh = np.exp(s_mesh - top)
    norm = e_text.sum(axis=1, keepdims=True) + e_mesh.sum(axis=1, keepdims=True)
    a_text, a_mesh = e_text / norm, e_mesh / norm
    mixed = np.einsum("bt,btk->bk", a_text, texts) + np.einsum("bj,bjk->bk", a_mesh, tokens)
    ctx = mixed @ params.w_value
    z = params.class_token + ctx @ params.w_out
    h = np.tanh(z @ params.head_w1 + params.head_b1)
    r = h @ params.head_w2[:, 0] + params.head_b2[0]
    cache = ForwardCache(
        params=params, active=active, x=x, masks=masks, text=texts, key_mask=key_mask, q=q, qk=qk,
        tokens=tokens, attn_text=a_text, attn_mesh=a_mesh, mixed=mixed, ctx=ctx, z=z, h=h,
    )
    return r, z, cache


def backward_batch(params: RewardParams, cache: ForwardCache, d_reward=None, d_class=None, want_inputs=False):
    """Gradients of ``sum(d_reward * r) + sum(d_class * z)``.

    Returns ``(param_grads, input_grads)``; ``input_grads`` is (B, 256, 64, 10)
    with unoccupied slots zeroed, or ``None`` unless ``want_inputs``.
    """
    if cache.params is not params:
        raise StaleCacheError("cache was produced with a different parameter set")
    d = params.dims
    B = len(cache.z)
    dr = np.zeros(B) if d_reward is None else np.asarray(d_reward, dtype=np.float64).reshape(B)
    dz = np.zeros((B, d.d_model)) if d_class is None else np.array(d_class, dtype=np.float64).reshape(B, d.d_model)
    g = params.zeros_like()
    scale = 1.0 / math.sqrt(d.d_model)

    g.head_w2[:, 0] = cache.h.T @ dr
    g.head_b2[0] = dr.sum()
    dpre = (dr[:, None] * params.head_w2[:, 0]) * (1.0 - cache.h ** 2)
    g.head_w1[:] = cache.z.T @ dpre
    g.head_b1[:] = dpre.sum(axis=0)
    dz += dpre @ params.head_w1.T

    g.class_token[:] = dz.sum(axis=0)
    g.w_out[:] = cache.ctx.T @ dz
    dctx = dz @ params.w_out.T
    g.w_value[:] = cache.mixed.T @ dctx
    dmix = dctx @ params.w_value.T

    da_text = np.einsum("btk,bk->bt", cache.text, dmix)
    da_mesh = np.einsum("bjk,bk->bj", cache.tokens, dmix)
    dtok = cache.attn_mesh[:, :, None] * dmix[:, None, :]
    inner = (cache.attn_text * da_text).sum(axis=1, keepdims=True) + (cache.attn_mesh * da_mesh).sum(axis=1, keepdims=True)
    ds_text = cache.attn_text * (da_text - inner)
    ds_mesh = cache.attn_mesh * (da_mesh - inner)
    dtok += ds_mesh[:, :, None] * cache.qk
    dqk = np.einsum("bt,btk->k", ds_text, cache.text) + np.einsum("bj,bjk->k", ds_mesh, cache.tokens)
    g.w_key[:] = np.outer(dqk, cache.q) * scale
    dq = (params.w_key.T @ dqk) * scale
    g.w_query[:] = np.outer(params.class_token, dq)
    g.class_token[:] += params.w_query @ dq

    g.patch_projection[cache.active] = np.einsum("bjc,bjk->ck", cache.x, dtok)
    g.patch_bias[:] = dtok.sum(axis=(0, 1))

    dinput = None
    if want_inputs:
        dinput = np.zeros((B, d.n_patches, d.patch_feature_dim))
        dinput[:, :, :] = dtok @ params.patch_projection.T
        dinput = dinput.reshape(B, d.n_patches, d.patch_slots, d.face_features) * cache.masks[..., None]
    return g, dinput


def forward(params: RewardParams, patch: PatchTensor, text: np.ndarray):
    """Single item: ``(reward, class_embedding, cache)``."""
    r, z, cache = forward_batch(params, patch.values[None], patch.mask[None], np.asarray(text)[None])
    return float(r[0]), z[0], cache


def backward(params: RewardParams, cache: ForwardCache, d_reward: float = 1.0, d_class=None):
    """Single item: ``(param_grads, input_grads)`` with input grads (256, 64, 10)."""
    dc = None if d_class is None else np.asarray(d_class)[None]
    g, dx = backward_batch(params, cache, np.array([d_reward]), dc, want_inputs=True)
    return g, dx[0]


# ---------------------------------------------------------------------------
# preprocessing and scoring


def prepare_mesh(mesh: TriangleMesh):
    """featurize + patchify. Returns ``(PatchTensor, PatchAssignment)``."""
    return patchify(mesh, featurize(mesh))


def score(params: RewardParams, mesh: TriangleMesh, prompt: str, text_seed: int = 0) -> float:
    patch, _ = prepare_mesh(mesh)
    r, _, _ = forward(params, patch, text_featurize(prompt, text_seed, params.dims))
    return r


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingSet:
    """Stacked, preprocessed inputs. ``preferred`` marks population membership."""

    values: np.ndarray
    masks: np.ndarray
    texts: np.ndarray
    scores: np.ndarray
    preferred: np.ndarray

    def __len__(self):
        return len(self.scores)

    @classmethod
    def from_items(cls, items, text_seed: int = 0, dims: ModelDims = DIMS) -> "TrainingSet":
        """Build from objects with ``mesh``, ``prompt``, ``score`` and ``label``; excluded items are dropped."""
        vals, masks, texts, scores, pref = [], [], [], [], []
        for it in items:
            if it.label == "excluded":
                continue
            patch, _ = prepare_mesh(it.mesh)
            vals.append(patch.values)
            masks.append(patch.mask)
            texts.append(text_featurize(it.prompt, text_seed, dims))
            scores.append(it.score)
            pref.append(it.label == "preferred")
        if not vals:
            raise PopulationError("no labelled items to train on")
        return cls(np.stack(vals), np.stack(masks), np.stack(texts), np.array(scores, dtype=np.float64), np.array(pref))

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.values[idx], self.masks[idx], self.texts[idx], self.scores[idx], self.preferred[idx])


@dataclass
class LossResult:
    loss: float
    mse: float
    cs: float
    grads: RewardParams


def loss_on_arrays(params, values, masks, texts, scores, n_preferred: int, lam: float, kernel_cfg=None) -> LossResult:
    """MSE over all rows minus ``lam`` times the CS divergence between the
    class embeddings of the first ``n_preferred`` rows and the rest."""
    B = len(scores)
    if n_preferred < 1 or n_preferred >= B:
        raise PopulationError("the divergence term needs at least one preferred and one dispreferred item")
    r, z, cache = forward_batch(params, values, masks, texts)
    resid = r - scores
    mse = float(np.mean(resid ** 2))
    d_reward = 2.0 * resid / B
    if lam != 0.0:
        rep = cs_divergence_grad(z[:n_preferred], z[n_preferred:], kernel_cfg)
        d_class = -lam * np.concatenate([rep.grad_x, rep.grad_y])
    else:
        rep = cs_divergence(z[:n_preferred], z[n_preferred:], kernel_cfg)
        d_class = None
    grads, _ = backward_batch(params, cache, d_reward, d_class)
    return LossResult(loss=mse - lam * rep.value, mse=mse, cs=rep.value, grads=grads)


def loss_batch(params, preferred: Sequence, dispreferred: Sequence, lam: float, kernel_cfg=None) -> LossResult:
    """Objective on lists of ``(PatchTensor, text_tokens, score)`` triples."""
    if not preferred or not dispreferred:
        raise PopulationError("the divergence term needs at least one preferred and one dispreferred item")
    rows = list(preferred) + list(dispreferred)
    values = np.stack([p.values for p, _, _ in rows])
    masks = np.stack([p.mask for p, _, _ in rows])
    texts = np.stack([np.asarray(t) for _, t, _ in rows])
    scores = np.array([s for _, _, s in rows], dtype=np.float64)
    return loss_on_arrays(params, values, masks, texts, scores, len(preferred), lam, kernel_cfg)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    lr: float = 1e-3
    epochs: int = 100
    batch_preferred: int = 8
    batch_dispreferred: int = 8
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bandwidth: object = "median"
    through_bandwidth: bool = True
    text_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_preferred < 1 or self.batch_dispreferred < 1:
            raise ConfigError("epochs and batch sizes must be positive")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, params: RewardParams, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: RewardParams, grads: RewardParams) -> RewardParams:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = self.m.map(lambda m, g: b1 * m + (1 - b1) * g, grads)
        self.v = self.v.map(lambda v, g: b2 * v + (1 - b2) * g * g, grads)
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        lr, eps, wd = self.lr, self.eps, self.wd
        return params.map(lambda p, m, v: p - lr * ((m / c1) / (np.sqrt(v / c2) + eps) + wd * p), self.m, self.v)


@dataclass
class History:
    mse: list = field(default_factory=list)
    cs: list = field(default_factory=list)
    total: list = field(default_factory=list)

    def to_dict(self):
        return {"mse": self.mse, "cs": self.cs, "total": self.total}


def batch_schedule(n_pref: int, n_disp: int, cfg: TrainConfig, rng: np.random.Generator):
    """Index batches for one epoch: every batch holds both populations.

    The larger population is covered once; the smaller one is cycled.
    """
    perm_p = rng.permutation(n_pref)
    perm_d = rng.permutation(n_disp)
    bp, bd = cfg.batch_preferred, cfg.batch_dispreferred
    n_batches = max(math.ceil(n_pref / bp), math.ceil(n_disp / bd))
    for k in range(n_batches):
        yield perm_p[(k * bp + np.arange(bp)) % n_pref], perm_d[(k * bd + np.arange(bd)) % n_disp]


def train(data, config: TrainConfig = TrainConfig(), params: Optional[RewardParams] = None, callback=None):
    """Mini-batch AdamW on the combined objective.

    ``data`` is a :class:`TrainingSet` or anything with an ``items`` list
    (e.g. a synthetic dataset). Returns ``(params, history)``.
    """
    if not isinstance(data, TrainingSet):
        data = TrainingSet.from_items(data.items, config.text_seed)
    pref_idx = np.flatnonzero(data.preferred)
    disp_idx = np.flatnonzero(~data.preferred)
    if not len(pref_idx) or not len(disp_idx):
        raise PopulationError("training needs at least one preferred and one dispreferred item")
    kcfg = KernelConfig(config.bandwidth, config.through_bandwidth and config.bandwidth == "median")
    if params is None:
        params = init_params(config.seed)
    opt = AdamW(params, config.lr, config.beta1, config.beta2, config.eps, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    hist = History()
    for epoch in range(config.epochs):
        acc = np.zeros(3)
        nb = 0
        for ip, idn in batch_schedule(len(pref_idx), len(disp_idx), config, rng):
            rows = np.concatenate([pref_idx[ip], disp_idx[idn]])
            res = loss_on_arrays(
                params, data.values[rows], data.masks[rows], data.texts[rows], data.scores[rows], len(ip), config.lam, kcfg
            )
            params = opt.step(params, res.grads)
            acc += (res.mse, res.cs, res.loss)
            nb += 1
        acc /= nb
        hist.mse.append(float(acc[0]))
        hist.cs.append(float(acc[1]))
        hist.total.append(float(acc[2]))
        if callback is not None:
            callback(epoch, params, hist)
    return params, hist


def predict(params: RewardParams, data: TrainingSet, batch: int = 64):
    """Rewards and class embeddings for every row of ``data``."""
    rs, zs = [], []
    for s in range(0, len(data), batch):
        r, z, _ = forward_batch(params, data.values[s:s + batch], data.masks[s:s + batch], data.texts[s:s + batch])
        rs.append(r)
        zs.append(z)
    return np.concatenate(rs), np.concatenate(zs)


def embedding_divergence(params: RewardParams, data: TrainingSet, kernel_cfg=None) -> float:
    """CS divergence between preferred and dispreferred class embeddings."""
    _, z = predict(params, data)
    return cs_divergence(z[data.preferred], z[~data.preferred], kernel_cfg).value


def ranking_accuracy(params: RewardParams, data: TrainingSet) -> float:
    """Fraction of (preferred, dispreferred) pairs scored in the right order."""
    r, _ = predict(params, data)
    rp, rd = r[data.preferred], r[~data.preferred]
    if not len(rp) or not len(rd):
        raise PopulationError("ranking accuracy needs both populations")
    return float(np.mean(rp[:, None] > rd[None, :]))

