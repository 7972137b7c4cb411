"""Interaction-aware affinity estimation.

Track and detection features pass through interleaved self/cross attention
blocks, then every feature pair is scored by a small head into a match
probability. Non-learned providers (scaled-Euclidean heuristic, cosine,
inner product) live here too so the association stage can swap them in.
"""

from __future__ import annotations

import math

import numpy as np

from . import nn
from .core import ContractError, ValidationError

STATE_INPUT_DIM = 11
SHAPE_INPUT_DIM = 18
LOGIT_CLAMP = 30.0  # keeps sigmoid outputs strictly inside (0, 1) in float64


class AttentionBlock(nn.Layer):
    """Multi-head attention block with a pre-norm residual stream.

    Queries come from the first argument, keys/values from the second; the
    block is self-attention when both are the same stream. Layer norm is
    applied on the sublayer inputs and the raw features ride the residual
    path unnormalized, which keeps deep interleaved stacks from collapsing
    all rows onto one point. An empty key/value stream makes the block an
    exact identity on the query stream.
    """

    def __init__(self, rng: np.random.Generator, channels: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise ValidationError(f"heads ({heads}) must divide channels ({channels})")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.wq = nn.Linear(rng, channels, channels)
        self.wk = nn.Linear(rng, channels, channels, bias=False)
        self.wv = nn.Linear(rng, channels, channels)
        self.wo = nn.Linear(rng, channels, channels, gain=0.5)
        self.ln1 = nn.LayerNorm(channels)
        self.ln2 = nn.LayerNorm(channels)
        self.ff1 = nn.Linear(rng, channels, 2 * channels, gain=math.sqrt(2.0))
        self.ff_relu = nn.ReLU()
        self.ff2 = nn.Linear(rng, 2 * channels, channels, gain=0.5)

    def forward(self, a: np.ndarray, b: np.ndarray, train: bool = False) -> np.ndarray:
        if a.shape[-1] != self.channels or b.shape[-1] != self.channels:
            raise ContractError(f"attention expects {self.channels} channels, got {a.shape} / {b.shape}")
        if a.shape[0] == 0:
            self._cache.append(("empty_a", b.shape[0]))
            return a.copy()
        if b.shape[0] == 0:
            self._cache.append(("empty_b",))
            return a.copy()
        m, n = a.shape[0], b.shape[0]
        h, d = self.heads, self.head_dim
        a_norm = self.ln1.forward(a, train)
        b_norm = self.ln1.forward(b, train)
        q = self.wq.forward(a_norm, train).reshape(m, h, d)
        k = self.wk.forward(b_norm, train).reshape(n, h, d)
        v = self.wv.forward(b_norm, train).reshape(n, h, d)
        scale = 1.0 / math.sqrt(d)
        scores = np.einsum("mhd,nhd->hmn", q, k) * scale
        attn = nn.softmax_rows(scores)
        mixed = np.einsum("hmn,nhd->mhd", attn, v).reshape(m, self.channels)
        hidden = a + self.wo.forward(mixed, train)
        hidden_norm = self.ln2.forward(hidden, train)
        ff = self.ff2.forward(self.ff_relu.forward(self.ff1.forward(hidden_norm, train), train), train)
        out = hidden + ff
        self._cache.append(("full", q, k, v, attn, scale, m, n))
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        entry = self._pop()
        if entry[0] == "empty_a":
            return grad.copy(), np.zeros((entry[1], self.channels))
        if entry[0] == "empty_b":
            return grad.copy(), np.zeros((0, self.channels))
        _, q, k, v, attn, scale, m, n = entry
        h, d = self.heads, self.head_dim
        g_hidden = grad.copy()
        g_hidden_norm = self.ff1.backward(self.ff_relu.backward(self.ff2.backward(grad)))
        g_hidden += self.ln2.backward(g_hidden_norm)
        ga = g_hidden.copy()
        g_mixed = self.wo.backward(g_hidden).reshape(m, h, d)
        g_attn = np.einsum("mhd,nhd->hmn", g_mixed, v)
        g_v = np.einsum("hmn,mhd->nhd", attn, g_mixed).reshape(n, self.channels)
        g_scores = nn.softmax_rows_backward(g_attn, attn) * scale
        g_q = np.einsum("hmn,nhd->mhd", g_scores, k).reshape(m, self.channels)
        g_k = np.einsum("hmn,mhd->nhd", g_scores, q).reshape(n, self.channels)
        g_a_norm = self.wq.backward(g_q)
        g_b_norm = self.wk.backward(g_k) + self.wv.backward(g_v)
        gb = self.ln1.backward(g_b_norm)
        ga += self.ln1.backward(g_a_norm)
        return ga, gb

    def _sublayers(self):
        yield "wq", self.wq
        yield "wk", self.wk
        yield "wv", self.wv
        yield "wo", self.wo
        yield "ln1", self.ln1
        yield "ln2", self.ln2
        yield "ff1", self.ff1
        yield "ff2", self.ff2

    def params(self):
        return {f"{n}.{k}": v for n, sub in self._sublayers() for k, v in sub.params().items()}

    def grads(self):
        return {f"{n}.{k}": v for n, sub in self._sublayers() for k, v in sub.grads().items()}

    def zero_grad(self):
        for _, sub in self._sublayers():
            sub.zero_grad()

    def clear_cache(self):
        self._cache.clear()
        for _, sub in self._sublayers():
            sub.clear_cache()


class InteractionStack(nn.Layer):
    """N interleaved passes of self and cross attention over both streams.

    Per pass, in order: self(t), self(d) through one shared self block, then
    cross(t<-d) and cross(d<-t) through one shared cross block; the second
    cross application sees the freshly updated track features.
    """

    def __init__(self, rng: np.random.Generator, channels: int, heads: int, passes: int):
        super().__init__()
        if passes < 1:
            raise ValidationError(f"passes must be >= 1, got {passes}")
        self.passes = [(AttentionBlock(rng, channels, heads),
                        AttentionBlock(rng, channels, heads))
                       for _ in range(passes)]

    def forward(self, t_feat: np.ndarray, d_feat: np.ndarray,
                train: bool = False) -> tuple[np.ndarray, np.ndarray]:
        for self_blk, cross_blk in self.passes:
            t_feat = self_blk.forward(t_feat, t_feat, train)
            d_feat = self_blk.forward(d_feat, d_feat, train)
            t_feat = cross_blk.forward(t_feat, d_feat, train)
            d_feat = cross_blk.forward(d_feat, t_feat, train)
        return t_feat, d_feat

    def backward(self, g_t: np.ndarray, g_d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        for self_blk, cross_blk in reversed(self.passes):
            g_d, g_t_extra = cross_blk.backward(g_d)
            g_t = g_t + g_t_extra
            g_t, g_d_extra = cross_blk.backward(g_t)
            g_d = g_d + g_d_extra
            g_da, g_db = self_blk.backward(g_d)
            g_d = g_da + g_db
            g_ta, g_tb = self_blk.backward(g_t)
            g_t = g_ta + g_tb
        return g_t, g_d

    def _sublayers(self):
        for idx, (self_blk, cross_blk) in enumerate(self.passes):
            yield f"pass{idx}.self", self_blk
            yield f"pass{idx}.cross", cross_blk

    def params(self):
        return {f"{n}.{k}": v for n, sub in self._sublayers() for k, v in sub.params().items()}

    def grads(self):
        return {f"{n}.{k}": v for n, sub in self._sublayers() for k, v in sub.grads().items()}

    def zero_grad(self):
        for _, sub in self._sublayers():
            sub.zero_grad()

    def clear_cache(self):
        for _, sub in self._sublayers():
            sub.clear_cache()


class AffinityHead(nn.Layer):
    """Pairwise concat -> channel-reducing FFN -> sigmoid match probability."""

    def __init__(self, rng: np.random.Generator, channels: int):
        super().__init__()
        self.channels = channels
        self.ffn = nn.FFN(rng, (2 * channels, channels), head_dim=1)

    def forward(self, t_feat: np.ndarray, d_feat: np.ndarray,
                train: bool = False, batch_stats: bool | None = None) -> np.ndarray:
        m, n = t_feat.shape[0], d_feat.shape[0]
        if m == 0 or n == 0:
            self._cache.append(("empty", m, n))
            return np.zeros((m, n))
        pairs = np.concatenate(
            [np.repeat(t_feat, n, axis=0), np.tile(d_feat, (m, 1))], axis=1)
        logits = self.ffn.forward(pairs, train, batch_stats).reshape(m, n)
        interior = np.abs(logits) < LOGIT_CLAMP
        affinity = nn.sigmoid(np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP))
        self._cache.append(("full", m, n, affinity, interior))
        return affinity

    def backward(self, g_aff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        entry = self._pop()
        if entry[0] == "empty":
            _, m, n = entry
            return np.zeros((m, self.channels)), np.zeros((n, self.channels))
        _, m, n, affinity, interior = entry
        g_logits = g_aff * affinity * (1.0 - affinity) * interior
        g_pairs = self.ffn.backward(g_logits.reshape(m * n, 1))
        c = self.channels
        g_t = g_pairs[:, :c].reshape(m, n, c).sum(axis=1)
        g_d = g_pairs[:, c:].reshape(m, n, c).sum(axis=0)
        return g_t, g_d

    def params(self):
        return {f"ffn.{k}": v for k, v in self.ffn.params().items()}

    def grads(self):
        return {f"ffn.{k}": v for k, v in self.ffn.grads().items()}

    def state(self):
        return {f"ffn.{k}": v for k, v in self.ffn.state().items()}

    def zero_grad(self):
        self.ffn.zero_grad()

    def clear_cache(self):
        self._cache.clear()
        self.ffn.clear_cache()


class SimilarityHead(nn.Layer):
    """Parameter-free affinity from feature similarity, trainable end to end.

    ``cosine`` maps the pairwise cosine to (1 + cos) / 2; ``inner_product``
    squashes the raw dot products through a sigmoid. Both are the ablation
    baselines for the learned channel-reduce head.
    """

    def __init__(self, mode: str, channels: int):
        super().__init__()
        if mode not in ("cosine", "inner_product"):
            raise ValidationError(f"unknown similarity head mode {mode!r}")
        self.mode = mode
        self.channels = channels

    def forward(self, t_feat: np.ndarray, d_feat: np.ndarray,
                train: bool = False, batch_stats: bool | None = None) -> np.ndarray:
        m, n = t_feat.shape[0], d_feat.shape[0]
        if m == 0 or n == 0:
            self._cache.append(("empty", m, n))
            return np.zeros((m, n))
        if self.mode == "inner_product":
            ip = t_feat @ d_feat.T
            interior = np.abs(ip) < LOGIT_CLAMP
            affinity = nn.sigmoid(np.clip(ip, -LOGIT_CLAMP, LOGIT_CLAMP))
            self._cache.append(("ip", t_feat, d_feat, affinity, interior))
            return affinity
        tn = np.linalg.norm(t_feat, axis=1, keepdims=True)
        dn = np.linalg.norm(d_feat, axis=1, keepdims=True)
        t_unit = np.divide(t_feat, tn, out=np.zeros_like(t_feat), where=tn > 0)
        d_unit = np.divide(d_feat, dn, out=np.zeros_like(d_feat), where=dn > 0)
        cos = t_unit @ d_unit.T
        affinity = 0.5 * (1.0 + cos)
        self._cache.append(("cos", t_unit, d_unit, tn, dn, cos))
        return affinity

    def backward(self, g_aff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        entry = self._pop()
        if entry[0] == "empty":
            _, m, n = entry
            return np.zeros((m, self.channels)), np.zeros((n, self.channels))
        if entry[0] == "ip":
            _, t_feat, d_feat, affinity, interior = entry
            g_ip = g_aff * affinity * (1.0 - affinity) * interior
            return g_ip @ d_feat, g_ip.T @ t_feat
        _, t_unit, d_unit, tn, dn, cos = entry
        g_cos = 0.5 * g_aff
        # d cos / d t = (d_unit - cos * t_unit) / |t|, and symmetrically for d
        g_t = (g_cos @ d_unit - np.sum(g_cos * cos, axis=1, keepdims=True) * t_unit)
        g_t = np.divide(g_t, tn, out=np.zeros_like(g_t), where=tn > 0)
        g_d = (g_cos.T @ t_unit - np.sum(g_cos * cos, axis=0)[:, None] * d_unit)
        g_d = np.divide(g_d, dn, out=np.zeros_like(g_d), where=dn > 0)
        return g_t, g_d


class AffinityModel:
    """Full learned pipeline: state/shape FFNs -> interaction -> affinity head.

    Both streams share the feature FFNs; batch-norm statistics are computed
    over the union of tracks and detections of one frame pair, at inference
    as well as in training (the frame's object set is the population the
    prediction conditions on, so running statistics are only a fallback for
    single-object frames). With ``interaction=False`` the attention stack is
    bypassed, scoring purely independent per-object features (the ablation
    baseline); ``head_mode`` swaps the learned channel-reduce head for the
    cosine / inner-product similarity baselines.
    """

    def __init__(self, rng: np.random.Generator, channels: int = 16, heads: int = 4,
                 passes: int = 4, interaction: bool = True, head_mode: str = "ffn"):
        if channels % 2 != 0:
            raise ValidationError(f"channels must be even, got {channels}")
        half = channels // 2
        self.channels = channels
        self.heads = heads
        self.n_passes = passes
        self.interaction = interaction
        self.head_mode = head_mode
        self.g_st = nn.FFN(rng, (STATE_INPUT_DIM, channels, half))
        self.g_sh = nn.FFN(rng, (SHAPE_INPUT_DIM, channels, half))
        self.stack = InteractionStack(rng, channels, heads, passes)
        if head_mode == "ffn":
            self.head = AffinityHead(rng, channels)
        else:
            self.head = SimilarityHead(head_mode, channels)

    # -- forward / backward ------------------------------------------------

    def forward(self, t_states: np.ndarray, d_states: np.ndarray,
                t_desc: np.ndarray, d_desc: np.ndarray,
                train: bool = False) -> np.ndarray:
        t_feat, d_feat = self.forward_features(t_states, d_states, t_desc, d_desc, train)
        return self.head.forward(t_feat, d_feat, train, batch_stats=True)

    def forward_features(self, t_states, d_states, t_desc, d_desc,
                         train: bool = False) -> tuple[np.ndarray, np.ndarray]:
        m = t_states.shape[0]
        state_feat = self.g_st.forward(np.vstack([t_states, d_states]), train, batch_stats=True)
        shape_feat = self.g_sh.forward(np.vstack([t_desc, d_desc]), train, batch_stats=True)
        feat = np.hstack([state_feat, shape_feat])
        t_feat, d_feat = feat[:m], feat[m:]
        if self.interaction:
            t_feat, d_feat = self.stack.forward(t_feat, d_feat, train)
        return t_feat, d_feat

    def backward(self, g_affinity: np.ndarray) -> None:
        g_t, g_d = self.head.backward(g_affinity)
        if self.interaction:
            g_t, g_d = self.stack.backward(g_t, g_d)
        half = self.channels // 2
        g_state = np.vstack([g_t[:, :half], g_d[:, :half]])
        g_shape = np.vstack([g_t[:, half:], g_d[:, half:]])
        self.g_sh.backward(g_shape)
        self.g_st.backward(g_state)

    def infer(self, t_states, d_states, t_desc, d_desc) -> np.ndarray:
        affinity = self.forward(t_states, d_states, t_desc, d_desc, train=False)
        self.clear_caches()
        return affinity

    def infer_features(self, t_states, d_states, t_desc, d_desc):
        feats = self.forward_features(t_states, d_states, t_desc, d_desc, train=False)
        self.clear_caches()
        return feats

    def infer_with_features(self, t_states, d_states, t_desc, d_desc):
        t_feat, d_feat = self.forward_features(t_states, d_states, t_desc, d_desc, train=False)
        affinity = self.head.forward(t_feat, d_feat, train=False, batch_stats=True)
        self.clear_caches()
        return affinity, t_feat, d_feat

    # -- parameter plumbing --------------------------------------------------

    def _components(self):
        yield "g_st", self.g_st
        yield "g_sh", self.g_sh
        if self.interaction:
            yield "stack", self.stack
        yield "head", self.head

    def params(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, sub in self._components() for k, v in sub.params().items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, sub in self._components() for k, v in sub.grads().items()}

    def state(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, sub in self._components() for k, v in sub.state().items()}

    def zero_grad(self) -> None:
        for _, sub in self._components():
            sub.zero_grad()

    def clear_caches(self) -> None:
        for _, sub in self._components():
            sub.clear_cache()

    def meta(self) -> dict:
        return {
            "channels": self.channels,
            "heads": self.heads,
            "passes": self.n_passes,
            "interaction": self.interaction,
            "head_mode": self.head_mode,
        }

    def save(self, path: str, extra_arrays: dict | None = None, extra_meta: dict | None = None) -> None:
        arrays = {f"p.{k}": v for k, v in self.params().items()}
        arrays.update({f"s.{k}": v for k, v in self.state().items()})
        if extra_arrays:
            arrays.update({f"x.{k}": v for k, v in extra_arrays.items()})
        meta = self.meta()
        if extra_meta:
            meta.update(extra_meta)
        nn.save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path: str) -> tuple["AffinityModel", dict[str, np.ndarray], dict]:
        arrays, meta = nn.load_arrays(path)
        model = cls(np.random.default_rng(0), channels=meta["channels"],
                    heads=meta["heads"], passes=meta["passes"],
                    interaction=meta["interaction"],
                    head_mode=meta.get("head_mode", "ffn"))
        params = model.params()
        for key, value in params.items():
            value[...] = arrays[f"p.{key}"]
        for key, value in model.state().items():
            value[...] = arrays[f"s.{key}"]
        extra = {k[2:]: v for k, v in arrays.items() if k.startswith("x.")}
        return model, extra, meta


# ---------------------------------------------------------------------------
# Non-learned affinity providers


def heuristic_distance(t_states: np.ndarray, d_states: np.ndarray) -> np.ndarray:
    """Scaled Euclidean distance: center distance times (2 - cos dtheta).

    Lower is better; 0 for identical pose. Shape (M, N).
    """
    if t_states.shape[0] == 0 or d_states.shape[0] == 0:
        return np.zeros((t_states.shape[0], d_states.shape[0]))
    delta = t_states[:, None, :3] - d_states[None, :, :3]
    dist = np.sqrt(np.sum(delta * delta, axis=-1))
    dtheta = t_states[:, None, 6] - d_states[None, :, 6]
    return dist * (2.0 - np.cos(dtheta))


def cosine_affinity(t_feat: np.ndarray, d_feat: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity in [-1, 1]; zero-norm rows score 0."""
    if t_feat.shape[0] == 0 or d_feat.shape[0] == 0:
        return np.zeros((t_feat.shape[0], d_feat.shape[0]))
    tn = np.linalg.norm(t_feat, axis=1, keepdims=True)
    dn = np.linalg.norm(d_feat, axis=1, keepdims=True)
    t_unit = np.divide(t_feat, tn, out=np.zeros_like(t_feat), where=tn > 0)
    d_unit = np.divide(d_feat, dn, out=np.zeros_like(d_feat), where=dn > 0)
    return t_unit @ d_unit.T


def inner_product_affinity(t_feat: np.ndarray, d_feat: np.ndarray) -> np.ndarray:
    """Pairwise dot products (unbounded)."""
    if t_feat.shape[0] == 0 or d_feat.shape[0] == 0:
        return np.zeros((t_feat.shape[0], d_feat.shape[0]))
    return t_feat @ d_feat.T
