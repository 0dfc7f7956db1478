"""Desk-scale multiscale transformer detector for moment and language queries.

Tensors are channels-last with a leading batch axis: video features are
(B, T, E) and ``mask`` is a boolean (B, T) marking real (unpadded) steps.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Array
from .core import Pyramid, build_pyramid

PRIOR_PROB = 0.01


@dataclass(frozen=True)
class ModelConfig:
    input_dims: tuple[int, ...] = (32,)
    proj_dims: tuple[int, ...] = (64,)
    embed_dim: int = 64
    heads: int = 4
    depth: int = 2
    levels: int = 4
    head_layers: int = 2
    head_kernel: int = 3
    num_classes: int = 5
    mode: str = "mq"
    ffn_ratio: int = 2
    text_dim: int = 0
    text_depth: int = 1
    fusion_depth: int = 1
    max_tokens: int = 32
    pos_encoding: bool = True
    text_pos_encoding: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "proj_dims", tuple(int(d) for d in self.proj_dims))
        if self.mode not in ("mq", "nlq"):
            raise ValueError(f"mode must be 'mq' or 'nlq', got {self.mode!r}")
        if len(self.input_dims) != len(self.proj_dims) or not self.input_dims:
            raise ValueError("input_dims and proj_dims must be non-empty and of equal length")
        if sum(self.proj_dims) != self.embed_dim:
            raise ValueError(f"projection dims {self.proj_dims} must sum to embed_dim={self.embed_dim}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim={self.embed_dim} not divisible by heads={self.heads}")
        if self.levels < 1 or self.num_classes < 1 or self.head_layers < 1:
            raise ValueError("levels, num_classes and head_layers must be >= 1")
        if self.head_kernel % 2 == 0:
            raise ValueError("head_kernel must be odd")
        if self.mode == "nlq":
            if self.num_classes != 1:
                raise ValueError("nlq mode uses a single class")
            if self.text_dim < 1:
                raise ValueError("nlq mode needs text_dim >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    """Padded model input.

    ``sources`` holds one (B, T, D_i) array per feature source.  ``tokens`` and
    ``token_mask`` are only used in language-query mode.
    """

    sources: list[np.ndarray]
    mask: np.ndarray
    stride_seconds: np.ndarray
    ids: list[str] = field(default_factory=list)
    tokens: np.ndarray | None = None
    token_mask: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    @property
    def T(self) -> int:
        return self.mask.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def padded_length(T: int, levels: int) -> int:
    m = 2 ** (levels - 1)
    return -(-T // m) * m


def make_batch(
    features: list[list[np.ndarray]],
    stride_seconds,
    levels: int,
    ids=None,
    tokens: list[np.ndarray] | None = None,
    pad_to: int | None = None,
) -> Batch:
    """Pad per-video source lists ``features[b][i]`` (T_b x D_i) into a :class:`Batch`."""
    B = len(features)
    n_src = len(features[0])
    lengths = [f[0].shape[0] for f in features]
    for b, f in enumerate(features):
        if len(f) != n_src:
            raise ValueError(f"video {b}: expected {n_src} feature sources, got {len(f)}")
        if any(x.shape[0] != lengths[b] for x in f):
            raise ValueError(f"video {b}: feature sources disagree on T: {[x.shape[0] for x in f]}")
    T = padded_length(max(lengths), levels)
    if pad_to is not None:
        T = max(T, padded_length(pad_to, levels))
    sources = []
    for i in range(n_src):
        arr = np.zeros((B, T, features[0][i].shape[1]))
        for b, f in enumerate(features):
            arr[b, : lengths[b]] = f[i]
        sources.append(arr)
    mask = np.zeros((B, T), dtype=bool)
    for b, n in enumerate(lengths):
        mask[b, :n] = True
    strides = np.broadcast_to(np.asarray(stride_seconds, dtype=np.float64), (B,)).copy()
    tok = tok_mask = None
    if tokens is not None:
        n_tok = max(t.shape[0] for t in tokens)
        tok = np.zeros((B, n_tok, tokens[0].shape[1]))
        tok_mask = np.zeros((B, n_tok), dtype=bool)
        for b, t in enumerate(tokens):
            if t.shape[0] < 1:
                raise ValueError("empty token list")
            tok[b, : t.shape[0]] = t
            tok_mask[b, : t.shape[0]] = True
    return Batch(sources, mask, strides, list(ids or []), tok, tok_mask)


@dataclass
class DenseOutput:
    """Dense per-point predictions concatenated over pyramid levels.

    ``cls_logits`` is (B, T', C); ``offsets`` is (B, T', 2) distances in
    seconds; ``point_mask`` marks points that belong to the unpadded video.
    """

    cls_logits: Array
    offsets: Array
    point_mask: np.ndarray
    pyramid: Pyramid
    level_feats: list[Array] = field(default_factory=list)
    query_feat: Array | None = None
    attention: list[np.ndarray] = field(default_factory=list)


def sinusoidal_encoding(T: int, dim: int) -> np.ndarray:
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)
    freq = np.exp(-math.log(10000.0) * i / dim)
    pe = np.zeros((T, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)[:, : dim // 2]
    return pe


class Model:
    """Parameter store plus the forward pass.

    ``params`` maps names to leaf arrays; the sensitivity Gaussians live in
    ``sensitivity`` and are attached by the trainer.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Array]):
        self.config = config
        self.params = params
        self.record_attention = False

    # construction

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        P: dict[str, Array] = {}
        E = config.embed_dim
        H = config.heads

        def lin(name, fan_in, fan_out, bias=True):
            bound = 1.0 / math.sqrt(fan_in)
            P[name + ".w"] = Array(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
            if bias:
                P[name + ".b"] = Array(np.zeros(fan_out), requires_grad=True)

        def norm(name, dim):
            P[name + ".g"] = Array(np.ones(dim), requires_grad=True)
            P[name + ".b"] = Array(np.zeros(dim), requires_grad=True)

        def conv(name, k, cin, cout):
            bound = 1.0 / math.sqrt(k * cin)
            P[name + ".w"] = Array(rng.uniform(-bound, bound, (k, cin, cout)), requires_grad=True)
            P[name + ".b"] = Array(np.zeros(cout), requires_grad=True)

        def ffn(name):
            lin(name + ".fc1", E, config.ffn_ratio * E)
            lin(name + ".fc2", config.ffn_ratio * E, E)

        def encoder(name):
            norm(name + ".ln1", E)
            for p in ("q", "k", "v", "o"):
                lin(f"{name}.tattn.{p}", E, E)
            for p in ("q", "k", "v"):
                lin(f"{name}.cattn.{p}", E, H * E)
            lin(f"{name}.cattn.o", H * E, E)
            norm(name + ".ln2", E)
            ffn(name + ".ffn")

        def plain_block(name):
            norm(name + ".ln1", E)
            for p in ("q", "k", "v", "o"):
                lin(f"{name}.attn.{p}", E, E)
            norm(name + ".ln2", E)
            ffn(name + ".ffn")

        for i, (din, dout) in enumerate(zip(config.input_dims, config.proj_dims)):
            lin(f"proj.{i}.fc1", din, dout)
            lin(f"proj.{i}.fc2", dout, dout)
        for d in range(config.depth):
            encoder(f"enc.{d}")
        if config.mode == "nlq":
            lin("text.proj", config.text_dim, E)
            for d in range(config.text_depth):
                plain_block(f"text.{d}")
            for d in range(config.fusion_depth):
                plain_block(f"fuse.{d}")
        for lv in range(1, config.levels):
            P[f"down.{lv}.w"] = Array(rng.uniform(-1.0, 1.0, (3, E)) / math.sqrt(3), requires_grad=True)
            P[f"down.{lv}.b"] = Array(np.zeros(E), requires_grad=True)
            encoder(f"pyr.{lv}")
        k = config.head_kernel
        for head in ("cls", "loc"):
            for j in range(config.head_layers - 1):
                conv(f"head.{head}.{j}", k, E, E)
        conv("head.cls.out", k, E, config.num_classes)
        P["head.cls.out.b"].data[:] = -math.log((1.0 - PRIOR_PROB) / PRIOR_PROB)
        conv("head.loc.out", k, E, 2)
        return cls(config, P)

    def named_parameters(self) -> dict[str, Array]:
        return self.params

    # building blocks

    def _p(self, name: str) -> Array:
        return self.params[name]

    def _linear(self, x, name):
        y = ad.matmul(x, self._p(name + ".w"))
        b = self.params.get(name + ".b")
        return ad.add(y, b) if b is not None else y

    def _ln(self, x, name):
        return ad.add(ad.mul(ad.layer_norm(x, axis=-1), self._p(name + ".g")), self._p(name + ".b"))

    def _ffn(self, x, name):
        return self._linear(ad.gelu(self._linear(x, name + ".fc1")), name + ".fc2")

    def _split_heads(self, x, H):
        B, T, E = x.shape
        return ad.transpose(ad.reshape(x, (B, T, H, E // H)), (0, 2, 1, 3))

    def _merge_heads(self, x):
        B, H, T, d = x.shape
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, T, H * d))

    def _mha(self, q_in, kv_in, name, key_mask):
        """Multi-head attention along the time/token axis; ``key_mask`` is (B, Tk)."""
        H = self.config.heads
        q = self._split_heads(self._linear(q_in, name + ".q"), H)
        k = self._split_heads(self._linear(kv_in, name + ".k"), H)
        v = self._split_heads(self._linear(kv_in, name + ".v"), H)
        km = None if key_mask is None or key_mask.all() else key_mask[:, None, None, :]
        out, attn = ad.scaled_dot_attention(q, k, v, km)
        if self.record_attention:
            self._attn_log.append(attn.data)
        return self._linear(self._merge_heads(out), name + ".o")

    def _channel_attention(self, z, name, mask):
        """Self-attention among channels: every head builds an E x E weight map.

        Channel tokens are the columns of the (T, E) map; scores sum over the
        valid time steps and are scaled by 1/sqrt(valid length).
        """
        H, E = self.config.heads, self.config.embed_dim
        B, T, _ = z.shape
        tmask = mask[:, :, None].astype(np.float64)

        def heads(p):
            y = ad.mul(self._linear(z, f"{name}.{p}"), tmask)
            return ad.transpose(ad.reshape(y, (B, T, H, E)), (0, 2, 1, 3))  # (B, H, T, E)

        q, k, v = heads("q"), heads("k"), heads("v")
        scale = 1.0 / np.sqrt(np.maximum(mask.sum(axis=1), 1))[:, None, None, None]
        # channels as queries/keys: (B, H, E, T) x (B, H, T, E) -> (B, H, E, E)
        out_t, attn = ad.scaled_dot_attention(ad.transpose(q), ad.transpose(k), ad.transpose(v), scale=scale)
        if self.record_attention:
            self._attn_log.append(attn.data)
        out = ad.transpose(out_t)  # (B, H, T, E)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, T, H * E))
        return self._linear(out, f"{name}.o")

    def encoder_block(self, x, mask, name):
        """x + (temporal + channel attention)/2 on LN(x), then an FFN residual."""
        tmask = mask[:, :, None].astype(np.float64)
        z = self._ln(x, name + ".ln1")
        temporal = self._mha(z, z, name + ".tattn", mask)
        channel = self._channel_attention(z, name + ".cattn", mask)
        y = ad.add(x, ad.mul(0.5, ad.add(temporal, channel)))
        y = ad.add(y, self._ffn(self._ln(y, name + ".ln2"), name + ".ffn"))
        return ad.mul(y, tmask)

    def _plain_block(self, x, mask, name):
        tmask = mask[:, :, None].astype(np.float64)
        z = self._ln(x, name + ".ln1")
        y = ad.add(x, self._mha(z, z, name + ".attn", mask))
        y = ad.add(y, self._ffn(self._ln(y, name + ".ln2"), name + ".ffn"))
        return ad.mul(y, tmask)

    # public stages

    def project_and_fuse(self, sources: list, mask: np.ndarray | None = None) -> Array:
        cfg = self.config
        if len(sources) != len(cfg.input_dims):
            raise ValueError(f"expected {len(cfg.input_dims)} feature sources, got {len(sources)}")
        T = sources[0].shape[-2]
        outs = []
        for i, src in enumerate(sources):
            src = ad.as_array(src)
            if src.shape[-2] != T:
                raise ValueError(f"source {i} has T={src.shape[-2]}, source 0 has T={T}")
            if src.shape[-1] != cfg.input_dims[i]:
                raise ValueError(f"source {i} has dim {src.shape[-1]}, config expects {cfg.input_dims[i]}")
            h = ad.gelu(self._linear(src, f"proj.{i}.fc1"))
            outs.append(self._linear(h, f"proj.{i}.fc2"))
        x = outs[0] if len(outs) == 1 else ad.concat(outs, axis=-1)
        if mask is not None:
            x = ad.mul(x, mask[..., None].astype(np.float64))
        return x

    def encode_video(self, batch: Batch) -> Array:
        x = self.project_and_fuse(batch.sources, batch.mask)
        if self.config.pos_encoding:
            pe = sinusoidal_encoding(batch.T, self.config.embed_dim)
            x = ad.mul(ad.add(x, pe), batch.mask[..., None].astype(np.float64))
        for d in range(self.config.depth):
            x = self.encoder_block(x, batch.mask, f"enc.{d}")
        return x

    def build_feature_pyramid(self, x, mask):
        feats, masks = [x], [mask]
        for lv in range(1, self.config.levels):
            m = masks[-1][:, ::2]
            y = ad.depthwise_conv1d(feats[-1], self._p(f"down.{lv}.w"), self._p(f"down.{lv}.b"), stride=2)
            y = ad.mul(y, m[..., None].astype(np.float64))
            feats.append(self.encoder_block(y, m, f"pyr.{lv}"))
            masks.append(m)
        return feats, masks

    def heads_forward(self, feats, masks, stride_seconds):
        cfg = self.config
        cls_out, loc_out = [], []
        for lv, (x, m) in enumerate(zip(feats, masks)):
            fm = m[..., None].astype(np.float64)
            h = x
            for j in range(cfg.head_layers - 1):
                h = ad.mul(ad.relu(ad.conv1d(h, self._p(f"head.cls.{j}.w"), self._p(f"head.cls.{j}.b"))), fm)
            cls_out.append(ad.conv1d(h, self._p("head.cls.out.w"), self._p("head.cls.out.b")))
            h = x
            for j in range(cfg.head_layers - 1):
                h = ad.mul(ad.relu(ad.conv1d(h, self._p(f"head.loc.{j}.w"), self._p(f"head.loc.{j}.b"))), fm)
            raw = ad.conv1d(h, self._p("head.loc.out.w"), self._p("head.loc.out.b"))
            scale = (2.0**lv) * np.asarray(stride_seconds, dtype=np.float64)[:, None, None]
            loc_out.append(ad.mul(ad.softplus(raw), scale))
        cls_logits = cls_out[0] if len(cls_out) == 1 else ad.concat(cls_out, axis=1)
        offsets = loc_out[0] if len(loc_out) == 1 else ad.concat(loc_out, axis=1)
        return cls_logits, offsets

    def text_encode(self, tokens, token_mask=None) -> Array:
        cfg = self.config
        tokens = ad.as_array(tokens)
        if tokens.ndim == 2:
            tokens = ad.reshape(tokens, (1,) + tokens.shape)
        B, N, _ = tokens.shape
        if N < 1:
            raise ValueError("empty token list")
        if N > cfg.max_tokens:
            raise ValueError(f"{N} tokens exceed max_tokens={cfg.max_tokens}")
        if token_mask is None:
            token_mask = np.ones((B, N), dtype=bool)
        x = self._linear(tokens, "text.proj")
        if cfg.text_pos_encoding:
            x = ad.add(x, sinusoidal_encoding(N, cfg.embed_dim))
        x = ad.mul(x, token_mask[..., None].astype(np.float64))
        for d in range(cfg.text_depth):
            x = self._plain_block(x, token_mask, f"text.{d}")
        return x

    def cross_fuse(self, video, mask, text, token_mask) -> Array:
        tmask = mask[:, :, None].astype(np.float64)
        v = video
        for d in range(self.config.fusion_depth):
            name = f"fuse.{d}"
            v = ad.add(v, self._mha(self._ln(v, name + ".ln1"), text, name + ".attn", token_mask))
            v = ad.add(v, self._ffn(self._ln(v, name + ".ln2"), name + ".ffn"))
            v = ad.mul(v, tmask)
        return v

    def forward(self, batch: Batch) -> DenseOutput:
        cfg = self.config
        self._attn_log = []
        x = self.encode_video(batch)
        query = None
        if cfg.mode == "nlq":
            if batch.tokens is None:
                raise ValueError("language-query mode needs text tokens")
            text = self.text_encode(batch.tokens, batch.token_mask)
            x = self.cross_fuse(x, batch.mask, text, batch.token_mask)
            tm = batch.token_mask.astype(np.float64)
            query = ad.div(ad.sum_(ad.mul(text, tm[..., None]), axis=1), tm.sum(axis=1, keepdims=True))
        feats, masks = self.build_feature_pyramid(x, batch.mask)
        cls_logits, offsets = self.heads_forward(feats, masks, batch.stride_seconds)
        pyr = build_pyramid(batch.T, cfg.levels)
        point_mask = np.concatenate(masks, axis=1)
        return DenseOutput(cls_logits, offsets, point_mask, pyr, feats, query, list(self._attn_log))

    __call__ = forward
