"""Encoder-decoder transformer with an interval-conditioned denoising decoder.

Three attention stacks share one latent width:

* a bidirectional encoder fusing context tokens with history patch embeddings,
* a causal decoder (masked self-attention + cross-attention over the encoder)
  producing one autoregressive state per future patch,
* a denoising decoder whose queries are noised patch embeddings and whose
  keys/values are the decoder states, masked so query j sees states 0..j only.

Blocks are pre-norm with parameter-free layer norm and GELU feed-forwards.
All math runs through the autodiff ops, batched over a leading instance axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

HEAD_KINDS = ("mean_velocity", "vanilla_fm", "diffusion", "regression")
SCHEDULERS = ("linear", "cosine")

_N_TIME_FREQS = 8
TIME_FEATURES = 3 * 2 * _N_TIME_FREQS  # sin/cos of 8 frequencies for t, r, r-t


@dataclass
class ModelConfig:
    """Architecture hyperparameters; every learnable size derives from here."""

    look_back: int = 96
    horizon: int = 24
    patch_size: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_denoise_layers: int = 2
    n_context_tokens: int = 6
    context_vocab: int = 64
    ff_mult: int = 4
    head_kind: str = "mean_velocity"
    scheduler: str = "linear"
    autoregressive: bool = True
    flow_head: bool = True

    def __post_init__(self):
        for name in ("look_back", "horizon", "patch_size", "d_model", "n_heads",
                     "n_enc_layers", "n_dec_layers", "n_denoise_layers",
                     "context_vocab", "ff_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_context_tokens < 0:
            raise ConfigError("n_context_tokens must be >= 0")
        if self.look_back % self.patch_size:
            raise ConfigError(
                f"look_back {self.look_back} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head_kind {self.head_kind!r}")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {self.scheduler!r}")
        if not self.flow_head:
            self.head_kind = "regression"
        if self.head_kind == "regression":
            self.flow_head = False

    @property
    def n_hist_patches(self) -> int:
        return self.look_back // self.patch_size

    @property
    def n_pred_patches(self) -> int:
        return -(-self.horizon // self.patch_size)  # ceil

    @property
    def pad(self) -> int:
        """Zeros appended to the final target patch when P does not divide H."""
        return self.n_pred_patches * self.patch_size - self.horizon

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, (fan_in, fan_out))


class BackboneParams:
    """All learnable weights, stored flat in a name -> Tensor dict.

    Initialization is a pure function of (config, seed): projections are
    Xavier-uniform, embeddings and BOS are N(0, 0.02^2), biases zero, drawn
    in a fixed order from one seeded generator.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config
        D, FF, P = c.d_model, c.ff_mult * c.d_model, c.patch_size

        def proj(name, fi, fo):
            self.params[name] = Tensor(_xavier(rng, fi, fo), requires_grad=True)

        def bias(name, n):
            self.params[name] = Tensor(np.zeros(n), requires_grad=True)

        def emb(name, shape):
            self.params[name] = Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)

        proj("hist_in.w", P, D)
        bias("hist_in.b", D)
        if c.autoregressive or c.flow_head:
            # shifted decoder inputs and/or noisy-patch projection
            proj("target_in.w", P, D)
            bias("target_in.b", D)
        if c.autoregressive:
            emb("bos", (D,))
            emb("dec_pos", (c.n_pred_patches, D))
        else:
            emb("queries", (c.n_pred_patches, D))
        if c.n_context_tokens:
            emb("context_embed", (c.context_vocab, D))
        emb("enc_pos", (c.n_context_tokens + c.n_hist_patches, D))

        def block(prefix, cross: bool, self_attn: bool = True):
            if self_attn:
                for nm in ("q", "k", "v", "o"):
                    proj(f"{prefix}.self.{nm}", D, D)
            if cross:
                for nm in ("q", "k", "v", "o"):
                    proj(f"{prefix}.cross.{nm}", D, D)
            proj(f"{prefix}.ffn.w1", D, FF)
            bias(f"{prefix}.ffn.b1", FF)
            proj(f"{prefix}.ffn.w2", FF, D)
            bias(f"{prefix}.ffn.b2", D)

        for i in range(c.n_enc_layers):
            block(f"enc.{i}", cross=False)
        for i in range(c.n_dec_layers):
            block(f"dec.{i}", cross=True)
        if c.flow_head:
            for i in range(c.n_denoise_layers):
                block(f"den.{i}", cross=True, self_attn=False)
            proj("time_mlp.w1", TIME_FEATURES, D)
            bias("time_mlp.b1", D)
            proj("time_mlp.w2", D, D)
            bias("time_mlp.b2", D)
            proj("readout.w", D, P)
            bias("readout.b", P)
        else:
            proj("readout_reg.w", D, P)
            bias("readout_reg.b", P)

        self._mask_cache: dict = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def n_values(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def trainable(self) -> dict[str, Tensor]:
        return self.params

    def causal_mask(self, n: int) -> np.ndarray:
        """Additive mask blocking attention to positions strictly above the
        diagonal; -1e30 swamps any finite score so blocked weights are exact
        zeros after softmax."""
        key = ("causal", n)
        if key not in self._mask_cache:
            self._mask_cache[key] = np.triu(np.full((n, n), -1e30), 1)
        return self._mask_cache[key]


def _as_batch(x: np.ndarray, want_ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == want_ndim - 1:
        return x[None], True
    if x.ndim != want_ndim:
        raise ShapeError(f"expected {want_ndim - 1}- or {want_ndim}-D input, got {x.shape}")
    return x, False


def embed_patches(bp: BackboneParams, window: np.ndarray, stream: str) -> Tensor:
    """Project non-overlapping length-P patches to D_model and add positions.

    ``window`` holds normalized values, shape (L,) for history or (H,) for
    targets (batch axis optional in front).  Target windows are right-padded
    with zeros to a whole number of patches; history must divide exactly.
    """
    c = bp.config
    P = c.patch_size
    w, _ = _as_batch(np.asarray(window, dtype=np.float64), 2)
    B, n = w.shape
    if stream == "history":
        if n != c.look_back:
            raise ShapeError(f"history window length {n} != look_back {c.look_back}")
        n_patches = c.n_hist_patches
        proj_w, proj_b = bp["hist_in.w"], bp["hist_in.b"]
        pos = ad.slice_axis(bp["enc_pos"], 0, c.n_context_tokens,
                            c.n_context_tokens + n_patches)
    elif stream == "target":
        if n != c.horizon:
            raise ShapeError(f"target window length {n} != horizon {c.horizon}")
        if c.pad:
            w = np.concatenate([w, np.zeros((B, c.pad))], axis=1)
        n_patches = c.n_pred_patches
        proj_w, proj_b = bp["target_in.w"], bp["target_in.b"]
        pos = bp["dec_pos"]
    else:
        raise ConfigError(f"unknown stream {stream!r}")
    patches = Tensor(w.reshape(B, n_patches, P))
    out = ad.add(ad.matmul(patches, proj_w), proj_b)
    return ad.add(out, ad.expand(ad.reshape(pos, (1, n_patches, c.d_model)), 0, B))


def embed_patch_values(bp: BackboneParams, values: np.ndarray | Tensor,
                       first_patch: int = 0) -> Tensor:
    """Embed already-patched values (B, N, P) with the target projection plus
    decoder positions starting at ``first_patch`` (used when appending
    generated patches during autoregressive inference)."""
    c = bp.config
    t = values if isinstance(values, Tensor) else Tensor(np.asarray(values, float))
    B, N, P = t.data.shape
    if P != c.patch_size:
        raise ShapeError(f"patch width {P} != patch_size {c.patch_size}")
    out = ad.add(ad.matmul(t, bp["target_in.w"]), bp["target_in.b"])
    pos = ad.slice_axis(bp["dec_pos"], 0, first_patch, first_patch + N)
    return ad.add(out, ad.expand(ad.reshape(pos, (1, N, c.d_model)), 0, B))


def shift_inputs(bp: BackboneParams, target_embeddings: Tensor) -> Tensor:
    """Prepend the BOS embedding and drop the final target embedding."""
    c = bp.config
    emb = target_embeddings
    B, N, D = emb.data.shape
    bos = ad.expand(ad.reshape(bp["bos"], (1, 1, D)), 0, B)
    if N == 1:
        return bos
    return ad.concat([bos, ad.slice_axis(emb, 1, 0, N - 1)], axis=1)


def _encoder_blocks(bp: BackboneParams, x: Tensor, prefix: str, n_layers: int,
                    mask: np.ndarray | None = None) -> Tensor:
    c = bp.config
    for i in range(n_layers):
        pre = f"{prefix}.{i}"
        ln = ad.layer_norm(x)
        x = ad.attention_block(x, ln, ln, bp[f"{pre}.self.q"], bp[f"{pre}.self.k"],
                               bp[f"{pre}.self.v"], bp[f"{pre}.self.o"],
                               c.n_heads, mask)
        x = ad.ffn_block(x, bp[f"{pre}.ffn.w1"], bp[f"{pre}.ffn.b1"],
                         bp[f"{pre}.ffn.w2"], bp[f"{pre}.ffn.b2"])
    return ad.layer_norm(x)


def encode(bp: BackboneParams, context_tokens: np.ndarray,
           hist_embeddings: Tensor) -> Tensor:
    """Bidirectional encoding of [context tokens; history patches]."""
    c = bp.config
    ids = np.asarray(context_tokens)
    h = hist_embeddings
    B = h.data.shape[0]
    if ids.ndim == 1:
        ids = np.broadcast_to(ids, (B, ids.shape[0]))
    M = ids.shape[1]
    if M != c.n_context_tokens:
        raise ShapeError(f"got {M} context tokens, config says {c.n_context_tokens}")
    if M > 0:
        ctx = ad.embedding(bp["context_embed"], ids)
        pos = ad.slice_axis(bp["enc_pos"], 0, 0, M)
        ctx = ad.add(ctx, ad.expand(ad.reshape(pos, (1, M, c.d_model)), 0, B))
        x = ad.concat([ctx, h], axis=1)
    else:
        x = h
    return _encoder_blocks(bp, x, "enc", c.n_enc_layers)


def decode(bp: BackboneParams, z_dec_in: Tensor, h_enc_out: Tensor) -> Tensor:
    """Causal self-attention plus cross-attention over all encoder states."""
    c = bp.config
    x = z_dec_in
    N = x.data.shape[1]
    mask = bp.causal_mask(N)
    for i in range(c.n_dec_layers):
        pre = f"dec.{i}"
        ln = ad.layer_norm(x)
        x = ad.attention_block(x, ln, ln, bp[f"{pre}.self.q"], bp[f"{pre}.self.k"],
                               bp[f"{pre}.self.v"], bp[f"{pre}.self.o"],
                               c.n_heads, mask)
        x = ad.attention_block(x, ad.layer_norm(x), h_enc_out,
                               bp[f"{pre}.cross.q"], bp[f"{pre}.cross.k"],
                               bp[f"{pre}.cross.v"], bp[f"{pre}.cross.o"],
                               c.n_heads, None)
        x = ad.ffn_block(x, bp[f"{pre}.ffn.w1"], bp[f"{pre}.ffn.b1"],
                         bp[f"{pre}.ffn.w2"], bp[f"{pre}.ffn.b2"])
    return ad.layer_norm(x)


def time_features(t: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Sinusoidal features (8 frequencies, pi..8*pi) of t, r and r-t.

    Frequencies stay low so the finite-difference time derivative of the
    estimator is well-conditioned at initialization.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    freqs = math.pi * (1.0 + np.arange(_N_TIME_FREQS))
    feats = []
    for q in (t, r, r - t):
        arg = q[:, None] * freqs[None, :]
        feats.append(np.sin(arg))
        feats.append(np.cos(arg))
    return np.concatenate(feats, axis=1)


def denoise_velocity(bp: BackboneParams, noisy_patches: np.ndarray | Tensor,
                     t, r, z_dec_out: Tensor,
                     first_patch: int = 0) -> Tensor:
    """Predict per-patch velocity for noised patches over the interval [t, r].

    Queries are the projected noisy patches plus a time embedding of (t, r);
    keys/values are the decoder states, masked so the query for patch j only
    attends to states 0..j (``first_patch`` offsets j during autoregressive
    sampling, where a single query rides on a longer state prefix).
    """
    c = bp.config
    if not c.flow_head:
        raise ConfigError("denoise_velocity requires flow_head=true")
    nz = noisy_patches if isinstance(noisy_patches, Tensor) else \
        Tensor(np.asarray(noisy_patches, dtype=np.float64))
    if nz.data.ndim == 2:
        nz = ad.reshape(nz, (1,) + nz.data.shape)
    B, N, P = nz.data.shape
    if P != c.patch_size:
        raise ShapeError(f"noisy patch width {P} != patch_size {c.patch_size}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    r_arr = np.atleast_1d(np.asarray(r, dtype=np.float64))
    if t_arr.size == 1:
        t_arr = np.full(B, t_arr[0])
    if r_arr.size == 1:
        r_arr = np.full(B, r_arr[0])
    if np.any(t_arr < 0) or np.any(r_arr > 1) or np.any(t_arr > r_arr):
        raise ConfigError(f"need 0 <= t <= r <= 1, got t={t}, r={r}")

    x = ad.add(ad.matmul(nz, bp["target_in.w"]), bp["target_in.b"])
    tf = Tensor(time_features(t_arr, r_arr))
    te = ad.add(ad.matmul(ad.silu(ad.add(ad.matmul(tf, bp["time_mlp.w1"]),
                                         bp["time_mlp.b1"])),
                          bp["time_mlp.w2"]), bp["time_mlp.b2"])
    x = ad.add(x, ad.expand(ad.reshape(te, (B, 1, c.d_model)), 1, N))

    S = z_dec_out.data.shape[1]
    key = ("align", N, S, first_patch)
    mask = bp._mask_cache.get(key)
    if mask is None:
        mask = np.where(np.arange(S)[None, :] <= first_patch + np.arange(N)[:, None],
                        0.0, -1e30)
        bp._mask_cache[key] = mask
    for i in range(c.n_denoise_layers):
        pre = f"den.{i}"
        x = ad.attention_block(x, ad.layer_norm(x), z_dec_out,
                               bp[f"{pre}.cross.q"], bp[f"{pre}.cross.k"],
                               bp[f"{pre}.cross.v"], bp[f"{pre}.cross.o"],
                               c.n_heads, mask)
        x = ad.ffn_block(x, bp[f"{pre}.ffn.w1"], bp[f"{pre}.ffn.b1"],
                         bp[f"{pre}.ffn.w2"], bp[f"{pre}.ffn.b2"])
    x = ad.layer_norm(x)
    return ad.add(ad.matmul(x, bp["readout.w"]), bp["readout.b"])


def regression_readout(bp: BackboneParams, z_dec_out: Tensor) -> Tensor:
    """Direct patch-value regression from decoder states (flow_head=false)."""
    c = bp.config
    if c.flow_head:
        raise ConfigError("regression_readout requires flow_head=false")
    return ad.add(ad.matmul(z_dec_out, bp["readout_reg.w"]), bp["readout_reg.b"])


def decoder_input_queries(bp: BackboneParams, batch: int) -> Tensor:
    """Learned query embeddings replacing shifted targets (autoregressive=false)."""
    c = bp.config
    q = ad.reshape(bp["queries"], (1, c.n_pred_patches, c.d_model))
    return ad.expand(q, 0, batch)
