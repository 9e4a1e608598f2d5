"""Coupled training loop, checkpoint serialization and determinism plumbing.

One train step per batch: embed history, encode with context tokens, embed and
shift targets (or use learned queries), decode causally, draw one (t, r, eps)
per instance, form the corrected velocity target from two estimator passes,
and take a clipped Adam step on the masked MSE.  All randomness flows from a
single seeded generator so a (seed, thread_count=1) pair fixes the entire
trajectory bitwise.

Checkpoint layout (little-endian): magic "CGCK", u32 version, u64 total value
count, length-prefixed key=value config text, named tensor index
(name, shape, element offset), float64 payload, trailing CRC-32 of payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import flow
from .data import ContextTokenizer, WindowPair
from .errors import CheckpointError, ConfigError, NumericError
from .optim import AdamState, adam_step, clip_grad_norm

CHECKPOINT_MAGIC = b"CGCK"
CHECKPOINT_VERSION = 1
DIFFUSION_TRAIN_STEPS = 50


@dataclass
class TrainConfig:
    """Optimization settings.

    The reference learning-rate grid is {5e-4, 1e-4, 5e-5}, default 1e-4.
    ``total_derivative`` selects the velocity-target correction: True (the
    default) differentiates the estimator along the moving interpolant, whose
    fixed point is the true average velocity; False uses the plain time
    partial with a minus sign."""

    model: bb.ModelConfig = field(default_factory=bb.ModelConfig)
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    p_eq: float = 0.0
    h_t: float = 1e-3
    grad_clip: float = 1.0
    total_derivative: bool = True
    val_stride: int | None = None      # defaults to horizon (non-overlapping)
    val_samples: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.p_eq <= 1.0:
            raise ConfigError(f"p_eq must be in [0, 1], got {self.p_eq}")


def _batch_arrays(batch: list[WindowPair], cfg: bb.ModelConfig):
    x = np.stack([w.x_hist for w in batch])
    y = np.stack([w.y_true for w in batch])
    if cfg.n_context_tokens:
        ctx = np.stack([w.context_tokens for w in batch])
        if ctx.shape[1] != cfg.n_context_tokens:
            raise ConfigError(
                f"windows carry {ctx.shape[1]} context tokens, model expects "
                f"{cfg.n_context_tokens}")
    else:
        ctx = np.zeros((len(batch), 0), dtype=np.int64)
    return x, y, ctx


def _pad_patches(y: np.ndarray, cfg: bb.ModelConfig) -> np.ndarray:
    B = y.shape[0]
    if cfg.pad:
        y = np.concatenate([y, np.zeros((B, cfg.pad))], axis=1)
    return y.reshape(B, cfg.n_pred_patches, cfg.patch_size)


def pad_mask(cfg: bb.ModelConfig) -> np.ndarray:
    """1 for real positions, 0 for the zero-padded tail of the last patch."""
    m = np.ones((cfg.n_pred_patches, cfg.patch_size))
    if cfg.pad:
        m[-1, cfg.patch_size - cfg.pad:] = 0.0
    return m


def _decoder_states(bp: bb.BackboneParams, x, y, ctx):
    cfg = bp.config
    hist = bb.embed_patches(bp, x, "history")
    enc = bb.encode(bp, ctx, hist)
    if cfg.autoregressive:
        z_in = bb.shift_inputs(bp, bb.embed_patches(bp, y, "target"))
    else:
        z_in = bb.decoder_input_queries(bp, x.shape[0])
    return bb.decode(bp, z_in, enc)


def train_step(batch: list[WindowPair], bp: bb.BackboneParams,
               opt_state: AdamState, rng: np.random.Generator,
               tcfg: TrainConfig,
               diffusion: flow.DiffusionSchedule | None = None) -> float:
    """One optimization step; returns the scalar loss."""
    if not batch:
        raise ConfigError("train_step: empty batch")
    cfg = bp.config
    x, y, ctx = _batch_arrays(batch, cfg)
    y_p = _pad_patches(y, cfg)
    mask = pad_mask(cfg)
    schedule = flow.get_schedule(cfg.scheduler)

    params = bp.trainable()
    ad.zero_grads(params.values())
    with ad.Tape():
        z_out = _decoder_states(bp, x, y, ctx)

        if not cfg.flow_head:
            pred = bb.regression_readout(bp, z_out)
            loss = flow.flow_loss(pred, y_p, mask)
        elif cfg.head_kind == "mean_velocity":
            fs = flow.draw_flow_sample(y_p, rng, schedule, tcfg.p_eq)
            u = bb.denoise_velocity(bp, fs.y_hat, fs.t, fs.r, z_out)
            cond_const = ad.Tensor(z_out.data)

            def u_eval(noisy, t, r):
                with ad.no_grad():
                    return bb.denoise_velocity(bp, noisy, t, r, cond_const).data

            if tcfg.total_derivative:
                du = flow.time_total_derivative(u_eval, fs.y_hat, fs.v, fs.t,
                                                fs.r, tcfg.h_t, u0=u.data)
                target = flow.meanflow_target_total(fs.v, du, fs.t, fs.r)
            else:
                du = flow.time_partial(u_eval, fs.y_hat, fs.t, fs.r, tcfg.h_t,
                                       u0=u.data)
                target = flow.meanflow_target(fs.v, du, fs.t, fs.r)
            loss = flow.flow_loss(u, target, mask)
        elif cfg.head_kind == "vanilla_fm":
            eps = rng.standard_normal(y_p.shape)
            t, _ = flow.sample_times(rng, y_p.shape[0])
            y_hat = flow.interpolate(y_p, eps, t, schedule)
            alt = flow.alt_head_target("vanilla_fm", y_p, eps, y_hat, t,
                                       schedule=schedule)
            u = bb.denoise_velocity(bp, alt.noisy, alt.t, alt.r, z_out)
            loss = flow.flow_loss(u, alt.target, mask)
        elif cfg.head_kind == "diffusion":
            if diffusion is None:
                diffusion = flow.DiffusionSchedule(DIFFUSION_TRAIN_STEPS)
            eps = rng.standard_normal(y_p.shape)
            k = rng.integers(1, diffusion.n_steps + 1, y_p.shape[0])
            alt = flow.alt_head_target("diffusion", y_p, eps, None, 0.0,
                                       diffusion=diffusion, k=k)
            u = bb.denoise_velocity(bp, alt.noisy, alt.t, alt.r, z_out)
            loss = flow.flow_loss(u, alt.target, mask)
        else:
            raise ConfigError(f"unhandled head_kind {cfg.head_kind!r}")

        loss_val = float(loss.data)
        ad.backward(loss)

    norm = clip_grad_norm(params, tcfg.grad_clip)
    if not (np.isfinite(loss_val) and np.isfinite(norm)):
        raise NumericError(
            f"non-finite training state: loss={loss_val}, grad_norm={norm}, "
            f"lr={opt_state.lr}, step={opt_state.step}")
    adam_step(params, opt_state)
    return loss_val


@dataclass
class FitResult:
    params: bb.BackboneParams          # final parameters
    best_params: dict[str, np.ndarray]
    history: list[dict]
    best_epoch: int
    best_val_mse: float


def fit(tcfg: TrainConfig, train_windows: list[WindowPair],
        val_windows: list[WindowPair] | None = None,
        tokenizer: ContextTokenizer | None = None,
        streams: list[list[WindowPair]] | None = None,
        log=None) -> FitResult:
    """Train for the configured epochs, tracking the best validation MSE.

    ``streams``: optional per-dataset window lists for pooled training; batches
    are then drawn round-robin across streams each epoch.  Validation runs the
    forecaster at NFE=1 with a fixed evaluation seed derived from the config
    seed, so model selection is deterministic.
    """
    from . import evaluate  # late import: evaluate depends on backbone only

    cfg = tcfg.model
    bp = bb.BackboneParams(cfg, tcfg.seed)
    opt = AdamState(bp.trainable(), lr=tcfg.lr)
    rng = np.random.default_rng(tcfg.seed)
    diffusion = (flow.DiffusionSchedule(DIFFUSION_TRAIN_STEPS)
                 if cfg.head_kind == "diffusion" else None)

    history: list[dict] = []
    best_val = float("inf")
    best_epoch = -1
    best_params = {k: p.data.copy() for k, p in bp.trainable().items()}
    eval_seed = tcfg.seed + 7919

    for epoch in range(tcfg.epochs):
        losses = []
        for batch in _epoch_batches(train_windows, streams, tcfg.batch_size, rng):
            step = opt.step
            try:
                losses.append(train_step(batch, bp, opt, rng, tcfg, diffusion))
            except NumericError as e:
                raise NumericError(f"epoch {epoch}, step {step}: {e}") from e
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_windows:
            val = evaluate.evaluate_windows(
                bp, val_windows, nfe=1, n_samples=tcfg.val_samples,
                base_seed=eval_seed)
            row["val_mse"] = val["mse"]
            row["val_mae"] = val["mae"]
            if val["mse"] < best_val:
                best_val = val["mse"]
                best_epoch = epoch
                best_params = {k: p.data.copy() for k, p in bp.trainable().items()}
        history.append(row)
        if log:
            log(row)
    if not val_windows:
        best_params = {k: p.data.copy() for k, p in bp.trainable().items()}
        best_epoch = tcfg.epochs - 1
    return FitResult(params=bp, best_params=best_params, history=history,
                     best_epoch=best_epoch, best_val_mse=best_val)


def _epoch_batches(train_windows, streams, batch_size, rng):
    """Yield batches for one epoch; round-robin across streams when pooling."""
    if streams is None or len(streams) <= 1:
        order = rng.permutation(len(train_windows))
        for i in range(0, len(order), batch_size):
            yield [train_windows[j] for j in order[i:i + batch_size]]
        return
    per_stream = []
    for s in streams:
        order = rng.permutation(len(s))
        per_stream.append([[s[j] for j in order[i:i + batch_size]]
                           for i in range(0, len(order), batch_size)])
    n_rounds = max(len(b) for b in per_stream)
    for i in range(n_rounds):
        for batches in per_stream:
            if i < len(batches):
                yield batches[i]


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def _config_text(cfg: bb.ModelConfig, extra: dict | None = None) -> str:
    kv = {f"model.{k}": v for k, v in cfg.to_dict().items()}
    if extra:
        kv.update(extra)
    return "".join(f"{k}={json.dumps(v) if not isinstance(v, str) else v}\n"
                   for k, v in sorted(kv.items()))


def _parse_config_text(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        k, _, v = line.partition("=")
        out[k] = v
    return out


def save_checkpoint(path, cfg: bb.ModelConfig,
                    tensors: dict[str, np.ndarray],
                    extra_config: dict | None = None) -> None:
    """Write the binary checkpoint; bit-exact round trips by construction."""
    names = list(tensors)
    arrays = [np.ascontiguousarray(tensors[n], dtype=np.float64) for n in names]
    total = sum(a.size for a in arrays)
    cfg_bytes = _config_text(cfg, extra_config).encode("utf-8")

    index = bytearray()
    index += struct.pack("<I", len(names))
    offset = 0
    for n, a in zip(names, arrays):
        nb = n.encode("utf-8")
        index += struct.pack("<I", len(nb)) + nb
        index += struct.pack("<I", a.ndim)
        for d in a.shape:
            index += struct.pack("<Q", d)
        index += struct.pack("<Q", offset)
        offset += a.size

    payload = b"".join(a.astype("<f8", copy=False).tobytes() for a in arrays)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", total))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(bytes(index))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelConfig, tensors dict, config dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unknown checkpoint version {version} "
            f"(supported: {CHECKPOINT_VERSION})")
    total = struct.unpack("<Q", take(8, "value count"))[0]
    cfg_len = struct.unpack("<I", take(4, "config length"))[0]
    cfg_map = _parse_config_text(take(cfg_len, "config").decode("utf-8"))

    n_tensors = struct.unpack("<I", take(4, "tensor count"))[0]
    entries = []
    for _ in range(n_tensors):
        name_len = struct.unpack("<I", take(4, "name length"))[0]
        nm = take(name_len, "name").decode("utf-8")
        ndim = struct.unpack("<I", take(4, "ndim"))[0]
        shape = tuple(struct.unpack("<Q", take(8, "dim"))[0] for _ in range(ndim))
        off = struct.unpack("<Q", take(8, "offset"))[0]
        entries.append((nm, shape, off))

    payload = take(total * 8, "payload")
    crc_stored = struct.unpack("<I", take(4, "checksum"))[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupt file)")

    flat = np.frombuffer(payload, dtype="<f8")
    tensors = {}
    for nm, shape, off in entries:
        size = int(np.prod(shape)) if shape else 1
        if off + size > total:
            raise CheckpointError(f"{path}: tensor {nm} overruns payload")
        tensors[nm] = flat[off:off + size].reshape(shape).copy()

    model_kv = {}
    for k, v in cfg_map.items():
        if k.startswith("model."):
            model_kv[k[6:]] = json.loads(v)
    cfg = bb.ModelConfig.from_dict(model_kv)
    return cfg, tensors, cfg_map


def checkpoint_tensors(bp: bb.BackboneParams,
                       tokenizer: ContextTokenizer | None = None,
                       params: dict[str, np.ndarray] | None = None) -> dict:
    out = {}
    src = params if params is not None else {k: p.data for k, p in bp.trainable().items()}
    for k, v in src.items():
        out[f"param.{k}"] = v
    if tokenizer is not None:
        out.update(tokenizer.state_arrays())
    return out


def restore_backbone(cfg: bb.ModelConfig, tensors: dict[str, np.ndarray],
                     cfg_map: dict) -> tuple[bb.BackboneParams, ContextTokenizer | None]:
    bp = bb.BackboneParams(cfg, seed=0)
    expected = set(bp.trainable())
    got = {k[6:] for k in tensors if k.startswith("param.")}
    if expected != got:
        missing = sorted(expected - got)[:3]
        surplus = sorted(got - expected)[:3]
        raise CheckpointError(
            f"checkpoint parameters do not match config: missing {missing}, "
            f"unexpected {surplus}")
    for k in expected:
        arr = tensors[f"param.{k}"]
        if arr.shape != bp[k].data.shape:
            raise CheckpointError(
                f"checkpoint tensor param.{k} has shape {arr.shape}, "
                f"config implies {bp[k].data.shape}")
        bp[k].data = arr.copy()
    tok = None
    if "ctx.n_datasets" in cfg_map:
        edges = {k: v for k, v in tensors.items() if k.startswith("ctx.")}
        tok = ContextTokenizer.from_state(
            int(json.loads(cfg_map["ctx.n_datasets"])),
            cfg_map.get("ctx.variant", "full"), edges)
    return bp, tok
