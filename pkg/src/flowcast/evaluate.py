"""Autoregressive forecasting, point metrics, interval coverage and sweeps.

Forecasting walks patch by patch: decode the prefix (BOS plus previously
generated patch embeddings), sample the next patch from the generative head
conditioned on the decoder states, append its embedding, repeat.  All S
trajectories of a window advance together as one batch and share a per-window
random stream (patch-major draw order), so a longer horizon extends a shorter
one bitwise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import flow
from .data import WindowPair
from .errors import ConfigError, NumericError, ShapeError
from .train import DIFFUSION_TRAIN_STEPS

SWEEP_CSV_HEADER = ("axis,cell,dataset,horizon,seed,mse,mae,"
                    "coverage50,coverage80,nfe,wallclock_ms")


@dataclass
class ForecastResult:
    trajectories: np.ndarray          # (S, H) denormalized sample paths
    mean: np.ndarray                  # (H,) per-step average of trajectories
    q10: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    q90: np.ndarray
    nfe: int
    seed: int
    mse: float | None = None          # of the mean path, when truth was given
    mae: float | None = None


def window_rng(base_seed: int, window_index: int) -> np.random.Generator:
    """Per-window stream: base seed XOR a unique instance index."""
    return np.random.default_rng((int(base_seed) ^ int(window_index)) & 0xFFFFFFFFFFFF)


def forecast(bp: bb.BackboneParams, window: WindowPair, nfe: int = 1,
             n_samples: int = 1, rng: np.random.Generator | None = None,
             seed: int = 0, horizon: int | None = None,
             truth_raw: np.ndarray | None = None) -> ForecastResult:
    """Sample ``n_samples`` trajectories for one window and summarize them."""
    cfg = bp.config
    if n_samples < 1:
        raise ConfigError("forecast: n_samples must be >= 1")
    for p in bp.trainable().values():
        if not np.all(np.isfinite(p.data)):
            raise NumericError("forecast: parameters contain non-finite values")
    H = cfg.horizon if horizon is None else horizon
    n_patches = -(-H // cfg.patch_size)
    if n_patches > cfg.n_pred_patches:
        raise ConfigError(
            f"horizon {H} needs {n_patches} patches; checkpoint supports "
            f"{cfg.n_pred_patches}")
    if rng is None:
        rng = window_rng(seed, 0)
    S = n_samples
    P = cfg.patch_size

    with ad.no_grad():
        hist = bb.embed_patches(bp, np.broadcast_to(window.x_hist,
                                                    (S, cfg.look_back)), "history")
        ctx = np.broadcast_to(window.context_tokens, (S, window.context_tokens.size))
        enc = bb.encode(bp, ctx, hist)

        if not cfg.autoregressive:
            z_out = bb.decode(bp, bb.decoder_input_queries(bp, S), enc)
            z_out = ad.Tensor(z_out.data[:, :n_patches])
            patches = _sample_patches(bp, z_out, (S, n_patches, P), nfe, rng,
                                      first_patch=0)
        else:
            dec_in = ad.expand(ad.reshape(bp["bos"], (1, 1, cfg.d_model)), 0, S)
            chunks = []
            for j in range(n_patches):
                z_out = bb.decode(bp, dec_in, enc)
                patch = _sample_patches(bp, z_out, (S, 1, P), nfe, rng,
                                        first_patch=j)
                chunks.append(patch)
                if j + 1 < n_patches:
                    emb = bb.embed_patch_values(bp, patch, first_patch=j)
                    dec_in = ad.concat([dec_in, emb], axis=1)
            patches = np.concatenate(chunks, axis=1)

    traj = patches.reshape(S, n_patches * P)[:, :H]
    traj = window.denormalize(traj)
    mean = traj.mean(axis=0)
    q10, q25, q75, q90 = np.quantile(traj, [0.10, 0.25, 0.75, 0.90], axis=0)
    res = ForecastResult(trajectories=traj, mean=mean, q10=q10, q25=q25,
                         q75=q75, q90=q90, nfe=nfe, seed=seed)
    if truth_raw is not None:
        res.mse, res.mae = metrics(mean, truth_raw)
    return res


def _sample_patches(bp, z_out, shape, nfe, rng, first_patch):
    cfg = bp.config
    if not cfg.flow_head:
        pred = bb.regression_readout(bp, z_out).data
        return pred[:, -shape[1]:, :].copy()  # last state(s) = current patch(es)

    def u_fn(noisy, t, r):
        return bb.denoise_velocity(bp, noisy, t, r, z_out,
                                   first_patch=first_patch).data

    if cfg.head_kind == "mean_velocity":
        if nfe == 1:
            return flow.one_step_sample(u_fn, cfg.head_kind, shape, rng)
        return flow.multi_step_sample(u_fn, cfg.head_kind, shape, rng, k=nfe)
    if cfg.head_kind == "vanilla_fm":
        return flow.multi_step_sample(u_fn, cfg.head_kind, shape, rng, k=nfe)
    if cfg.head_kind == "diffusion":
        sched = flow.DiffusionSchedule(DIFFUSION_TRAIN_STEPS)
        return flow.multi_step_sample(u_fn, cfg.head_kind, shape, rng, k=nfe,
                                      diffusion=sched)
    raise ConfigError(f"unknown head_kind {cfg.head_kind!r}")


def metrics(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(MSE, MAE) on equal-length denormalized paths."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"metrics: shapes differ, {pred.shape} vs {truth.shape}")
    d = pred - truth
    return float((d * d).mean()), float(np.abs(d).mean())


def interval_coverage(result: ForecastResult, truth: np.ndarray) -> dict[str, float]:
    """Fraction of truth points inside the 50% and 80% bands."""
    if result.trajectories.shape[0] < 20:
        raise ConfigError(
            f"interval_coverage needs >= 20 samples, got {result.trajectories.shape[0]}")
    truth = np.asarray(truth, dtype=np.float64)
    in50 = (truth >= result.q25) & (truth <= result.q75)
    in80 = (truth >= result.q10) & (truth <= result.q90)
    return {"coverage50": float(in50.mean()), "coverage80": float(in80.mean())}


def baseline(kind: str, window: WindowPair, horizon: int | None = None) -> np.ndarray:
    """Persistence repeats the last observed raw value; mean repeats the
    look-back mean.  Returned on the denormalized scale."""
    H = horizon if horizon is not None else window.y_true.shape[0]
    if kind == "persistence":
        last = window.denormalize(window.x_hist[-1:])[0]
        return np.full(H, last)
    if kind == "mean":
        return np.full(H, window.mean)
    raise ConfigError(f"unknown baseline {kind!r}")


def evaluate_windows(bp: bb.BackboneParams, windows: list[WindowPair],
                     nfe: int = 1, n_samples: int = 1, base_seed: int = 0,
                     horizon: int | None = None,
                     with_coverage: bool = False) -> dict:
    """Average per-window metrics of the mean path over a window list."""
    if not windows:
        raise ConfigError("evaluate_windows: no windows")
    mses, maes, c50, c80 = [], [], [], []
    for i, w in enumerate(windows):
        H = horizon if horizon is not None else w.y_true.shape[0]
        truth = w.denormalize(w.y_true[:H])
        res = forecast(bp, w, nfe=nfe, n_samples=n_samples,
                       rng=window_rng(base_seed, i), horizon=H,
                       truth_raw=truth)
        mses.append(res.mse)
        maes.append(res.mae)
        if with_coverage:
            cov = interval_coverage(res, truth)
            c50.append(cov["coverage50"])
            c80.append(cov["coverage80"])
    out = {"mse": float(np.mean(mses)), "mae": float(np.mean(maes)),
           "n_windows": len(windows)}
    if with_coverage:
        out["coverage50"] = float(np.mean(c50))
        out["coverage80"] = float(np.mean(c80))
    return out


def baseline_mse(windows: list[WindowPair], kind: str = "persistence") -> float:
    vals = []
    for w in windows:
        truth = w.denormalize(w.y_true)
        pred = baseline(kind, w)
        vals.append(metrics(pred, truth)[0])
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# experiment sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = {
    "nfe": [1, 2, 3],
    "scheduler": ["linear", "cosine"],
    "patch_size": [2, 4, 6, 8, 10],
    "ablation": ["full", "no_ar", "no_flow", "no_ar_flow",
                 "ctx_no_domain", "ctx_no_statistics", "ctx_no_text"],
    "head": ["mean_velocity", "vanilla_fm", "diffusion"],
    "domain": ["in", "cross"],
}


def run_sweep(spec: dict, log=None) -> list[str]:
    """Train/evaluate every cell of one sweep axis and emit CSV rows.

    ``spec`` keys: axis (required), cells (optional subset), seeds (list),
    datasets ({name: Dataset}), look_back, horizons, patch_size, epochs,
    n_samples, plus optional TrainConfig overrides.  The nfe axis trains one
    checkpoint per seed and varies only the sampler.
    """
    from . import data as data_mod
    from .train import TrainConfig, fit

    axis = spec.get("axis")
    if axis not in SWEEP_AXES:
        raise ConfigError(
            f"unknown sweep axis {axis!r}; valid: {sorted(SWEEP_AXES)}")
    cells = spec.get("cells", SWEEP_AXES[axis])
    bad = [c for c in cells if c not in SWEEP_AXES[axis]]
    if bad:
        raise ConfigError(f"unknown cells for axis {axis}: {bad}")
    seeds = [int(s) for s in spec.get("seeds", [0])]
    datasets = spec["datasets"]
    look_back = int(spec.get("look_back", 96))
    horizons = [int(h) for h in spec.get("horizons", [24])]
    epochs = int(spec.get("epochs", 10))
    n_samples = int(spec.get("n_samples", 20))
    rows = []

    def one_cell(cell, seed, horizon):
        model_kw = dict(look_back=look_back, horizon=horizon,
                        patch_size=int(spec.get("patch_size", 4)))
        variant = "full"
        head = "mean_velocity"
        scheduler = "linear"
        ar, fh = True, True
        if axis == "scheduler":
            scheduler = cell
        elif axis == "patch_size":
            model_kw["patch_size"] = int(cell)
        elif axis == "head":
            head = cell
        elif axis == "ablation":
            if cell == "no_ar":
                ar = False
            elif cell == "no_flow":
                fh = False
            elif cell == "no_ar_flow":
                ar = fh = False
            elif cell.startswith("ctx_"):
                variant = cell[4:]
        names = sorted(datasets) if axis == "domain" and cell == "cross" \
            else sorted(datasets)
        pooled = axis == "domain" and cell == "cross"

        # windows per dataset with a shared tokenizer
        tok = data_mod.ContextTokenizer(n_datasets=len(names), variant=variant)
        splits = {nm: data_mod.split(datasets[nm], look_back, horizon,
                                     spec.get("split_mode", ("ratio", (0.7, 0.1, 0.2))))
                  for nm in names}
        all_train_lbs = []
        for nm in names:
            sp = splits[nm]
            for d in range(sp.train.shape[1]):
                col = sp.train[:, d]
                n_w = col.shape[0] - look_back - horizon + 1
                lbs = np.lib.stride_tricks.sliding_window_view(
                    col, look_back)[:n_w]
                all_train_lbs.append(lbs)
        if variant != "no_text":
            tok.fit(np.concatenate(all_train_lbs, axis=0))

        model_kw.update(n_context_tokens=tok.n_tokens, context_vocab=tok.vocab_size,
                        head_kind=head, scheduler=scheduler,
                        autoregressive=ar, flow_head=fh)
        mcfg = bb.ModelConfig(**model_kw)
        tcfg = TrainConfig(model=mcfg, epochs=epochs, seed=seed,
                           lr=float(spec.get("lr", 1e-4)),
                           batch_size=int(spec.get("batch_size", 4)),
                           p_eq=float(spec.get("p_eq", 0.0)),
                           total_derivative=bool(spec.get("total_derivative", False)))

        def windows_of(nm, part, stride):
            sp = splits[nm]
            return data_mod.make_windows(getattr(sp, part), look_back, horizon,
                                         stride=stride, tokenizer=tok,
                                         dataset_id=names.index(nm))

        results = []
        if pooled:
            streams = [windows_of(nm, "train", 1) for nm in names]
            train_w = [w for s in streams for w in s]
            val_w = [w for nm in names for w in windows_of(nm, "val", horizon)]
            res = fit(tcfg, train_w, val_w, tokenizer=tok,
                      streams=streams, log=log)
            _restore_best(res)
            for nm in names:
                results.append((nm, res))
        else:
            for nm in names:
                res = fit(tcfg, windows_of(nm, "train", 1),
                          windows_of(nm, "val", horizon), tokenizer=tok, log=log)
                _restore_best(res)
                results.append((nm, res))

        for nm, res in results:
            test_w = windows_of(nm, "test", horizon)
            for nfe in ([int(c) for c in cells] if axis == "nfe" else [1]):
                t0 = time.perf_counter()
                m = evaluate_windows(res.params, test_w, nfe=nfe,
                                     n_samples=n_samples, base_seed=seed,
                                     with_coverage=n_samples >= 20)
                wall = (time.perf_counter() - t0) * 1000.0
                cell_name = nfe if axis == "nfe" else cell
                rows.append(_csv_row(axis, cell_name, nm, horizon, seed, m,
                                     nfe, wall))

    for seed in seeds:
        for horizon in horizons:
            if axis == "nfe":
                one_cell(cells[0], seed, horizon)  # one checkpoint, nfe varies inside
            else:
                for cell in cells:
                    one_cell(cell, seed, horizon)
    return rows


def _restore_best(res):
    for k, p in res.params.trainable().items():
        p.data = res.best_params[k].copy()


def _csv_row(axis, cell, dataset, horizon, seed, m, nfe, wall_ms) -> str:
    c50 = m.get("coverage50", "")
    c80 = m.get("coverage80", "")
    return (f"{axis},{cell},{dataset},{horizon},{seed},{m['mse']:.6f},"
            f"{m['mae']:.6f},{c50 if c50 == '' else f'{c50:.4f}'},"
            f"{c80 if c80 == '' else f'{c80:.4f}'},{nfe},{wall_ms:.1f}")
