"""Finite-difference verification of the whole differentiable stack."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .data import TrainingBatch, child_rng, pad_and_truncate
from .losses import LossSpec
from .models import ModelConfig, SequenceModel, build_model
from .objective import batch_loss

FD_STEP = 1e-4
REL_FLOOR = 1e-8


def random_tiny_batch(rng, n_items: int, max_len: int, batch_size: int = 2) -> TrainingBatch:
    """Random short sequences over a tiny catalog, padded to max_len."""
    inputs, targets, masks = [], [], []
    for _ in range(batch_size):
        length = int(rng.integers(3, max_len + 2))
        items = rng.integers(1, n_items + 1, size=length)
        i, t, m = pad_and_truncate(items.tolist(), max_len)
        inputs.append(i)
        targets.append(t)
        masks.append(m)
    return TrainingBatch(
        inputs=np.stack(inputs),
        targets=np.stack(targets),
        mask=np.stack(masks),
        user_rows=np.arange(batch_size, dtype=np.int64),
    )


def gradient_check(
    model: SequenceModel,
    spec: LossSpec,
    seed: int = 0,
    batch_size: int = 2,
    n_coords: int = 200,
    step: float = FD_STEP,
) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients on one random instance.

    Runs in double precision with dropout ignored (evaluation-mode forward).
    Checks every parameter coordinate when there are at most ``n_coords``,
    otherwise a random subsample of that size. The relative error uses
    max(|a|, |fd|, 1e-8) as denominator.

    Central differences carry an O(step^2 * f''') truncation term, so a
    coordinate whose gradient is tiny relative to its curvature can exceed
    the tolerance even when the analytic gradient is exact. Coordinates in
    that gray zone are re-measured at step / 10; a wrong gradient stays
    wrong at every step, so the refinement only removes measurement noise.
    """
    inst_rng = child_rng(seed, 11)
    batch = random_tiny_batch(inst_rng, model.n_items, model.config.max_len, batch_size)
    params = model.init_parameters(inst_rng, dtype=np.float64)

    def loss_value() -> float:
        with ad.no_grad():
            out = batch_loss(model, params, batch, spec, child_rng(seed, 13), train=False)
        return float(out.data)

    params.zero_grads()
    loss = batch_loss(model, params, batch, spec, child_rng(seed, 13), train=False)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}

    names = sorted(params.tensors)
    sizes = [params[k].data.size for k in names]
    total = int(np.sum(sizes))
    coord_rng = child_rng(seed, 17)
    if total <= n_coords:
        flat_coords = np.arange(total)
    else:
        flat_coords = coord_rng.choice(total, size=n_coords, replace=False)
    offsets = np.cumsum([0] + sizes)

    def central_diff(arr, local, h):
        old = arr[local]
        arr[local] = old + h
        up = loss_value()
        arr[local] = old - h
        down = loss_value()
        arr[local] = old
        return (up - down) / (2.0 * h)

    max_rel = 0.0
    for flat in flat_coords:
        slot = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[slot]
        local = int(flat - offsets[slot])
        arr = params[name].data.reshape(-1)
        analytic = float(grads[name].reshape(-1)[local])
        fd = central_diff(arr, local, step)
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), REL_FLOOR)
        if rel > 1e-5:
            fd2 = central_diff(arr, local, step / 10.0)
            rel2 = abs(analytic - fd2) / max(abs(analytic), abs(fd2), REL_FLOOR)
            rel = min(rel, rel2)
        max_rel = max(max_rel, rel)
    return max_rel


def tiny_model(arch: str, n_items: int = 12, dim: int = 8, layers: int = 2,
               max_len: int = 6) -> SequenceModel:
    """Verification-scale model: scores stay O(1) so gradients are well
    conditioned for finite differencing."""
    config = ModelConfig(
        arch=arch, dim=dim, layers=layers, heads=2, max_len=max_len,
        dropout=0.0, init_scale=0.35,
    )
    return build_model(config, n_items)
