"""Offline NLL training for the mixture filters."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import ndgrad as nd
from ..terrain import ConfigError
from .models import FilterConfig, MixtureFilter, make_filter, nll_tensor

log = logging.getLogger(__name__)


@dataclass
class FilterHyper:
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    grad_clip: float | None = None
    config: FilterConfig = field(default_factory=FilterConfig)


@dataclass
class TrainResult:
    model: MixtureFilter
    train_nll: list[float]
    val_nll: list[float]
    best_epoch: int


def mean_nll(model: MixtureFilter, X, y, batch: int = 4096) -> float:
    total = 0.0
    with nd.no_grad():
        for i in range(0, len(X), batch):
            total += nll_tensor(model, X[i : i + batch], y[i : i + batch]).item() * len(X[i : i + batch])
    return total / len(X)


def train_filter(dataset, model_kind: str, hyper: FilterHyper | None = None, model: MixtureFilter | None = None) -> TrainResult:
    """Minimize mean NLL with Adam; stop when validation NLL has not improved
    for ``patience`` epochs and restore the best parameters.

    ``dataset`` provides ``arrays(split) -> (X, y)`` for "train" and "val".
    Passing ``model`` resumes from existing parameters.
    """
    hyper = hyper or FilterHyper()
    X, y = dataset.arrays("train")
    if len(X) == 0:
        raise ConfigError("training split is empty")
    Xv, yv = dataset.arrays("val")
    if len(Xv) == 0:
        Xv, yv = X, y

    model = model or make_filter(model_kind, hyper.config, seed=hyper.seed)
    opt = nd.Adam(model.parameters(), lr=hyper.lr)
    rng = np.random.default_rng(hyper.seed)

    train_curve: list[float] = []
    val_curve: list[float] = []
    best = (np.inf, model.state_dict(), 0)
    stale = 0
    for epoch in range(1, hyper.max_epochs + 1):
        order = rng.permutation(len(X))
        running = 0.0
        for i in range(0, len(X), hyper.batch_size):
            idx = order[i : i + hyper.batch_size]
            model.zero_grad()
            loss = nll_tensor(model, X[idx], y[idx])
            loss.backward()
            if hyper.grad_clip is not None:
                nd.clip_grad_norm(model.parameters(), hyper.grad_clip)
            opt.step()
            running += loss.item() * len(idx)
        train_curve.append(running / len(X))
        val = mean_nll(model, Xv, yv)
        val_curve.append(val)
        log.debug("epoch %d train %.4f val %.4f", epoch, train_curve[-1], val)
        if val < best[0]:
            best = (val, model.state_dict(), epoch)
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    model.load_state_dict(best[1])
    return TrainResult(model, train_curve, val_curve, best[2])
