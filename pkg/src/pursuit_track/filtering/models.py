"""Mixture-density filters over the adversary's location.

Both models map a batch of 13-float inputs to an N_g-component diagonal
Gaussian mixture. The prior-motion model splits the input into a learned
prior branch on (x_1, t), an embedding of the constant-velocity
extrapolation, and a scalar confidence gate that blends the two embeddings
before a shared decoder. The FC baseline runs the whole input through one
trunk into the same decoder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import ndgrad as nd
from ..ndgrad import MLP, Linear, Module, Tensor
from .inputs import N_INPUT, VELOCITY_COLUMNS, extrapolate_inputs

LOG_2PI = math.log(2.0 * math.pi)


class NumericFault(FloatingPointError):
    pass


@dataclass
class FilterConfig:
    n_components: int = 8
    sigma_min: float = 1e-3
    t_max: int = 500
    # Velocities are a few thousandths of a unit per step; rescale them to
    # order one before they enter any network.
    velocity_scale: float = 2428.0 / 15.0
    prior_hidden: tuple[int, ...] = (64, 64)
    motion_hidden: tuple[int, ...] = (32,)
    confidence_hidden: tuple[int, ...] = (32,)
    fc_hidden: tuple[int, ...] = (64, 64)
    decoder_hidden: tuple[int, ...] = (64,)
    embed: int = 32
    vector_gate: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> FilterConfig:
        d = dict(d)
        for k in ("prior_hidden", "motion_hidden", "confidence_hidden", "fc_hidden", "decoder_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class MixturePrediction:
    """Batched mixture: weights (N, K), means (N, K, 2), scales (N, K, 2)."""

    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        if self.weights.ndim == 1:
            self.weights = self.weights[None]
            self.means = self.means[None]
            self.scales = self.scales[None]

    def __len__(self) -> int:
        return self.weights.shape[0]

    def __getitem__(self, idx) -> MixturePrediction:
        if isinstance(idx, (int, np.integer)):
            idx = slice(idx, idx + 1)
        return MixturePrediction(self.weights[idx], self.means[idx], self.scales[idx])

    @property
    def n_components(self) -> int:
        return self.weights.shape[1]

    def mixture_mean(self) -> np.ndarray:
        return np.einsum("nk,nkd->nd", self.weights, self.means)

    def validate(self, sigma_min: float = 1e-3, tol: float = 1e-6) -> None:
        for name, arr in (("weights", self.weights), ("means", self.means), ("scales", self.scales)):
            if not np.all(np.isfinite(arr)):
                raise NumericFault(f"non-finite values in {name} head")
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(axis=1) - 1.0) > tol):
            raise NumericFault("mixture weights are not a distribution")
        if np.any(self.scales < sigma_min):
            raise NumericFault("scale head below sigma_min")

    @classmethod
    def concat(cls, preds: list[MixturePrediction]) -> MixturePrediction:
        return cls(
            np.concatenate([p.weights for p in preds]),
            np.concatenate([p.means for p in preds]),
            np.concatenate([p.scales for p in preds]),
        )


class MixtureDecoder(Module):
    """Embedding -> (log weights, means, scales)."""

    def __init__(self, cfg: FilterConfig, rng: np.random.Generator):
        k = cfg.n_components
        self.trunk = MLP([cfg.embed, *cfg.decoder_hidden], rng, out_act="relu")
        width = cfg.decoder_hidden[-1]
        self.logits = Linear(width, k, rng)
        self.mu = Linear(width, 2 * k, rng)
        self.sigma = Linear(width, 2 * k, rng)
        # Spread initial means over the map instead of piling them at 0.
        self.mu.bias.data[:] = rng.uniform(0.1, 0.9, size=2 * k)
        self.k = k
        self.sigma_min = cfg.sigma_min

    def __call__(self, emb: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        h = self.trunk(emb)
        n = h.shape[0]
        log_w = nd.log_softmax(self.logits(h))
        mu = self.mu(h).reshape(n, self.k, 2)
        sigma = (nd.softplus(self.sigma(h)) + self.sigma_min).reshape(n, self.k, 2)
        return log_w, mu, sigma


class MixtureFilter(Module):
    kind = "base"

    def __init__(self, cfg: FilterConfig):
        self.cfg = cfg

    def input_scale(self) -> np.ndarray:
        scale = np.ones(N_INPUT)
        scale[list(VELOCITY_COLUMNS)] = self.cfg.velocity_scale
        return scale

    def forward(self, X) -> tuple[Tensor, Tensor, Tensor]:
        raise NotImplementedError

    def __call__(self, X) -> tuple[Tensor, Tensor, Tensor]:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != N_INPUT:
            raise nd.DimensionError(f"filter input must have {N_INPUT} columns, got {X.shape}")
        return self.forward(X)

    def predict(self, X) -> MixturePrediction:
        with nd.no_grad():
            log_w, mu, sigma = self(X)
        w = np.exp(log_w.data)
        w /= w.sum(axis=1, keepdims=True)
        pred = MixturePrediction(w, mu.data, sigma.data)
        for name, arr in (("weights", w), ("means", mu.data), ("scales", sigma.data)):
            if not np.all(np.isfinite(arr)):
                raise NumericFault(f"non-finite output from the {name} head")
        return pred

    def save(self, path: str | Path) -> None:
        named = self.state_dict()
        named["__config__"] = np.frombuffer(_encode_config(self), dtype=np.uint8).astype(np.float64)
        nd.save_params(path, named)


class PMCFilter(MixtureFilter):
    kind = "pmc"

    def __init__(self, cfg: FilterConfig | None = None, seed: int = 0):
        cfg = cfg or FilterConfig()
        super().__init__(cfg)
        rng = np.random.default_rng(seed)
        self.prior = MLP([3, *cfg.prior_hidden, cfg.embed], rng, out_act="relu")
        self.motion = MLP([2, *cfg.motion_hidden, cfg.embed], rng, out_act="relu")
        gate_out = cfg.embed if cfg.vector_gate else 1
        self.confidence = MLP([N_INPUT, *cfg.confidence_hidden, gate_out], rng, out_act="sigmoid")
        self.decoder = MixtureDecoder(cfg, rng)

    def gate(self, X) -> np.ndarray:
        """The confidence weight alpha for each row (no graph)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        with nd.no_grad():
            return self.confidence(Tensor(X * self.input_scale())).data

    def embed(self, X: np.ndarray) -> Tensor:
        scaled = Tensor(X * self.input_scale())
        p_h = self.prior(Tensor(X[:, :3]))
        m_h = self.motion(Tensor(extrapolate_inputs(X, self.cfg.t_max)))
        alpha = self.confidence(scaled)
        return alpha * p_h + (1.0 - alpha) * m_h

    def forward(self, X: np.ndarray):
        return self.decoder(self.embed(X))


class FCFilter(MixtureFilter):
    kind = "fc"

    def __init__(self, cfg: FilterConfig | None = None, seed: int = 0):
        cfg = cfg or FilterConfig()
        super().__init__(cfg)
        rng = np.random.default_rng(seed)
        self.trunk = MLP([N_INPUT, *cfg.fc_hidden, cfg.embed], rng, out_act="relu")
        self.decoder = MixtureDecoder(cfg, rng)

    def forward(self, X: np.ndarray):
        return self.decoder(self.trunk(Tensor(X * self.input_scale())))


MODEL_KINDS = {"pmc": PMCFilter, "fc": FCFilter}


def make_filter(kind: str, cfg: FilterConfig | None = None, seed: int = 0) -> MixtureFilter:
    try:
        return MODEL_KINDS[kind](cfg, seed)
    except KeyError:
        raise ValueError(f"unknown filter kind {kind!r}; expected one of {sorted(MODEL_KINDS)}") from None


def _encode_config(model: MixtureFilter) -> bytes:
    import json

    return json.dumps({"kind": model.kind, "config": asdict(model.cfg)}, sort_keys=True).encode()


def load_filter(path: str | Path) -> MixtureFilter:
    import json

    named = nd.load_params(path)
    meta = json.loads(named.pop("__config__").astype(np.uint8).tobytes())
    model = make_filter(meta["kind"], FilterConfig.from_dict(meta["config"]))
    model.load_state_dict(named)
    return model


def filter_checksum(model: MixtureFilter) -> str:
    return nd.checksum(model.state_dict())


# -- likelihood -------------------------------------------------------------


def mixture_log_likelihood(log_w: Tensor, mu: Tensor, sigma: Tensor, y) -> Tensor:
    """Per-row log sum_i w_i N(y; mu_i, diag sigma_i^2), in log space."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1, 2)
    z = (Tensor(y) - mu) / sigma
    comp = -LOG_2PI - nd.log(sigma).sum(axis=-1) - 0.5 * (z * z).sum(axis=-1)
    return nd.logsumexp(log_w + comp, axis=-1)


def nll_tensor(model: MixtureFilter, X, y) -> Tensor:
    log_w, mu, sigma = model(X)
    return -mixture_log_likelihood(log_w, mu, sigma, y).mean()


def component_log_density(pred: MixturePrediction, y) -> np.ndarray:
    """log N(y; mu_i, diag sigma_i^2) for every row and component, (N, K)."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1, 2)
    z = (y - pred.means) / pred.scales
    return -LOG_2PI - np.log(pred.scales).sum(axis=-1) - 0.5 * (z * z).sum(axis=-1)


def log_likelihood(pred: MixturePrediction, y) -> np.ndarray:
    with np.errstate(divide="ignore"):
        a = np.log(pred.weights) + component_log_density(pred, y)
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def nll_loss(pred: MixturePrediction, y) -> float | np.ndarray:
    """Negative log-likelihood per row (a float for a single row)."""
    out = -log_likelihood(pred, y)
    return float(out[0]) if out.size == 1 else out
