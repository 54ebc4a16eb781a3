"""Trainable feature extractor and classifier with analytic gradients.

The extractor is a two-layer dense network (input -> hidden -> feature,
nonlinearity after the first layer); the classifier is one dense layer from
feature space to class logits. Gradients are computed by hand and validated
against central finite differences in the gradcheck suite, so everything is
kept in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InvalidInputError, TrainingDivergedError, UsageError

# name -> (activation, derivative as a function of the pre-activation)
ACTIVATIONS = {
    "tanh": (np.tanh, lambda pre: 1.0 - np.tanh(pre) ** 2),
    "relu": (
        lambda x: np.maximum(x, 0.0),
        lambda pre: (pre > 0.0).astype(np.float64),
    ),
}

PARAM_KEYS = ("w1", "b1", "w2", "b2", "wc", "bc")

CHECKPOINT_FORMAT = "muvo-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelState:
    """All trainable parameters. Shapes: w1 (h, d_in), w2 (d, h), wc (C, d)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wc: np.ndarray
    bc: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation '{self.activation}'")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w2.shape[0]

    @property
    def classes(self) -> int:
        return self.wc.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_KEYS}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params().values())


@dataclass
class ForwardCache:
    """Activations retained by ``forward`` for the matching ``backward``."""

    x: np.ndarray        # (n, d_in)
    pre1: np.ndarray     # (n, h) pre-activation of the hidden layer
    hidden: np.ndarray   # (n, h)
    features: np.ndarray  # (n, d)
    logits: np.ndarray   # (n, C)


def init_model(input_dim, hidden_dim, feature_dim, classes, activation="tanh",
               rng=None) -> ModelState:
    """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def layer(fan_out, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        return w, b

    w1, b1 = layer(hidden_dim, input_dim)
    w2, b2 = layer(feature_dim, hidden_dim)
    wc, bc = layer(classes, feature_dim)
    return ModelState(w1, b1, w2, b2, wc, bc, activation=activation)


def forward(state: ModelState, x) -> ForwardCache:
    """Run the network on ``x`` (one vector or a batch of row vectors).

    Deterministic given (state, x); the returned cache carries features and
    logits plus everything ``backward`` needs.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != state.input_dim:
        raise InvalidInputError(
            f"expected inputs of dim {state.input_dim}, got shape {x.shape}")
    act, _ = ACTIVATIONS[state.activation]
    pre1 = x @ state.w1.T + state.b1
    hidden = act(pre1)
    features = hidden @ state.w2.T + state.b2
    logits = features @ state.wc.T + state.bc
    return ForwardCache(x=x, pre1=pre1, hidden=hidden, features=features,
                        logits=logits)


def backward(state: ModelState, cache: ForwardCache, dlogits,
             dfeatures=None) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients.

    ``dlogits`` is dL/dz (n, C); ``dfeatures`` optionally adds a direct
    dL/df term (n, d) for losses defined on features (affinity terms).
    """
    if cache is None:
        raise UsageError("backward requires the forward cache for the same inputs")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != cache.logits.shape:
        raise InvalidInputError(
            f"dlogits shape {dlogits.shape} != logits shape {cache.logits.shape}")
    _, dact = ACTIVATIONS[state.activation]

    dwc = dlogits.T @ cache.features
    dbc = dlogits.sum(axis=0)
    dfeat = dlogits @ state.wc
    if dfeatures is not None:
        dfeatures = np.asarray(dfeatures, dtype=np.float64)
        if dfeatures.shape != cache.features.shape:
            raise InvalidInputError(
                f"dfeatures shape {dfeatures.shape} != features shape "
                f"{cache.features.shape}")
        dfeat = dfeat + dfeatures

    dw2 = dfeat.T @ cache.hidden
    db2 = dfeat.sum(axis=0)
    dhidden = dfeat @ state.w2
    dpre1 = dhidden * dact(cache.pre1)
    dw1 = dpre1.T @ cache.x
    db1 = dpre1.sum(axis=0)
    return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2, "wc": dwc, "bc": dbc}


def zero_grads(state: ModelState) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in state.params().items()}


def accumulate_grads(total: dict, extra: dict) -> dict:
    for k, v in extra.items():
        total[k] += v
    return total


@dataclass
class OptimizerState:
    """SGD with momentum under an inverse-decay schedule.

    lr(t) = base_lr * (1 + gamma*t)^(-beta); ``refresh_schedule`` resets t so
    training restarts at base_lr while keeping the momentum buffers.
    """

    base_lr: float
    momentum: float = 0.9
    gamma: float = 1e-4
    beta: float = 0.75
    step_count: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise InvalidInputError("base_lr must be positive")


def init_optimizer(state: ModelState, base_lr, momentum=0.9, gamma=1e-4,
                   beta=0.75) -> OptimizerState:
    vel = {k: np.zeros_like(v) for k, v in state.params().items()}
    return OptimizerState(base_lr=base_lr, momentum=momentum, gamma=gamma,
                          beta=beta, step_count=0, velocity=vel)


def effective_lr(opt: OptimizerState) -> float:
    return opt.base_lr * (1.0 + opt.gamma * opt.step_count) ** (-opt.beta)


def sgd_step(state: ModelState, opt: OptimizerState,
             grads: dict[str, np.ndarray]) -> ModelState:
    """One momentum-SGD update in place; increments the schedule step."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        norms = {k: float(np.linalg.norm(np.nan_to_num(g)))
                 for k, g in grads.items()}
        raise TrainingDivergedError(
            f"non-finite gradient for parameter(s) {bad}", components=norms)
    lr = effective_lr(opt)
    for k, p in state.params().items():
        v = opt.velocity[k]
        v *= opt.momentum
        v += grads[k]
        p -= lr * v
    opt.step_count += 1
    return state


def refresh_schedule(opt: OptimizerState) -> OptimizerState:
    """Restart the decay schedule at base_lr; momentum buffers are kept."""
    opt.step_count = 0
    return opt


# ---------------------------------------------------------------------------
# Checkpoint I/O. Layout (JSON, one object):
#   format: "muvo-checkpoint", version: 1, iteration: int,
#   model: {activation, w1, b1, w2, b2, wc, bc},
#   optimizer: {base_lr, momentum, gamma, beta, step_count, velocity{...}},
#   confidence: ConfidenceBank.to_dict(),
#   prototypes: PrototypeBank.to_dict(),
#   source_bank: SourceBank.to_dict()
# All arrays are nested lists of float64 values.
# ---------------------------------------------------------------------------

def save_checkpoint(path, state: ModelState, opt: OptimizerState,
                    confidence_bank, prototype_bank, source_bank,
                    iteration: int) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "iteration": int(iteration),
        "model": {"activation": state.activation,
                  **{k: v.tolist() for k, v in state.params().items()}},
        "optimizer": {
            "base_lr": opt.base_lr,
            "momentum": opt.momentum,
            "gamma": opt.gamma,
            "beta": opt.beta,
            "step_count": opt.step_count,
            "velocity": {k: v.tolist() for k, v in opt.velocity.items()},
        },
        "confidence": confidence_bank.to_dict(),
        "prototypes": prototype_bank.to_dict(),
        "source_bank": source_bank.to_dict(),
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path):
    """Read a checkpoint back into live objects.

    Returns (state, optimizer, confidence_bank, prototype_bank, source_bank,
    iteration). Corrupt files or version mismatches raise InvalidInputError.
    """
    from .affinity import PrototypeBank, SourceBank
    from .pseudolabel import ConfidenceBank

    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"{path} is not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(
            f"checkpoint version {doc.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    try:
        m = doc["model"]
        state = ModelState(
            **{k: np.asarray(m[k], dtype=np.float64) for k in PARAM_KEYS},
            activation=m["activation"])
        o = doc["optimizer"]
        opt = OptimizerState(
            base_lr=o["base_lr"], momentum=o["momentum"], gamma=o["gamma"],
            beta=o["beta"], step_count=o["step_count"],
            velocity={k: np.asarray(v, dtype=np.float64)
                      for k, v in o["velocity"].items()})
        conf = ConfidenceBank.from_dict(doc["confidence"])
        protos = PrototypeBank.from_dict(doc["prototypes"])
        source = SourceBank.from_dict(doc["source_bank"])
        iteration = int(doc["iteration"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"corrupt checkpoint {path}: {exc}") from exc
    return state, opt, conf, protos, source, iteration
