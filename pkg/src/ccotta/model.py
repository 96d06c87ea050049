"""Split feature-extractor / head network, source pretraining, mean teacher.

The extractor ``g`` is a stack of ``linear -> standardize -> relu`` hidden
blocks followed by a ``linear -> relu`` feature layer of width ``D``.  The head
``h`` is a single linear map from features to logits.  Standardization runs in
one of two modes: ``"source"`` uses statistics frozen after pretraining,
``"batch"`` recomputes them from the current batch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

CHECKPOINT_VERSION = 1
NORM_MODES = ("source", "batch")


@dataclass(frozen=True)
class Arch:
    input_dim: int
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 64
    num_classes: int = 10
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.input_dim, *self.hidden, self.feature_dim)
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @classmethod
    def from_dict(cls, d: dict) -> Arch:
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        prev = self.input_dim
        for k, width in enumerate(self.hidden):
            shapes[f"layer{k}.weight"] = (prev, width)
            shapes[f"layer{k}.bias"] = (width,)
            prev = width
        shapes["feature.weight"] = (prev, self.feature_dim)
        shapes["feature.bias"] = (self.feature_dim,)
        shapes["head.weight"] = (self.feature_dim, self.num_classes)
        shapes["head.bias"] = (self.num_classes,)
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.layer_shapes().values())


@dataclass
class SplitModel:
    arch: Arch
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0

    def copy(self) -> SplitModel:
        return SplitModel(self.arch, {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.buffers.items()}, self.seed)

    def on_tape(self, tape: Tape) -> dict[str, Tensor]:
        """Attach every parameter to ``tape`` as a differentiable leaf."""
        return {name: tape.leaf(value, name=name) for name, value in self.params.items()}

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())


def init_model(arch: Arch, seed: int) -> SplitModel:
    """Seeded fan-in scaled initialization (He for relu layers, zero biases)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.layer_shapes().items():
        if name.endswith(".weight"):
            gain = 1.0 if name.startswith("head") else 2.0
            params[name] = rng.standard_normal(shape) * np.sqrt(gain / shape[0])
        else:
            params[name] = np.zeros(shape)
    buffers = {}
    for k, width in enumerate(arch.hidden):
        buffers[f"layer{k}.mean"] = np.zeros(width)
        buffers[f"layer{k}.std"] = np.ones(width)
    return SplitModel(arch, params, buffers, seed)


def _param(model: SplitModel, params, name: str):
    return model.params[name] if params is None else params[name]


def _norm(model: SplitModel, k: int, a: Tensor, mode: str) -> Tensor:
    if mode == "batch":
        return ad.standardize(a)
    if mode == "source":
        mu = model.buffers[f"layer{k}.mean"]
        inv = 1.0 / (model.buffers[f"layer{k}.std"] + ad.BN_EPS)
        return ad.mul(ad.sub(a, mu), inv)
    raise ValueError(f"unknown norm mode {mode!r}; expected one of {NORM_MODES}")


def _linear(model: SplitModel, params, prefix: str, h):
    return ad.add(ad.matmul(h, _param(model, params, f"{prefix}.weight")),
                  _param(model, params, f"{prefix}.bias"))


def features(model: SplitModel, x, params=None, norm: str = "source") -> Tensor:
    """Extractor output ``g(x)`` as a B x D tensor."""
    h = ad.as_tensor(x)
    if h.values.ndim != 2 or h.shape[1] != model.arch.input_dim:
        raise ad.ShapeError(f"expected inputs of width {model.arch.input_dim}, got {h.shape}")
    for k in range(len(model.arch.hidden)):
        h = ad.relu(_norm(model, k, _linear(model, params, f"layer{k}", h), norm))
    return ad.relu(_linear(model, params, "feature", h))


def predict(model: SplitModel, z, params=None) -> Tensor:
    """Head ``h(z)``: logits B x C."""
    return _linear(model, params, "head", z)


def logits(model: SplitModel, x, params=None, norm: str = "source") -> Tensor:
    return predict(model, features(model, x, params, norm), params)


def probabilities(model: SplitModel, x, norm: str = "source") -> np.ndarray:
    return ad.softmax(logits(model, x, norm=norm)).values


def cross_entropy(logit: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.eye(logit.shape[1])[labels]
    logp = ad.log(ad.softmax(logit))
    return ad.scale(ad.total(ad.mul(logp, onehot)), -1.0 / len(labels))


class Adam:
    """Adaptive-moment optimizer over a name -> array parameter dict."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            params[name] = params[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def gradient_step(model: SplitModel, opt: Adam, loss_fn) -> float:
    """One optimizer step on ``loss_fn(params_on_tape) -> scalar Tensor``."""
    tape = Tape()
    tp = model.on_tape(tape)
    loss = loss_fn(tp)
    grads = ad.backward(loss, tp.values())
    opt.step(model.params, {name: grads[t] for name, t in tp.items()})
    return loss.item()


def _calibrate_norm(model: SplitModel, x: np.ndarray) -> None:
    """Freeze source statistics of every standardization layer from a full pass."""
    h = ad.Tensor(x)
    for k in range(len(model.arch.hidden)):
        a = _linear(model, None, f"layer{k}", h)
        mu = a.values.mean(axis=0)
        model.buffers[f"layer{k}.mean"] = mu
        model.buffers[f"layer{k}.std"] = np.sqrt(np.mean((a.values - mu) ** 2, axis=0))
        h = ad.relu(_norm(model, k, a, "source"))


def class_prototypes(model: SplitModel, x: np.ndarray, y: np.ndarray, num_classes: int,
                     norm: str = "source") -> np.ndarray:
    """Mean extractor output per class (C x D)."""
    z = features(model, x, norm=norm).values
    protos = np.zeros((num_classes, z.shape[1]))
    for c in range(num_classes):
        sel = y == c
        if not np.any(sel):
            raise ValueError(f"class {c} has no samples")
        protos[c] = z[sel].mean(axis=0)
    return protos


@dataclass
class SourceCheckpoint:
    model: SplitModel
    class_prototypes: np.ndarray
    domain_prototype: np.ndarray
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "version": CHECKPOINT_VERSION,
            "arch": self.model.arch.to_dict(),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in self.model.params.items()},
            "buffers": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                        for k, v in self.model.buffers.items()},
            "class_prototypes": self.class_prototypes.tolist(),
            "domain_prototype": self.domain_prototype.tolist(),
            "metadata": self.metadata,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> SourceCheckpoint:
        doc = json.loads(text)
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")

        def arrays(section):
            return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                    for k, v in section.items()}

        arch = Arch.from_dict(doc["arch"])
        params = arrays(doc["params"])
        expected = arch.layer_shapes()
        if set(params) != set(expected) or any(params[k].shape != s for k, s in expected.items()):
            raise ValueError("checkpoint parameters do not match the architecture")
        model = SplitModel(arch, params, arrays(doc.get("buffers", {})),
                           int(doc["metadata"].get("seed", 0)))
        return cls(model, np.asarray(doc["class_prototypes"], dtype=np.float64),
                   np.asarray(doc["domain_prototype"], dtype=np.float64), doc["metadata"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> SourceCheckpoint:
        return cls.from_json(Path(path).read_text())


def pretrain_source(model: SplitModel, x: np.ndarray, y: np.ndarray, epochs: int = 30,
                    lr: float = 1e-2, batch_size: int = 64, seed: int = 0) -> SourceCheckpoint:
    """Supervised training on labeled source data, then prototype extraction.

    Training uses batch statistics; afterwards the standardization layers are
    frozen to full-data source statistics and all reported quantities
    (accuracy, prototypes) use that frozen mode.
    """
    num_classes = model.arch.num_classes
    y = np.asarray(y, dtype=int)
    counts = np.bincount(y, minlength=num_classes)
    if len(counts) > num_classes or np.any(counts == 0):
        raise ValueError(f"every class needs at least one sample, got counts {counts.tolist()}")
    model = model.copy()
    rng = np.random.default_rng(seed)
    opt = Adam(lr=lr)
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            gradient_step(model, opt,
                          lambda p: cross_entropy(logits(model, x[idx], p, norm="batch"), y[idx]))
    _calibrate_norm(model, x)
    acc = float(np.mean(np.argmax(logits(model, x).values, axis=1) == y))
    protos = class_prototypes(model, x, y, num_classes)
    meta = {"arch": model.arch.to_dict(), "seed": model.seed, "source_accuracy": acc,
            "epochs": epochs, "lr": lr, "batch_size": batch_size, "train_seed": seed}
    return SourceCheckpoint(model, protos, protos.mean(axis=0), meta)


@dataclass
class TeacherStudent:
    student: SplitModel
    teacher: SplitModel
    ema_alpha: float = 0.999

    @classmethod
    def from_model(cls, model: SplitModel, ema_alpha: float = 0.999) -> TeacherStudent:
        return cls(model.copy(), model.copy(), ema_alpha)


def ema_update(pair: TeacherStudent) -> SplitModel:
    """teacher <- alpha * teacher + (1 - alpha) * student, per parameter."""
    a = pair.ema_alpha
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"ema_alpha must lie in [0, 1], got {a}")
    for name, s in pair.student.params.items():
        t = pair.teacher.params[name]
        pair.teacher.params[name] = a * t + (1.0 - a) * s
    return pair.teacher


def perturb(x: np.ndarray, seed, strength: float) -> np.ndarray:
    """Student-side input perturbation: Gaussian noise plus pairwise rotations.

    Noise has per-coordinate std ``strength / sqrt(d)`` so its expected norm is
    about ``strength``.  Coordinates are randomly paired and each pair is
    rotated by an angle drawn from ``N(0, strength^2)``.
    """
    if strength < 0:
        raise ValueError("strength must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if strength == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    n, d = x.shape
    out = x.copy()
    order = rng.permutation(d)
    pairs = order[: 2 * (d // 2)].reshape(-1, 2)
    angles = rng.normal(0.0, strength, size=(n, len(pairs)))
    c, s = np.cos(angles), np.sin(angles)
    i, j = pairs[:, 0], pairs[:, 1]
    xi, xj = x[:, i], x[:, j]
    out[:, i] = c * xi - s * xj
    out[:, j] = s * xi + c * xj
    out += rng.normal(0.0, strength / np.sqrt(d), size=x.shape)
    return out
