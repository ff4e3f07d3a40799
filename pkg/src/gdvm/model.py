"""Classifier with a Gaussian latent layer, its variants, training and prediction.

The network maps ``x`` through a shared trunk into two heads, ``mu(x)`` and
``logvar(x)``. Training samples ``z = mu + eps * exp(logvar / 2)`` and feeds
it to the classifier; the GDVM variant adds ``beta * KL(N(mu, diag(exp
logvar)) || N(0, I))`` to the task loss. Prediction uses ``z = mu``.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import MULTICLASS, MULTILABEL, ZEROSHOT, Dataset, TaskKind
from .errors import CheckpointError, ConfigError, ContractError, DimensionError, NumericAbort
from .metrics import (
    argmax_decision,
    binary_cross_entropy_loss,
    cross_entropy_loss,
    l2_semantic_loss,
    threshold_decision,
)
from .nn import LayerSpec, Network, OptimizerState, ParameterSet, optimizer_step

log = logging.getLogger(__name__)

BASELINE, GSNN, GDVM = "baseline", "gsnn", "gdvm"
VARIANTS = (BASELINE, GSNN, GDVM)
LOGVAR_CLAMP = 10.0
CHECKPOINT_FORMAT = "gdvm-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelVariant:
    """Baseline never samples; GSNN samples with no KL; GDVM samples and adds ``beta * KL``."""

    tag: str = GDVM
    beta: float = 1.0

    def __post_init__(self):
        if self.tag not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.tag!r}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.tag != GDVM:
            self.beta = 0.0

    @property
    def samples(self) -> bool:
        return self.tag != BASELINE


@dataclass
class Architecture:
    """Trunk shared by both heads, latent width, and the classifier that reads ``z``.

    ``mu_activation`` is an optional activation applied after the mu head's
    dense layer; the log-variance head is always linear.
    """

    trunk: list[LayerSpec]
    latent_dim: int
    classifier: list[LayerSpec]
    mu_activation: Optional[str] = None

    def __post_init__(self):
        self.trunk = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in self.trunk]
        self.classifier = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in self.classifier]
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.mu_activation not in (None, "relu"):
            raise ConfigError(f"mu_activation must be null or 'relu', got {self.mu_activation!r}")

    def to_dict(self) -> dict:
        return {
            "trunk": [s.to_dict() for s in self.trunk],
            "latent_dim": self.latent_dim,
            "mu_activation": self.mu_activation,
            "classifier": [s.to_dict() for s in self.classifier],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        try:
            return cls(trunk=list(d["trunk"]), latent_dim=int(d["latent_dim"]),
                       classifier=list(d["classifier"]), mu_activation=d.get("mu_activation"))
        except KeyError as exc:
            raise ConfigError(f"architecture is missing {exc.args[0]!r}") from None

    def head_specs(self) -> tuple[list[LayerSpec], list[LayerSpec]]:
        mu = [LayerSpec("dense", out=self.latent_dim)]
        if self.mu_activation:
            mu.append(LayerSpec(self.mu_activation))
        return mu, [LayerSpec("dense", out=self.latent_dim)]


class GaussianLatentHead:
    """Shared trunk feeding a mean head and (unless Baseline) a log-variance head."""

    def __init__(self, trunk: Network, mu_head: Network, logvar_head: Optional[Network]):
        self.trunk = trunk
        self.mu_head = mu_head
        self.logvar_head = logvar_head

    def __call__(self, x: Tensor, train: bool = False, rng=None) -> tuple[Tensor, Optional[Tensor]]:
        h = self.trunk.forward(x, train, rng)
        mu = self.mu_head.forward(h, train, rng)
        logvar = self.logvar_head.forward(h, train, rng) if self.logvar_head is not None else None
        return mu, logvar


_TASK_ACTIVATION = {MULTICLASS: ("softmax", None), MULTILABEL: ("sigmoid",), ZEROSHOT: (None,)}


class GdvmModel:
    """Latent head plus classifier ``Φ(z)``, bound to one variant and task."""

    def __init__(self, arch: Architecture, variant: ModelVariant, task: TaskKind, input_shape: Sequence[int],
                 seed: int = 0, dtype=np.float64, dropout: bool = True):
        self.arch = arch
        self.variant = variant
        self.task = task
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dtype = np.dtype(dtype)
        self.dropout = dropout
        self.params = ParameterSet()
        rng = np.random.default_rng(seed)
        trunk = Network(arch.trunk, self.input_shape, self.params, "trunk", rng, self.dtype, dropout)
        if len(trunk.output_shape) != 1:
            raise DimensionError(f"trunk must end flat, produces {trunk.output_shape}")
        if trunk.output_activation is not None:
            raise ConfigError("trunk may not end in an output activation")
        mu_specs, logvar_specs = arch.head_specs()
        mu_head = Network(mu_specs, trunk.output_shape, self.params, "mu", rng, self.dtype, dropout)
        # classifier before logvar so shared parameters are identical across variants for one seed
        self.classifier = Network(arch.classifier, (arch.latent_dim,), self.params, "classifier", rng, self.dtype, dropout)
        out = self.classifier.output_shape
        if out != (task.n_outputs,):
            raise DimensionError(f"classifier produces {out}, task {task.kind} needs ({task.n_outputs},)")
        if self.classifier.output_activation not in _TASK_ACTIVATION[task.kind]:
            raise ConfigError(f"classifier output activation {self.classifier.output_activation!r} "
                              f"does not suit a {task.kind} task")
        logvar_head = None
        if variant.samples:
            logvar_head = Network(logvar_specs, trunk.output_shape, self.params, "logvar", rng, self.dtype, dropout)
        self.head = GaussianLatentHead(trunk, mu_head, logvar_head)

    @property
    def latent_dim(self) -> int:
        return self.arch.latent_dim

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor._wrap(np.ascontiguousarray(x, dtype=self.dtype))

    def encode(self, x, train: bool = False, rng=None) -> tuple[Tensor, Optional[Tensor]]:
        x = self._as_input(x)
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"input rows have shape {x.shape[1:]}, model expects {self.input_shape}")
        return self.head(x, train, rng)

    def decode(self, z: Tensor, train: bool = False, rng=None) -> Tensor:
        """Classifier scores before the output activation."""
        return self.classifier.forward(z, train, rng)

    def task_loss(self, scores: Tensor, targets) -> Tensor:
        kind = self.task.kind
        if kind == MULTICLASS:
            return cross_entropy_loss(scores, targets)
        if kind == MULTILABEL:
            return binary_cross_entropy_loss(ad.sigmoid(scores), targets)
        return l2_semantic_loss(scores, targets)

    def loss(self, x, targets, train: bool = True, dropout_rng=None, noise_rng=None,
             sample: bool = True, eps: Optional[np.ndarray] = None) -> "LossParts":
        """Total objective for one batch.

        ``sample=False`` forces ``z = mu`` even for sampling variants. ``eps``
        overrides the noise draw (otherwise taken from ``noise_rng``).
        """
        mu, logvar = self.encode(x, train, dropout_rng)
        clamped = 0
        kl = None
        if logvar is not None:
            clamped = int(np.count_nonzero(np.abs(logvar.data) > LOGVAR_CLAMP))
            logvar = ad.clip(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP)
        if self.variant.samples and sample:
            if eps is None:
                eps = noise_rng.standard_normal(mu.shape)
            z = reparameterize(mu, logvar, np.asarray(eps, dtype=self.dtype))
        else:
            z = mu
        scores = self.decode(z, train, dropout_rng)
        task = self.task_loss(scores, targets)
        if self.variant.tag == GDVM:
            kl = kl_to_standard_normal(mu, logvar)
        return LossParts(total_loss(task, kl, self.variant), task, kl, clamped)


@dataclass
class LossParts:
    total: Tensor
    task: Tensor
    kl: Optional[Tensor]
    clamped: int = 0


def reparameterize(mu: Tensor, logvar: Tensor, eps) -> Tensor:
    """``z = mu + eps * exp(logvar / 2)``; differentiable in mu and logvar, not eps."""
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=mu.dtype)
    if mu.shape != logvar.shape or eps.shape != mu.shape:
        raise DimensionError(f"reparameterize: mu {mu.shape}, logvar {logvar.shape}, eps {eps.shape}")
    sigma = ad.exp(ad.scale(logvar, 0.5))
    return ad.add(mu, ad.mul(Tensor._wrap(eps), sigma))


def kl_to_standard_normal(mu: Tensor, logvar: Tensor, reduce_batch: bool = True) -> Tensor:
    """Closed-form KL of a diagonal Gaussian to N(0, I), averaged over rows.

    Per row: ``0.5 * sum(exp(logvar) + mu**2 - 1 - logvar)``.
    """
    if mu.shape != logvar.shape:
        raise DimensionError(f"kl: mu {mu.shape} and logvar {logvar.shape} differ")
    # (exp(lv) - 1 - lv) via expm1 stays >= 0 in floating point; the naive form can dip below zero
    terms = ad.add(ad.sub(ad.expm1(logvar), logvar), ad.mul(mu, mu))
    if mu.ndim == 1:
        return ad.scale(ad.sum(terms), 0.5)
    per_row = ad.scale(ad.sum(terms, axis=1), 0.5)
    return ad.mean(per_row) if reduce_batch else per_row


def total_loss(task_loss: Tensor, kl: Optional[Tensor], variant: ModelVariant) -> Tensor:
    if variant.beta < 0:
        raise ConfigError(f"beta must be non-negative, got {variant.beta}")
    if variant.tag == GDVM and kl is not None:
        return ad.add(task_loss, ad.scale(kl, variant.beta))
    return task_loss


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 100
    optimizer: OptimizerState = field(default_factory=OptimizerState)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainResult:
    loss_trace: list[float]
    kl_trace: list[float]
    clamp_events: int
    epoch_seconds: list[float]
    images_per_epoch: int


def _streams(rng) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    shuffle, dropout, noise = rng.spawn(3)
    return shuffle, dropout, noise


def train(model: GdvmModel, dataset: Dataset, config: TrainConfig, rng=0, on_epoch=None) -> TrainResult:
    """Minibatch training, one tape per batch.

    Shuffling, dropout masks and latent noise draw from three independent
    streams, so switching sampling on or off never shifts the dropout masks.
    """
    if len(dataset) == 0:
        raise ContractError("training set is empty")
    shuffle_rng, dropout_rng, noise_rng = _streams(rng)
    opt = config.optimizer
    x_all = np.ascontiguousarray(dataset.features, dtype=model.dtype)
    y_all = dataset.targets
    n = len(dataset)
    losses, kls, secs = [], [], []
    clamped = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        t0 = time.perf_counter()
        batch_losses, batch_kls = [], []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            with Tape() as tape:
                parts = model.loss(Tensor._wrap(x_all[idx]), y_all[idx], True, dropout_rng, noise_rng)
                value = parts.total.item()
                if not np.isfinite(value):
                    raise NumericAbort(f"non-finite loss {value} at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
                ad.backward(tape, parts.total)
            optimizer_step(opt, model.params)
            model.params.zero_grad()
            clamped += parts.clamped
            batch_losses.append(value)
            if parts.kl is not None:
                batch_kls.append(parts.kl.item())
        secs.append(time.perf_counter() - t0)
        losses.append(float(np.mean(batch_losses)))
        kls.append(float(np.mean(batch_kls)) if batch_kls else 0.0)
        log.debug("epoch %d loss %.5f", epoch, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    if clamped:
        log.info("log-variance clamped %d times", clamped)
    return TrainResult(losses, kls, clamped, secs, n)


# ---------------------------------------------------------------- prediction


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def latent_means(model: GdvmModel, x, batch_size: int = 500) -> np.ndarray:
    x = np.asarray(x)
    out = [model.encode(x[s])[0].data for s in _batches(len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.latent_dim), dtype=model.dtype)


def predict_scores(model: GdvmModel, x, batch_size: int = 500) -> np.ndarray:
    """Output-layer values (probabilities or semantic vectors) with ``z = mu(x)``."""
    x = np.asarray(x)
    out = []
    for s in _batches(len(x), batch_size):
        mu, _ = model.encode(x[s])
        out.append(model.classifier.activate(model.decode(mu)).data)
    return np.concatenate(out)


def decide(model: GdvmModel, scores: np.ndarray) -> np.ndarray:
    kind = model.task.kind
    if kind == MULTICLASS:
        return argmax_decision(scores)
    if kind == MULTILABEL:
        return threshold_decision(scores)
    return scores


def predict_deterministic(model: GdvmModel, x, batch_size: int = 500) -> np.ndarray:
    """Class index, multi-hot row, or semantic vector per input, using ``z = mu(x)``."""
    return decide(model, predict_scores(model, x, batch_size))


def mc_scores(model: GdvmModel, x, n_samples: int, rng, source: str = "prior", batch_size: int = 500) -> np.ndarray:
    """Average output-layer values over ``n_samples`` latent draws.

    ``source="prior"`` draws ``z ~ N(0, I)`` for every row, independent of
    ``x``; ``source="posterior"`` draws from ``N(mu(x), diag(exp logvar(x)))``.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if source not in ("prior", "posterior"):
        raise ConfigError(f"source must be 'prior' or 'posterior', got {source!r}")
    if source == "posterior" and not model.variant.samples:
        raise ConfigError("posterior sampling needs a log-variance head; the baseline has none")
    if not hasattr(rng, "standard_normal"):
        rng = np.random.default_rng(rng)
    x = np.asarray(x)
    k = model.latent_dim
    out = []
    for s in _batches(len(x), batch_size):
        m = s.stop - s.start
        if source == "posterior":
            mu, logvar = model.encode(x[s])
            mu_d = mu.data
            sigma = np.exp(0.5 * np.clip(logvar.data, -LOGVAR_CLAMP, LOGVAR_CLAMP))
        acc = None
        for _ in range(n_samples):
            eps = rng.standard_normal((m, k)).astype(model.dtype)
            z = eps if source == "prior" else mu_d + eps * sigma
            p = model.classifier.activate(model.decode(Tensor._wrap(z))).data.astype(np.float64)
            acc = p if acc is None else acc + p
        out.append(acc / n_samples)
    return np.concatenate(out)


def predict_mc(model: GdvmModel, x, n_samples: int, rng, source: str = "prior") -> np.ndarray:
    return decide(model, mc_scores(model, x, n_samples, rng, source))


# ---------------------------------------------------------------- checkpoints


def _task_header(task: TaskKind) -> dict:
    return {"kind": task.kind, "n_outputs": task.n_outputs}


def save_checkpoint(model: GdvmModel, path, extra: Optional[dict] = None) -> None:
    """Write parameters and architecture to an ``.npz`` archive (atomic rename)."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": model.arch.to_dict(),
        "variant": {"tag": model.variant.tag, "beta": model.variant.beta},
        "task": _task_header(model.task),
        "input_shape": list(model.input_shape),
        "dtype": model.dtype.str,
        "dropout": model.dropout,
        "parameters": [[name, list(t.shape)] for name, t in model.params.items()],
        "extra": extra or {},
    }
    arrays = {f"param:{name}": t.data for name, t in model.params.items()}
    if model.task.kind == ZEROSHOT:
        arrays["task:seen_prototypes"] = model.task.seen_prototypes
        arrays["task:unseen_prototypes"] = model.task.unseen_prototypes
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    os.replace(tmp, path)


def read_checkpoint_header(path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["__header__"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    return header


def _first_layer_difference(saved: dict, expected: dict) -> Optional[str]:
    for section in ("trunk", "classifier"):
        a, b = saved.get(section, []), expected.get(section, [])
        for i in range(max(len(a), len(b))):
            la = a[i] if i < len(a) else None
            lb = b[i] if i < len(b) else None
            if la != lb:
                return f"{section} layer {i}: checkpoint has {la}, expected {lb}"
    for key in ("latent_dim", "mu_activation"):
        if saved.get(key) != expected.get(key):
            return f"{key}: checkpoint has {saved.get(key)!r}, expected {expected.get(key)!r}"
    return None


def load_checkpoint(path, expected: Optional[Architecture] = None) -> GdvmModel:
    """Rebuild a model from :func:`save_checkpoint` output, bit-exactly."""
    header = read_checkpoint_header(path)
    if expected is not None:
        diff = _first_layer_difference(header["architecture"], expected.to_dict())
        if diff:
            raise CheckpointError(f"{path}: architecture mismatch at {diff}")
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    t = header["task"]
    task = TaskKind(t["kind"], t["n_outputs"],
                    seen_prototypes=arrays.get("task:seen_prototypes"),
                    unseen_prototypes=arrays.get("task:unseen_prototypes"))
    arch = Architecture.from_dict(header["architecture"])
    v = header["variant"]
    model = GdvmModel(arch, ModelVariant(v["tag"], v["beta"]), task, header["input_shape"],
                      dtype=np.dtype(header["dtype"]), dropout=header.get("dropout", True))
    state = {k.split(":", 1)[1]: a for k, a in arrays.items() if k.startswith("param:")}
    for name, p in model.params.items():
        if name not in state:
            raise CheckpointError(f"{path}: parameter {name!r} missing")
        if state[name].shape != p.shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {state[name].shape}, expected {p.shape}")
    extra = set(state) - set(model.params.names())
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {sorted(extra)}")
    model.params.load_state_dict(state)
    model.checkpoint_extra = header.get("extra", {})
    return model
