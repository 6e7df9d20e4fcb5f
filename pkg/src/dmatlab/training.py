"""Training regimes and the shared SGD loop.

Seven regimes share one optimizer: plain cross-entropy, adversarial training
in image space, latent-space adversarial training (single- or multi-step
inner attack), the dual regime that sums both adversarial losses, and the
TRADES variants that trade clean cross-entropy against a KL term per branch.
Runs are bitwise deterministic in the config seed and exactly resumable from
any snapshot.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Graph, eval_with_grad
from .attacks import AttackSpec, _ImageLoss, _LatentLoss, _maximize
from .manifold import SampleSet
from .models import (
    FileFormatError,
    ModelParams,
    add_network,
    default_classifier_arch,
    generator_forward,
    init_params,
    param_bindings,
    predict,
)

__all__ = [
    "REGIMES",
    "TrainConfig",
    "TrainRun",
    "cyclic_lr",
    "sgd_step",
    "batch_loss",
    "BatchLoss",
    "train",
    "save_train_config",
    "load_train_config",
    "write_metrics_csv",
]

TRAINCFG_MAGIC = "DMATLAB-TRAINCFG-v1"

REGIMES = ("normal", "at", "om_at_fgsm", "om_at_pgd", "dmat", "trades", "dmat_trades")

_TRADES_REGIMES = ("trades", "dmat_trades")


@dataclass
class TrainConfig:
    regime: str = "normal"
    epochs: int = 20
    batch_size: int = 100
    lr_max: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eps: float = 4.0 / 255.0
    eta: float = 0.02
    train_steps: int = 5
    beta: float | None = 6.0
    snapshot_every: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.epochs < 1 or self.batch_size < 1 or self.train_steps < 1:
            raise ValueError("epochs, batch_size and train_steps must be >= 1")
        if self.lr_max <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("invalid optimizer rates")
        if self.eps < 0 or self.eta < 0:
            raise ValueError("budgets must be >= 0")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.regime in _TRADES_REGIMES:
            if self.beta is None:
                raise ValueError(f"regime {self.regime!r} requires beta")
            if self.beta <= 0:
                raise ValueError(f"regime {self.regime!r} requires beta > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainRun:
    final: ModelParams
    snapshots: list  # (epoch, ModelParams), strictly increasing epochs
    metrics: list  # per-epoch dict rows: epoch, lr, train_loss, clean_acc
    velocity_by_epoch: dict = field(default_factory=dict)

    def snapshot_at(self, epoch: int) -> ModelParams:
        for e, params in self.snapshots:
            if e == epoch:
                return params
        raise KeyError(f"no snapshot at epoch {epoch}")


def velocity_to_flat(params: ModelParams, velocity: dict) -> np.ndarray:
    """Flatten optimizer velocity in parameter order (W then b per layer)."""
    parts = []
    for i in range(len(params.weights)):
        for kind, shaped in (("W", params.weights[i]), ("b", params.biases[i])):
            v = velocity.get(f"f.{kind}{i}")
            parts.append((v if v is not None else np.zeros_like(shaped)).reshape(-1))
    return np.concatenate(parts)


def flat_to_velocity(params: ModelParams, flat: np.ndarray) -> dict:
    out = {}
    off = 0
    for i in range(len(params.weights)):
        for kind, shaped in (("W", params.weights[i]), ("b", params.biases[i])):
            out[f"f.{kind}{i}"] = flat[off : off + shaped.size].reshape(shaped.shape).copy()
            off += shaped.size
    return out


def cyclic_lr(step: int, total_steps: int, lr_max: float) -> float:
    """Triangular schedule: 0 at step 0, lr_max at the midpoint, 0 at the end."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    half = total_steps / 2.0
    if step <= half:
        return lr_max * step / half
    return lr_max * (total_steps - step) / half


def sgd_step(params: ModelParams, grads: dict, lr: float, momentum: float,
             weight_decay: float, state: dict) -> tuple[ModelParams, dict]:
    """One SGD-with-momentum update:
    v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.

    Mutates `params` (must not be frozen) and `state` in place; the velocity
    is updated even when lr == 0.
    """
    if params.frozen:
        raise ValueError("cannot update a frozen model")
    for key, garr in grads.items():
        kind, idx = key.split(".")[-1][0], int(key.split(".")[-1][1:])
        target = params.weights[idx] if kind == "W" else params.biases[idx]
        v = state.get(key)
        if v is None:
            v = np.zeros_like(target)
        v = momentum * v + garr + weight_decay * target
        state[key] = v
        target -= lr * v
    return params, state


@dataclass
class BatchLoss:
    """A regime's loss on one batch: graph + bindings, parameters as inputs."""

    graph: Graph
    inputs: dict
    param_names: list

    def value(self) -> float:
        v, _ = _loss_only(self)
        return v

    def value_and_param_grads(self):
        loss, grads, _ = eval_with_grad(
            self.graph, self.inputs, "loss", self.param_names
        )
        return loss, grads


def _loss_only(bl: BatchLoss):
    loss, grads, _ = eval_with_grad(bl.graph, bl.inputs, "loss", [])
    return loss, grads


def _inner_spec(space: str, budget: float, steps: int, *, random_start: bool,
                seed: int) -> AttackSpec:
    return AttackSpec(
        name=f"train_{space}",
        space=space,
        norm="linf",
        budget=budget,
        steps=steps,
        random_start=random_start,
        seed=seed,
        keep_best=True,
    )


def _image_adv(f, x, y, eps, steps, *, seed=0, random_start=True):
    if eps == 0.0:
        return x
    loss = _ImageLoss(f, x.shape[0], x.shape[1], y)
    spec = _inner_spec("image", eps, steps, random_start=random_start, seed=seed)
    return _maximize(loss, x.shape, spec, x0=x)


def _latent_adv(f, gen, w, y, eta, steps, *, seed=0, random_start=True):
    if eta == 0.0:
        return generator_forward(gen, w)
    loss = _LatentLoss(f, gen, w, y)
    spec = _inner_spec("latent", eta, steps, random_start=random_start, seed=seed)
    lam = _maximize(loss, w.shape, spec)
    return generator_forward(gen, w + lam)




def _multi_branch_network(g: Graph, f: ModelParams, x_node: int, declared: list[str]) -> int:
    """Forward pass reusing already-declared parameter inputs."""
    h = x_node
    n_layers = len(f.weights)
    for i in range(n_layers):
        wn = g._input_ids[f"f.W{i}"]
        bn = g._input_ids[f"f.b{i}"]
        h = g.add(g.matmul(h, wn), bn)
        if i < n_layers - 1:
            act = f.arch.activations[i]
            if act != "identity":
                h = getattr(g, act)(h)
    if f.arch.output_squash == "sigmoid":
        h = g.sigmoid(h)
    return h


def batch_loss(regime: str, f: ModelParams, gen: ModelParams, batch: SampleSet,
               cfg: TrainConfig, *, step_seed: int = 0) -> BatchLoss:
    """Build the regime's scalar loss on a batch, inner maximizations already
    executed; classifier parameters are graph inputs so the caller can take
    gradients for the optimizer step."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if regime in _TRADES_REGIMES and cfg.beta is None:
        raise ValueError(f"regime {regime!r} requires beta")
    x, w, y = batch.x_on, batch.w, batch.y
    K = cfg.train_steps

    g = Graph()
    first, param_names = add_network(g, f, g.const(x), bind="input", prefix="f")
    clean_logits_node = first

    def branch(data: np.ndarray) -> int:
        return _multi_branch_network(g, f, g.const(data), param_names)

    if regime == "normal":
        loss = g.softmax_cross_entropy(clean_logits_node, y)
    elif regime == "at":
        x_adv = _image_adv(f, x, y, cfg.eps, K, seed=step_seed)
        loss = g.softmax_cross_entropy(branch(x_adv), y)
    elif regime == "om_at_fgsm":
        x_adv = _latent_adv(f, gen, w, y, cfg.eta, 1, seed=step_seed)
        loss = g.softmax_cross_entropy(branch(x_adv), y)
    elif regime == "om_at_pgd":
        x_adv = _latent_adv(f, gen, w, y, cfg.eta, K, seed=step_seed)
        loss = g.softmax_cross_entropy(branch(x_adv), y)
    elif regime == "dmat":
        x_adv = _image_adv(f, x, y, cfg.eps, K, seed=step_seed)
        x_lat = _latent_adv(f, gen, w, y, cfg.eta, K, seed=step_seed + 1)
        loss = g.add(
            g.softmax_cross_entropy(branch(x_adv), y),
            g.softmax_cross_entropy(branch(x_lat), y),
        )
    else:  # trades / dmat_trades
        # Adversarial points come from the same named threat models as the
        # other regimes (cross-entropy PGD); only the outer penalty is the
        # KL divergence between clean and adversarial predictions.
        beta = float(cfg.beta)
        ce = g.softmax_cross_entropy(clean_logits_node, y)
        x_adv = _image_adv(f, x, y, cfg.eps, K, seed=step_seed)
        kl_img = g.kl_softmax(clean_logits_node, branch(x_adv))
        loss = g.add(ce, g.scalar_mul(kl_img, beta))
        if regime == "dmat_trades":
            x_lat = _latent_adv(f, gen, w, y, cfg.eta, K, seed=step_seed + 1)
            kl_lat = g.kl_softmax(clean_logits_node, branch(x_lat))
            loss = g.add(loss, g.scalar_mul(kl_lat, beta))

    g.mark_output("loss", loss)
    return BatchLoss(graph=g, inputs=param_bindings(f, "f"), param_names=param_names)


def train(
    dataset: tuple[SampleSet, SampleSet],
    cfg: TrainConfig,
    gen: ModelParams,
    *,
    resume: tuple[ModelParams, dict, int] | None = None,
) -> TrainRun:
    """Run the configured regime over shuffled minibatches.

    Deterministic given cfg.seed: per-epoch shuffles and inner-attack starts
    are derived from (seed, epoch), so training resumed from the snapshot at
    epoch e reproduces the direct run bitwise.  Raises on NaN loss.
    """
    cfg.validate()
    train_set, test_set = dataset
    n = len(train_set)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch

    if resume is not None:
        params, velocity, start_epoch = resume
        params = params.copy()
        velocity = {k: v.copy() for k, v in velocity.items()}
    else:
        params = init_params(default_classifier_arch(), [cfg.seed, 11])
        velocity = {}
        start_epoch = 0

    gen_hash = gen.param_hash()
    snapshots: list = []
    metrics: list = []
    velocity_by_epoch: dict = {}
    lr = 0.0

    for epoch in range(start_epoch, cfg.epochs):
        perm = np.random.default_rng([cfg.seed, 1000 + epoch]).permutation(n)
        epoch_losses = []
        for b in range(batches_per_epoch):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = SampleSet(
                train_set.w[idx], train_set.x_on[idx], train_set.x_nat[idx],
                train_set.y[idx],
            )
            step = epoch * batches_per_epoch + b
            lr = cyclic_lr(step, total_steps, cfg.lr_max)
            bl = batch_loss(
                cfg.regime, params, gen, batch, cfg,
                step_seed=cfg.seed * 1_000_003 + step,
            )
            loss, grads = bl.value_and_param_grads()
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss {loss} in regime {cfg.regime!r} at epoch"
                    f" {epoch}, step {step}; aborting"
                )
            epoch_losses.append(loss)
            sgd_step(params, grads, lr, cfg.momentum, cfg.weight_decay, velocity)
        clean_acc = float((predict(params, test_set.x_on) == test_set.y).mean())
        metrics.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(epoch_losses)),
                "clean_acc": clean_acc,
            }
        )
        if (epoch + 1) % cfg.snapshot_every == 0 or epoch == cfg.epochs - 1:
            snapshots.append((epoch, params.copy(frozen=True)))
            velocity_by_epoch[epoch] = {k: v.copy() for k, v in velocity.items()}

    if gen.param_hash() != gen_hash:
        raise RuntimeError("frozen generator parameters changed during training")
    return TrainRun(
        final=params.copy(frozen=True),
        snapshots=snapshots,
        metrics=metrics,
        velocity_by_epoch=velocity_by_epoch,
    )


# -- config and metrics files ------------------------------------------------------


def save_train_config(path, cfg: TrainConfig) -> None:
    doc = {"format": TRAINCFG_MAGIC, "config": cfg.to_dict()}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_train_config(path) -> TrainConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise FileFormatError(f"cannot read train config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: corrupt train config: {exc}") from exc
    if doc.get("format") != TRAINCFG_MAGIC:
        raise FileFormatError(
            f"{path}: bad format {doc.get('format')!r}, expected {TRAINCFG_MAGIC!r}"
        )
    return TrainConfig.from_dict(doc["config"])


def write_metrics_csv(path, metrics: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "clean_acc"])
        for row in metrics:
            writer.writerow(
                [row["epoch"], repr(row["lr"]), repr(row["train_loss"]), repr(row["clean_acc"])]
            )
