"""On-manifold dataset construction and latent projection.

A sample couples a latent code w, its exactly-on-manifold image g(w), an
off-manifold "natural" counterpart (g(w) plus smoothed bounded noise), and a
label assigned by the frozen teacher on w.  `project_to_manifold` recovers
the latent code of an arbitrary image by minimizing a feature-space distance
plus the per-pixel L1 reconstruction error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, value_and_grad, _conv2d_same, forward_eval
from .models import (
    Architecture,
    FileFormatError,
    IMAGE_DIM,
    IMAGE_SIDE,
    LATENT_DIM,
    ModelParams,
    add_network,
    generator_forward,
    init_params,
    teacher_label,
)

__all__ = [
    "NoiseConfig",
    "DatasetConfig",
    "SampleRecord",
    "SampleSet",
    "ProjSolverConfig",
    "build_dataset",
    "project_to_manifold",
    "save_dataset",
    "load_dataset",
]

DATA_MAGIC = b"DMATLAB-DATA-v1\n"

# The projection objective's feature extractor is a frozen random network
# shared by every run; changing this seed changes the metric.
_FEATURE_SEED = 0x0D15EA5E


@dataclass(frozen=True)
class NoiseConfig:
    """Shape of the off-manifold noise: infinity-norm amplitude and the side
    of the box smoothing kernel applied before rescaling."""

    amplitude: float = 0.05
    smoothing_kernel_width: int = 3

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.smoothing_kernel_width < 1 or self.smoothing_kernel_width % 2 == 0:
            raise ValueError("smoothing_kernel_width must be a positive odd integer")


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 4000
    n_test: int = 1000
    latent_dim: int = LATENT_DIM
    seed: int = 0
    natural_noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if self.n_train <= 0 or self.n_test <= 0:
            raise ValueError("sample counts must be positive")

    def to_dict(self) -> dict:
        return {
            "n_train": self.n_train,
            "n_test": self.n_test,
            "latent_dim": self.latent_dim,
            "seed": self.seed,
            "natural_noise": {
                "amplitude": self.natural_noise.amplitude,
                "smoothing_kernel_width": self.natural_noise.smoothing_kernel_width,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        noise = d.get("natural_noise", {})
        return cls(
            n_train=int(d["n_train"]),
            n_test=int(d["n_test"]),
            latent_dim=int(d.get("latent_dim", LATENT_DIM)),
            seed=int(d.get("seed", 0)),
            natural_noise=NoiseConfig(
                amplitude=float(noise.get("amplitude", 0.05)),
                smoothing_kernel_width=int(noise.get("smoothing_kernel_width", 3)),
            ),
        )


@dataclass
class SampleRecord:
    """One dataset entry: latent code, on-manifold image, natural image, label."""

    w: np.ndarray
    x_on: np.ndarray
    x_nat: np.ndarray
    y: int

    def validate(self, gen: ModelParams, teacher: ModelParams) -> None:
        if not np.array_equal(self.x_on, generator_forward(gen, self.w)):
            raise ValueError("x_on is not the generator image of w")
        if self.y != teacher_label(self.w, teacher):
            raise ValueError("label does not match the teacher")
        if self.x_nat.min() < 0.0 or self.x_nat.max() > 1.0:
            raise ValueError("x_nat has entries outside [0,1]")


class SampleSet:
    """Columnar batch of SampleRecords (arrays stacked along axis 0)."""

    def __init__(self, w, x_on, x_nat, y):
        self.w = None if w is None else np.asarray(w, dtype=np.float64)
        self.x_on = np.asarray(x_on, dtype=np.float64)
        self.x_nat = np.asarray(x_nat, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        n = self.x_on.shape[0]
        if self.x_nat.shape[0] != n or self.y.shape[0] != n:
            raise ValueError("column lengths disagree")
        if self.w is not None and self.w.shape[0] != n:
            raise ValueError("column lengths disagree")

    def __len__(self) -> int:
        return self.x_on.shape[0]

    def __getitem__(self, i: int) -> SampleRecord:
        if self.w is None:
            raise ValueError("sample set has no latent coordinates")
        return SampleRecord(
            w=self.w[i], x_on=self.x_on[i], x_nat=self.x_nat[i], y=int(self.y[i])
        )

    def records(self) -> list[SampleRecord]:
        return [self[i] for i in range(len(self))]

    def subset(self, n: int) -> "SampleSet":
        return SampleSet(
            None if self.w is None else self.w[:n],
            self.x_on[:n],
            self.x_nat[:n],
            self.y[:n],
        )

    def images(self, eval_set: str) -> np.ndarray:
        if eval_set == "on_manifold":
            return self.x_on
        if eval_set == "natural":
            return self.x_nat
        raise ValueError(f"unknown eval set {eval_set!r}")


def _box_kernel(width: int) -> np.ndarray:
    k = np.ones((width, width))
    return k / k.sum()


def _smoothed_noise(rng: np.random.Generator, n: int, noise: NoiseConfig) -> np.ndarray:
    """Per-sample smooth field rescaled to exactly `amplitude` in max-norm."""
    if noise.amplitude == 0.0:
        return np.zeros((n, IMAGE_DIM))
    field_ = rng.standard_normal((n, IMAGE_SIDE, IMAGE_SIDE))
    if noise.smoothing_kernel_width > 1:
        field_ = _conv2d_same(field_, _box_kernel(noise.smoothing_kernel_width))
    flat = field_.reshape(n, IMAGE_DIM)
    peak = np.abs(flat).max(axis=1, keepdims=True)
    peak[peak == 0.0] = 1.0
    return flat * (noise.amplitude / peak)


def _draw_balanced(
    rng: np.random.Generator,
    n: int,
    cfg: DatasetConfig,
    gen: ModelParams,
    teacher: ModelParams,
    n_classes: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Rejection-sample latents until every class bucket holds n/n_classes."""
    if n % n_classes != 0:
        raise ValueError(f"sample count {n} is not divisible by {n_classes} classes")
    per_class = n // n_classes
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_classes)]
    drawn = 0
    # Enough attempts for a teacher at the 15% balance floor; beyond this the
    # teacher is degenerate and construction fails loudly.
    max_draws = 200 * n + 10_000
    while min(len(b) for b in buckets) < per_class:
        if drawn >= max_draws:
            raise RuntimeError(
                f"class balance not reachable after {drawn} draws; teacher looks degenerate"
            )
        chunk = max(n, 256)
        ws = rng.standard_normal((chunk, cfg.latent_dim))
        drawn += chunk
        labels = teacher_label(ws, teacher)
        for w, lab in zip(ws, labels):
            if len(buckets[lab]) < per_class:
                buckets[lab].append(w)
    # Interleave classes round-robin so every prefix stays nearly balanced.
    w_rows, y_rows = [], []
    for i in range(per_class):
        for c in range(n_classes):
            w_rows.append(buckets[c][i])
            y_rows.append(c)
    return np.stack(w_rows), np.asarray(y_rows, dtype=np.int64)


def build_dataset(
    cfg: DatasetConfig, gen: ModelParams, teacher: ModelParams
) -> tuple[SampleSet, SampleSet]:
    """Build class-balanced train/test sets from disjoint seed streams."""
    n_classes = teacher.arch.output_dim
    sets = []
    for split_idx, n in ((0, cfg.n_train), (1, cfg.n_test)):
        rng = np.random.default_rng([cfg.seed, split_idx])
        w, y = _draw_balanced(rng, n, cfg, gen, teacher, n_classes)
        x_on = generator_forward(gen, w)
        x_nat = np.clip(x_on + _smoothed_noise(rng, n, cfg.natural_noise), 0.0, 1.0)
        sets.append(SampleSet(w, x_on, x_nat, y))
    return sets[0], sets[1]


# -- latent projection ----------------------------------------------------------


@dataclass(frozen=True)
class ProjSolverConfig:
    steps: int = 500
    step_size: float = 0.05
    momentum: float = 0.9
    # Extra seeded starts beyond the w=0 one; the generator's textured
    # content makes the loss multimodal and a single descent can stall in a
    # nearby basin.
    restarts: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.step_size <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid projection solver configuration")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")


def _feature_extractor(image_dim: int) -> ModelParams:
    arch = Architecture(
        input_dim=image_dim,
        hidden_dims=(128,),
        output_dim=64,
        activations=("tanh",),
    )
    return init_params(arch, _FEATURE_SEED).freeze()


def _projection_graph(gen: ModelParams, x_target: np.ndarray):
    """Graph computing total and per-sample projection loss for a batch."""
    n, image_dim = x_target.shape
    feat = _feature_extractor(image_dim)
    g = Graph()
    wv = g.input("w", (n, gen.arch.input_dim))
    img, _ = add_network(g, gen, wv, bind="const")
    target = g.const(x_target)
    resid = g.sub(img, target)
    l1 = g.sum(g.abs(resid))
    f_img, _ = add_network(g, feat, img, bind="const")
    f_tgt, _ = add_network(g, feat, g.const(x_target), bind="const")
    fdiff = g.sub(f_img, f_tgt)
    feat_sq = g.sum(g.mul(fdiff, fdiff))
    g.mark_output("loss", g.add(feat_sq, l1))
    g.mark_output("image", img)
    return g


def _per_sample_loss(gen, feat, w, x_target):
    img = generator_forward(gen, w)
    l1 = np.abs(img - x_target).sum(axis=1)
    fi = _mlp(feat, img)
    ft = _mlp(feat, x_target)
    return l1 + ((fi - ft) ** 2).sum(axis=1)


def _mlp(params: ModelParams, x: np.ndarray) -> np.ndarray:
    g = Graph()
    xn = g.input("x", x.shape)
    out, _ = add_network(g, params, xn, bind="const")
    g.mark_output("out", out)
    return forward_eval(g, {"x": x})["out"].data


def project_to_manifold(
    x, gen: ModelParams, solver: ProjSolverConfig | None = None
):
    """Recover the latent code whose generated image best matches x.

    Minimizes feature-space squared distance plus L1 pixel error by momentum
    gradient descent from w = 0, keeping the best iterate seen (the start
    included, so projecting g(0) costs nothing).  Works on a single image
    (returns (w_hat, loss)) or a batch (returns (W_hat, losses)); failure to
    converge is reported through the loss, never raised.
    """
    solver = solver or ProjSolverConfig()
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    n = xb.shape[0]
    d = gen.arch.input_dim
    feat = _feature_extractor(xb.shape[1])
    graph = _projection_graph(gen, xb)
    steps = solver.steps

    best_w = np.zeros((n, d))
    best_loss = _per_sample_loss(gen, feat, best_w, xb)
    for start in range(1 + solver.restarts):
        if start == 0:
            w = np.zeros((n, d))
        else:
            w = np.random.default_rng([solver.seed, start]).standard_normal((n, d))
        velocity = np.zeros_like(w)
        # Cosine step decay: the early plateau covers the travel out to w*,
        # the tail anneals the step so the L1 kinks stop bouncing the
        # iterate around.
        for t in range(steps):
            _, grads = value_and_grad(graph, "loss", {"w": w}, ["w"])
            gw = grads["w"]
            norms = np.sqrt((gw * gw).sum(axis=1, keepdims=True))
            gw = np.where(norms > 1e-20, gw / np.maximum(norms, 1e-20), gw)
            lr = solver.step_size * 0.5 * (1.0 + np.cos(np.pi * t / steps))
            velocity = solver.momentum * velocity - lr * gw
            w = w + velocity
            loss = _per_sample_loss(gen, feat, w, xb)
            better = loss < best_loss
            best_loss = np.where(better, loss, best_loss)
            best_w[better] = w[better]
    if single:
        return best_w[0], float(best_loss[0])
    return best_w, best_loss


# -- persistence ------------------------------------------------------------------


def save_dataset(path, train: SampleSet, test: SampleSet, cfg: DatasetConfig) -> None:
    """Write both splits to a single versioned container (DMATLAB-DATA-v1).

    Records are fixed-width: w and the two images as little-endian float64,
    the label as a little-endian uint32.  Round-trips are bitwise lossless.
    """
    for s in (train, test):
        if s.w is None:
            raise ValueError("cannot persist a sample set without latent coordinates")
    header = {
        "config": cfg.to_dict(),
        "n_train": len(train),
        "n_test": len(test),
        "latent_dim": cfg.latent_dim,
        "image_dim": IMAGE_DIM,
    }
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for s in (train, test):
            for i in range(len(s)):
                fh.write(s.w[i].astype("<f8").tobytes())
                fh.write(s.x_on[i].astype("<f8").tobytes())
                fh.write(s.x_nat[i].astype("<f8").tobytes())
                fh.write(np.uint32(s.y[i]).astype("<u4").tobytes())


def load_dataset(path) -> tuple[SampleSet, SampleSet, DatasetConfig]:
    """Read a dataset container; structured errors on corrupt/missing files."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FileFormatError(f"cannot read dataset {path}: {exc}") from exc
    if not raw.startswith(DATA_MAGIC):
        got = raw[: len(DATA_MAGIC)].decode(errors="replace").strip()
        raise FileFormatError(
            f"{path}: bad magic {got!r}, expected {DATA_MAGIC.decode().strip()!r}"
        )
    body = raw[len(DATA_MAGIC):]
    nl = body.find(b"\n")
    if nl < 0:
        raise FileFormatError(f"{path}: truncated dataset header")
    try:
        header = json.loads(body[:nl])
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: corrupt dataset header: {exc}") from exc
    cfg = DatasetConfig.from_dict(header["config"])
    d = int(header["latent_dim"])
    image_dim = int(header["image_dim"])
    rec_bytes = 8 * d + 8 * image_dim * 2 + 4
    n_train, n_test = int(header["n_train"]), int(header["n_test"])
    payload = body[nl + 1:]
    want = rec_bytes * (n_train + n_test)
    if len(payload) != want:
        raise FileFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {want}"
        )
    sets = []
    off = 0
    for n in (n_train, n_test):
        w = np.empty((n, d))
        x_on = np.empty((n, image_dim))
        x_nat = np.empty((n, image_dim))
        y = np.empty(n, dtype=np.int64)
        for i in range(n):
            w[i] = np.frombuffer(payload, dtype="<f8", count=d, offset=off)
            off += 8 * d
            x_on[i] = np.frombuffer(payload, dtype="<f8", count=image_dim, offset=off)
            off += 8 * image_dim
            x_nat[i] = np.frombuffer(payload, dtype="<f8", count=image_dim, offset=off)
            off += 8 * image_dim
            y[i] = int(np.frombuffer(payload, dtype="<u4", count=1, offset=off)[0])
            off += 4
        sets.append(SampleSet(w, x_on, x_nat, y))
    return sets[0], sets[1], cfg
