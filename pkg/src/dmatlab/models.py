"""Feed-forward models: the frozen image generator, the trainable classifier,
and the label teacher that defines ground truth on the latent manifold.

Weights are stored (fan_in, fan_out) so the forward pass is `x @ W + b`;
this keeps per-sample logits bitwise independent of batch size (see
`autodiff._matmul_rows`).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, forward_eval

__all__ = [
    "Architecture",
    "ModelParams",
    "FileFormatError",
    "init_params",
    "add_network",
    "generator_forward",
    "classifier_forward",
    "predict",
    "teacher_label",
    "default_generator_arch",
    "default_classifier_arch",
    "default_teacher_arch",
    "make_generator",
    "make_teacher",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"DMATLAB-CKPT-v1\n"

LATENT_DIM = 8
IMAGE_SIDE = 16
IMAGE_DIM = IMAGE_SIDE * IMAGE_SIDE
N_CLASSES = 4

# Seeds of the frozen models shared by every experiment in this package.
DEFAULT_GENERATOR_SEED = 11
DEFAULT_TEACHER_SEED = 101

# Latent feature routing shared by the generator and teacher factories.
# The latent code splits into three groups that the generator renders very
# differently, giving the classification task distinct feature families:
#   smooth   - slowly varying, high-contrast content (hard to erase or shift)
#   faint    - slowly varying but rendered at low pixel contrast, so a small
#              per-pixel budget can overwrite it
#   textured - high-contrast patterns that are extremely sensitive to the
#              latent code, so small latent moves scramble them
LATENT_GROUPS = {"smooth": (0, 3), "faint": (3, 6), "textured": (6, 8)}

# Generator rendering constants: hidden-unit counts per group, input gains
# (steepness in the latent code), render style, and per-unit output column
# norms (pixel contrast).  smooth/textured units draw localized blobs so the
# dense low-contrast content stays decodable underneath them.  The textured
# group is a grating: steep units along one shared latent direction with
# staggered thresholds, so mixtures of them oscillate rapidly with the latent
# position and small latent moves scramble them.
GEN_GROUP_UNITS = {"smooth": 24, "faint": 20, "textured": 20}
GEN_INPUT_GAIN = {"smooth": 1.2, "faint": 3.0, "textured": 25.0}
GEN_RENDER = {"smooth": "blob", "faint": "dense", "textured": "blob"}
GEN_COLUMN_NORM = {"smooth": 4.5, "faint": 1.07, "textured": 4.5}
GEN_HIDDEN_BIAS_STD = {"smooth": 0.5, "faint": 0.5}
GEN_GRATING_SPAN = 1.5  # staggered thresholds cover +/- this many latent sigmas
GEN_GRATING_BANKS = 1  # independent grating directions
GEN_GRATING_PAIR = 1  # units sharing each threshold (>1 makes crossings kick harder)
GEN_BLOB_SIGMA = {"smooth": (1.3, 2.2), "textured": (1.3, 2.2)}

# Teacher constants: how many hidden units judge each group and how much each
# group contributes to the logits.  The teacher's hidden units reuse a subset
# of the generator's first-layer feature directions, so every labeled feature
# is decodable from the rendered pixels.
TEACHER_GROUP_UNITS = {"smooth": 16, "faint": 16, "textured": 16}
TEACHER_OUTPUT_WEIGHT = {"smooth": 0.4, "faint": 2.0, "textured": 0.7}

_ACTIVATIONS = ("tanh", "relu", "sigmoid", "identity")


class FileFormatError(ValueError):
    """Raised when a persisted artifact is missing, corrupt, or wrong version."""


@dataclass(frozen=True)
class Architecture:
    """Shape of a fully-connected network: dims, hidden activations, optional
    sigmoid squash on the output."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activations: tuple[str, ...] = ()
    output_squash: str | None = None

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if len(self.activations) != len(self.hidden_dims):
            raise ValueError(
                f"need one activation per hidden layer:"
                f" {len(self.activations)} for {len(self.hidden_dims)} hidden dims"
            )
        for a in self.activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.output_squash not in (None, "sigmoid"):
            raise ValueError(f"output_squash must be None or 'sigmoid', got {self.output_squash!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activations": list(self.activations),
            "output_squash": self.output_squash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(int(x) for x in d["hidden_dims"]),
            output_dim=int(d["output_dim"]),
            activations=tuple(d["activations"]),
            output_squash=d.get("output_squash"),
        )


@dataclass
class ModelParams:
    """Parameter set of a feed-forward network.

    `weights[i]` has shape (fan_in, fan_out); `biases[i]` has shape (fan_out,).
    Frozen models refuse mutation: the arrays are made read-only and the
    optimizer checks the flag before updating.
    """

    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    frozen: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.arch.layer_dims
        if len(self.weights) != len(expected) or len(self.biases) != len(expected):
            raise ValueError("layer count does not match architecture")
        for (fi, fo), w, b in zip(expected, self.weights, self.biases):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise ValueError(
                    f"layer shapes {w.shape}/{b.shape} do not chain as ({fi},{fo})"
                )

    def freeze(self) -> "ModelParams":
        for arr in (*self.weights, *self.biases):
            arr.setflags(write=False)
        self.frozen = True
        return self

    def copy(self, frozen: bool = False) -> "ModelParams":
        out = ModelParams(
            arch=self.arch,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            frozen=False,
            meta=dict(self.meta),
        )
        return out.freeze() if frozen else out

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.reshape(-1))
            parts.append(b)
        return np.concatenate(parts)

    def load_flat(self, flat: np.ndarray) -> None:
        if self.frozen:
            raise ValueError("model is frozen; parameters cannot be mutated")
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {flat.size}")
        off = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = flat[off : off + w.size].reshape(w.shape)
            off += w.size
            b[...] = flat[off : off + b.size]
            off += b.size

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (*self.weights, *self.biases):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def init_params(arch: Architecture, seed) -> ModelParams:
    """Deterministic init: W ~ N(0, 1/fan_in) entrywise, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in arch.layer_dims:
        weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    seed_meta = seed if isinstance(seed, int) else repr(seed)
    return ModelParams(arch=arch, weights=weights, biases=biases, meta={"seed": seed_meta})


def add_network(
    graph: Graph,
    params: ModelParams,
    x: int,
    *,
    prefix: str = "f",
    bind: str = "const",
) -> tuple[int, list[str]]:
    """Append the network's forward pass to `graph`, returning the output node.

    bind="const" bakes the parameters in (frozen models, attack graphs);
    bind="input" declares one graph input per parameter array, named
    `{prefix}.W{i}` / `{prefix}.b{i}`, and returns those names (training).
    """
    if bind not in ("const", "input"):
        raise ValueError(f"bind must be 'const' or 'input', got {bind!r}")
    names: list[str] = []
    h = x
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if bind == "const":
            wn, bn = graph.const(w), graph.const(b)
        else:
            wname, bname = f"{prefix}.W{i}", f"{prefix}.b{i}"
            wn = graph.input(wname, w.shape)
            bn = graph.input(bname, b.shape)
            names.extend((wname, bname))
        h = graph.add(graph.matmul(h, wn), bn)
        if i < n_layers - 1:
            act = params.arch.activations[i]
            if act != "identity":
                h = getattr(graph, act)(h)
    if params.arch.output_squash == "sigmoid":
        h = graph.sigmoid(h)
    return h, names


def param_bindings(params: ModelParams, prefix: str = "f") -> dict[str, np.ndarray]:
    """Input bindings matching `add_network(..., bind='input')` naming."""
    out = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}.W{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def _forward_values(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if x.shape[-1] != params.arch.input_dim:
        raise ValueError(
            f"input dim {x.shape[-1]} does not match model input {params.arch.input_dim}"
        )
    g = Graph()
    xn = g.input("x", x.shape)
    out, _ = add_network(g, params, xn, bind="const")
    g.mark_output("out", out)
    y = forward_eval(g, {"x": x})["out"].data
    return y[0] if single and y.ndim == 2 else y


def generator_forward(gen: ModelParams, w) -> np.ndarray:
    """Image(s) g(w) in [0,1]^IMAGE_DIM for latent code(s) w."""
    return _forward_values(gen, w)


def classifier_forward(f: ModelParams, x) -> np.ndarray:
    """Logits of the classifier on image(s) x."""
    return _forward_values(f, x)


def predict(f: ModelParams, x) -> np.ndarray:
    """Predicted labels; argmax breaks ties toward the lowest index."""
    logits = classifier_forward(f, x)
    return np.argmax(logits, axis=-1)


def teacher_label(w, teacher: ModelParams):
    """Ground-truth label(s): argmax of the frozen teacher's logits on w."""
    logits = _forward_values(teacher, w)
    labels = np.argmax(logits, axis=-1)
    return int(labels) if np.ndim(labels) == 0 else labels


# -- default model factories ---------------------------------------------------


def default_generator_arch(latent_dim: int = LATENT_DIM, image_dim: int = IMAGE_DIM) -> Architecture:
    return Architecture(
        input_dim=latent_dim,
        hidden_dims=(64, 64),
        output_dim=image_dim,
        activations=("tanh", "tanh"),
        output_squash="sigmoid",
    )


def default_classifier_arch(image_dim: int = IMAGE_DIM, n_classes: int = N_CLASSES) -> Architecture:
    return Architecture(
        input_dim=image_dim,
        hidden_dims=(128, 128),
        output_dim=n_classes,
        activations=("relu", "relu"),
    )


def default_teacher_arch(latent_dim: int = LATENT_DIM, n_classes: int = N_CLASSES) -> Architecture:
    return Architecture(
        input_dim=latent_dim,
        hidden_dims=(sum(TEACHER_GROUP_UNITS.values()),),
        output_dim=n_classes,
        activations=("tanh",),
    )


def _group_slices(units_per_group: dict) -> dict:
    out = {}
    start = 0
    for group, count in units_per_group.items():
        out[group] = (start, start + count)
        start += count
    return out


def make_generator(seed: int) -> ModelParams:
    """Frozen random generator with group-structured rendering.

    Hidden units each read one latent group (block-sparse first layer, block
    mixing in the second), and the output layer renders each group's units at
    its own pixel contrast.  See LATENT_GROUPS for what the groups mean.
    """
    rng = np.random.default_rng([seed, 0x9E])
    arch = default_generator_arch()
    params = init_params(arch, seed)
    h1, h2 = arch.hidden_dims
    units = _group_slices(GEN_GROUP_UNITS)
    assert sum(GEN_GROUP_UNITS.values()) == h1 == h2

    w1 = np.zeros((arch.input_dim, h1))
    b1 = np.zeros(h1)
    for group, (lo, hi) in LATENT_GROUPS.items():
        ulo, uhi = units[group]
        d = hi - lo
        gain = GEN_INPUT_GAIN[group]
        if group == "textured":
            # Gratings: units split into two banks, each reading one shared
            # full-latent direction with thresholds spread evenly (plus
            # jitter) across the populated range.  Full-latent directions
            # maximize how far a small L-inf latent ball can travel along a
            # grating axis; two axes widen the exploitable region.
            k = uhi - ulo
            for bank in range(GEN_GRATING_BANKS):
                blo = ulo + bank * k // GEN_GRATING_BANKS
                bhi = ulo + (bank + 1) * k // GEN_GRATING_BANKS
                # Uniform-magnitude signs give the longest L-inf-ball reach
                # along the axis for a unit direction.
                direction = rng.choice([-1.0, 1.0], arch.input_dim) / np.sqrt(arch.input_dim)
                n_cuts = (bhi - blo) // GEN_GRATING_PAIR
                cuts = np.linspace(-GEN_GRATING_SPAN, GEN_GRATING_SPAN, n_cuts)
                cuts = cuts + rng.uniform(-0.2, 0.2, n_cuts) * (cuts[1] - cuts[0])
                cuts = np.repeat(cuts, GEN_GRATING_PAIR)
                cuts = cuts + rng.uniform(-0.01, 0.01, bhi - blo)
                w1[:, blo:bhi] = gain * direction[:, None]
                b1[blo:bhi] = -gain * cuts
        else:
            w1[lo:hi, ulo:uhi] = (
                rng.standard_normal((d, uhi - ulo)) / np.sqrt(d) * gain
            )
            b1[ulo:uhi] = rng.standard_normal(uhi - ulo) * (
                GEN_HIDDEN_BIAS_STD[group] * gain
            )
    params.weights[0][...] = w1
    params.biases[0][...] = b1

    # Second layer: smooth units mix within their group (visual variety);
    # faint and textured pass through unit-by-unit so each rendered pattern
    # stays a monotone transform of one first-layer feature.
    w2 = np.zeros((h1, h2))
    b2 = np.zeros(h2)
    for group, (ulo, uhi) in units.items():
        k = uhi - ulo
        if group == "smooth":
            w2[ulo:uhi, ulo:uhi] = rng.standard_normal((k, k)) / np.sqrt(k)
            b2[ulo:uhi] = rng.standard_normal(k) * 0.3
        else:
            w2[ulo:uhi, ulo:uhi] = np.eye(k) * 1.5
    params.weights[1][...] = w2
    params.biases[1][...] = b2

    # Output: one pixel pattern per hidden unit, scaled to the group's column
    # norm; blob patterns are confined to a small gaussian window.
    side = int(np.sqrt(arch.output_dim))
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    w3 = np.zeros((h2, arch.output_dim))
    for group, (ulo, uhi) in units.items():
        for u in range(ulo, uhi):
            pattern = rng.standard_normal(arch.output_dim)
            if GEN_RENDER[group] == "blob":
                cx, cy = rng.uniform(1.0, side - 2.0, size=2)
                sig = rng.uniform(*GEN_BLOB_SIGMA[group])
                mask = np.exp(-((ii - cx) ** 2 + (jj - cy) ** 2) / (2.0 * sig * sig))
                pattern = pattern * mask.reshape(-1)
            pattern *= GEN_COLUMN_NORM[group] / np.linalg.norm(pattern)
            w3[u, :] = pattern
    params.weights[2][...] = w3
    params.meta["structure"] = "grouped"
    return params.freeze()


def _structured_teacher(seed: int, gen: ModelParams, n_classes: int) -> ModelParams:
    rng = np.random.default_rng([seed, 0x7E])
    latent_dim = gen.arch.input_dim
    arch = default_teacher_arch(latent_dim, n_classes)
    params = init_params(arch, seed)
    (h,) = arch.hidden_dims
    t_units = _group_slices(TEACHER_GROUP_UNITS)
    g_units = _group_slices(GEN_GROUP_UNITS)
    assert sum(TEACHER_GROUP_UNITS.values()) == h

    w1 = np.zeros((latent_dim, h))
    b1 = np.zeros(h)
    w2 = np.zeros((h, n_classes))
    for group in LATENT_GROUPS:
        tlo, thi = t_units[group]
        glo, ghi = g_units[group]
        n_pick = thi - tlo
        # Judge a random subset of the rendered features.
        pick = glo + rng.permutation(ghi - glo)[:n_pick]
        wrows = rng.standard_normal((n_pick, n_classes)) / np.sqrt(n_pick)
        w1[:, tlo:thi] = gen.weights[0][:, pick]
        b1[tlo:thi] = gen.biases[0][pick]
        w2[tlo:thi, :] = wrows * TEACHER_OUTPUT_WEIGHT[group]
    params.weights[0][...] = w1
    params.biases[0][...] = b1
    params.weights[1][...] = w2
    params.meta["structure"] = "grouped"
    return params


def make_teacher(
    seed: int,
    gen: ModelParams | None = None,
    *,
    n_classes: int = N_CLASSES,
    balance_range: tuple[float, float] = (0.15, 0.35),
    n_check: int = 10_000,
    max_tries: int = 64,
) -> ModelParams:
    """Frozen teacher judging every latent feature group, with a usably
    balanced class split over w ~ N(0, I); degenerate seeds are rejected and
    the next seed is drawn.

    The teacher's hidden layer reuses feature directions from `gen` so the
    label signal is decodable from rendered images (defaults to the shared
    frozen generator).
    """
    if gen is None:
        gen = make_generator(DEFAULT_GENERATOR_SEED)
    lo, hi = balance_range
    for attempt in range(max_tries):
        cand_seed = seed + attempt
        teacher = _structured_teacher(cand_seed, gen, n_classes)
        check_rng = np.random.default_rng([cand_seed, 0xBA1A])
        sample = check_rng.standard_normal((n_check, gen.arch.input_dim))
        labels = teacher_label(sample, teacher)
        fracs = np.bincount(labels, minlength=n_classes) / n_check
        if fracs.min() >= lo and fracs.max() <= hi:
            teacher.meta["balance"] = fracs.tolist()
            return teacher.freeze()
    raise RuntimeError(
        f"no teacher seed in [{seed}, {seed + max_tries}) gives class balance in"
        f" [{lo}, {hi}]"
    )


# -- checkpoint files -----------------------------------------------------------


def save_checkpoint(params: ModelParams, path, *, optimizer_state=None, extra: dict | None = None) -> None:
    """Write a self-describing binary checkpoint (magic DMATLAB-CKPT-v1).

    Layout: magic line, one JSON header line, raw little-endian float64
    parameters, then (optionally) raw float64 optimizer velocity.
    """
    flat = params.flat().astype("<f8")
    vel = None
    if optimizer_state is not None:
        vel = np.asarray(optimizer_state, dtype="<f8")
        if vel.size != flat.size:
            raise ValueError("optimizer state size does not match parameter count")
    header = {
        "arch": params.arch.to_dict(),
        "frozen": params.frozen,
        "meta": params.meta,
        "n_params": int(flat.size),
        "has_optimizer_state": vel is not None,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(blob)
        fh.write(flat.tobytes())
        if vel is not None:
            fh.write(vel.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (params, optimizer_state_or_None, extra)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FileFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(CKPT_MAGIC):
        got = raw[: len(CKPT_MAGIC)].decode(errors="replace").strip()
        raise FileFormatError(
            f"{path}: bad magic {got!r}, expected {CKPT_MAGIC.decode().strip()!r}"
        )
    body = raw[len(CKPT_MAGIC):]
    nl = body.find(b"\n")
    if nl < 0:
        raise FileFormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(body[:nl])
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: corrupt checkpoint header: {exc}") from exc
    arch = Architecture.from_dict(header["arch"])
    n = int(header["n_params"])
    payload = body[nl + 1:]
    want = n * 8 * (2 if header.get("has_optimizer_state") else 1)
    if len(payload) != want:
        raise FileFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {want}"
        )
    flat = np.frombuffer(payload[: n * 8], dtype="<f8").astype(np.float64)
    params = init_params(arch, 0)
    params.load_flat(flat)
    params.meta = dict(header.get("meta", {}))
    if header.get("frozen"):
        params.freeze()
    state = None
    if header.get("has_optimizer_state"):
        state = np.frombuffer(payload[n * 8:], dtype="<f8").astype(np.float64)
    return params, state, header.get("extra", {})
