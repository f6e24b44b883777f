"""Cross-modal fusion scorers.

A scorer maps the concatenation ``[image_feature, text_feature]`` through a tanh
MLP to one matching logit. Teacher and student differ only in hidden widths.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dcd.errors import FormatError, ShapeError
from dcd.numeric import FLOAT, GradTape, as_matrix, check_finite

TEACHER_HIDDEN = (256, 256, 256, 256)
STUDENT_HIDDEN = (128, 128)


@dataclass(frozen=True)
class ScorerConfig:
    image_dim: int = 64
    text_dim: int = 64
    hidden: tuple[int, ...] = STUDENT_HIDDEN
    seed: int = 0
    role: str = "student"

    def __post_init__(self):
        if not self.hidden:
            raise ShapeError("hidden widths must be non-empty")
        if min(self.image_dim, self.text_dim, *self.hidden) <= 0:
            raise ShapeError("all dimensions must be positive")
        if self.role not in ("teacher", "student"):
            raise ShapeError(f"unknown role {self.role!r}")


@dataclass
class ScorerParams:
    layers: list[tuple[np.ndarray, np.ndarray]]
    image_dim: int
    text_dim: int
    role: str = "student"
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.activation != "tanh":
            raise ShapeError(f"unsupported activation {self.activation!r}")
        width = self.image_dim + self.text_dim
        for i, (w, b) in enumerate(self.layers):
            if w.shape[0] != width:
                raise ShapeError(f"layer {i} expects {w.shape[0]} inputs, previous width is {width}")
            if b.shape != (1, w.shape[1]):
                raise ShapeError(f"layer {i} bias shape {b.shape} does not match weights {w.shape}")
            width = w.shape[1]
        if width != 1:
            raise ShapeError(f"final layer must have one output, has {width}")

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w, _ in self.layers[:-1])

    @property
    def shapes(self) -> list[tuple[tuple, tuple]]:
        return [(w.shape, b.shape) for w, b in self.layers]

    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def copy(self) -> ScorerParams:
        return ScorerParams(
            [(w.copy(), b.copy()) for w, b in self.layers],
            self.image_dim, self.text_dim, self.role, self.activation, self.seed,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for w, b in self.layers for a in (w, b)])

    def with_flat(self, theta: np.ndarray) -> ScorerParams:
        layers, pos = [], 0
        for w, b in self.layers:
            nw, nb = w.size, b.size
            layers.append((
                np.asarray(theta[pos:pos + nw], dtype=FLOAT).reshape(w.shape),
                np.asarray(theta[pos + nw:pos + nw + nb], dtype=FLOAT).reshape(b.shape),
            ))
            pos += nw + nb
        return ScorerParams(layers, self.image_dim, self.text_dim, self.role, self.activation, self.seed)

    def tobytes(self) -> bytes:
        return b"".join(a.astype("<f8").tobytes() for w, b in self.layers for a in (w, b))


def init_scorer(config: ScorerConfig) -> ScorerParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(config.seed)
    widths = [config.image_dim + config.text_dim, *config.hidden, 1]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros((1, fan_out))))
    return ScorerParams(layers, config.image_dim, config.text_dim, config.role, "tanh", config.seed)


def _check_features(params: ScorerParams, images: np.ndarray, texts: np.ndarray):
    if images.shape[1] != params.image_dim:
        raise ShapeError(f"image features have dim {images.shape[1]}, scorer expects {params.image_dim}")
    if texts.shape[1] != params.text_dim:
        raise ShapeError(f"text features have dim {texts.shape[1]}, scorer expects {params.text_dim}")


def _head(params: ScorerParams, pre: np.ndarray) -> np.ndarray:
    """Run everything after the first pre-activation."""
    h = np.tanh(pre)
    for w, b in params.layers[1:]:
        pre = h @ w + b
        h = np.tanh(pre)
    return pre[:, 0]


def score_pairs(params: ScorerParams, images, texts) -> np.ndarray:
    """Scores for row-aligned pairs ``(images[i], texts[i])``; no gradient recording."""
    images, texts = as_matrix(images, "images"), as_matrix(texts, "texts")
    _check_features(params, images, texts)
    if images.shape[0] != texts.shape[0]:
        raise ShapeError(f"{images.shape[0]} images vs {texts.shape[0]} texts")
    w0, b0 = params.layers[0]
    pre = images @ w0[: params.image_dim] + texts @ w0[params.image_dim:] + b0
    return check_finite(_head(params, pre), "scores")


def score_matrix(params: ScorerParams, images, texts, chunk_pairs: int = 65536) -> np.ndarray:
    """Full cross-scoring: entry ``[i, j]`` scores image ``i`` with text ``j``."""
    images, texts = as_matrix(images, "images"), as_matrix(texts, "texts")
    _check_features(params, images, texts)
    w0, b0 = params.layers[0]
    pv = images @ w0[: params.image_dim]
    pt = texts @ w0[params.image_dim:] + b0
    n_i, n_t = len(images), len(texts)
    out = np.empty((n_i, n_t), dtype=FLOAT)
    step = max(1, chunk_pairs // max(n_t, 1))
    for lo in range(0, n_i, step):
        pre = (pv[lo:lo + step, None, :] + pt[None, :, :]).reshape(-1, pv.shape[1])
        out[lo:lo + step] = _head(params, pre).reshape(-1, n_t)
    return check_finite(out, "score matrix")


def score_pair(params: ScorerParams, image_feat, text_feat) -> float:
    return float(score_pairs(params, image_feat, text_feat)[0])


def score_candidates(params: ScorerParams, query, keys) -> np.ndarray:
    """One logit per key for a FeatureRecord query against FeatureRecord keys."""
    if not keys:
        raise ShapeError("score_candidates needs at least one key")
    q = as_matrix(query.vector)
    k = np.vstack([as_matrix(key.vector) for key in keys])
    q = np.repeat(q, len(keys), axis=0)
    if query.modality == "image":
        return score_pairs(params, q, k)
    return score_pairs(params, k, q)


def forward(params: ScorerParams, images, texts, tape: GradTape | None = None) -> np.ndarray:
    """Recorded forward pass over row-aligned pairs, returns scores of shape (n,)."""
    images, texts = as_matrix(images, "images"), as_matrix(texts, "texts")
    _check_features(params, images, texts)
    if tape is None:
        return score_pairs(params, images, texts)
    h = np.hstack([images, texts])
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = tape.dense(i, h, w, b)
        if i < last:
            h = tape.tanh(h)
    return h[:, 0]


def backward(params: ScorerParams, tape: GradTape, grad_scores) -> list[tuple[np.ndarray, np.ndarray]]:
    g = np.asarray(grad_scores, dtype=FLOAT).reshape(-1, 1)
    grads, _ = tape.backward(g, params.shapes)
    return grads


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([a.reshape(-1) for dw, db in grads for a in (dw, db)])


# -- checkpoints -----------------------------------------------------------

MANIFEST = "manifest.txt"


def save_checkpoint(params: ScorerParams, path) -> Path:
    """Write a key=value manifest plus one little-endian f64 blob per layer (weights then bias)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [
        f"role={params.role}",
        f"seed={params.seed}",
        f"activation={params.activation}",
        f"image_dim={params.image_dim}",
        f"text_dim={params.text_dim}",
        f"hidden={','.join(str(h) for h in params.hidden)}",
        f"n_layers={len(params.layers)}",
    ]
    for i, (w, b) in enumerate(params.layers):
        name = f"layer_{i:03d}.bin"
        lines.append(f"layer_{i}={name}:{w.shape[0]}x{w.shape[1]}")
        (path / name).write_bytes(w.astype("<f8").tobytes() + b.astype("<f8").tobytes())
    (path / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_kv(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_checkpoint(path) -> ScorerParams:
    path = Path(path)
    manifest = path / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    kv = read_kv(manifest.read_text(encoding="utf-8"))
    try:
        n_layers = int(kv["n_layers"])
        layers = []
        for i in range(n_layers):
            name, dims = kv[f"layer_{i}"].split(":")
            rows, cols = (int(d) for d in dims.split("x"))
            blob = (path / name).read_bytes()
            expected = 8 * (rows * cols + cols)
            if len(blob) != expected:
                raise FormatError(f"{name}: {len(blob)} bytes, manifest implies {expected}")
            arr = np.frombuffer(blob, dtype="<f8").astype(FLOAT)
            layers.append((arr[: rows * cols].reshape(rows, cols).copy(), arr[rows * cols:].reshape(1, cols).copy()))
        params = ScorerParams(
            layers, int(kv["image_dim"]), int(kv["text_dim"]), kv.get("role", "student"),
            kv.get("activation", "tanh"), int(kv.get("seed", 0)),
        )
    except KeyError as e:
        raise FormatError(f"checkpoint manifest missing key {e}") from None
    except ShapeError as e:
        raise FormatError(f"inconsistent checkpoint: {e}") from None
    for w, b in params.layers:
        check_finite(w, "checkpoint weights")
        check_finite(b, "checkpoint bias")
    return params
