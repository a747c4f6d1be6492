"""Gated attention pooling over a bag's tokens and the patient classifier.

Every token of every patch in a bag is one instance.  Two parallel
projections score each instance -- a tanh branch and a sigmoid gate --
and their product is collapsed to a scalar logit per instance.  A single
softmax across the entire bag (spanning patches) yields convex weights,
the bag embedding is the weighted token sum, and a small MLP maps it to
the four class logits.  Disabling the refiner gives the vanilla baseline.

Also owns the checkpoint file format: magic "RAAC", u32 version, a JSON
table of parameter names/shapes plus structural metadata, then the
parameter payloads as little-endian float64 in table order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from raamil.autodiff import Graph, Node, forward
from raamil.bags import NUM_CLASSES, TokenBag
from raamil.objective import LossConfig, build_focal_loss
from raamil.raa import RaaParams, add_raa_params, build_neighborhood, build_refiner
from raamil.rng import Stream

_SIMPLEX_TOL = 1e-12


@dataclass
class MilParams:
    """Attention projections, gate vector, and classifier weights."""

    wa: np.ndarray        # (L, D) tanh branch
    wb: np.ndarray        # (L, D) sigmoid gate branch
    wc: np.ndarray        # (L, 1) collapse to instance logit
    phi_w1: np.ndarray    # (D, H) classifier hidden layer
    phi_b1: np.ndarray    # (H,)
    phi_w2: np.ndarray    # (H, 4)
    phi_b2: np.ndarray    # (4,)
    dropout: float = 0.25

    def __post_init__(self):
        l, d = self.wa.shape
        if self.wb.shape != (l, d):
            raise ValueError(f"gate branch shape {self.wb.shape} != {(l, d)}")
        if self.wc.shape != (l, 1):
            raise ValueError(f"collapse shape {self.wc.shape} != {(l, 1)}")
        h = self.phi_w1.shape[1]
        if self.phi_w1.shape != (d, h) or self.phi_b1.shape != (h,):
            raise ValueError("classifier hidden shapes inconsistent")
        if self.phi_w2.shape != (h, NUM_CLASSES) or self.phi_b2.shape != (NUM_CLASSES,):
            raise ValueError(f"classifier must emit {NUM_CLASSES} classes")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout rate {self.dropout} outside [0, 1)")

    @property
    def attn_hidden(self) -> int:
        return self.wa.shape[0]

    @property
    def dim(self) -> int:
        return self.wa.shape[1]

    @property
    def clf_hidden(self) -> int:
        return self.phi_w1.shape[1]


def init_mil_params(dim: int, rng: Stream, attn_hidden: int = 128,
                    clf_hidden: int = 128, dropout: float = 0.25) -> MilParams:
    """Weights ~ N(0, 1/fan_in), biases zero; draw order is fixed so a seed
    pins every parameter."""
    sd = 1.0 / np.sqrt(dim)
    return MilParams(
        wa=rng.normal_array((attn_hidden, dim)) * sd,
        wb=rng.normal_array((attn_hidden, dim)) * sd,
        wc=rng.normal_array((attn_hidden, 1)) / np.sqrt(attn_hidden),
        phi_w1=rng.normal_array((dim, clf_hidden)) * sd,
        phi_b1=np.zeros(clf_hidden),
        phi_w2=rng.normal_array((clf_hidden, NUM_CLASSES)) / np.sqrt(clf_hidden),
        phi_b2=np.zeros(NUM_CLASSES),
        dropout=dropout,
    )


@dataclass
class BagForward:
    """One bag's forward pass: instance weights, embedding, prediction."""

    w: np.ndarray         # (M,) convex weights over all tokens
    m: np.ndarray         # (D,) bag embedding
    logits: np.ndarray    # (4,)
    probs: np.ndarray     # (4,) simplex

    def __post_init__(self):
        if np.any(self.w < 0) or abs(float(self.w.sum()) - 1.0) > _SIMPLEX_TOL:
            raise ValueError("instance weights are not on the simplex")
        if np.any(self.probs < 0) or abs(float(self.probs.sum()) - 1.0) > _SIMPLEX_TOL:
            raise ValueError("class probabilities are not on the simplex")

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.probs))


_MIL_NAMES = ("wa", "wb", "wc", "phi_w1", "phi_b1", "phi_w2", "phi_b2")
_RAA_NAMES = ("w1", "b1", "w2", "b2", "gamma", "ln_scale", "ln_shift")


def param_dict(raa: RaaParams | None, mil: MilParams) -> dict[str, np.ndarray]:
    """Flat name -> array view of all trainable state (shared, not copied)."""
    out = {}
    if raa is not None:
        for name in _RAA_NAMES:
            out["raa." + name] = getattr(raa, name)
    for name in _MIL_NAMES:
        out["mil." + name] = getattr(mil, name)
    return out


def build_bag_graph(raa: RaaParams | None, mil: MilParams, num_patches: int,
                    rows: int, cols: int, *, dropout: bool = False,
                    loss: LossConfig | None = None) -> Graph:
    """Assemble the end-to-end graph for bags with `num_patches` patches.

    Inputs: "tokens" (M, D); "dropout_mask" (D,) when dropout is on;
    "target" (4,) when a loss head is requested.  Outputs: "w", "m",
    "logits", "probs", and "loss" when requested.  Parameter nodes alias
    the arrays inside `raa`/`mil`, so in-place optimizer updates are
    visible to subsequent forward calls on the same graph.
    """
    dim = mil.dim
    m_tokens = num_patches * rows * cols
    g = Graph()
    tokens = g.input("tokens", (m_tokens, dim))

    if raa is not None:
        if raa.dim != dim:
            raise ValueError(f"refiner dim {raa.dim} != classifier dim {dim}")
        nbr = build_neighborhood(rows, cols, raa.k, raa.include_self)
        nodes = add_raa_params(g, raa)
        tokens = build_refiner(g, tokens, nodes, nbr, num_patches, ln_eps=raa.ln_eps)

    wa = g.param("mil.wa", mil.wa)
    wb = g.param("mil.wb", mil.wb)
    wc = g.param("mil.wc", mil.wc)
    a = g.tanh(g.matmul(wa, tokens, transpose_b=True))       # (L, M)
    b = g.sigmoid(g.matmul(wb, tokens, transpose_b=True))    # (L, M)
    u = g.matmul(wc, g.mul(a, b), transpose_a=True)          # (1, M)
    w = g.softmax(u, axis=-1)                                # spans patches
    m = g.matmul(w, tokens)                                  # (1, D)
    g.output("w", g.reshape(w, (m_tokens,)))
    g.output("m", g.reshape(m, (dim,)))

    if dropout:
        m = g.mul(m, g.input("dropout_mask", (dim,)))

    w1 = g.param("mil.phi_w1", mil.phi_w1)
    b1 = g.param("mil.phi_b1", mil.phi_b1)
    w2 = g.param("mil.phi_w2", mil.phi_w2)
    b2 = g.param("mil.phi_b2", mil.phi_b2)
    hidden = g.relu(g.add(g.matmul(m, w1), b1))
    logits = g.reshape(g.add(g.matmul(hidden, w2), b2), (NUM_CLASSES,))
    g.output("logits", logits)
    g.output("probs", g.softmax(logits, axis=-1))

    if loss is not None:
        g.output("loss", build_focal_loss(g, logits, loss.class_weights, loss.gamma_f))
    return g


def forward_bag(bag: TokenBag, raa: RaaParams | None, mil: MilParams) -> BagForward:
    """Deterministic inference pass (dropout off) over one bag."""
    g = build_bag_graph(raa, mil, bag.num_patches, bag.rows, bag.cols)
    out = forward(g, {"tokens": bag.stacked().reshape(-1, bag.dim)})
    return BagForward(w=out["w"], m=out["m"], logits=out["logits"], probs=out["probs"])


def gated_attention_weights(tokens: np.ndarray, mil: MilParams) -> np.ndarray:
    """Convex instance weights for an (M, D) token matrix."""
    tokens = np.asarray(tokens, dtype=np.float64)
    g = Graph()
    t = g.input("tokens", tokens.shape)
    a = g.tanh(g.matmul(g.param("wa", mil.wa), t, transpose_b=True))
    b = g.sigmoid(g.matmul(g.param("wb", mil.wb), t, transpose_b=True))
    u = g.matmul(g.param("wc", mil.wc), g.mul(a, b), transpose_a=True)
    g.output("w", g.reshape(g.softmax(u, axis=-1), (tokens.shape[0],)))
    return forward(g, {"tokens": tokens})["w"]


def pool_bag(tokens: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted token sum; with w on the simplex the result stays inside
    the coordinate-wise token hull."""
    tokens = np.asarray(tokens, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (tokens.shape[0],):
        raise ValueError(f"{w.shape[0] if w.ndim else 0} weights for {tokens.shape[0]} tokens")
    return w @ tokens


def classify(m: np.ndarray, mil: MilParams) -> tuple[np.ndarray, np.ndarray]:
    """Logits and softmax probabilities for one bag embedding."""
    m = np.asarray(m, dtype=np.float64).reshape(1, -1)
    g = Graph()
    inp = g.input("m", m.shape)
    hidden = g.relu(g.add(g.matmul(inp, g.param("w1", mil.phi_w1)), g.param("b1", mil.phi_b1)))
    logits = g.reshape(g.add(g.matmul(hidden, g.param("w2", mil.phi_w2)),
                             g.param("b2", mil.phi_b2)), (NUM_CLASSES,))
    g.output("logits", logits)
    g.output("probs", g.softmax(logits, axis=-1))
    out = forward(g, {"m": m})
    return out["logits"], out["probs"]


# ------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"RAAC"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sII")   # magic, version, json table length


class CheckpointError(ValueError):
    """Malformed, truncated, or structurally inconsistent checkpoint."""


@dataclass
class Checkpoint:
    """A trained model's parameters plus free-form provenance metadata."""

    raa: RaaParams | None
    mil: MilParams
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    params = param_dict(ckpt.raa, ckpt.mil)
    structure = {
        "raa_enabled": ckpt.raa is not None,
        "dropout": ckpt.mil.dropout,
        "meta": ckpt.meta,
    }
    if ckpt.raa is not None:
        structure.update(k=ckpt.raa.k, include_self=ckpt.raa.include_self,
                         ln_eps=ckpt.raa.ln_eps)
    table = {"params": [[name, list(arr.shape)] for name, arr in params.items()],
             **structure}
    blob = json.dumps(table, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in params.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: {len(raw)} bytes is too short for a header")
    magic, version, blob_len = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        table = json.loads(raw[_CKPT_HEADER.size:_CKPT_HEADER.size + blob_len])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable parameter table: {exc}") from exc

    values: dict[str, np.ndarray] = {}
    offset = _CKPT_HEADER.size + blob_len
    for name, shape in table["params"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(
                f"{path}: payload for {name!r} needs {end} bytes, file has {len(raw)}")
        values[name] = np.frombuffer(raw[offset:end], dtype="<f8").astype(
            np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after payload")

    def take(prefix, names):
        missing = [n for n in names if prefix + n not in values]
        if missing:
            raise CheckpointError(f"{path}: missing parameters {missing} under {prefix!r}")
        return {n: values[prefix + n] for n in names}

    raa = None
    if table["raa_enabled"]:
        raa = RaaParams(**take("raa.", _RAA_NAMES), k=table["k"],
                        include_self=table["include_self"], ln_eps=table["ln_eps"])
    mil = MilParams(**take("mil.", _MIL_NAMES), dropout=table["dropout"])
    return Checkpoint(raa=raa, mil=mil, meta=table.get("meta", {}))
