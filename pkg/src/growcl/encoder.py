"""A small frozen attention encoder conditioned by learnable prompt tokens.

Raw feature vectors are linearly embedded into a handful of tokens, a class
token is prepended, and each block runs pre-norm multi-head attention plus a
GELU MLP. Prompted blocks receive extra prompt tokens appended to the
sequence for that block only; their outputs are dropped afterwards so prompts
act purely through attention. The promptless pass ("query" mode) yields the
vanilla feature used for key matching and for pre-trained subspaces.

Backbone weights are initialized once (optionally briefly fitted on a
held-out pre-task) and then frozen; only prompt tokens, retrieval keys and
the current task's classifier rows ever train.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from growcl.autodiff import Tensor, concat, cross_entropy, gelu, layer_norm, softmax

MASK_BIAS = -1e30


class EncoderError(ValueError):
    """Shape or contract violation in the encoder."""


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 4
    prompt_len: int = 4
    prompted_blocks: tuple = (0, 1)
    input_dim: int = 64
    n_feature_tokens: int = 4
    mlp_ratio: int = 2
    seed: int = 0
    key_loss: str = "cosine"  # "cosine" | "mse"
    key_loss_weight: float = 1.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise EncoderError("d_model must be divisible by n_heads")
        if any(b < 0 or b >= self.n_blocks for b in self.prompted_blocks):
            raise EncoderError("prompted_blocks outside [0, n_blocks)")
        if self.key_loss not in ("cosine", "mse"):
            raise EncoderError(f"unknown key loss {self.key_loss!r}")
        object.__setattr__(self, "prompted_blocks", tuple(self.prompted_blocks))

    @property
    def n_prompted(self) -> int:
        return len(self.prompted_blocks)


def _backbone_names(cfg: EncoderConfig):
    names = ["embed_w", "embed_b", "cls"]
    for i in range(cfg.n_blocks):
        names += [
            f"b{i}.ln1_g", f"b{i}.ln1_b",
            f"b{i}.wq", f"b{i}.wk", f"b{i}.wv", f"b{i}.wo",
            f"b{i}.ln2_g", f"b{i}.ln2_b",
            f"b{i}.mlp_w1", f"b{i}.mlp_b1", f"b{i}.mlp_w2", f"b{i}.mlp_b2",
        ]
    names += ["ln_f_g", "ln_f_b"]
    return names


@dataclass
class FrozenBackbone:
    """All non-trainable encoder weights, in a fixed declaration order."""

    config: EncoderConfig
    weights: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> "FrozenBackbone":
        d, ld = cfg.d_model, cfg.n_feature_tokens * cfg.d_model
        hidden = cfg.mlp_ratio * d
        w = {
            "embed_w": rng.normal(0, 1.0 / np.sqrt(cfg.input_dim), (cfg.input_dim, ld)),
            "embed_b": np.zeros(ld),
            "cls": rng.normal(0, 0.5, d),
        }
        for i in range(cfg.n_blocks):
            s = 1.0 / np.sqrt(d)
            w[f"b{i}.ln1_g"] = np.ones(d)
            w[f"b{i}.ln1_b"] = np.zeros(d)
            w[f"b{i}.wq"] = rng.normal(0, s, (d, d))
            w[f"b{i}.wk"] = rng.normal(0, s, (d, d))
            w[f"b{i}.wv"] = rng.normal(0, s, (d, d))
            w[f"b{i}.wo"] = rng.normal(0, s, (d, d))
            w[f"b{i}.ln2_g"] = np.ones(d)
            w[f"b{i}.ln2_b"] = np.zeros(d)
            w[f"b{i}.mlp_w1"] = rng.normal(0, s, (d, hidden))
            w[f"b{i}.mlp_b1"] = np.zeros(hidden)
            w[f"b{i}.mlp_w2"] = rng.normal(0, 1.0 / np.sqrt(hidden), (hidden, d))
            w[f"b{i}.mlp_b2"] = np.zeros(d)
        w["ln_f_g"] = np.ones(d)
        w["ln_f_b"] = np.zeros(d)
        return cls(cfg, w)

    def names(self):
        return _backbone_names(self.config)

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name in self.names():
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()


@dataclass
class PromptSet:
    """A learnable prompt tensor plus its retrieval key."""

    p: np.ndarray  # [n_prompted, prompt_len, d]
    k: np.ndarray  # [d]
    id: int = -1

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator, set_id: int = -1) -> "PromptSet":
        p = rng.normal(0, 0.5, (cfg.n_prompted, cfg.prompt_len, cfg.d_model))
        k = rng.normal(0, 0.5, cfg.d_model)
        return cls(p, k, set_id)

    def clone(self, set_id: int = -1) -> "PromptSet":
        return PromptSet(self.p.copy(), self.k.copy(), set_id)


@dataclass
class Head:
    """Unified classifier head; rows outside the current task stay frozen."""

    w: np.ndarray  # [d, n_classes]
    b: np.ndarray  # [n_classes]

    @classmethod
    def init(cls, d: int, n_classes: int, rng: np.random.Generator) -> "Head":
        # Nonzero rows so probe gradients reach the prompts before the first
        # step on a task.
        return cls(rng.normal(0, 1.0 / np.sqrt(d), (d, n_classes)), np.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.b.shape[0]


class GradientLayout:
    """Flat layout of prompt + key gradients: one segment per prompted block
    (token rows live in the feature space of that block), then the key."""

    def __init__(self, cfg: EncoderConfig):
        self.segments = []  # (name, offset, shape)
        off = 0
        per_block = cfg.prompt_len * cfg.d_model
        for b in cfg.prompted_blocks:
            self.segments.append((f"block{b}", off, (cfg.prompt_len, cfg.d_model)))
            off += per_block
        self.segments.append(("key", off, (cfg.d_model,)))
        self.size = off + cfg.d_model
        self.feature_dim = cfg.d_model

    def names(self):
        return [name for name, _, _ in self.segments]

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        for seg, off, shape in self.segments:
            if seg == name:
                n = int(np.prod(shape))
                return flat[off : off + n].reshape(shape)
        raise KeyError(name)


@dataclass
class GradientVector:
    flat: np.ndarray
    layout: GradientLayout

    def __post_init__(self):
        if self.flat.shape != (self.layout.size,):
            raise EncoderError(f"gradient length {self.flat.shape} != layout {self.layout.size}")
        if not np.all(np.isfinite(self.flat)):
            raise EncoderError("non-finite gradient")

    def segment(self, name: str) -> np.ndarray:
        return self.layout.view(self.flat, name)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.flat))

    def copy(self) -> "GradientVector":
        return GradientVector(self.flat.copy(), self.layout)


def class_mask_bias(n_classes: int, allowed) -> np.ndarray:
    """Additive logit bias: 0 for allowed classes, a large negative elsewhere."""
    bias = np.full(n_classes, MASK_BIAS)
    bias[np.asarray(list(allowed), dtype=int)] = 0.0
    return bias


def _params(backbone: FrozenBackbone, trainable: bool = False) -> dict:
    return {k: Tensor(v, requires_grad=trainable) for k, v in backbone.weights.items()}


def _attention_block(x: Tensor, p: dict, i: int, n_heads: int) -> Tensor:
    n, t, d = x.shape
    dh = d // n_heads
    h = layer_norm(x, p[f"b{i}.ln1_g"], p[f"b{i}.ln1_b"])
    q = (h @ p[f"b{i}.wq"]).reshape(n, t, n_heads, dh).transpose((0, 2, 1, 3))
    k = (h @ p[f"b{i}.wk"]).reshape(n, t, n_heads, dh).transpose((0, 2, 1, 3))
    v = (h @ p[f"b{i}.wv"]).reshape(n, t, n_heads, dh).transpose((0, 2, 1, 3))
    scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    out = softmax(scores) @ v
    out = out.transpose((0, 2, 1, 3)).reshape(n, t, d) @ p[f"b{i}.wo"]
    x = x + out
    h2 = layer_norm(x, p[f"b{i}.ln2_g"], p[f"b{i}.ln2_b"])
    m = (gelu(h2 @ p[f"b{i}.mlp_w1"] + p[f"b{i}.mlp_b1"]) @ p[f"b{i}.mlp_w2"]) + p[f"b{i}.mlp_b2"]
    return x + m


def _broadcast_tokens(tok: Tensor, n: int) -> Tensor:
    # [P, d] parameter -> [n, P, d]; the zero carrier keeps gradients exact.
    p, d = tok.shape
    return Tensor(np.zeros((n, p, d))) + tok.reshape(1, p, d)


def encode(
    backbone: FrozenBackbone,
    batch: np.ndarray,
    prompts: dict | None = None,
    params: dict | None = None,
    collect_layers: bool = False,
):
    """Run the encoder; returns (features Tensor [n, d], layer_reps dict).

    ``prompts`` maps prompted block index -> Tensor [P, d] of tokens appended
    to that block's input (already composed with any frozen extras).
    ``layer_reps`` holds the class-token output of each prompted block plus
    the final feature under key "final" (plain arrays, detached).
    """
    batch = np.asarray(batch, dtype=np.float64)
    cfg = backbone.config
    if batch.ndim != 2 or batch.shape[1] != cfg.input_dim:
        raise EncoderError(f"batch shape {batch.shape} incompatible with input_dim {cfg.input_dim}")
    n = batch.shape[0]
    if n == 0:
        raise EncoderError("empty batch")
    p = params if params is not None else _params(backbone)
    x = (Tensor(batch) @ p["embed_w"] + p["embed_b"]).reshape(n, cfg.n_feature_tokens, cfg.d_model)
    tok = concat([_broadcast_tokens(p["cls"].reshape(1, cfg.d_model), n), x], axis=1)
    keep = 1 + cfg.n_feature_tokens
    reps = {}
    for i in range(cfg.n_blocks):
        if prompts is not None and i in prompts:
            seq = concat([tok, _broadcast_tokens(prompts[i], n)], axis=1)
            seq = _attention_block(seq, p, i, cfg.n_heads)
            tok = seq[:, :keep]
        else:
            tok = _attention_block(tok, p, i, cfg.n_heads)
        if collect_layers and i in cfg.prompted_blocks:
            reps[i] = tok.data[:, 0].copy()
    feats = layer_norm(tok, p["ln_f_g"], p["ln_f_b"])[:, 0]
    if collect_layers:
        reps["final"] = feats.data.copy()
    return feats, reps


def _prompt_tensors(cfg: EncoderConfig, p_active: Tensor, extra: np.ndarray | None) -> dict:
    prompts = {}
    for j, b in enumerate(cfg.prompted_blocks):
        tok = p_active[j]
        if extra is not None and extra.shape[1]:
            tok = concat([tok, Tensor(extra[j])], axis=0)
        prompts[b] = tok
    return prompts


def forward_prompted(
    backbone: FrozenBackbone,
    head: Head,
    pset: PromptSet,
    batch: np.ndarray,
    head_mask,
    extra: np.ndarray | None = None,
) -> np.ndarray:
    """Logits [n, n_classes] with classes outside ``head_mask`` pushed to -inf."""
    cfg = backbone.config
    prompts = _prompt_tensors(cfg, Tensor(pset.p), extra)
    feats, _ = encode(backbone, batch, prompts)
    bias = class_mask_bias(head.n_classes, head_mask)
    return feats.data @ head.w + head.b + bias


def forward_query(backbone: FrozenBackbone, batch: np.ndarray) -> np.ndarray:
    """Promptless features, one row per sample (the retrieval query)."""
    feats, _ = encode(backbone, batch)
    return feats.data


def query_with_layers(backbone: FrozenBackbone, batch: np.ndarray):
    """Promptless pass, returning (features, per-block class-token reps)."""
    feats, reps = encode(backbone, batch, collect_layers=True)
    return feats.data, reps


def prompted_with_layers(
    backbone: FrozenBackbone, pset: PromptSet, batch: np.ndarray, extra: np.ndarray | None = None
):
    prompts = _prompt_tensors(backbone.config, Tensor(pset.p), extra)
    feats, reps = encode(backbone, batch, prompts, collect_layers=True)
    return feats.data, reps


def _key_loss(cfg: EncoderConfig, k: Tensor, q_bar: np.ndarray):
    if cfg.key_loss == "mse":
        diff = k - Tensor(q_bar)
        return (diff * diff).sum()
    qn = float(np.linalg.norm(q_bar))
    dot = (k * Tensor(q_bar)).sum()
    kn = (k * k).sum().sqrt()
    return 1.0 - dot / (kn * qn)


def loss_and_grads(
    backbone: FrozenBackbone,
    head: Head,
    pset: PromptSet,
    batch: np.ndarray,
    labels: np.ndarray,
    head_mask,
    extra: np.ndarray | None = None,
    q_bar: np.ndarray | None = None,
    train_head_classes=None,
):
    """One forward/backward: cross-entropy (+ key pull when ``q_bar`` given).

    Returns (loss value, GradientVector over the active set's p and k,
    head weight grad or None, head bias grad or None). ``extra`` tokens join
    the forward pass but receive no gradient; head gradients are restricted
    to ``train_head_classes`` rows.
    """
    cfg = backbone.config
    labels = np.asarray(labels, dtype=int)
    if len(labels) != len(batch):
        raise EncoderError("labels/batch length mismatch")
    allowed = set(int(c) for c in head_mask)
    if not set(labels.tolist()) <= allowed:
        raise EncoderError("labels outside head mask")

    p_t = Tensor(pset.p, requires_grad=True)
    k_t = Tensor(pset.k, requires_grad=True)
    train_head = train_head_classes is not None
    hw = Tensor(head.w, requires_grad=train_head)
    hb = Tensor(head.b, requires_grad=train_head)

    feats, _ = encode(backbone, batch, _prompt_tensors(cfg, p_t, extra))
    logits = feats @ hw + hb + Tensor(class_mask_bias(head.n_classes, head_mask))
    loss = cross_entropy(logits, labels)
    if q_bar is not None and cfg.key_loss_weight != 0.0:
        loss = loss + cfg.key_loss_weight * _key_loss(cfg, k_t, q_bar)
    loss.backward()

    layout = GradientLayout(cfg)
    flat = np.zeros(layout.size)
    p_grad = p_t.grad if p_t.grad is not None else np.zeros_like(pset.p)
    for j, b in enumerate(cfg.prompted_blocks):
        layout.view(flat, f"block{b}")[:] = p_grad[j]
    layout.view(flat, "key")[:] = k_t.grad if k_t.grad is not None else 0.0

    gw = gb = None
    if train_head:
        rows = np.zeros(head.n_classes, dtype=bool)
        rows[np.asarray(list(train_head_classes), dtype=int)] = True
        gw = np.where(rows[None, :], hw.grad, 0.0)
        gb = np.where(rows, hb.grad, 0.0)
    return float(loss.data), GradientVector(flat, layout), gw, gb


def grad_prompts(
    backbone: FrozenBackbone,
    head: Head,
    pset: PromptSet,
    batch: np.ndarray,
    labels: np.ndarray,
    head_mask,
    extra: np.ndarray | None = None,
    q_bar: np.ndarray | None = None,
) -> GradientVector:
    """Gradient of the task loss w.r.t. the active set's prompts and key only."""
    _, grad, _, _ = loss_and_grads(
        backbone, head, pset, batch, labels, head_mask, extra=extra, q_bar=q_bar
    )
    return grad


def pretrain_backbone(
    backbone: FrozenBackbone,
    data: np.ndarray,
    labels: np.ndarray,
    steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
):
    """Briefly fit the backbone (plus a throwaway head) before freezing it.

    Gives the promptless feature space genuine structure so pre-trained
    subspaces are more than random directions. Mutates ``backbone.weights``
    in place; the throwaway head is discarded.
    """
    labels = np.asarray(labels, dtype=int)
    n_classes = int(labels.max()) + 1
    params = _params(backbone, trainable=True)
    hw = Tensor(rng.normal(0, 0.1, (backbone.config.d_model, n_classes)), requires_grad=True)
    hb = Tensor(np.zeros(n_classes), requires_grad=True)
    trainables = list(params.values()) + [hw, hb]
    n = len(data)
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        feats, _ = encode(backbone, data[idx], params=params)
        loss = cross_entropy(feats @ hw + hb, labels[idx])
        for t in trainables:
            t.zero_grad()
        loss.backward()
        for t in trainables:
            if t.grad is not None:
                t.data -= lr * t.grad
    for name, t in params.items():
        backbone.weights[name] = t.data
