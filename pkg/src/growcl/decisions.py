"""Grow-or-reuse decision logic and the gradient surgery around it.

Before each task (after the first), every pool set is probed: the task's
gradient on that set is measured against the orthogonal complement of the
set's stored feature space (the hindrance the orthogonal update rule would
impose), and against the complement of the task's pre-trained space on a
fresh clone (the hindrance floor an unencumbered set would face). The gap
z = hindrance_old - hindrance_floor drives the decision: grow a new set when
every gap is positive, otherwise fold the task into the set with the
smallest gap.

Also here: the soft constraint that keeps updates consistent with the
pre-trained feature space, selection of frozen transfer prompts, and the
composition of active + frozen prompt tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from growcl.encoder import GradientVector, Head, PromptSet, grad_prompts
from growcl.subspace import Basis, HfcValue, hfc, project_rows


class DecisionError(ValueError):
    pass


@dataclass(frozen=True)
class HindranceRecord:
    """Per-set probe result; z is the hindrance gap in radians."""

    set_id: int
    hfc_old: HfcValue
    hfc_pre: HfcValue

    @property
    def z(self) -> float:
        return self.hfc_old.angle - self.hfc_pre.angle

    @property
    def z_degrees(self) -> float:
        return math.degrees(self.z)


@dataclass(frozen=True)
class GrowDecision:
    kind: str  # "grow" | "reuse"
    reuse_id: int | None
    records: tuple

    @property
    def is_grow(self) -> bool:
        return self.kind == "grow"

    def describe(self) -> str:
        return "grow" if self.is_grow else f"reuse({self.reuse_id})"


def decide(records) -> GrowDecision:
    """Grow iff every hindrance gap is positive, else reuse the min-gap set."""
    records = tuple(records)
    if not records:
        raise DecisionError("decide() needs at least one record; the first task grows unconditionally")
    best = min(records, key=lambda r: (r.z, r.set_id))
    if best.z > 0.0:
        return GrowDecision("grow", None, records)
    return GrowDecision("reuse", best.set_id, records)


# -- lifting bases onto the flat prompt gradient ------------------------------


def project_gradient(grad: GradientVector, spaces: dict, complement: bool = False) -> GradientVector:
    """Apply per-segment span (or complement) projections to a flat gradient.

    ``spaces`` maps segment names ("block0", ..., "key") to Basis objects in
    the feature dimension; prompt segments are projected row-wise (each token
    row lives in feature space). Segments without a stored basis behave as an
    empty span: projection zero, complement identity.
    """
    out = np.zeros_like(grad.flat) if not complement else grad.flat.copy()
    for name, off, shape in grad.layout.segments:
        basis = spaces.get(name)
        if basis is None:
            continue
        seg = grad.layout.view(grad.flat, name)
        rows = seg.reshape(-1, grad.layout.feature_dim)
        proj = project_rows(rows, basis)
        target = grad.layout.view(out, name)
        target[:] = (rows - proj).reshape(shape) if complement else proj.reshape(shape)
    return GradientVector(out, grad.layout)


def hindrance(grad: GradientVector, spaces: dict) -> HfcValue:
    """Angle between a gradient and its projection onto the complement of
    the stored spaces (the part an orthogonal update would keep)."""
    if grad.norm == 0.0:
        raise DecisionError("degenerate subset batch: zero probe gradient")
    surviving = project_gradient(grad, spaces, complement=True)
    return hfc(grad.flat, surviving.flat)


@dataclass
class GradientProbe:
    """Averaged task gradient over a fixed subset, no parameter updates.

    Probing uses cross-entropy only; the retrieval-key pull plays no part in
    the decision, so the key segment of probe gradients is zero.
    """

    backbone: object
    head: Head
    head_mask: tuple
    batches: list  # [(x, y), ...]

    def gradient(self, pset: PromptSet) -> GradientVector:
        if not self.batches:
            raise DecisionError("probe needs at least one batch")
        acc = None
        for x, y in self.batches:
            g = grad_prompts(self.backbone, self.head, pset, x, y, self.head_mask)
            acc = g.flat if acc is None else acc + g.flat
            layout = g.layout
        return GradientVector(acc / len(self.batches), layout)


def hindrance_for_old_set(probe: GradientProbe, pset: PromptSet, old_spaces: dict):
    """Probe an existing set against its own stored space.

    Returns (HfcValue, probe gradient); the gradient is reused for transfer
    ranking.
    """
    if not old_spaces:
        raise DecisionError(f"set {pset.id} has no stored feature space")
    g = probe.gradient(pset)
    return hindrance(g, old_spaces), g


def dynamic_threshold(probe: GradientProbe, source: PromptSet, pre_spaces: dict) -> HfcValue:
    """Hindrance floor: a fresh set cloned from ``source`` measured against
    the complement of the task's pre-trained feature space."""
    clone = source.clone()
    g = probe.gradient(clone)
    return hindrance(g, pre_spaces)


# -- soft pre-trained-knowledge constraint ------------------------------------


@dataclass(frozen=True)
class SoftConstraintConfig:
    phi: float
    pre_spaces: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.phi <= 1.0:
            raise DecisionError(f"phi must be in [0, 1], got {self.phi}")


def apply_soft_constraint(grad: GradientVector, cfg: SoftConstraintConfig) -> GradientVector:
    """Remove a (1 - phi) fraction of the gradient's component inside the
    pre-trained feature space: g - (1 - phi) * Proj_pre(g)."""
    if cfg.phi == 1.0:
        return grad.copy()
    proj = project_gradient(grad, cfg.pre_spaces)
    return GradientVector(grad.flat - (1.0 - cfg.phi) * proj.flat, grad.layout)


# -- frozen-prompt transfer selection ------------------------------------------


def transfer_score(grad: GradientVector, spaces: dict) -> float:
    """Fraction of the gradient's norm lying inside the stored space."""
    if grad.norm == 0.0:
        return 0.0
    return project_gradient(grad, spaces).norm / grad.norm


def select_transfer_sets(grads: dict, spaces_by_set: dict, n: int, literal_angle: bool = False):
    """Rank candidate sets by how much of the task gradient their stored
    space captures and return the top ``n`` set ids.

    ``literal_angle=True`` ranks by the angle to the projection instead
    (descending), which inverts the order; it exists for comparison only.
    """
    if n < 0:
        raise DecisionError("n must be >= 0")
    if n == 0:
        return []
    scored = []
    for sid, g in grads.items():
        spaces = spaces_by_set.get(sid)
        if spaces is None:
            continue
        if literal_angle:
            proj = project_gradient(g, spaces)
            angle = math.pi / 2 if proj.norm == 0 else hfc(g.flat, proj.flat).angle
            scored.append((-angle, sid))
        else:
            scored.append((-transfer_score(g, spaces), sid))
    scored.sort()
    return [sid for _, sid in scored[:n]]


# -- prompt composition ----------------------------------------------------------


@dataclass(frozen=True)
class ComposedPrompts:
    """Active (trainable) prompt set plus frozen transfer tokens."""

    active: PromptSet
    frozen: np.ndarray | None  # [n_prompted, extra_tokens, d] or None

    @property
    def tokens_per_block(self) -> int:
        extra = 0 if self.frozen is None else self.frozen.shape[1]
        return self.active.p.shape[1] + extra


def compose_prompts(active: PromptSet, reused) -> ComposedPrompts:
    """Concatenate frozen copies of ``reused`` sets' tokens after the active
    tokens, per prompted block. The copies never receive gradient."""
    reused = list(reused)
    if not reused:
        return ComposedPrompts(active, None)
    blocks, _, d = active.p.shape
    for r in reused:
        if r.p.shape[0] != blocks or r.p.shape[2] != d:
            raise DecisionError(
                f"incompatible prompt shape {r.p.shape} vs active {active.p.shape}"
            )
    frozen = np.concatenate([r.p.copy() for r in reused], axis=1)
    return ComposedPrompts(active, frozen)


# -- trace records -----------------------------------------------------------------


def trace_record(task: int, records, decision: GrowDecision, pool_after: dict) -> dict:
    """One decision as a JSON-ready dict (angles in degrees, like reports)."""
    return {
        "task": task,
        "records": [
            {
                "set": r.set_id,
                "hfc_old_deg": round(r.hfc_old.degrees, 6),
                "hfc_pre_deg": round(r.hfc_pre.degrees, 6),
                "z": round(r.z_degrees, 6),
            }
            for r in records
        ],
        "decision": decision.describe(),
        "pool_after": {str(sid): list(tasks) for sid, tasks in sorted(pool_after.items())},
    }
