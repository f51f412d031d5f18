"""Per-task orchestration: probe, decide, train under constraints, store spaces.

One engine owns a frozen backbone, the unified head, the prompt pool, the
subspace memory and the accuracy matrix. For each task it (1) probes every
pool set and decides grow-or-reuse (first task always grows; the
``grow_always`` and ``single_set`` modes bypass the decision), (2) trains the
chosen set with the soft pre-trained-knowledge constraint and, on reuse, the
orthogonal-to-old-space condition, optionally with frozen transfer prompts
appended, and (3) builds or extends the set's stored feature space and caches
the task's pre-trained space.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from growcl.decisions import (
    GradientProbe,
    GrowDecision,
    HindranceRecord,
    SoftConstraintConfig,
    apply_soft_constraint,
    compose_prompts,
    decide,
    dynamic_threshold,
    hindrance_for_old_set,
    project_gradient,
    select_transfer_sets,
    trace_record,
)
from growcl.encoder import (
    EncoderConfig,
    FrozenBackbone,
    GradientVector,
    Head,
    PromptSet,
    forward_prompted,
    forward_query,
    loss_and_grads,
    pretrain_backbone,
    prompted_with_layers,
    query_with_layers,
)
from growcl.metrics import AccuracyMatrix
from growcl.pool import PromptPool
from growcl.stream import StreamSpec, generate
from growcl.subspace import Basis, RepresentationMatrix, extend_basis, k_rank_basis

MODES = ("lw2g", "grow_always", "single_set")


class TrainerError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    eps_task: float = 0.95
    eps_pre: float = 0.95
    phi: float = 0.5
    n_fft: int = 1
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.1
    seed: int = 0
    mode: str = "lw2g"
    probe_samples: int = 256
    space_samples: int = 512
    space_from: str = "prompted"  # representation source for stored spaces
    fft_literal_angle: bool = False
    pretrain_steps: int = 120
    pretrain_classes: int = 8
    pretrain_lr: float = 0.05

    def __post_init__(self):
        for name in ("eps_task", "eps_pre"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise TrainerError(f"{name} must be in (0, 1], got {v}")
        if not 0.0 <= self.phi <= 1.0:
            raise TrainerError(f"phi must be in [0, 1], got {self.phi}")
        if self.mode not in MODES:
            raise TrainerError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.space_from not in ("prompted", "query"):
            raise TrainerError(f"space_from must be prompted|query, got {self.space_from!r}")
        if self.n_fft < 0 or self.epochs < 1 or self.batch_size < 1:
            raise TrainerError("n_fft >= 0, epochs >= 1, batch_size >= 1 required")


@dataclass
class SubspaceMemory:
    """Stored per-segment bases: per pool set (old tasks) and per task (pre)."""

    old_spaces: dict = field(default_factory=dict)  # set id -> {segment: Basis}
    pre_spaces: dict = field(default_factory=dict)  # task id -> {segment: Basis}


@dataclass
class TaskReport:
    task: int
    set_id: int
    decision: GrowDecision
    trace: dict
    final_loss: float
    drift_ratios: dict  # segment -> ||proj_old(delta)|| / ||delta|| (reuse only)
    attached_sets: list


class Engine:
    """A single continual run over an ordered task stream."""

    def __init__(self, enc_cfg: EncoderConfig, cfg: TrainConfig, n_classes: int):
        self.enc_cfg = enc_cfg
        self.cfg = cfg
        self.rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
        self.backbone = FrozenBackbone.init(enc_cfg, self.rng)
        if cfg.pretrain_steps > 0:
            self._pretrain()
        self.head = Head.init(enc_cfg.d_model, n_classes, self.rng)
        self.pool = PromptPool()
        self.memory = SubspaceMemory()
        self.attachments = {}  # set id -> (frozen tokens or None, [source set ids])
        self.seen_classes = []
        self.tasks_done = 0
        self.reports = []

    # -- setup -----------------------------------------------------------------

    def _pretrain(self):
        spec = StreamSpec(
            n_tasks=1,
            classes_per_task=self.cfg.pretrain_classes,
            dim=self.enc_cfg.input_dim,
            samples_per_class=40,
            seed=int(self.rng.integers(0, 2**31)),
        )
        pre = generate(spec)[0]
        pretrain_backbone(
            self.backbone,
            pre.x_train,
            pre.y_train,
            steps=self.cfg.pretrain_steps,
            lr=self.cfg.pretrain_lr,
            batch_size=self.cfg.batch_size,
            rng=self.rng,
        )

    # -- helpers ---------------------------------------------------------------

    def _segment_names(self):
        return [f"block{b}" for b in self.enc_cfg.prompted_blocks] + ["key"]

    def _spaces_from_reps(self, reps: dict, eps: float, label: str, old: dict | None = None):
        """Per-segment basis build (or extension, when ``old`` is given)."""
        spaces = {}
        for b in self.enc_cfg.prompted_blocks:
            name = f"block{b}"
            rep = RepresentationMatrix(reps[b], provenance=label)
            if old is None:
                spaces[name] = k_rank_basis(rep, eps, f"{label}/{name}")
            else:
                spaces[name] = extend_basis(old[name], rep, eps)
        rep = RepresentationMatrix(reps["final"], provenance=label)
        if old is None:
            spaces["key"] = k_rank_basis(rep, eps, f"{label}/key")
        else:
            spaces["key"] = extend_basis(old["key"], rep, eps)
        return spaces

    def _subset(self, n: int, cap: int) -> np.ndarray:
        take = min(cap, n)
        return self.rng.choice(n, size=take, replace=False)

    def _probe_batches(self, x, y):
        idx = self._subset(len(x), self.cfg.probe_samples)
        bs = self.cfg.batch_size
        return [(x[idx[i : i + bs]], y[idx[i : i + bs]]) for i in range(0, len(idx), bs)], idx

    def _extra_for(self, sid: int):
        return self.attachments.get(sid, (None, []))[0]

    # -- core per-task operations --------------------------------------------------

    def orthogonal_step(self, pset: PromptSet, grad: GradientVector, old_spaces: dict | None, lr: float):
        """Step along the component of the gradient orthogonal to the stored
        old space (plain step when no space is stored yet)."""
        if old_spaces:
            grad = project_gradient(grad, old_spaces, complement=True)
        for j, b in enumerate(self.enc_cfg.prompted_blocks):
            pset.p[j] -= lr * grad.segment(f"block{b}")
        pset.k -= lr * grad.segment("key")

    def finalize_task_space(self, set_id: int, task_id: int, dataset, grew: bool):
        """Collect a representation sample from the trained configuration and
        build (grow) or extend (reuse) the set's stored space."""
        idx = self._subset(len(dataset.x_train), self.cfg.space_samples)
        x = dataset.x_train[idx]
        pset = self.pool.sets[set_id]
        if self.cfg.space_from == "prompted":
            _, reps = prompted_with_layers(self.backbone, pset, x, extra=self._extra_for(set_id))
        else:
            _, reps = query_with_layers(self.backbone, x)
        old = None if grew else self.memory.old_spaces[set_id]
        label = f"set {set_id} / task {task_id}"
        self.memory.old_spaces[set_id] = self._spaces_from_reps(
            reps, self.cfg.eps_task, label, old=old
        )

    def train_task(self, task_id: int, dataset) -> TaskReport:
        """Run the full per-task pipeline and return its report."""
        cfg = self.cfg
        if task_id != self.tasks_done:
            raise TrainerError(f"tasks must arrive in order: expected {self.tasks_done}, got {task_id}")
        classes = sorted(set(int(c) for c in dataset.y_train))
        if set(classes) & set(self.seen_classes):
            raise TrainerError(f"task {task_id} overlaps previously seen classes")
        if max(classes) >= self.head.n_classes:
            raise TrainerError("class id outside the unified head")

        x, y = dataset.x_train, dataset.y_train
        probe_batches, probe_idx = self._probe_batches(x, y)
        probe = GradientProbe(self.backbone, self.head, tuple(classes), probe_batches)

        # Pre-trained space for this task, from the promptless encoder over
        # the probe subset; reused by the decision floor and the soft constraint.
        _, pre_reps = query_with_layers(self.backbone, x[probe_idx])
        pre_spaces = self._spaces_from_reps(pre_reps, cfg.eps_pre, f"pre / task {task_id}")
        self.memory.pre_spaces[task_id] = pre_spaces

        decision, probe_grads = self._decide(task_id, probe, pre_spaces)

        if decision.is_grow:
            pset = PromptSet.init(self.enc_cfg, self.rng)
            sid = self.pool.add_set(pset, task_id)
        else:
            sid = decision.reuse_id
            self.pool.assign_task(sid, task_id)
            pset = self.pool.sets[sid]

        attached = self._attach_transfer_prompts(sid, probe, probe_grads)
        extra = self._extra_for(sid)
        reuse_spaces = self.memory.old_spaces.get(sid) if not decision.is_grow else None

        q_all = forward_query(self.backbone, x)
        soft = SoftConstraintConfig(cfg.phi, pre_spaces)
        p_before = pset.p.copy()
        k_before = pset.k.copy()
        final_loss = np.nan
        for _ in range(cfg.epochs):
            order = self.rng.permutation(len(x))
            for lo in range(0, len(order), cfg.batch_size):
                batch = order[lo : lo + cfg.batch_size]
                q_bar = q_all[batch].mean(axis=0)
                loss, grad, gw, gb = loss_and_grads(
                    self.backbone, self.head, pset, x[batch], y[batch], tuple(classes),
                    extra=extra, q_bar=q_bar, train_head_classes=classes,
                )
                grad = apply_soft_constraint(grad, soft)
                self.orthogonal_step(pset, grad, reuse_spaces, cfg.lr)
                self.head.w -= cfg.lr * gw
                self.head.b -= cfg.lr * gb
                final_loss = loss

        drift = self._drift_ratios(pset, p_before, k_before, reuse_spaces)
        self.finalize_task_space(sid, task_id, dataset, grew=decision.is_grow)
        self.seen_classes.extend(classes)
        self.tasks_done += 1
        row = trace_record(task_id, decision.records, decision, self.pool.assignments)
        report = TaskReport(task_id, sid, decision, row, float(final_loss), drift, attached)
        self.reports.append(report)
        return report

    # -- decision plumbing ---------------------------------------------------------

    def _decide(self, task_id: int, probe: GradientProbe, pre_spaces: dict):
        probe_grads = {}
        if self.tasks_done == 0 or self.cfg.mode == "grow_always":
            return GrowDecision("grow", None, ()), probe_grads
        if self.cfg.mode == "single_set":
            return GrowDecision("reuse", 0, ()), probe_grads
        records = []
        for pset in self.pool.sets:
            old_val, g = hindrance_for_old_set(probe, pset, self.memory.old_spaces[pset.id])
            pre_val = dynamic_threshold(probe, pset, pre_spaces)
            probe_grads[pset.id] = g
            records.append(HindranceRecord(pset.id, old_val, pre_val))
        return decide(records), probe_grads

    def _attach_transfer_prompts(self, sid: int, probe: GradientProbe, probe_grads: dict):
        """Pick the sets whose stored spaces capture most of the task gradient
        and freeze copies of their prompts behind the active ones."""
        cfg = self.cfg
        candidates = [p.id for p in self.pool.sets if p.id != sid and p.id in self.memory.old_spaces]
        if cfg.n_fft == 0 or not candidates:
            self.attachments[sid] = (None, [])
            return []
        grads = {}
        for cid in candidates:
            g = probe_grads.get(cid)
            if g is None:
                g = probe.gradient(self.pool.sets[cid])
            grads[cid] = g
        spaces = {cid: self.memory.old_spaces[cid] for cid in candidates}
        chosen = select_transfer_sets(grads, spaces, cfg.n_fft, literal_angle=cfg.fft_literal_angle)
        composed = compose_prompts(self.pool.sets[sid], [self.pool.sets[c] for c in chosen])
        self.attachments[sid] = (composed.frozen, chosen)
        return chosen

    def _drift_ratios(self, pset, p_before, k_before, reuse_spaces):
        """Per-segment fraction of the parameter drift lying inside the old
        space; near zero certifies the orthogonal condition held."""
        if not reuse_spaces:
            return {}
        blocks = self.enc_cfg.prompted_blocks
        ratios = {}
        for name, basis in reuse_spaces.items():
            if name == "key":
                delta = (pset.k - k_before).reshape(1, -1)
            else:
                j = blocks.index(int(name.removeprefix("block")))
                delta = pset.p[j] - p_before[j]
            total = float(np.linalg.norm(delta))
            if total < 1e-9:
                # below accumulated float roundoff: the segment did not move
                ratios[name] = 0.0
                continue
            proj = (delta @ basis.matrix) @ basis.matrix.T
            ratios[name] = float(np.linalg.norm(proj) / total)
        return ratios

    # -- evaluation ------------------------------------------------------------------

    def evaluate_after(self, after_task: int, datasets, matrix: AccuracyMatrix):
        """Fill column ``after_task`` of the accuracy matrix.

        The main grid follows the class-incremental protocol: retrieval picks
        the set, logits range over every class seen so far. The oracle grid is
        the task-identity upper bound: ground-truth set and logits restricted
        to the task's own classes.
        """
        seen = [c for t in range(after_task + 1) for c in datasets[t].class_ids]
        for i in range(after_task + 1):
            ds = datasets[i]
            q = forward_query(self.backbone, ds.x_test)
            retrieved = self.pool.retrieve_batch(q)
            true_sid = self.pool.set_for_task(i)
            hits = int(np.sum(retrieved == true_sid))
            acc = self._accuracy(ds, retrieved, seen)
            oracle = self._accuracy(ds, np.full(len(ds.y_test), true_sid), ds.class_ids)
            matrix.record(i, after_task, acc, oracle, hits, len(ds.y_test))

    def _accuracy(self, ds, set_ids: np.ndarray, seen_classes) -> float:
        correct = 0
        for sid in np.unique(set_ids):
            rows = np.flatnonzero(set_ids == sid)
            logits = forward_prompted(
                self.backbone, self.head, self.pool.sets[int(sid)], ds.x_test[rows],
                seen_classes, extra=self._extra_for(int(sid)),
            )
            correct += int(np.sum(logits.argmax(axis=1) == ds.y_test[rows]))
        return correct / len(ds.y_test)


@dataclass
class RunResult:
    engine: Engine
    matrix: AccuracyMatrix
    reports: list

    @property
    def trace_rows(self):
        return [r.trace for r in self.reports]


def run_stream(enc_cfg: EncoderConfig, cfg: TrainConfig, datasets, n_classes: int | None = None) -> RunResult:
    """Train every task in order, evaluating all seen tasks after each one."""
    if n_classes is None:
        n_classes = max(int(c) for ds in datasets for c in ds.class_ids) + 1
    engine = Engine(enc_cfg, cfg, n_classes)
    matrix = AccuracyMatrix(len(datasets))
    for t, ds in enumerate(datasets):
        engine.train_task(t, ds)
        engine.evaluate_after(t, datasets, matrix)
    return RunResult(engine, matrix, engine.reports)
