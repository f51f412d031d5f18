"""The prompt sets pool: storage, cosine retrieval, set-to-task registry."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from growcl.encoder import PromptSet


class PoolError(ValueError):
    pass


@dataclass
class PromptPool:
    sets: list = field(default_factory=list)  # ordered PromptSets, id == position
    assignments: dict = field(default_factory=dict)  # set id -> [task ids]

    def __len__(self) -> int:
        return len(self.sets)

    @property
    def size(self) -> int:
        return len(self.sets)

    def assigned_tasks(self):
        return [t for tasks in self.assignments.values() for t in tasks]

    def set_for_task(self, task: int) -> int:
        for sid, tasks in self.assignments.items():
            if task in tasks:
                return sid
        raise PoolError(f"task {task} not assigned to any set")

    def add_set(self, pset: PromptSet, task: int) -> int:
        """Grow the pool by one set and assign ``task`` to it."""
        if task in self.assigned_tasks():
            raise PoolError(f"task {task} already assigned")
        sid = len(self.sets)
        pset.id = sid
        self.sets.append(pset)
        self.assignments[sid] = [task]
        return sid

    def assign_task(self, set_id: int, task: int):
        """Record that an existing set also serves ``task`` (a reuse)."""
        if set_id not in self.assignments:
            raise PoolError(f"unknown set id {set_id}")
        if task in self.assigned_tasks():
            raise PoolError(f"task {task} already assigned")
        self.assignments[set_id].append(task)

    def retrieve(self, q: np.ndarray) -> int:
        """Best-matching set id by cosine(query, key); ties go to the lowest id."""
        if not self.sets:
            raise PoolError("retrieve on empty pool")
        q = np.asarray(q, dtype=np.float64)
        qn = np.linalg.norm(q)
        best_id, best_score = 0, -np.inf
        for pset in self.sets:
            kn = np.linalg.norm(pset.k)
            score = float(np.dot(q, pset.k) / (qn * kn)) if qn > 0 and kn > 0 else 0.0
            if score > best_score:
                best_id, best_score = pset.id, score
        return best_id

    def retrieve_batch(self, queries: np.ndarray) -> np.ndarray:
        return np.array([self.retrieve(q) for q in queries], dtype=int)
