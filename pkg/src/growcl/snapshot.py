"""Flat binary container for run snapshots.

Layout (all little-endian):

    magic   4 bytes  b"LW2G"
    version u32      currently 1
    u32 fields: d_model, n_blocks, n_heads, prompt_len, input_dim,
                n_feature_tokens, mlp_ratio, n_prompted,
                prompted_blocks[n_prompted], n_classes, n_tasks,
                tasks_done, n_arrays
    then n_arrays named float32 arrays in declaration order:
        name_len u16, name utf-8, ndim u32, shape u32[ndim], data f32[...]

Arrays hold the backbone (declaration order), the head, every prompt set
with its frozen attachment and task list, all stored bases, and the
accuracy grids. Weights are quantized to float32 on save; resuming from a
snapshot therefore continues from the rounded state.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"LW2G"
VERSION = 1


class SnapshotError(ValueError):
    pass


def _write_array(fh, name: str, arr: np.ndarray):
    data = np.ascontiguousarray(arr, dtype="<f4")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def _read_array(fh):
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode("utf-8")
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return name, data.astype(np.float64)


def collect_arrays(engine, matrix) -> list:
    """Every persistent array of a run, named, in declaration order."""
    out = []
    for name in engine.backbone.names():
        out.append((f"backbone.{name}", engine.backbone.weights[name]))
    out.append(("head.w", engine.head.w))
    out.append(("head.b", engine.head.b))
    cfg = engine.enc_cfg
    for pset in engine.pool.sets:
        sid = pset.id
        out.append((f"set{sid}.p", pset.p))
        out.append((f"set{sid}.k", pset.k))
        frozen, sources = engine.attachments.get(sid, (None, []))
        if frozen is None:
            frozen = np.zeros((cfg.n_prompted, 0, cfg.d_model))
        out.append((f"set{sid}.attached", frozen))
        out.append((f"set{sid}.attached_ids", np.asarray(sources, dtype=float)))
        out.append((f"set{sid}.tasks", np.asarray(engine.pool.assignments[sid], dtype=float)))
    for sid, spaces in sorted(engine.memory.old_spaces.items()):
        for seg, basis in spaces.items():
            out.append((f"old.{sid}.{seg}", basis.matrix))
    for tid, spaces in sorted(engine.memory.pre_spaces.items()):
        for seg, basis in spaces.items():
            out.append((f"pre.{tid}.{seg}", basis.matrix))
    out.append(("matrix.a", np.nan_to_num(matrix.a, nan=-1.0)))
    out.append(("matrix.a_oracle", np.nan_to_num(matrix.a_oracle, nan=-1.0)))
    out.append(("matrix.hits", matrix.retrieval_hits.astype(float)))
    out.append(("matrix.totals", matrix.retrieval_totals.astype(float)))
    out.append(("seen_classes", np.asarray(engine.seen_classes, dtype=float)))
    return out


def save(path, engine, matrix):
    cfg = engine.enc_cfg
    arrays = collect_arrays(engine, matrix)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        header = [
            VERSION, cfg.d_model, cfg.n_blocks, cfg.n_heads, cfg.prompt_len,
            cfg.input_dim, cfg.n_feature_tokens, cfg.mlp_ratio, cfg.n_prompted,
            *cfg.prompted_blocks, engine.head.n_classes, matrix.n_tasks,
            engine.tasks_done, len(arrays),
        ]
        fh.write(struct.pack(f"<{len(header)}I", *header))
        for name, arr in arrays:
            _write_array(fh, name, arr)


def load(path) -> dict:
    """Read a container back into {header fields, arrays by name}."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise SnapshotError("bad magic: not a run snapshot")
        fixed = struct.unpack("<9I", fh.read(36))
        (version, d_model, n_blocks, n_heads, prompt_len,
         input_dim, n_feature_tokens, mlp_ratio, n_prompted) = fixed
        if version != VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}")
        prompted = struct.unpack(f"<{n_prompted}I", fh.read(4 * n_prompted))
        n_classes, n_tasks, tasks_done, n_arrays = struct.unpack("<4I", fh.read(16))
        arrays = {}
        order = []
        for _ in range(n_arrays):
            name, arr = _read_array(fh)
            arrays[name] = arr
            order.append(name)
    return {
        "version": version,
        "d_model": d_model,
        "n_blocks": n_blocks,
        "n_heads": n_heads,
        "prompt_len": prompt_len,
        "input_dim": input_dim,
        "n_feature_tokens": n_feature_tokens,
        "mlp_ratio": mlp_ratio,
        "prompted_blocks": prompted,
        "n_classes": n_classes,
        "n_tasks": n_tasks,
        "tasks_done": tasks_done,
        "arrays": arrays,
        "array_order": order,
    }


def restore_engine(snap: dict, enc_cfg, train_cfg):
    """Rebuild an Engine and AccuracyMatrix from a loaded container.

    The encoder config must structurally match the snapshot header.
    """
    from growcl.encoder import FrozenBackbone, Head, PromptSet
    from growcl.metrics import AccuracyMatrix
    from growcl.pool import PromptPool
    from growcl.subspace import orthonormalized
    from growcl.trainer import Engine, SubspaceMemory

    for field_name in ("d_model", "n_blocks", "n_heads", "prompt_len", "input_dim",
                       "n_feature_tokens", "mlp_ratio"):
        if getattr(enc_cfg, field_name) != snap[field_name]:
            raise SnapshotError(f"encoder config mismatch on {field_name}")
    if tuple(enc_cfg.prompted_blocks) != tuple(snap["prompted_blocks"]):
        raise SnapshotError("encoder config mismatch on prompted_blocks")

    arrays = snap["arrays"]
    engine = object.__new__(Engine)
    engine.enc_cfg = enc_cfg
    engine.cfg = train_cfg
    engine.rng = np.random.default_rng(np.random.SeedSequence(train_cfg.seed))
    backbone = FrozenBackbone(enc_cfg, {})
    for name in backbone.names():
        backbone.weights[name] = arrays[f"backbone.{name}"]
    engine.backbone = backbone
    engine.head = Head(arrays["head.w"], arrays["head.b"])
    engine.pool = PromptPool()
    engine.attachments = {}
    sid = 0
    while f"set{sid}.p" in arrays:
        pset = PromptSet(arrays[f"set{sid}.p"], arrays[f"set{sid}.k"], sid)
        engine.pool.sets.append(pset)
        engine.pool.assignments[sid] = [int(t) for t in arrays[f"set{sid}.tasks"]]
        frozen = arrays[f"set{sid}.attached"]
        sources = [int(v) for v in arrays[f"set{sid}.attached_ids"]]
        engine.attachments[sid] = (frozen if frozen.shape[1] else None, sources)
        sid += 1
    memory = SubspaceMemory()
    for name in snap["array_order"]:
        if name.startswith("old.") or name.startswith("pre."):
            kind, owner, seg = name.split(".", 2)
            store = memory.old_spaces if kind == "old" else memory.pre_spaces
            # float32 storage drifts orthonormality past tolerance; clean it
            store.setdefault(int(owner), {})[seg] = orthonormalized(arrays[name], label=name)
    engine.memory = memory
    engine.seen_classes = [int(c) for c in arrays["seen_classes"]]
    engine.tasks_done = snap["tasks_done"]
    engine.reports = []

    matrix = AccuracyMatrix(snap["n_tasks"])
    matrix.a = np.where(arrays["matrix.a"] < 0, np.nan, arrays["matrix.a"])
    matrix.a_oracle = np.where(arrays["matrix.a_oracle"] < 0, np.nan, arrays["matrix.a_oracle"])
    matrix.retrieval_hits = arrays["matrix.hits"].astype(int)
    matrix.retrieval_totals = arrays["matrix.totals"].astype(int)
    return engine, matrix
