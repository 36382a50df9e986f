"""Merge/reconstruct matrix construction and the compressed forward path.

A compressed layer replaces B(z) with  M+ . B(M.z) + z*(1-mask):  tokens
are folded into per-group weighted sums before the block and scattered
back afterwards, while pruned tokens bypass the block entirely through
the masked shortcut.  Group structure makes both directions O(N*D); the
dense matrix products exist only as test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeMismatchError, SingularMatrixError
from .scoring import prune_count_for, rank_descending, round_half_up
from .tensor import Tensor, from_op
from .vit import (AttentionTrace, BlockParams, VisionTransformer,
                  block_forward, clone_params, patchify)

# Compiled segmented row-sum kernel.  The generic reduceat path pays a
# per-segment dispatch cost that loses to a dense BLAS matmul even
# though it does ~kept-times less arithmetic; scipy's CSR kernel has one
# flat C loop and stays ahead at every size.  The symbol has lived at
# this spot for a very long time, but fall back gracefully if it moves.
try:
    from scipy.sparse import _sparsetools as _sp_tools
    _csr_matvecs = _sp_tools.csr_matvecs
except (ImportError, AttributeError):  # pragma: no cover
    _csr_matvecs = None

RANK_TOL = 1e-10
_F8 = np.dtype(np.float64)


@dataclass
class MergeMatrix:
    """Dense (kept x n_tokens) merge weights plus the group partition.

    ``groups`` lists one half-open [start, stop) range per row; together
    the ranges partition [0, n_tokens), which is what lets the grouped
    fast path use a single segmented reduction.
    """

    data: np.ndarray
    groups: list[tuple[int, int]]

    @property
    def kept(self) -> int:
        return self.data.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.data.shape[1]

    def group_ids(self) -> np.ndarray:
        """Map each original token index to its owning row."""
        gid = np.empty(self.n_tokens, dtype=np.int64)
        for row, (a, b) in enumerate(self.groups):
            gid[a:b] = row
        return gid

    def weight_vector(self) -> np.ndarray:
        """w[j] = this token's weight inside its own group's row."""
        return self.data[self.group_ids(), np.arange(self.n_tokens)]

    def csr_parts(self) -> tuple:
        """(kept, n_tokens, indptr, indices, weights): CSR form, cached.

        Valid because every row's support is exactly its contiguous
        group; the instance is treated as immutable once built.  Row and
        column counts ride along so the merge hot path pays one method
        call instead of four attribute lookups.
        """
        cached = getattr(self, "_csr_parts", None)
        if cached is None:
            n = self.n_tokens
            indptr = np.empty(len(self.groups) + 1, dtype=np.int32)
            indptr[:-1] = [a for a, _ in self.groups]
            indptr[-1] = n
            cached = (self.kept, n, indptr, np.arange(n, dtype=np.int32),
                      np.ascontiguousarray(self.weight_vector()))
            self._csr_parts = cached
        return cached

    def validate(self, mask: np.ndarray | None = None,
                 class_token: bool = False, atol: float = 1e-10) -> None:
        m, n = self.data.shape
        if len(self.groups) != m:
            raise ContractError(
                f"{m} rows but {len(self.groups)} groups")
        covered = 0
        for a, b in self.groups:
            if a != covered or b <= a:
                raise ContractError(
                    f"groups do not partition [0, {n}): saw ({a}, {b}) "
                    f"after covering {covered}")
            covered = b
        if covered != n:
            raise ContractError(f"groups cover [0, {covered}) of [0, {n})")
        for row, (a, b) in enumerate(self.groups):
            outside = np.delete(self.data[row], np.s_[a:b])
            if outside.any():
                raise ContractError(
                    f"row {row} has support outside its group ({a}, {b})")
            total = self.data[row].sum()
            if abs(total - 1.0) > atol:
                raise ContractError(
                    f"row {row} sums to {total}, expected 1")
        if mask is not None:
            col_zero = ~self.data.any(axis=0)
            pruned = np.asarray(mask) == 0
            if not (col_zero == pruned).all():
                raise ContractError(
                    "zero columns of the merge matrix disagree with the mask")
        if class_token:
            row0 = self.data[0]
            if row0[0] != 1.0 or row0[1:].any():
                raise ContractError(
                    "class-token row must be the unit vector e_0")


@dataclass
class PlanEntry:
    mask: np.ndarray           # (n,) uint8; 0 = pruned
    merge: MergeMatrix         # (kept, n)
    reconstruct: np.ndarray    # (n, kept)
    kept: int


@dataclass
class CompressionPlan:
    depth: int
    entries: list[PlanEntry | None]      # None for uncompressed layers
    uncompressed: frozenset[int] = field(default_factory=frozenset)
    class_token: bool = True

    def __post_init__(self):
        if len(self.entries) != self.depth:
            raise ContractError(
                f"{len(self.entries)} entries for depth {self.depth}")
        for layer, entry in enumerate(self.entries):
            if (entry is None) != (layer in self.uncompressed):
                raise ContractError(
                    f"layer {layer}: entry presence disagrees with the "
                    f"uncompressed set")

    def kept_per_layer(self) -> dict[int, int]:
        return {l: e.kept for l, e in enumerate(self.entries) if e is not None}

    def total_kept(self) -> int:
        return sum(e.kept for e in self.entries if e is not None)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {
            "plan.depth": np.array(self.depth, dtype=np.int64),
            "plan.class_token": np.array(int(self.class_token), dtype=np.uint8),
            "plan.uncompressed": np.array(sorted(self.uncompressed),
                                          dtype=np.int64),
        }
        for layer, entry in enumerate(self.entries):
            if entry is None:
                continue
            p = f"plan.layer{layer}."
            out[p + "mask"] = entry.mask.astype(np.uint8)
            out[p + "merge"] = entry.merge.data
            out[p + "reconstruct"] = entry.reconstruct
            out[p + "groups"] = np.array(entry.merge.groups, dtype=np.int64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "CompressionPlan":
        try:
            depth = int(arrays["plan.depth"])
            class_token = bool(arrays["plan.class_token"])
            uncompressed = frozenset(int(i) for i in arrays["plan.uncompressed"])
        except KeyError as e:
            raise ContractError(f"plan arrays missing {e}") from None
        entries: list[PlanEntry | None] = []
        for layer in range(depth):
            p = f"plan.layer{layer}."
            if layer in uncompressed:
                entries.append(None)
                continue
            try:
                mask = arrays[p + "mask"].astype(np.uint8)
                merge = MergeMatrix(
                    np.asarray(arrays[p + "merge"], dtype=np.float64),
                    [(int(a), int(b)) for a, b in arrays[p + "groups"]])
                recon = np.asarray(arrays[p + "reconstruct"], dtype=np.float64)
            except KeyError as e:
                raise ContractError(f"plan arrays missing {e}") from None
            entries.append(PlanEntry(mask, merge, recon, merge.kept))
        return cls(depth, entries, uncompressed, class_token)


# ----------------------------------------------------------------------
# merge-matrix generation
# ----------------------------------------------------------------------

def _assemble(scores: np.ndarray, reserved: np.ndarray, pruned: np.ndarray,
              class_token: bool) -> tuple[np.ndarray, MergeMatrix]:
    """Build mask and merge matrix from explicit index sets.

    ``reserved`` holds the merge-eligible (non-class) important token
    indices, ascending; ``pruned`` the pruned indices.  The class token,
    when present, occupies row 0 as a pure unit vector.
    """
    n = scores.size
    start = 1 if class_token else 0
    mask = np.ones(n, dtype=np.uint8)
    mask[pruned] = 0
    pruned_flag = mask == 0

    weights = np.where(pruned_flag, 0.0, np.asarray(scores, dtype=np.float64))
    rows: list[np.ndarray] = []
    groups: list[tuple[int, int]] = []
    reserved = np.asarray(reserved, dtype=np.int64)

    if class_token:
        if pruned_flag[0]:
            raise ContractError("the class token cannot be pruned")
        row = np.zeros(n)
        row[0] = 1.0
        rows.append(row)
        # With no merge groups at all, the class group absorbs the (fully
        # pruned) remainder so the partition invariant holds.
        groups.append((0, 1) if reserved.size else (0, n))

    if reserved.size == 0:
        if (~pruned_flag[start:]).any():
            raise ContractError(
                "no merge rows available but unpruned tokens remain; "
                "increase the keep budget or prune them")
    else:
        prev = start - 1
        last = reserved.size - 1
        for i, r in enumerate(reserved):
            a = prev + 1
            b = n if i == last else int(r) + 1
            seg = weights[a:b]
            alive = ~pruned_flag[a:b]
            total = seg.sum()
            row = np.zeros(n)
            if total > 0.0 and not np.any(alive & (seg == 0.0)):
                row[a:b] = seg / total
            else:
                # Degenerate group: normalized scores would zero out a
                # surviving member (or the whole group scored zero),
                # leaving a kept token with an all-zero column and nothing
                # to reconstruct from.  Uniform weights over survivors
                # keep every kept column nonzero and the row full rank.
                row[a:b][alive] = 1.0 / alive.sum()
            rows.append(row)
            groups.append((a, b))
            prev = int(r)

    merge = MergeMatrix(np.vstack(rows), groups)
    return mask, merge


def generate_merge_matrix(scores: np.ndarray, pm_threshold: float | None,
                          keep_count: int, prune_count: int | None = None,
                          class_token: bool = False,
                          ) -> tuple[np.ndarray, MergeMatrix]:
    """Single-layer merge-matrix construction.

    Sorts scores descending, prunes the lowest ``prune_count`` tokens
    (derived from ``pm_threshold`` when not given explicitly), selects the
    ``keep_count`` highest as important, and partitions the sequence into
    one contiguous group per important token: half-open (previous,
    current], trailing tokens folded into the last group.  Row weights are
    the prune-zeroed scores normalized per group.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ContractError("scores must be finite")
    n = scores.size
    start = 1 if class_token else 0
    if prune_count is None:
        if pm_threshold is None:
            raise ContractError("need pm_threshold or prune_count")
        prune_count = prune_count_for(pm_threshold, n, class_token=class_token)
    if prune_count < 0:
        raise ContractError(f"prune_count must be nonnegative, got {prune_count}")
    if keep_count < 1:
        raise ContractError(f"keep_count must be positive, got {keep_count}")
    if keep_count + prune_count > n:
        raise ContractError(
            f"keep_count {keep_count} + prune_count {prune_count} exceeds "
            f"{n} tokens")
    eligible = n - start
    k_eff = keep_count - start
    if k_eff < 0:
        raise ContractError("keep_count must include the class token")

    order = rank_descending(scores[start:]) + start
    reserved = np.sort(order[:k_eff])
    pruned = np.sort(order[eligible - prune_count:]) if prune_count else \
        np.empty(0, dtype=np.int64)
    return _assemble(scores, reserved, pruned, class_token)


def pseudoinverse(merge: MergeMatrix | np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudoinverse of a merge matrix.

    Generated matrices have disjointly supported rows, making M.M^T
    diagonal, so column i of the result is row_i / ||row_i||^2.  If
    learnable updates have broken disjointness, fall back to a dense SVD.
    """
    m = merge.data if isinstance(merge, MergeMatrix) else \
        np.asarray(merge, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"expected a matrix, got shape {m.shape}")
    norms2 = (m * m).sum(axis=1)
    if (norms2 <= RANK_TOL ** 2).any():
        bad = int(np.argmin(norms2))
        raise SingularMatrixError(f"merge-matrix row {bad} is zero")
    disjoint = (np.count_nonzero(m, axis=0) <= 1).all()
    if disjoint:
        return (m / norms2[:, None]).T
    return np.linalg.pinv(m, rcond=RANK_TOL)


# ----------------------------------------------------------------------
# grouped fast paths (and their autodiff ops)
# ----------------------------------------------------------------------

def merge_flop_count(n_tokens: int, dim: int) -> int:
    """Multiply-adds of one grouped merge or reconstruct pass: 2*N*D."""
    return 2 * n_tokens * dim


def grouped_merge(z: np.ndarray, merge: MergeMatrix,
                  counter: dict | None = None) -> np.ndarray:
    """Per-group weighted token sums; identical to merge.data @ z.

    One multiply and one add per token element: 2*N*D operations,
    recorded into ``counter`` when given.  Unbatched input goes through
    the compiled CSR kernel; batched input uses a segmented reduction
    along the token axis.  Both accumulate each group left to right.
    """
    if _csr_matvecs is not None and type(z) is np.ndarray and z.ndim == 2 \
            and z.dtype == _F8 and z.flags.c_contiguous:
        kept, n, indptr, indices, w = merge.csr_parts()
        rows, d = z.shape
        if rows != n:
            raise ShapeMismatchError(
                f"tokens axis {z.shape} does not match merge width {n}")
        out = np.zeros((kept, d))
        _csr_matvecs(kept, n, d, indptr, indices, w, z.ravel(), out.ravel())
    else:
        z = np.asarray(z, dtype=np.float64)
        n, d = merge.n_tokens, z.shape[-1]
        if z.shape[-2] != n:
            raise ShapeMismatchError(
                f"tokens axis {z.shape} does not match merge width {n}")
        w = merge.csr_parts()[4]
        starts = [a for a, _ in merge.groups]
        out = np.add.reduceat(z * w[:, None], starts, axis=-2)
    if counter is not None:
        counter["multiply_adds"] = counter.get("multiply_adds", 0) \
            + merge_flop_count(n, d)
    return out


def grouped_reconstruct(y: np.ndarray, reconstruct: np.ndarray,
                        groups: list[tuple[int, int]],
                        counter: dict | None = None) -> np.ndarray:
    """Scatter merged tokens back to full width; equals reconstruct @ y."""
    y = np.asarray(y, dtype=np.float64)
    n = reconstruct.shape[0]
    gid = _group_ids(groups, n)
    w = reconstruct[np.arange(n), gid]
    out = y[..., gid, :] * w[:, None]
    if counter is not None:
        counter["multiply_adds"] = counter.get("multiply_adds", 0) \
            + merge_flop_count(n, y.shape[-1])
    return out


def _group_ids(groups: list[tuple[int, int]], n: int) -> np.ndarray:
    gid = np.empty(n, dtype=np.int64)
    for row, (a, b) in enumerate(groups):
        gid[a:b] = row
    return gid


def merge_tokens(z: Tensor, merge_t: Tensor, groups: list[tuple[int, int]]
                 ) -> Tensor:
    """Autodiff grouped merge: out[g] = sum_{j in g} M[g, j] * z[j].

    Gradients to the matrix touch only in-group entries, so structural
    zeros stay exactly zero through any number of training steps.
    """
    n = merge_t.shape[1]
    gid = _group_ids(groups, n)
    idx = np.arange(n)
    starts = [a for a, _ in groups]
    w = merge_t.data[gid, idx]
    data = np.add.reduceat(z.data * w[:, None], starts, axis=-2)

    def grad_fn(g):
        g_tok = g[..., gid, :]
        dz = g_tok * w[:, None]
        per_token = (g_tok * z.data).sum(axis=-1)
        per_token = per_token.sum(axis=tuple(range(per_token.ndim - 1)))
        dm = np.zeros_like(merge_t.data)
        dm[gid, idx] = per_token
        return dz, dm

    return from_op(data, (z, merge_t), grad_fn, "merge_tokens")


def reconstruct_tokens(y: Tensor, recon_t: Tensor,
                       groups: list[tuple[int, int]]) -> Tensor:
    """Autodiff grouped reconstruct: out[j] = R[j, group(j)] * y[group(j)]."""
    n = recon_t.shape[0]
    gid = _group_ids(groups, n)
    idx = np.arange(n)
    starts = [a for a, _ in groups]
    w = recon_t.data[idx, gid]
    data = y.data[..., gid, :] * w[:, None]

    def grad_fn(g):
        dy = np.add.reduceat(g * w[:, None], starts, axis=-2)
        per_token = (g * y.data[..., gid, :]).sum(axis=-1)
        per_token = per_token.sum(axis=tuple(range(per_token.ndim - 1)))
        dr = np.zeros_like(recon_t.data)
        dr[idx, gid] = per_token
        return dy, dr

    return from_op(data, (y, recon_t), grad_fn, "reconstruct_tokens")


def pm_forward(z: Tensor, entry: PlanEntry, block: BlockParams, heads: int,
               trace: AttentionTrace | None = None) -> Tensor:
    """Compressed layer forward with a frozen plan entry."""
    merge_t = Tensor(entry.merge.data)
    recon_t = Tensor(entry.reconstruct)
    return pm_forward_tensors(z, merge_t, recon_t, entry.merge.groups,
                              entry.mask, block, heads, trace=trace)


def pm_forward_tensors(z: Tensor, merge_t: Tensor, recon_t: Tensor,
                       groups: list[tuple[int, int]], mask: np.ndarray,
                       block: BlockParams, heads: int,
                       trace: AttentionTrace | None = None) -> Tensor:
    """Compressed layer forward with explicit (possibly learnable) matrices."""
    n = merge_t.shape[1]
    if z.shape[-2] != n:
        raise ShapeMismatchError(
            f"token axis {z.shape} does not match plan width {n}")
    z_c = merge_tokens(z, merge_t, groups)
    y = block_forward(z_c, block, heads, trace=trace)
    out = reconstruct_tokens(y, recon_t, groups)
    inv_mask = (1.0 - np.asarray(mask, dtype=np.float64))[:, None]
    z_r = z * Tensor(inv_mask)
    return out + z_r


# ----------------------------------------------------------------------
# global planning
# ----------------------------------------------------------------------

def global_plan(all_scores: list[np.ndarray], rate: float,
                pm_threshold: float, exempt_layers=(),
                class_token: bool = True) -> CompressionPlan:
    """Budgeted cross-layer plan from concatenated importance scores.

    Exactly round(rate * total) tokens are reserved across the non-exempt
    layers (class tokens are always among them) and the round(pm_threshold
    * total) lowest-scoring tokens are pruned, capped by the removal
    budget: a threshold larger than 1 - rate degrades gracefully to
    pruning every removed token rather than failing.
    """
    depth = len(all_scores)
    if depth == 0:
        raise ContractError("no layers to plan")
    if not 0.0 < rate <= 1.0:
        raise ContractError(f"keep rate must lie in (0, 1], got {rate}")
    if not 0.0 <= pm_threshold <= 1.0:
        raise ContractError(
            f"pm_threshold must lie in [0, 1], got {pm_threshold}")
    exempt = frozenset(int(l) for l in exempt_layers)
    for l in exempt:
        if not 0 <= l < depth:
            raise ContractError(f"exempt layer {l} outside [0, {depth})")
    active = [l for l in range(depth) if l not in exempt]
    if not active:
        raise ContractError("every layer is exempt; nothing to compress")

    start = 1 if class_token else 0
    sizes = {l: np.asarray(all_scores[l]).size for l in active}
    total = sum(sizes.values())
    n_class = len(active) * start
    keep = round_half_up(rate * total)
    if keep < max(n_class, 1):
        raise ContractError(
            f"keep budget {keep} cannot cover the {n_class} class tokens")
    prune = min(round_half_up(pm_threshold * total), total - keep)

    flat_scores = np.concatenate(
        [np.asarray(all_scores[l], dtype=np.float64)[start:] for l in active])
    if not np.isfinite(flat_scores).all():
        raise ContractError("scores must be finite")
    flat_layer = np.concatenate(
        [np.full(sizes[l] - start, l, dtype=np.int64) for l in active])
    flat_token = np.concatenate(
        [np.arange(start, sizes[l], dtype=np.int64) for l in active])

    order = rank_descending(flat_scores)
    reserved_pos = order[:keep - n_class]
    pruned_pos = order[len(order) - prune:] if prune else \
        np.empty(0, dtype=np.int64)

    entries: list[PlanEntry | None] = []
    for layer in range(depth):
        if layer in exempt:
            entries.append(None)
            continue
        sel_r = reserved_pos[flat_layer[reserved_pos] == layer]
        sel_p = pruned_pos[flat_layer[pruned_pos] == layer]
        reserved = np.sort(flat_token[sel_r])
        pruned = np.sort(flat_token[sel_p])
        if reserved.size + start == 0:
            raise ContractError(f"layer {layer} keeps no tokens")
        scores_l = np.asarray(all_scores[layer], dtype=np.float64)
        mask, merge = _assemble(scores_l, reserved, pruned, class_token)
        merge.validate(mask=mask, class_token=class_token)
        entries.append(PlanEntry(mask, merge, pseudoinverse(merge),
                                 merge.kept))

    plan = CompressionPlan(depth, entries, exempt, class_token)
    if plan.total_kept() != keep:
        raise ContractError(
            f"internal budget mismatch: kept {plan.total_kept()}, "
            f"expected {keep}")
    return plan


def identity_plan(depth: int, n_tokens: int,
                  class_token: bool = True) -> CompressionPlan:
    """A no-op plan: every layer keeps every token in its own group."""
    entries = []
    for _ in range(depth):
        merge = MergeMatrix(np.eye(n_tokens),
                            [(j, j + 1) for j in range(n_tokens)])
        entries.append(PlanEntry(np.ones(n_tokens, dtype=np.uint8), merge,
                                 pseudoinverse(merge), n_tokens))
    return CompressionPlan(depth, entries, frozenset(), class_token)


# ----------------------------------------------------------------------
# compressed model
# ----------------------------------------------------------------------

class CompressedModel:
    """A vision transformer whose blocks run behind plan entries.

    Owns an independent copy of the base parameters.  Merge and
    reconstruct matrices are first-class parameters; when
    ``learnable_matrices`` they receive gradients (structural zeros
    excluded by the grouped ops) until explicitly frozen.
    """

    def __init__(self, base: VisionTransformer, plan: CompressionPlan,
                 learnable_matrices: bool = False):
        if plan.depth != base.config.depth:
            raise ContractError(
                f"plan depth {plan.depth} != model depth {base.config.depth}")
        for layer, entry in enumerate(plan.entries):
            if entry is not None and entry.merge.n_tokens != base.config.num_tokens:
                raise ContractError(
                    f"layer {layer}: plan width {entry.merge.n_tokens} != "
                    f"model tokens {base.config.num_tokens}")
        self.config = base.config
        self.plan = plan
        self.params = clone_params(base.params, requires_grad=True)
        self.merge_t: dict[int, Tensor] = {}
        self.recon_t: dict[int, Tensor] = {}
        self._groups: dict[int, list[tuple[int, int]]] = {}
        self._masks: dict[int, np.ndarray] = {}
        for layer, entry in enumerate(plan.entries):
            if entry is None:
                continue
            self.merge_t[layer] = Tensor(entry.merge.data.copy(),
                                         requires_grad=learnable_matrices)
            self.recon_t[layer] = Tensor(entry.reconstruct.copy(),
                                         requires_grad=learnable_matrices)
            self._groups[layer] = list(entry.merge.groups)
            self._masks[layer] = entry.mask.copy()

    def forward(self, images: np.ndarray,
                traces: list[AttentionTrace] | None = None) -> Tensor:
        p = self.params
        z = patchify(images, self.config, p.embed)
        for layer, blk in enumerate(p.blocks):
            trace = None
            if traces is not None:
                trace = AttentionTrace(layer)
                traces.append(trace)
            if layer in self.merge_t:
                z = pm_forward_tensors(z, self.merge_t[layer],
                                       self.recon_t[layer],
                                       self._groups[layer],
                                       self._masks[layer], blk,
                                       self.config.heads, trace=trace)
            else:
                z = block_forward(z, blk, self.config.heads, trace=trace)
        z = T.layer_norm(z, p.ln_f_g, p.ln_f_b)
        return T.matmul(z[:, 0, :], p.head_w) + p.head_b

    def named_parameters(self, include_matrices: bool = True):
        yield from self.params.named_parameters()
        if include_matrices:
            yield from self.matrix_parameters()

    def matrix_parameters(self):
        for layer in sorted(self.merge_t):
            yield f"pm.layer{layer}.merge", self.merge_t[layer]
            yield f"pm.layer{layer}.reconstruct", self.recon_t[layer]

    def set_matrices_trainable(self, flag: bool) -> None:
        for layer in self.merge_t:
            self.merge_t[layer].requires_grad = flag
            self.recon_t[layer].requires_grad = flag

    def export_plan(self) -> CompressionPlan:
        """Snapshot the current (possibly trained) matrices as a plan."""
        entries: list[PlanEntry | None] = []
        for layer in range(self.plan.depth):
            if layer not in self.merge_t:
                entries.append(None)
                continue
            merge = MergeMatrix(self.merge_t[layer].data.copy(),
                                list(self._groups[layer]))
            entries.append(PlanEntry(self._masks[layer].copy(), merge,
                                     self.recon_t[layer].data.copy(),
                                     merge.kept))
        return CompressionPlan(self.plan.depth, entries,
                               self.plan.uncompressed, self.plan.class_token)


def compress_model(model: VisionTransformer, plan: CompressionPlan,
                   learnable_matrices: bool = False) -> CompressedModel:
    return CompressedModel(model, plan, learnable_matrices=learnable_matrices)
