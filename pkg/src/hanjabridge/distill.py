"""Frozen-teacher contrastive distillation over an instance queue.

The queue D holds teacher token vectors only. For each aligned position i
the reference set is D+ = {z_T_i} U D; the teacher distribution uses
temperature tau_T, the student distribution tau_S, and the loss is the mean
cross-entropy  -(1/N) sum_i sum_j p_T(i,j) log p_S(i,j).  Teacher vectors and
queue entries are constants under differentiation: gradient reaches only the
student states (and the optional projection). Vectors are L2-normalized
before the dot product by default; the raw-dot form is available with
normalize=False.

Alignment is by character offsets: a student token is paired with the
teacher token whose span ends at the same character (the last sub-word of a
fragmented word), provided the covering teacher tokens tile the student span
exactly; otherwise the position is skipped.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import torch

from .errors import AlignmentError, ConfigError, NumericalError
from .tokenizer import Encoding


@dataclass(frozen=True)
class DistillConfig:
    tau_teacher: float = 0.01
    tau_student: float = 0.2
    queue_capacity: int = 4096
    normalize: bool = True
    teacher_layer: int | str = "final"   # index into per-block hiddens, or post-LN "final"

    def __post_init__(self):
        if self.tau_teacher <= 0 or self.tau_student <= 0:
            raise ConfigError("temperatures must be positive")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")


class InstanceQueue:
    """Fixed-capacity FIFO of teacher hidden vectors with provenance."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("queue capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[tuple[torch.Tensor, tuple[int, int]]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, vector: torch.Tensor, seq_id: int, position: int, source: str = "teacher") -> None:
        if source != "teacher":
            raise ConfigError("the instance queue stores teacher vectors only")
        self._entries.append((vector.detach().clone(), (seq_id, position)))

    def snapshot(self) -> tuple[torch.Tensor | None, list[tuple[int, int]]]:
        """Current contents oldest-first; None matrix when empty."""
        if not self._entries:
            return None, []
        vectors = torch.stack([v for v, _ in self._entries])
        return vectors, [p for _, p in self._entries]

    def provenance(self) -> list[tuple[int, int]]:
        return [p for _, p in self._entries]


@dataclass(frozen=True)
class AlignmentMap:
    pairs: tuple[tuple[int, int], ...]   # (student token idx, teacher token idx)
    skipped: tuple[int, ...]             # student token idxs with no clean alignment


def align(student_enc: Encoding, teacher_enc: Encoding) -> AlignmentMap:
    """Offset-based pairing of two tokenizations of the same text."""
    if student_enc.text != teacher_enc.text:
        raise AlignmentError("student and teacher encodings are of different texts")
    end_to_teacher = {span[1]: t for t, span in enumerate(teacher_enc.spans)}
    pairs: list[tuple[int, int]] = []
    skipped: list[int] = []
    for s_idx, (start, end) in enumerate(student_enc.spans):
        rep = end_to_teacher.get(end)
        if rep is None:
            skipped.append(s_idx)
            continue
        covering = [t for t, (ts, te) in enumerate(teacher_enc.spans) if ts < end and te > start]
        spans = [teacher_enc.spans[t] for t in covering]
        tiles = (
            bool(spans)
            and spans[0][0] == start
            and spans[-1][1] == end
            and all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
        )
        if tiles:
            pairs.append((s_idx, rep))
        else:
            skipped.append(s_idx)
    return AlignmentMap(pairs=tuple(pairs), skipped=tuple(skipped))


def _unit(vectors: torch.Tensor, what: str) -> torch.Tensor:
    norms = vectors.norm(dim=-1, keepdim=True)
    if torch.any(norms == 0):
        raise NumericalError(f"zero-norm {what} vector cannot be normalized")
    return vectors / norms


def sim_distribution(z: torch.Tensor, queue_plus: torch.Tensor, tau: float, normalize: bool = True) -> torch.Tensor:
    """Softmax over similarities of z against every member of D+."""
    if queue_plus.numel() == 0:
        raise ConfigError("queue_plus must be non-empty")
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    if normalize:
        z = _unit(z, "query")
        queue_plus = _unit(queue_plus, "reference")
    logits = (queue_plus @ z) / tau
    return logits.softmax(dim=-1)


def _as_list(x):
    return x if isinstance(x, (list, tuple)) else [x]


def kd_loss(
    student_states,
    teacher_states,
    alignment,
    queue: InstanceQueue,
    config: DistillConfig,
    projection=None,
    provenance=None,
) -> torch.Tensor:
    """Token-level distillation loss over one sequence or a batch (pass lists
    to average over the batch's aligned-position count). student_states rows
    are indexed by the student token indices in the alignment; projection
    maps student states into teacher space when widths differ. provenance,
    when given, is one (seq_id, teacher_position) per sequence's pairs and
    keeps a queue entry from being counted twice against its own refresh."""
    students = _as_list(student_states)
    teachers = _as_list(teacher_states)
    alignments = _as_list(alignment)
    provs = _as_list(provenance) if provenance is not None else [None] * len(students)
    if not (len(students) == len(teachers) == len(alignments) == len(provs)):
        raise ConfigError("mismatched batch lists in kd_loss")

    z_s_rows, z_t_rows, prov_rows = [], [], []
    for st, te, al, pv in zip(students, teachers, alignments, provs):
        for n, (si, ti) in enumerate(al.pairs):
            z_s_rows.append(st[si])
            z_t_rows.append(te[ti].detach())
            prov_rows.append(pv[n] if pv is not None else None)
    if not z_s_rows:
        warnings.warn("no aligned positions; KD loss is 0", stacklevel=2)
        dtype = students[0].dtype if students else torch.float32
        return torch.zeros((), dtype=dtype)

    z_s = torch.stack(z_s_rows)
    z_t = torch.stack(z_t_rows)
    if projection is not None:
        z_s = projection(z_s)
    if z_s.shape[-1] != z_t.shape[-1]:
        raise ConfigError(
            f"student dim {z_s.shape[-1]} != teacher dim {z_t.shape[-1]} and no projection given"
        )

    if config.normalize:
        z_s = _unit(z_s, "student")
        z_t = _unit(z_t, "teacher")

    queue_mat, queue_prov = queue.snapshot()
    self_t = (z_t * z_t).sum(dim=1, keepdim=True)
    self_s = (z_s * z_t).sum(dim=1, keepdim=True)
    if queue_mat is not None:
        ref = _unit(queue_mat, "queue") if config.normalize else queue_mat
        ref = ref.to(z_t.dtype)
        sims_t = torch.cat([self_t, z_t @ ref.t()], dim=1)
        sims_s = torch.cat([self_s, z_s @ ref.t()], dim=1)
        dup = torch.zeros(sims_t.shape, dtype=torch.bool)
        for i, pv in enumerate(prov_rows):
            if pv is None:
                continue
            for j, qp in enumerate(queue_prov):
                if qp == pv:
                    dup[i, j + 1] = True
        if dup.any():
            sims_t = sims_t.masked_fill(dup, float("-inf"))
            sims_s = sims_s.masked_fill(dup, float("-inf"))
    else:
        sims_t, sims_s = self_t, self_s

    p_t = (sims_t.detach() / config.tau_teacher).softmax(dim=-1)
    log_p_s = (sims_s / config.tau_student).log_softmax(dim=-1)
    # rows with -inf entries contribute 0 there: p_t is exactly 0 at them
    losses = -(p_t * log_p_s.masked_fill(p_t == 0, 0.0)).sum(dim=1)
    return losses.mean()


def enqueue_batch(queue: InstanceQueue, teacher_states, alignments, seq_ids=None) -> None:
    """Append the teacher vectors of every aligned position, oldest evicted
    down to capacity. Called after the loss, per mini-batch."""
    teachers = _as_list(teacher_states)
    aligns = _as_list(alignments)
    if seq_ids is None:
        seq_ids = list(range(len(teachers)))
    for sid, te, al in zip(seq_ids, teachers, aligns):
        for _, ti in al.pairs:
            queue.push(te[ti], seq_id=sid, position=ti)


def teacher_forward(teacher, ids, mask, layer: int | str = "final") -> torch.Tensor:
    """Hidden states of the frozen teacher; no gradients retained."""
    with torch.no_grad():
        _, trace = teacher.forward(ids, mask)
    hidden = trace.final_hidden if layer == "final" else trace.hidden[layer]
    return hidden.detach()
