"""Attention rollout and correct-candidate focus accuracy.

Rollout follows the standard recipe: per layer, average attention over
heads, mix in the residual path as 0.5*A + 0.5*I, row-normalize, and multiply
layer matrices from input to output. R[i][j] then estimates how much input
token j contributed to the final embedding at position i; a group's
candidate score sums the entries of its token range in one chosen source
row.

The source row is configurable because a shallow model constrains where
selectivity can appear: with n layers, attention learned at layer n towards
candidate columns is visible only in rows whose rollout path reaches those
columns within the remaining layers. "final_original" (default) reads the
last original position's row, "anchor" reads the group anchor's row, and
"mean_original" averages the rows of all original positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentedSequence, ExpansionGroup, build_attention_mask
from .errors import NumericalError

SCORE_SOURCES = ("final_original", "anchor", "mean_original")
ROW_SUM_TOL = 1e-6


def rollout(trace) -> np.ndarray:
    """Cumulative attention R = A'_L ... A'_1 with A' = rownorm(0.5 A + 0.5 I),
    A head-averaged. Row-stochastic by construction; verified on exit."""
    if not trace.attn:
        raise ValueError("trace has no attention layers")
    L = trace.attn[0].shape[-1]
    eye = np.eye(L, dtype=np.float64)
    R = eye
    for layer_attn in trace.attn:
        if layer_attn.dim() != 3:
            raise ValueError("rollout expects single-sequence traces of shape (heads, L, L)")
        A = layer_attn.detach().to(torch.float64).mean(dim=0).numpy()
        mixed = 0.5 * A + 0.5 * eye
        mixed = mixed / mixed.sum(axis=1, keepdims=True)
        R = mixed @ R
    if not np.allclose(R.sum(axis=1), 1.0, atol=ROW_SUM_TOL):
        raise NumericalError("rollout rows do not sum to 1")
    if (R < -1e-12).any():
        raise NumericalError("rollout produced negative entries")
    return R


def candidate_scores(
    R: np.ndarray,
    aug: AugmentedSequence,
    group: ExpansionGroup,
    score_source: str = "final_original",
) -> list[float]:
    """Per-candidate contribution mass from the chosen source row."""
    if score_source not in SCORE_SOURCES:
        raise ValueError(f"score_source must be one of {SCORE_SOURCES}")
    if score_source == "final_original":
        row = R[aug.original_positions[-1]]
    elif score_source == "anchor":
        row = R[group.anchor_index]
    else:
        row = R[list(aug.original_positions)].mean(axis=0)
    return [float(row[s:e].sum()) for s, e in group.candidate_ranges]


def pick_candidate(scores) -> tuple[int, bool]:
    """Index of the strictly best candidate; ties resolve to the lower index
    and are flagged (scored as incorrect by the accuracy metric)."""
    best = max(scores)
    winners = [i for i, s in enumerate(scores) if s == best]
    return winners[0], len(winners) > 1


@dataclass
class Rq1Item:
    aug: AugmentedSequence           # gold-labeled groups get scored
    candidate_context: str = "prefix"


@dataclass
class Rq1Table:
    # (k bucket, checkpoint label) -> [correct, total]
    cells: dict[tuple[int, str], list[int]] = field(default_factory=dict)
    labels: list[str] = field(default_factory=list)

    def add(self, k: int, label: str, correct: bool) -> None:
        cell = self.cells.setdefault((k, label), [0, 0])
        cell[0] += int(correct)
        cell[1] += 1

    def accuracy(self, k: int, label: str) -> float | None:
        cell = self.cells.get((k, label))
        if not cell or cell[1] == 0:
            return None
        return cell[0] / cell[1]

    def k_buckets(self) -> list[int]:
        return sorted({k for k, _ in self.cells})

    def to_tsv(self) -> str:
        lines = ["k\t" + "\t".join(self.labels)]
        for k in self.k_buckets():
            row = [str(k)]
            for label in self.labels:
                acc = self.accuracy(k, label)
                row.append("" if acc is None else f"{acc:.6f}")
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"


def rq1_accuracy(items, models, score_source: str = "final_original") -> Rq1Table:
    """Fraction of gold-labeled groups whose gold candidate attains strictly
    the maximum rollout score, bucketed by candidate count, for each
    checkpoint in `models` (an ordered mapping label -> model)."""
    table = Rq1Table(labels=list(models.keys()))
    for label, model in models.items():
        for item in items:
            aug = item.aug
            mask = build_attention_mask(aug, candidate_context=item.candidate_context)
            with torch.no_grad():
                _, trace = model.forward(aug.ids, mask)
            R = rollout(trace)
            for group in aug.groups:
                if group.gold_candidate is None:
                    continue
                scores = candidate_scores(R, aug, group, score_source=score_source)
                best, tie = pick_candidate(scores)
                correct = (not tie) and best == group.gold_candidate
                table.add(group.k, label, correct)
    return table


def write_rq1_tsv(table: Rq1Table, path) -> None:
    Path(path).write_text(table.to_tsv(), encoding="utf-8")


GOLD_RGB = (0, 200, 0)
CANDIDATE_RGB = (60, 60, 255)


def emit_heatmap(R: np.ndarray, aug: AugmentedSequence, path, cell_size: int = 16) -> None:
    """Binary PPM (P6) rendering of R: grayscale cells proportional to the
    entries, candidate columns outlined, gold-candidate columns in green."""
    if cell_size < 4:
        raise ValueError("cell_size must be >= 4")
    L = R.shape[0]
    if R.shape != (L, L):
        raise ValueError("R must be square")
    vmax = float(R.max())
    scale = 255.0 / vmax if vmax > 0 else 0.0
    img = np.zeros((L * cell_size, L * cell_size, 3), dtype=np.uint8)
    for i in range(L):
        for j in range(L):
            v = int(round(float(R[i, j]) * scale))
            img[i * cell_size : (i + 1) * cell_size, j * cell_size : (j + 1) * cell_size] = v
    for group in aug.groups:
        for ci, (s, e) in enumerate(group.candidate_ranges):
            color = GOLD_RGB if group.gold_candidate == ci else CANDIDATE_RGB
            for col in range(s, e):
                x0, x1 = col * cell_size, (col + 1) * cell_size
                for row in range(L):
                    y0, y1 = row * cell_size, (row + 1) * cell_size
                    img[y0, x0:x1] = color
                    img[y1 - 1, x0:x1] = color
                    img[y0:y1, x0] = color
                    img[y0:y1, x1 - 1] = color
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Minimal P6 reader (used by tests and the report command)."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a P6 PPM file")
    w, h = (int(x) for x in parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise ValueError("only maxval 255 supported")
    pixels = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pixels.copy()
