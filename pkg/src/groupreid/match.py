"""Signature dissimilarity and gallery ranking."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encode import GroupSignature


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b), in [0, 2]; defined as 1 when either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0
    return float(1.0 - (a @ b) / (na * nb))


def fuse_distance(
    sig_a: GroupSignature,
    sig_b: GroupSignature,
    colorspaces: Sequence[str] | None = None,
) -> float:
    """Product of per-colorspace cosine distances.

    ``colorspaces`` restricts the fusion to a subset (a single entry gives
    that channel's distance alone).
    """
    if colorspaces is None:
        colorspaces = sig_a.colorspaces
    if set(sig_a.colorspaces) != set(sig_b.colorspaces):
        raise ValueError(
            f"colorspace sets differ: {sig_a.colorspaces} vs {sig_b.colorspaces}"
        )
    missing = set(colorspaces) - set(sig_a.colorspaces)
    if missing:
        raise ValueError(f"signature lacks colorspaces {sorted(missing)}")
    score = 1.0
    for cs in colorspaces:
        score *= cosine_distance(sig_a.vectors[cs], sig_b.vectors[cs])
    return score


@dataclass
class RankedList:
    """Gallery ids sorted by ascending dissimilarity to one probe."""

    probe_id: str
    entries: list[tuple[str, float]]

    def rank_of(self, gallery_id: str) -> int:
        for rank, (gid, _) in enumerate(self.entries, start=1):
            if gid == gallery_id:
                return rank
        raise KeyError(f"{gallery_id!r} not in ranked list for {self.probe_id!r}")


def rank_gallery(
    probe_id: str,
    probe: GroupSignature,
    gallery: Sequence[tuple[str, GroupSignature]],
    colorspaces: Sequence[str] | None = None,
) -> RankedList:
    """Sort the gallery by fused distance to the probe; ties break by id."""
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    scored = [
        (gid, fuse_distance(probe, sig, colorspaces)) for gid, sig in gallery
    ]
    scored.sort(key=lambda e: (e[1], e[0]))
    return RankedList(probe_id=probe_id, entries=scored)


def write_ranking_csv(ranked_lists: Iterable[RankedList], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["probe_id", "rank", "gallery_id", "score"])
        for rl in ranked_lists:
            for rank, (gid, score) in enumerate(rl.entries, start=1):
                writer.writerow([rl.probe_id, rank, gid, repr(score)])
    return path
