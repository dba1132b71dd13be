"""Single-vs-single shot evaluation protocol with CMC and nAUC.

Each trial puts one randomly chosen image per group into the gallery and
ranks every remaining image against it. CMC[r] is the fraction of probes
whose true group's gallery image appears within the first r ranks; nAUC
is the mean of the CMC over all ranks.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import DatasetManifest, ManifestRecord, load_record
from .encode import (
    COLORSPACES,
    DegenerateInputError,
    GroupSignature,
    PcaModel,
    ResidualConfig,
    pca_fit,
    pca_transform,
    pooled_encoding,
)
from .imgproc import extract_features
from .match import RankedList, rank_gallery
from .sparse import Dictionary

log = logging.getLogger(__name__)

RANKS_REPORTED = (1, 5, 10, 25)


@dataclass(frozen=True)
class TrialSplit:
    trial_index: int
    seed: int
    gallery: list[tuple[str, str]]  # (image_id, group_id), one per group
    probes: list[tuple[str, str]]


def _as_items(dataset) -> list[tuple[str, str]]:
    if isinstance(dataset, DatasetManifest):
        return dataset.items()
    return list(dataset)


def make_splits(dataset, trials: int, seed: int) -> list[TrialSplit]:
    """Seeded gallery/probe splits: one gallery image per group per trial.

    Groups with a single image contribute that image to every gallery and
    never appear as probes.
    """
    items = _as_items(dataset)
    if not items:
        raise ValueError("dataset is empty")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    by_group: dict[str, list[str]] = {}
    for image_id, group_id in items:
        by_group.setdefault(group_id, []).append(image_id)
    group_ids = sorted(by_group)

    splits = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(trials)):
        trial_seed = int(child.generate_state(1)[0])
        rng = np.random.default_rng(trial_seed)
        gallery = []
        chosen = set()
        for gid in group_ids:
            images = by_group[gid]
            pick = images[int(rng.integers(len(images)))]
            gallery.append((pick, gid))
            chosen.add(pick)
        probes = [(iid, gid) for iid, gid in items if iid not in chosen]
        splits.append(
            TrialSplit(trial_index=i, seed=trial_seed, gallery=gallery, probes=probes)
        )
    return splits


def cmc_curve(
    ranked_lists: Sequence[RankedList],
    probe_groups: Mapping[str, str],
    gallery_groups: Mapping[str, str],
) -> np.ndarray:
    """CMC vector over ranks 1..G from per-probe ranked gallery lists."""
    if len(ranked_lists) == 0:
        raise ValueError("no probes to score")
    gallery_size = len(ranked_lists[0].entries)
    hits = np.zeros(gallery_size)
    for rl in ranked_lists:
        true_group = probe_groups[rl.probe_id]
        rank = None
        for r, (gid, _) in enumerate(rl.entries, start=1):
            if gallery_groups[gid] == true_group:
                rank = r
                break
        if rank is None:
            raise ValueError(f"probe {rl.probe_id!r}: true group not in gallery")
        hits[rank - 1] += 1
    return hits.cumsum() / len(ranked_lists)


def nauc(cmc: np.ndarray) -> float:
    """Normalized area under the CMC curve: its mean over all ranks."""
    return float(np.asarray(cmc).mean())


@dataclass
class EvalReport:
    trial_cmcs: list[np.ndarray]
    mean_cmc: np.ndarray
    rank_accuracies: dict[int, float]
    nauc: float
    gallery_size: int
    probes_per_trial: list[int]
    excluded_images: list[str]
    config: dict
    rankings: list[list[RankedList]] | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "gallery_size": self.gallery_size,
            "probes_per_trial": self.probes_per_trial,
            "excluded_images": self.excluded_images,
            "rank_accuracies": {str(r): v for r, v in self.rank_accuracies.items()},
            "nauc": self.nauc,
            "mean_cmc": [float(v) for v in self.mean_cmc],
            "trial_cmcs": [[float(v) for v in c] for c in self.trial_cmcs],
        }

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")
        return path

    def write_cmc_csv(self, path: str | Path) -> Path:
        path = Path(path)
        stacked = np.stack(self.trial_cmcs)
        std = stacked.std(axis=0)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "mean_accuracy", "stddev"])
            for r in range(self.gallery_size):
                writer.writerow([r + 1, repr(float(self.mean_cmc[r])), repr(float(std[r]))])
        return path

    def summary_line(self) -> str:
        parts = [f"rank-{r}={100.0 * v:.1f}" for r, v in self.rank_accuracies.items()]
        parts.append(f"nAUC={100.0 * self.nauc:.1f}")
        return "  ".join(parts)


def _encode_record(record, dictionaries, cfg, spatial, include_overlap):
    img, mask = load_record(record)
    feats = extract_features(img, mask, spatial=spatial, include_overlap=include_overlap)
    try:
        return {
            cs: pooled_encoding(feats[cs], dictionaries[cs], cfg) for cs in COLORSPACES
        }
    except DegenerateInputError:
        return None


_WORKER_CTX: dict = {}


def _init_worker(dictionaries, cfg, spatial, include_overlap):
    _WORKER_CTX["args"] = (dictionaries, cfg, spatial, include_overlap)


def _encode_record_worker(record):
    return _encode_record(record, *_WORKER_CTX["args"])


def pooled_encodings_for_records(
    records: Sequence[ManifestRecord],
    dictionaries: dict[str, Dictionary],
    cfg: ResidualConfig,
    *,
    spatial: bool = False,
    include_overlap: bool = True,
    jobs: int = 1,
) -> list[dict[str, np.ndarray] | None]:
    """Pooled residual encodings per record; None marks degenerate images.

    Results are ordered like ``records`` regardless of worker count, so
    parallel runs are bit-identical to serial ones.
    """
    if jobs <= 1 or len(records) < 2:
        return [
            _encode_record(r, dictionaries, cfg, spatial, include_overlap)
            for r in records
        ]
    with ProcessPoolExecutor(
        max_workers=jobs,
        initializer=_init_worker,
        initargs=(dictionaries, cfg, spatial, include_overlap),
    ) as pool:
        return list(pool.map(_encode_record_worker, records, chunksize=4))


def _signatures_from_pooled(
    pooled: dict[str, np.ndarray], pca_models: dict[str, PcaModel], image_ids: list[str]
) -> dict[str, GroupSignature]:
    projected = {cs: pca_transform(pca_models[cs], pooled[cs]) for cs in COLORSPACES}
    return {
        iid: GroupSignature(vectors={cs: projected[cs][i] for cs in COLORSPACES})
        for i, iid in enumerate(image_ids)
    }


def _score_splits(
    splits: Sequence[TrialSplit],
    groups: Mapping[str, str],
    signatures_for_split,
    colorspaces: Sequence[str],
    keep_rankings: bool,
) -> tuple[list[np.ndarray], list[list[RankedList]]]:
    trial_cmcs: list[np.ndarray] = []
    all_rankings: list[list[RankedList]] = []
    for split in splits:
        signatures = signatures_for_split(split)
        gallery = [(iid, signatures[iid]) for iid, _ in split.gallery]
        ranked = [
            rank_gallery(iid, signatures[iid], gallery, colorspaces)
            for iid, _ in split.probes
        ]
        gallery_groups = {iid: gid for iid, gid in split.gallery}
        trial_cmcs.append(cmc_curve(ranked, groups, gallery_groups))
        if keep_rankings:
            all_rankings.append(ranked)
    return trial_cmcs, all_rankings


def _assemble_report(
    splits: Sequence[TrialSplit],
    trial_cmcs: list[np.ndarray],
    excluded: list[str],
    config_echo: dict | None,
    rankings: list[list[RankedList]] | None,
) -> EvalReport:
    probe_counts = [len(s.probes) for s in splits]
    weights = np.asarray(probe_counts, dtype=np.float64)
    mean_cmc = (np.stack(trial_cmcs) * weights[:, None]).sum(axis=0) / weights.sum()
    gallery_size = len(splits[0].gallery)
    accuracies = {
        r: float(mean_cmc[min(r, gallery_size) - 1]) for r in RANKS_REPORTED
    }
    return EvalReport(
        trial_cmcs=trial_cmcs,
        mean_cmc=mean_cmc,
        rank_accuracies=accuracies,
        nauc=nauc(mean_cmc),
        gallery_size=gallery_size,
        probes_per_trial=probe_counts,
        excluded_images=excluded,
        config=config_echo or {},
        rankings=rankings,
    )


def protocol_from_signatures(
    signatures: Mapping[str, GroupSignature],
    items: Sequence[tuple[str, str]],
    *,
    trials: int = 10,
    seed: int = 0,
    colorspaces: Sequence[str] = COLORSPACES,
    config_echo: dict | None = None,
    keep_rankings: bool = False,
    excluded: Sequence[str] = (),
) -> EvalReport:
    """Run the trial protocol over precomputed per-image signatures."""
    missing = [iid for iid, _ in items if iid not in signatures]
    if missing:
        raise ValueError(f"no signature for image(s): {missing[:5]}")
    splits = make_splits(items, trials, seed)
    groups = dict(items)
    trial_cmcs, rankings = _score_splits(
        splits, groups, lambda split: signatures, colorspaces, keep_rankings
    )
    return _assemble_report(
        splits, trial_cmcs, list(excluded), config_echo, rankings if keep_rankings else None
    )


def run_protocol(
    manifest: DatasetManifest,
    dictionaries: dict[str, Dictionary],
    pca_models: dict[str, PcaModel] | None = None,
    cfg: ResidualConfig | None = None,
    *,
    trials: int = 10,
    seed: int = 0,
    pca_fit_mode: str = "source",
    pca_dim: int | None = None,
    spatial: bool = False,
    include_overlap: bool = True,
    jobs: int = 1,
    colorspaces: Sequence[str] = COLORSPACES,
    config_echo: dict | None = None,
    keep_rankings: bool = False,
) -> EvalReport:
    """Encode a target corpus once, then score seeded gallery/probe trials.

    With ``pca_fit_mode='source'`` the supplied PCA models are applied to
    every image up front; with ``'gallery'`` a PCA of dimension
    ``pca_dim`` is refit on each trial's gallery encodings.
    """
    cfg = cfg or ResidualConfig()
    if pca_fit_mode not in ("source", "gallery"):
        raise ValueError(f"unknown pca_fit_mode {pca_fit_mode!r}")
    if pca_fit_mode == "source" and pca_models is None:
        raise ValueError("pca_fit_mode='source' needs fitted PCA models")
    if pca_fit_mode == "gallery" and pca_dim is None:
        raise ValueError("pca_fit_mode='gallery' needs pca_dim")

    results = pooled_encodings_for_records(
        manifest.records,
        dictionaries,
        cfg,
        spatial=spatial,
        include_overlap=include_overlap,
        jobs=jobs,
    )
    excluded = [r.image_id for r, res in zip(manifest.records, results) if res is None]
    for iid in excluded:
        log.warning("excluding degenerate (fully masked) image %s", iid)
    kept = [(r, res) for r, res in zip(manifest.records, results) if res is not None]
    if not kept:
        raise DegenerateInputError("every image in the dataset is degenerate")
    image_ids = [r.image_id for r, _ in kept]
    items = [(r.image_id, r.entity_id) for r, _ in kept]
    pooled = {
        cs: np.stack([res[cs] for _, res in kept]) for cs in COLORSPACES
    }

    if pca_fit_mode == "source":
        signatures = _signatures_from_pooled(pooled, pca_models, image_ids)
        return protocol_from_signatures(
            signatures,
            items,
            trials=trials,
            seed=seed,
            colorspaces=colorspaces,
            config_echo=config_echo,
            keep_rankings=keep_rankings,
            excluded=excluded,
        )

    splits = make_splits(items, trials, seed)
    groups = dict(items)
    row_of = {iid: i for i, iid in enumerate(image_ids)}

    def per_trial_signatures(split: TrialSplit) -> dict[str, GroupSignature]:
        gallery_rows = [row_of[iid] for iid, _ in split.gallery]
        models = {
            cs: pca_fit(pooled[cs][gallery_rows], pca_dim, colorspace=cs)
            for cs in COLORSPACES
        }
        return _signatures_from_pooled(pooled, models, image_ids)

    trial_cmcs, rankings = _score_splits(
        splits, groups, per_trial_signatures, colorspaces, keep_rankings
    )
    return _assemble_report(
        splits, trial_cmcs, excluded, config_echo, rankings if keep_rankings else None
    )
