"""Command-line front end for the full pipeline.

Three composable subcommands share on-disk artifacts so expensive stages
are cached:

  train-dict   source manifests -> one dictionary bundle per color space
  encode       bundles + manifests -> PCA models + signature table
  evaluate     signature table or bundles -> report JSON + CMC CSV

Every flag can also be supplied through an environment variable with the
``GROUPREID_`` prefix (``--pca-dim`` -> ``GROUPREID_PCA_DIM``); explicit
flags win. Repeatable path flags use ``os.pathsep`` as separator in the
environment form.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import merge_manifests, parse_manifest
from .encode import (
    METRICS,
    POOLINGS,
    ResidualConfig,
    SignatureTable,
    load_pca_model,
    load_signature_table,
    pca_fit,
    pca_transform,
    save_pca_model,
    save_signature_table,
)
from .evaluation import (
    pooled_encodings_for_records,
    protocol_from_signatures,
    run_protocol,
)
from .imgproc import COLORSPACES, extract_features
from .match import write_ranking_csv
from .sparse import learn_dictionary, load_dictionary, save_dictionary
from .data import load_record

ENV_PREFIX = "GROUPREID_"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def _env(name: str) -> str | None:
    return os.environ.get(ENV_PREFIX + name)


def _resolve(args: argparse.Namespace, attr: str, env_name: str, default, cast=None):
    """Flag > environment variable > built-in default."""
    value = getattr(args, attr, None)
    if value is None:
        raw = _env(env_name)
        if raw is None:
            value = default
        elif cast is bool:
            value = raw.strip().lower() in ("1", "true", "yes", "on")
        elif cast is not None:
            value = cast(raw)
        else:
            value = raw
    setattr(args, attr, value)
    return value


def _resolve_paths(args: argparse.Namespace, attr: str, env_name: str) -> list[str]:
    value = getattr(args, attr, None)
    if value is None:
        raw = _env(env_name)
        value = raw.split(os.pathsep) if raw else []
    setattr(args, attr, value)
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groupreid",
        description="Group re-identification via sparse residual encoding.",
        epilog=f"Environment overrides: prefix flags with {ENV_PREFIX} "
        f"(e.g. {ENV_PREFIX}ATOMS=500). Flags take precedence.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="master RNG seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--jobs", type=int, default=None, help="worker processes")
        p.add_argument("--spatial", action="store_true", default=None,
                       help="append normalized patch centers to features")

    p_train = sub.add_parser("train-dict", help="learn per-colorspace dictionaries")
    p_train.add_argument("--source", action="append", default=None,
                         help="source manifest CSV (repeatable)")
    p_train.add_argument("--atoms", type=int, default=None, help="dictionary size k")
    p_train.add_argument("--lambda", dest="lam", type=float, default=None,
                         help="sparsity weight")
    p_train.add_argument("--iterations", type=int, default=None,
                         help="online learning draws")
    common(p_train)

    p_enc = sub.add_parser("encode", help="fit PCA and write the signature table")
    p_enc.add_argument("--source", action="append", default=None,
                       help="source manifest CSV for PCA fitting (repeatable)")
    p_enc.add_argument("--target", default=None, help="target manifest CSV")
    p_enc.add_argument("--dicts", default=None, help="directory with dictionary bundles")
    p_enc.add_argument("--metric", choices=METRICS, default=None)
    p_enc.add_argument("--pooling", choices=POOLINGS, default=None)
    p_enc.add_argument("--pca-dim", dest="pca_dim", type=int, default=None)
    p_enc.add_argument("--pca-fit", dest="pca_fit", choices=("source", "gallery"),
                       default=None)
    common(p_enc)

    p_eval = sub.add_parser("evaluate", help="run the trial protocol and report CMC/nAUC")
    p_eval.add_argument("--target", default=None, help="target manifest CSV")
    p_eval.add_argument("--signatures", default=None,
                        help="precomputed signature table (from `encode`)")
    p_eval.add_argument("--dicts", default=None,
                        help="dictionary bundle directory (recompute signatures)")
    p_eval.add_argument("--source", action="append", default=None,
                        help="source manifest CSV for PCA fitting (repeatable)")
    p_eval.add_argument("--metric", choices=METRICS, default=None)
    p_eval.add_argument("--pooling", choices=POOLINGS, default=None)
    p_eval.add_argument("--pca-dim", dest="pca_dim", type=int, default=None)
    p_eval.add_argument("--pca-fit", dest="pca_fit", choices=("source", "gallery"),
                        default=None)
    p_eval.add_argument("--trials", type=int, default=None)
    p_eval.add_argument("--colorspaces", default=None,
                        help="comma-separated subset of hs,rgb,lab to fuse")
    p_eval.add_argument("--dump-rankings", action="store_true", default=None,
                        help="write per-trial ranking CSVs")
    p_eval.add_argument("--sweep-metrics", action="store_true", default=None,
                        help="one report per metric x pooling combination")
    p_eval.add_argument("--sweep-pca-dims", default=None,
                        help="comma-separated PCA dimensions, one report each")
    common(p_eval)
    return parser


def _write_config(out: Path, args: argparse.Namespace) -> None:
    echo = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    echo["command"] = args.command
    echo["version"] = __version__
    (out / "config.json").write_text(json.dumps(echo, sort_keys=True, indent=2) + "\n")


def _load_sources(paths: list[str]):
    if not paths:
        raise ValueError("at least one --source manifest is required")
    return merge_manifests([parse_manifest(p, role="source") for p in paths])


def _load_bundles(dicts_dir: str):
    base = Path(dicts_dir)
    return {cs: load_dictionary(base / f"dict_{cs}") for cs in COLORSPACES}


def _source_patch_matrices(records, spatial: bool) -> dict[str, np.ndarray]:
    blocks: dict[str, list[np.ndarray]] = {cs: [] for cs in COLORSPACES}
    for record in records:
        img, mask = load_record(record)
        feats = extract_features(img, mask, spatial=spatial)
        for cs in COLORSPACES:
            blocks[cs].append(feats[cs])
    return {cs: np.vstack(blocks[cs]) for cs in COLORSPACES}


def cmd_train_dict(args: argparse.Namespace) -> int:
    stage = "parse-config"
    try:
        sources = _resolve_paths(args, "source", "SOURCE")
        k = _resolve(args, "atoms", "ATOMS", 500, int)
        lam = _resolve(args, "lam", "LAMBDA", 0.1, float)
        iterations = _resolve(args, "iterations", "ITERATIONS", 100_000, int)
        seed = _resolve(args, "seed", "SEED", 0, int)
        spatial = bool(_resolve(args, "spatial", "SPATIAL", False, bool))
        out = Path(_resolve(args, "out", "OUT", "out", str))
        _resolve(args, "jobs", "JOBS", os.cpu_count() or 1, int)
        if k < 1:
            raise ValueError(f"--atoms must be >= 1, got {k}")
        if lam <= 0:
            raise ValueError(f"--lambda must be > 0, got {lam}")
        if iterations < 0:
            raise ValueError(f"--iterations must be >= 0, got {iterations}")
        out.mkdir(parents=True, exist_ok=True)
        _write_config(out, args)

        stage = "load-source-manifests"
        manifest = _load_sources(sources)

        stage = "extract-features"
        matrices = _source_patch_matrices(manifest.records, spatial)

        stage = "learn-dictionary"
        children = np.random.SeedSequence(seed).spawn(len(COLORSPACES))
        logs = {}
        for cs, child in zip(COLORSPACES, children):
            cs_seed = int(child.generate_state(1)[0])
            D, log = learn_dictionary(
                matrices[cs],
                k=k,
                lam=lam,
                iterations=iterations,
                seed=cs_seed,
                colorspace=cs,
            )
            logs[cs] = log
            save_dictionary(D, out / f"dict_{cs}")
            print(
                f"{cs}: d={D.d} k={D.k} iterations={D.iterations} "
                f"objective {log[0][1]:.6f} -> {log[-1][1]:.6f}"
            )

        stage = "write-artifacts"
        (out / "training_log.json").write_text(
            json.dumps(logs, sort_keys=True, indent=2) + "\n"
        )
        return 0
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        raise StageError(stage, exc) from exc


def _fit_source_pca(args, dictionaries, cfg, u: int, jobs: int):
    source_manifest = _load_sources(args.source)
    results = pooled_encodings_for_records(
        source_manifest.records,
        dictionaries,
        cfg,
        spatial=bool(args.spatial),
        jobs=jobs,
    )
    kept = [r for r in results if r is not None]
    if not kept:
        raise ValueError("all source images are degenerate; cannot fit PCA")
    models = {}
    for cs in COLORSPACES:
        rows = np.stack([r[cs] for r in kept])
        models[cs] = pca_fit(rows, u, colorspace=cs)
    return models


def _encode_target(args, dictionaries, models, cfg, u: int, jobs: int):
    target_manifest = parse_manifest(args.target, role="target")
    results = pooled_encodings_for_records(
        target_manifest.records,
        dictionaries,
        cfg,
        spatial=bool(args.spatial),
        jobs=jobs,
    )
    ids, rows = [], []
    excluded = []
    for record, res in zip(target_manifest.records, results):
        if res is None:
            excluded.append(record.image_id)
            continue
        ids.append(record.image_id)
        rows.append(
            np.concatenate([pca_transform(models[cs], res[cs]) for cs in COLORSPACES])
        )
    if not ids:
        raise ValueError("all target images are degenerate")
    table = SignatureTable(
        image_ids=ids, colorspaces=COLORSPACES, u=u, values=np.stack(rows)
    )
    return target_manifest, table, excluded


def cmd_encode(args: argparse.Namespace) -> int:
    stage = "parse-config"
    try:
        _resolve_paths(args, "source", "SOURCE")
        _resolve(args, "target", "TARGET", None)
        _resolve(args, "dicts", "DICTS", None)
        _resolve(args, "metric", "METRIC", "cosine")
        _resolve(args, "pooling", "POOLING", "avg")
        u = _resolve(args, "pca_dim", "PCA_DIM", 50, int)
        pca_fit_mode = _resolve(args, "pca_fit", "PCA_FIT", "source")
        _resolve(args, "seed", "SEED", 0, int)
        spatial = bool(_resolve(args, "spatial", "SPATIAL", False, bool))
        out = Path(_resolve(args, "out", "OUT", "out", str))
        jobs = _resolve(args, "jobs", "JOBS", os.cpu_count() or 1, int)
        if args.target is None:
            raise ValueError("--target manifest is required")
        if args.dicts is None:
            raise ValueError("--dicts directory is required")
        if u < 1:
            raise ValueError(f"--pca-dim must be >= 1, got {u}")
        if pca_fit_mode == "gallery":
            raise ValueError(
                "per-trial gallery PCA cannot be precomputed; "
                "run `evaluate --pca-fit gallery` from the dictionary bundles"
            )
        out.mkdir(parents=True, exist_ok=True)
        _write_config(out, args)

        stage = "load-dictionaries"
        dictionaries = _load_bundles(args.dicts)
        k = dictionaries["hs"].k
        if u >= k:
            raise ValueError(f"--pca-dim must be < atom count {k}, got {u}")
        cfg = ResidualConfig(metric=args.metric, pooling=args.pooling)

        stage = "fit-pca"
        models = _fit_source_pca(args, dictionaries, cfg, u, jobs)
        for cs in COLORSPACES:
            save_pca_model(models[cs], out / f"pca_{cs}.model")

        stage = "encode-target"
        _, table, excluded = _encode_target(args, dictionaries, models, cfg, u, jobs)
        save_signature_table(table, out / "signatures.sig")
        for iid in excluded:
            print(f"warning: excluded degenerate image {iid}", file=sys.stderr)
        print(f"encoded {len(table.image_ids)} images (u={u}, 3x{u} floats each)")
        return 0
    except Exception as exc:  # noqa: BLE001
        raise StageError(stage, exc) from exc


def _report_echo(args, extra: dict) -> dict:
    echo = {
        "command": "evaluate",
        "metric": args.metric,
        "pooling": args.pooling,
        "pca_fit": args.pca_fit,
        "seed": args.seed,
        "trials": args.trials,
        "spatial": bool(args.spatial),
        "colorspaces": list(args.colorspaces),
    }
    echo.update(extra)
    return echo


def _write_report(report, out: Path, tag: str = "") -> None:
    suffix = f"_{tag}" if tag else ""
    report.write_json(out / f"report{suffix}.json")
    report.write_cmc_csv(out / f"cmc{suffix}.csv")
    label = tag or "report"
    print(f"{label}: {report.summary_line()}")


def cmd_evaluate(args: argparse.Namespace) -> int:
    stage = "parse-config"
    try:
        _resolve_paths(args, "source", "SOURCE")
        _resolve(args, "target", "TARGET", None)
        _resolve(args, "dicts", "DICTS", None)
        _resolve(args, "signatures", "SIGNATURES", None)
        _resolve(args, "metric", "METRIC", "cosine")
        _resolve(args, "pooling", "POOLING", "avg")
        _resolve(args, "pca_dim", "PCA_DIM", 50, int)
        _resolve(args, "pca_fit", "PCA_FIT", "source")
        trials = _resolve(args, "trials", "TRIALS", 10, int)
        seed = _resolve(args, "seed", "SEED", 0, int)
        spatial = bool(_resolve(args, "spatial", "SPATIAL", False, bool))
        out = Path(_resolve(args, "out", "OUT", "out", str))
        jobs = _resolve(args, "jobs", "JOBS", os.cpu_count() or 1, int)
        raw_cs = _resolve(args, "colorspaces", "COLORSPACES", ",".join(COLORSPACES))
        args.colorspaces = tuple(c.strip() for c in raw_cs.split(",") if c.strip())
        dump_rankings = bool(_resolve(args, "dump_rankings", "DUMP_RANKINGS", False, bool))
        sweep_metrics = bool(_resolve(args, "sweep_metrics", "SWEEP_METRICS", False, bool))
        sweep_dims_raw = _resolve(args, "sweep_pca_dims", "SWEEP_PCA_DIMS", "")
        sweep_dims = [int(v) for v in sweep_dims_raw.split(",") if v.strip()]

        if args.target is None:
            raise ValueError("--target manifest is required")
        if trials < 1:
            raise ValueError(f"--trials must be >= 1, got {trials}")
        if (args.signatures is None) == (args.dicts is None):
            raise ValueError("exactly one of --signatures or --dicts is required")
        unknown = set(args.colorspaces) - set(COLORSPACES)
        if unknown:
            raise ValueError(f"unknown colorspaces {sorted(unknown)}")
        if (sweep_metrics or sweep_dims) and args.dicts is None:
            raise ValueError("sweeps re-encode images and need --dicts")
        out.mkdir(parents=True, exist_ok=True)
        _write_config(out, args)

        stage = "load-artifacts"
        target_manifest = parse_manifest(args.target, role="target")

        if args.signatures is not None:
            table = load_signature_table(args.signatures)
            signatures = table.by_id()
            items = [
                (r.image_id, r.entity_id)
                for r in target_manifest.records
                if r.image_id in signatures
            ]
            excluded = [
                r.image_id
                for r in target_manifest.records
                if r.image_id not in signatures
            ]
            stage = "rank-and-score"
            report = protocol_from_signatures(
                signatures,
                items,
                trials=trials,
                seed=seed,
                colorspaces=args.colorspaces,
                config_echo=_report_echo(
                    args, {"target": target_manifest.name, "u": table.u}
                ),
                keep_rankings=dump_rankings,
                excluded=excluded,
            )
            _write_report(report, out)
            _maybe_dump_rankings(report, out, dump_rankings)
            return 0

        dictionaries = _load_bundles(args.dicts)
        k = dictionaries["hs"].k

        def one_run(metric, pooling, u, tag):
            if u >= k:
                raise ValueError(f"--pca-dim must be < atom count {k}, got {u}")
            cfg = ResidualConfig(metric=metric, pooling=pooling)
            if args.pca_fit == "source":
                models = _fit_source_pca(args, dictionaries, cfg, u, jobs)
            else:
                models = None
            echo = _report_echo(
                args,
                {
                    "target": target_manifest.name,
                    "u": u,
                    "metric": metric,
                    "pooling": pooling,
                    "k": k,
                    "sources": [Path(s).stem for s in args.source],
                },
            )
            report = run_protocol(
                target_manifest,
                dictionaries,
                pca_models=models,
                cfg=cfg,
                trials=trials,
                seed=seed,
                pca_fit_mode=args.pca_fit,
                pca_dim=u,
                spatial=spatial,
                jobs=jobs,
                colorspaces=args.colorspaces,
                config_echo=echo,
                keep_rankings=dump_rankings,
            )
            _write_report(report, out, tag)
            _maybe_dump_rankings(report, out, dump_rankings, tag)

        stage = "rank-and-score"
        if sweep_metrics:
            for metric in METRICS:
                for pooling in POOLINGS:
                    one_run(metric, pooling, args.pca_dim, f"{metric}_{pooling}")
        elif sweep_dims:
            for u in sweep_dims:
                one_run(args.metric, args.pooling, u, f"u{u}")
        else:
            one_run(args.metric, args.pooling, args.pca_dim, "")
        return 0
    except Exception as exc:  # noqa: BLE001
        raise StageError(stage, exc) from exc


def _maybe_dump_rankings(report, out: Path, enabled: bool, tag: str = "") -> None:
    if not enabled or not report.rankings:
        return
    suffix = f"_{tag}" if tag else ""
    for i, ranked in enumerate(report.rankings):
        write_ranking_csv(ranked, out / f"rankings{suffix}_trial{i:02d}.csv")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "train-dict": cmd_train_dict,
        "encode": cmd_encode,
        "evaluate": cmd_evaluate,
    }
    try:
        return handlers[args.command](args)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
