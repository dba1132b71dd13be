"""Sparse residual encoding of group images.

Each patch feature is coded against the transferred dictionary; the
per-atom dissimilarities are weighted by the sparse coefficients, pooled
over all patches of the image into one fixed-length vector per color
space, and projected by PCA into the final signature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imgproc import COLORSPACES, extract_features
from .sparse import Dictionary, lasso_solve_batch

MODEL_FORMAT_VERSION = 1

METRICS = ("l1", "cosine", "chisquare", "euclidean")
POOLINGS = ("max", "avg")


class DegenerateInputError(ValueError):
    """Raised when an image yields no usable (nonzero) patches."""


@dataclass(frozen=True)
class ResidualConfig:
    metric: str = "cosine"
    pooling: str = "avg"
    chi_square_epsilon: float = 1e-10

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown residual metric {self.metric!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.chi_square_epsilon <= 0:
            raise ValueError("chi_square_epsilon must be positive")


def residual_matrix(
    X: np.ndarray, atoms: np.ndarray, metric: str, eps: float = 1e-10
) -> np.ndarray:
    """Pairwise dissimilarities between sample rows and atom columns, (n, k)."""
    X = np.asarray(X, dtype=np.float64)
    atoms = np.asarray(atoms, dtype=np.float64)
    if X.shape[1] != atoms.shape[0]:
        raise ValueError(f"sample dim {X.shape[1]} != atom dim {atoms.shape[0]}")
    if metric == "l1":
        return np.abs(X[:, None, :] - atoms.T[None, :, :]).sum(axis=2)
    if metric == "euclidean":
        sq = (
            (X**2).sum(axis=1)[:, None]
            + (atoms**2).sum(axis=0)[None, :]
            - 2.0 * X @ atoms
        )
        return np.sqrt(np.maximum(sq, 0.0))
    if metric == "cosine":
        xn = np.linalg.norm(X, axis=1)
        an = np.linalg.norm(atoms, axis=0)
        denom = xn[:, None] * an[None, :]
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where(denom > 0, (X @ atoms) / np.where(denom > 0, denom, 1.0), 0.0)
        return 1.0 - cos
    if metric == "chisquare":
        diff = X[:, None, :] - atoms.T[None, :, :]
        return 0.5 * (diff**2 / (X[:, None, :] + atoms.T[None, :, :] + eps)).sum(axis=2)
    raise ValueError(f"unknown residual metric {metric!r}")


def residual(x: np.ndarray, atom: np.ndarray, metric: str, eps: float = 1e-10) -> float:
    """Dissimilarity between one feature vector and one atom."""
    x = np.asarray(x, dtype=np.float64)
    atom = np.asarray(atom, dtype=np.float64)
    if x.shape != atom.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {atom.shape}")
    return float(residual_matrix(x[None, :], atom[:, None], metric, eps)[0, 0])


def encode_patches(X: np.ndarray, D: Dictionary, cfg: ResidualConfig) -> np.ndarray:
    """Coefficient-weighted residual vectors for each sample row, (n, k)."""
    codes, _ = lasso_solve_batch(X, D)
    res = residual_matrix(X, D.atoms, cfg.metric, cfg.chi_square_epsilon)
    return codes * res


def encode_patch(x: np.ndarray, D: Dictionary, cfg: ResidualConfig) -> np.ndarray:
    """k-vector of atom dissimilarities weighted by the sparse code of x."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected 1-D feature, got shape {x.shape}")
    return encode_patches(x[None, :], D, cfg)[0]


def pool(patch_encodings: np.ndarray, pooling: str) -> np.ndarray:
    """Component-wise mean or max over the patch encodings (rows)."""
    enc = np.asarray(patch_encodings, dtype=np.float64)
    if enc.ndim != 2 or enc.shape[0] == 0:
        raise ValueError("pooling needs a non-empty (P, k) encoding matrix")
    if pooling == "avg":
        return enc.mean(axis=0)
    if pooling == "max":
        return enc.max(axis=0)
    raise ValueError(f"unknown pooling {pooling!r}")


def pooled_encoding(
    features: np.ndarray, D: Dictionary, cfg: ResidualConfig
) -> np.ndarray:
    """Pooled residual encoding of one image's patch features.

    All-zero feature rows (fully masked patches) carry no appearance
    evidence and are dropped before pooling.
    """
    features = np.asarray(features, dtype=np.float64)
    keep = features.any(axis=1)
    if not keep.any():
        raise DegenerateInputError("all patches are fully masked")
    return pool(encode_patches(features[keep], D, cfg), cfg.pooling)


@dataclass
class PcaModel:
    """Mean and orthonormal principal directions of the pooled encodings."""

    mean: np.ndarray  # (k,)
    components: np.ndarray  # (u, k), orthonormal rows by descending variance
    explained_variance: np.ndarray  # (u,)
    colorspace: str = ""

    @property
    def u(self) -> int:
        return self.components.shape[0]

    @property
    def k(self) -> int:
        return self.components.shape[1]


def pca_fit(samples: np.ndarray, u: int, colorspace: str = "") -> PcaModel:
    """Principal components of the sample rows via covariance eigendecomposition.

    Components are ordered by descending explained variance; each is
    sign-fixed so its largest-magnitude entry is positive.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError(f"expected (n, k) samples, got shape {samples.shape}")
    n, k = samples.shape
    if u < 1 or u > k:
        raise ValueError(f"need 1 <= u <= {k}, got {u}")
    if n < u + 1:
        raise ValueError(f"need at least {u + 1} samples to fit {u} components, got {n}")

    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:u]
    components = eigvecs[:, order].T.copy()
    variances = np.maximum(eigvals[order], 0.0)
    for row in components:
        if row[np.abs(row).argmax()] < 0:
            row *= -1.0
    return PcaModel(
        mean=mean,
        components=components,
        explained_variance=variances,
        colorspace=colorspace,
    )


def pca_transform(model: PcaModel, f: np.ndarray) -> np.ndarray:
    """Project one vector (k,) or a stack (n, k) onto the components."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != model.k:
        raise ValueError(f"input dim {f.shape[-1]} != model dim {model.k}")
    return (f - model.mean) @ model.components.T


@dataclass
class GroupSignature:
    """Final per-colorspace projected vectors for one image."""

    vectors: dict[str, np.ndarray]

    @property
    def colorspaces(self) -> tuple[str, ...]:
        return tuple(self.vectors.keys())

    def stacked(self, order: tuple[str, ...] = COLORSPACES) -> np.ndarray:
        return np.concatenate([self.vectors[cs] for cs in order])


def encode_image(
    img: np.ndarray,
    mask: np.ndarray | None,
    dictionaries: dict[str, Dictionary],
    pca_models: dict[str, PcaModel],
    cfg: ResidualConfig,
    *,
    spatial: bool = False,
    include_overlap: bool = True,
) -> GroupSignature:
    """Full encoding pipeline for one image: features -> residuals -> PCA."""
    features = extract_features(
        img, mask, spatial=spatial, include_overlap=include_overlap
    )
    vectors = {}
    for cs in COLORSPACES:
        pooled = pooled_encoding(features[cs], dictionaries[cs], cfg)
        vectors[cs] = pca_transform(pca_models[cs], pooled)
    return GroupSignature(vectors=vectors)


def save_pca_model(model: PcaModel, path: str | Path) -> Path:
    """Single-file PCA model: one JSON header line, then a float32 blob."""
    path = Path(path)
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "colorspace": model.colorspace,
        "k": model.k,
        "u": model.u,
    }
    blob = np.concatenate([model.mean, model.components.ravel(order="C")])
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(blob.astype("<f4").tobytes())
    return path


def load_pca_model(path: str | Path) -> PcaModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model version {header.get('format_version')}")
        k, u = header["k"], header["u"]
        raw = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    if raw.size != k + u * k:
        raise ValueError(f"model blob holds {raw.size} floats, expected {k + u * k}")
    mean = raw[:k]
    components = raw[k:].reshape((u, k))
    return PcaModel(
        mean=mean,
        components=components,
        explained_variance=np.zeros(u),
        colorspace=header["colorspace"],
    )


@dataclass
class SignatureTable:
    """Signatures for a corpus of images, in a fixed id order."""

    image_ids: list[str]
    colorspaces: tuple[str, ...]
    u: int
    values: np.ndarray  # (n, len(colorspaces) * u)

    def signature(self, index: int) -> GroupSignature:
        vectors = {}
        for i, cs in enumerate(self.colorspaces):
            vectors[cs] = self.values[index, i * self.u : (i + 1) * self.u].copy()
        return GroupSignature(vectors=vectors)

    def by_id(self) -> dict[str, GroupSignature]:
        return {iid: self.signature(i) for i, iid in enumerate(self.image_ids)}


def save_signature_table(table: SignatureTable, path: str | Path) -> Path:
    """Single-file signature table: JSON header line + float32 blob."""
    path = Path(path)
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "u": table.u,
        "colorspaces": list(table.colorspaces),
        "image_ids": table.image_ids,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.asarray(table.values).astype("<f4").tobytes(order="C"))
    return path


def load_signature_table(path: str | Path) -> SignatureTable:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported table version {header.get('format_version')}")
        ids = list(header["image_ids"])
        colorspaces = tuple(header["colorspaces"])
        u = int(header["u"])
        raw = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    width = len(colorspaces) * u
    if raw.size != len(ids) * width:
        raise ValueError(
            f"table blob holds {raw.size} floats, expected {len(ids) * width}"
        )
    return SignatureTable(
        image_ids=ids, colorspaces=colorspaces, u=u, values=raw.reshape(len(ids), width)
    )
