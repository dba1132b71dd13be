"""Group re-identification via sparse residual encoding.

A dictionary of patch appearances is learned online from single-person
crops; group images are then encoded, without any target labels, as
pooled coefficient-weighted residuals against those atoms, compressed by
PCA and matched with a product of per-colorspace cosine distances.
"""

__version__ = "0.1.0"

from .data import DatasetManifest, ManifestError, ManifestRecord, load_record, merge_manifests, parse_manifest
from .encode import (
    DegenerateInputError,
    GroupSignature,
    PcaModel,
    ResidualConfig,
    SignatureTable,
    encode_image,
    encode_patch,
    load_pca_model,
    load_signature_table,
    pca_fit,
    pca_transform,
    pool,
    pooled_encoding,
    residual,
    save_pca_model,
    save_signature_table,
)
from .evaluation import (
    EvalReport,
    TrialSplit,
    cmc_curve,
    make_splits,
    nauc,
    protocol_from_signatures,
    run_protocol,
)
from .imgproc import (
    COLORSPACES,
    PatchLayout,
    extract_features,
    patch_grid,
    patch_histogram,
    resize_image,
    rgb_to_hsv,
    rgb_to_lab,
)
from .match import RankedList, cosine_distance, fuse_distance, rank_gallery
from .sparse import (
    Dictionary,
    LearnerState,
    SolverFailure,
    SparseCode,
    dict_init,
    kkt_check,
    kkt_violation,
    lasso_objective,
    lasso_solve,
    lasso_solve_batch,
    learn_dictionary,
    learner_step,
    load_dictionary,
    save_dictionary,
)
