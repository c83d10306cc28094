"""Searchlight shared-response models for multi-subject fMRI-like data.

Modules
-------
linalg       SVD, pseudo-inverse, inverse square root, Pearson correlation
volume       voxel grids, datasets, downsampling, searchlight neighborhoods
models       PCA, SRM, ICA, SR-ICA and SR-GICA factorizations
evaluation   time-segment and scene-recall protocols, linear SVM
searchlight  per-center model sweeps and result maps
synth        synthetic datasets with planted shared responses
"""

__version__ = "0.1.0"

from .errors import (
    DegenerateVector,
    FormatError,
    InvalidInput,
    ProtocolError,
    RankError,
    ShapeMismatch,
    SingularMatrix,
    SLSRMError,
    SpecError,
)
from .evaluation import (
    EvalResult,
    EvalSpec,
    LinearSVM,
    SceneTable,
    evaluate_time_segment,
    scene_classification,
    scene_recall_match,
    segment_match_counts,
    time_segment_chance,
    time_segment_match,
    whole_volume_accuracy,
)
from .linalg import compact_svd, pearson, pseudo_inverse, sym_inv_sqrt, zscore_rows
from .models import (
    FactorFit,
    FitConfig,
    fit_ica,
    fit_model,
    fit_pca,
    fit_srgica,
    fit_srica,
    fit_srm,
    load_fit,
    project,
    save_fit,
)
from .searchlight import ResultMaps, SweepConfig, aggregate_accuracy, load_result_maps, save_result_maps, sweep
from .synth import GroundTruth, PlantedRegion, SceneSpec, SynthSpec, generate, generate_recall, preset
from .volume import (
    SearchlightIndex,
    SubjectDataset,
    VolumeGrid,
    build_searchlights,
    downsample_by_2,
    extract_searchlight,
    load_dataset,
    save_dataset,
)
