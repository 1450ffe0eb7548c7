"""Instance retrieval over convolutional feature maps.

Global descriptors (sum pooling, regional max aggregation) give an
initial ranking; a small nonnegative quadratic program then rescores the
shortlist by finding, per candidate, the combination of its base regions
that best matches the query; query expansion closes the loop.
"""

from .aggregate import (
    AggregationConfig,
    AggregationMethod,
    GlobalDescriptor,
    WhiteningModel,
    aggregate_global,
    apply_whitening,
    clamped_dimensions,
    fit_whitening,
    identity_whitening,
    load_descriptors,
    load_whitening,
    rmac,
    save_descriptors,
    save_whitening,
    spoc,
    unit_normalized,
    whiten_raw,
)
from .base_regions import (
    BaseRegionSet,
    FmpConfig,
    FmpResult,
    OsppConfig,
    Provenance,
    RawRegion,
    RectRegion,
    RegionMask,
    fmp,
    fmp_detailed,
    fmp_raw,
    ospp,
    sample_grid,
    window_pool_rows,
)
from .cfm_store import (
    CfmTensor,
    CorpusManifest,
    CropBox,
    ManifestEntry,
    QueryEntry,
    Relevance,
    crop_tensor,
    load_manifest,
    read_tensor,
    save_manifest,
    write_tensor,
)
from .errors import (
    ConfigurationError,
    FormatError,
    InsufficientDataError,
    ValidationError,
)
from .evalkit import (
    QueryJudgment,
    SyntheticSpec,
    UndefinedAPError,
    average_precision,
    convert_oxford_ground_truth,
    generate_synthetic,
    judgment_from_relevance,
    load_judgments,
    make_block_signature,
    mean_ap,
)
from .pipeline import (
    DescriptorIndex,
    IndexConfig,
    PipelineConfig,
    RankedList,
    Reranker,
    Stage,
    build_index,
    holdout_descriptors,
    index_config_from_snapshot,
    initial_search,
    load_index,
    query_expansion,
    query_feature,
    rerank,
    run_query,
    save_index,
)
from .qam import (
    QamProblem,
    QamSolution,
    SolverConfig,
    SolverStatus,
    merged_heatmap,
    qam_similarity,
    solve,
)

__version__ = "0.1.0"
