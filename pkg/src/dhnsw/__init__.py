"""Partitioned HNSW search over a remote memory node with batched, cached fetching."""

from .builder import (
    BuiltIndex,
    build_index,
    decode_meta,
    encode_meta,
    relayout,
    upload,
)
from .compute_node import (
    MODES,
    ClusterCache,
    ComputeEngine,
    QueryBatch,
    QueryResult,
)
from .config import (
    Config,
    load_config,
)
from .errors import (
    DhnswError,
    DimensionMismatchError,
    EmptyIndexError,
    DuplicateIdError,
    CodecError,
    BadMagicError,
    ChecksumError,
    TruncatedError,
    CapacityError,
    BoundsError,
    AlignmentError,
    TransportError,
    StaleDirectoryError,
    DatasetError,
    ConfigError,
)
from .hnsw import (
    HnswGraph,
    HnswParams,
    SearchParams,
    VectorRecord,
    build,
    search_knn,
)
from .memory_node import (
    MemoryServer,
    Region,
    register,
)
from .partition import (
    MetaIndex,
    build_meta,
    classify,
    classify_topb,
    partition_dataset,
    sample_representatives,
)
from .transport import (
    FabricStats,
    Transport,
    TransportConfig,
    connect,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "BadMagicError",
    "BoundsError",
    "BuiltIndex",
    "CapacityError",
    "ChecksumError",
    "ClusterCache",
    "CodecError",
    "ComputeEngine",
    "Config",
    "ConfigError",
    "DatasetError",
    "DhnswError",
    "DimensionMismatchError",
    "DuplicateIdError",
    "EmptyIndexError",
    "FabricStats",
    "HnswGraph",
    "HnswParams",
    "MODES",
    "MemoryServer",
    "MetaIndex",
    "QueryBatch",
    "QueryResult",
    "Region",
    "SearchParams",
    "StaleDirectoryError",
    "Transport",
    "TransportConfig",
    "TransportError",
    "TruncatedError",
    "VectorRecord",
    "build",
    "build_index",
    "build_meta",
    "classify",
    "classify_topb",
    "connect",
    "decode_meta",
    "encode_meta",
    "load_config",
    "partition_dataset",
    "register",
    "relayout",
    "sample_representatives",
    "search_knn",
    "upload",
]
