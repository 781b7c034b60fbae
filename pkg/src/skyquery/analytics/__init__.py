from .io import (CoverageLog, Footprint, InputFormatError, import_raster, read_coverage_log,
                 read_detection_log, write_detection_log)
from .operators import (Aggregator, AlgebraStats, OperatorError, SelectPredicate, aggregate, join,
                        matrix_binary, merge, object_detection_ingest, select, thin, to_matrix)
from .thinning import zhang_suen
from .tracking import object_tracking

__all__ = [
    "Aggregator", "AlgebraStats", "CoverageLog", "Footprint", "InputFormatError", "OperatorError",
    "SelectPredicate", "aggregate", "import_raster", "join", "matrix_binary", "merge",
    "object_detection_ingest", "object_tracking", "read_coverage_log", "read_detection_log",
    "select", "thin", "to_matrix", "write_detection_log", "zhang_suen",
]
