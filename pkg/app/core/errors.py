class DpSimError(Exception):
    """Base error for the simulator"""

    exit_code = 1


class NumericsError(DpSimError, ValueError):
    """Invalid numeric operand (non-finite value, length mismatch, step out of range)"""


class DataError(DpSimError, ValueError):
    """Invalid batch or exhausted dataset"""


class AggregationError(DpSimError, ValueError):
    """Loss aggregation has nothing to aggregate"""


class ConfigError(DpSimError, ValueError):
    """Configuration could not be parsed, validated or resolved"""

    exit_code = 2


class TraceError(DpSimError, ValueError):
    """Trace file is malformed, out of order or too short"""

    exit_code = 2
