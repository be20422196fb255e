# every domain error carries a machine readable category, the cli maps it to an exit code

class MetastasisError(Exception):
    category = 'runtime'

class DimensionError(MetastasisError, ValueError):
    category = 'numeric'

class TapeError(MetastasisError, RuntimeError):
    category = 'state'

class NonFiniteGradientError(MetastasisError, FloatingPointError):
    category = 'numeric'

    def __init__(self, name):
        super().__init__(f'non-finite gradient for parameter `{name}`')
        self.name = name

class NetConstructionError(MetastasisError, ValueError):
    category = 'config'

    def __init__(self, layer, extent):
        super().__init__(f'layer `{layer}` would produce a non-positive spatial extent ({extent})')
        self.layer = layer
        self.extent = extent

class FormatError(MetastasisError, ValueError):
    category = 'parse'

    def __init__(self, message, offset = None):
        where = f' (at byte offset {offset})' if offset is not None else ''
        super().__init__(f'{message}{where}')
        self.offset = offset

class CheckpointError(FormatError):
    # codes - bad_magic | version | dims | truncated

    def __init__(self, code, message, offset = None):
        super().__init__(f'[{code}] {message}', offset)
        self.code = code

class AugmentError(MetastasisError, ValueError):
    category = 'data'

class SamplingError(MetastasisError, RuntimeError):
    category = 'data'

class GenerationError(MetastasisError, RuntimeError):
    category = 'data'

class InferenceError(MetastasisError, ValueError):
    category = 'data'

class EwcShapeError(MetastasisError, ValueError):
    category = 'numeric'

class PlanError(MetastasisError, ValueError):
    category = 'usage'

class EvaluationError(MetastasisError, ValueError):
    category = 'data'

class StagingError(MetastasisError, ValueError):
    category = 'data'

class ConfigError(MetastasisError, ValueError):
    category = 'config'

    def __init__(self, message, line = None, offset = None):
        where = f' (line {line}, byte offset {offset})' if line is not None else ''
        super().__init__(f'{message}{where}')
        self.line = line
        self.offset = offset

EXIT_CODES = dict(
    runtime = 1,
    usage = 2,
    parse = 3,
    config = 4,
    data = 5,
    numeric = 6,
    state = 7
)
