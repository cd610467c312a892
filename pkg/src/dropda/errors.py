class DimensionError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class ParseError(ValueError):
    pass
