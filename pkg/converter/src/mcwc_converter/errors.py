class ConverterError(Exception):
    pass


class UnsupportedArchitecture(ConverterError):
    pass


class ShapeInferenceFailure(ConverterError):
    pass


class ShapeMismatch(ConverterError):
    pass
