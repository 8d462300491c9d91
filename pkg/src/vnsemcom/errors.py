"""Exception types shared across the simulator."""


class VNSemComError(Exception):
    pass


class DimensionError(VNSemComError, ValueError):
    pass


class ConfigurationError(VNSemComError, ValueError):
    pass


class TrainingError(VNSemComError, RuntimeError):
    pass


class CalibrationError(TrainingError):
    pass


class DeepFadeError(VNSemComError, RuntimeError):
    pass


class EquivocationError(VNSemComError, RuntimeError):
    def __init__(self, assessor_id, message):
        super().__init__(message)
        self.assessor_id = assessor_id


class EmptyQuorumError(VNSemComError, RuntimeError):
    pass
