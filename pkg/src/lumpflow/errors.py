"""Exception hierarchy shared by all modules."""


class LumpflowError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgument(LumpflowError, ValueError):
    pass


class MeshParseError(LumpflowError):
    """Malformed mesh text. ``line`` is 1-based, or None when not line-specific."""

    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class AcutenessError(LumpflowError):
    def __init__(self, report):
        self.report = report
        super().__init__(
            f"mesh violates the angle condition: {len(report.offenders)} offending "
            f"element(s), worst angle {report.worst_angle:.6f} rad"
        )


class ModelError(LumpflowError):
    """Constitutive model fails its admissibility checks."""


class QuadratureError(LumpflowError):
    pass


class DataError(LumpflowError):
    """Problem data (sources, exact solutions) outside the admissible range."""


class SolverError(LumpflowError):
    pass


class StepError(SolverError):
    def __init__(self, message, step=None):
        self.step = step
        prefix = f"step {step}: " if step is not None else ""
        super().__init__(prefix + message)


class ConfigError(LumpflowError):
    """Configuration problems; ``problems`` lists every issue found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
