"""Exception hierarchy shared across the package.

Each family maps onto one CLI exit code (see ``mutualrec.cli``).
"""


class MutualRecError(Exception):
    exit_code = 1


class ContractError(MutualRecError):
    """A precondition on an operation's inputs was violated."""

    exit_code = 2


class DimensionError(ContractError):
    def __init__(self, primitive, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


class ConfigError(MutualRecError):
    exit_code = 2

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


class DataError(MutualRecError):
    exit_code = 3


class IngestionError(DataError):
    pass


class FilterError(DataError):
    pass


class NumericError(MutualRecError):
    exit_code = 4


class FreezeViolation(MutualRecError):
    """A parameter set that must stay bit-identical was modified."""

    exit_code = 4


class ArtifactIOError(MutualRecError):
    exit_code = 5
