"""Exception hierarchy shared by the library modules and the command line.

Each class carries the process exit code the CLI returns for it:
0 ok, 2 config, 3 domain, 4 reference, 5 internal.
"""


class RescotError(Exception):
    exit_code = 1


class ConfigError(RescotError):
    """Malformed or semantically invalid scenario configuration."""

    exit_code = 2

    def __init__(self, message, line=None, source=None):
        self.message = message
        self.line = line
        self.source = source
        super().__init__(self._render())

    def _render(self):
        where = self.source or "<config>"
        if self.line is not None:
            return f"{where}:{self.line}: {self.message}"
        return f"{where}: {self.message}"


class ColorStraddleError(ConfigError):
    """A grid cell whose samples disagree on color or obstacle membership."""

    def __init__(self, cell, corner, colors):
        self.cell = int(cell)
        self.corner = tuple(float(c) for c in corner)
        self.colors = sorted(set(int(c) for c in colors))
        super().__init__(
            f"cell {self.cell} (lower corner {self.corner}) straddles a region "
            f"boundary, sampled colors {self.colors}; align regions to the grid"
        )


class DomainError(RescotError):
    exit_code = 3


class UnknownReferenceError(RescotError):
    """Unknown cell id, missing file, wrong file kind or version."""

    exit_code = 4


class InternalError(RescotError):
    exit_code = 5


class IntegrationDivergedError(InternalError):
    pass
