"""Exception hierarchy shared by all topo3d modules."""


class Topo3dError(Exception):
    """Base class for all errors raised by topo3d."""


class SingularSystem(Topo3dError):
    """The reduced stiffness system could not be solved."""


class InsufficientConstraints(SingularSystem):
    """Fixed DOFs leave at least one rigid-body mode unrestrained."""


class BisectionFailure(Topo3dError):
    """No volume multiplier satisfies the volume constraint under the move limits."""


class MalformedStl(Topo3dError):
    pass


class EmptyMesh(Topo3dError):
    pass


class DegenerateBounds(Topo3dError):
    pass


class AllPassive(Topo3dError):
    pass


class EmptyDesign(Topo3dError):
    pass


class ConfigError(Topo3dError):
    """Invalid run configuration (bad dimensions, unreadable files, ...)."""
