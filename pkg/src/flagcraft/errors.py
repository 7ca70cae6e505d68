"""Exception hierarchy shared across the package."""


class FlagcraftError(Exception):
    """Base class for all package errors."""


class ConfigError(FlagcraftError):
    """Invalid configuration value or unknown config key."""


class LibraryError(FlagcraftError):
    """Library integrity violation (duplicate ids, bad records, ...)."""


class LibraryParseError(LibraryError):
    """Malformed JSON in a library file; message names file and line."""


class SandboxError(FlagcraftError):
    """Base class for sandbox failures."""


class SandboxSetupError(SandboxError):
    """Sandbox could not be provisioned (missing image, runtime, ...)."""


class SandboxExecutionError(SandboxError):
    """Script transfer failed or execution timed out."""


class SandboxCapacityError(SandboxError):
    """Live-sandbox cap exceeded."""


class SynthesisError(FlagcraftError):
    """Synthesizer produced incomplete output."""


class EnvConstructionError(FlagcraftError):
    """Environment generation aborted (failed plant, bad technique id)."""


class SchedulerError(FlagcraftError):
    """Pool bookkeeping violation (unknown id, too few candidates)."""
