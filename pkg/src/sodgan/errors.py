"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SodganError(Exception):
    exit_code = 1
    kind = "error"

    def record(self):
        return {"error": self.kind, "message": str(self)}


class InvalidArgumentError(SodganError, ValueError):
    kind = "invalid-argument"


class EmptyInputError(SodganError, ValueError):
    kind = "empty-input"


class MissingClassError(SodganError, ValueError):
    kind = "missing-class"


class ConfigError(SodganError):
    exit_code = 2
    kind = "config"

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key

    def record(self):
        return {"error": self.kind, "key": self.key, "message": str(self)}


class DependencyError(SodganError):
    exit_code = 3
    kind = "dependency"

    def __init__(self, stage, path):
        super().__init__(f"missing artifact {path}; run `{stage}` first")
        self.stage = stage
        self.path = str(path)

    def record(self):
        return {"error": self.kind, "stage": self.stage, "path": self.path, "message": str(self)}


class FilterTooStrictError(SodganError):
    exit_code = 4
    kind = "filter-too-strict"

    def __init__(self, kept, attempts, acceptance_rate):
        super().__init__(
            f"kept {kept} of {attempts} attempts (acceptance rate {acceptance_rate:.4f}); "
            "relax the filter policy")
        self.kept = kept
        self.attempts = attempts
        self.acceptance_rate = acceptance_rate

    def record(self):
        return {"error": self.kind, "kept": self.kept, "attempts": self.attempts,
                "acceptance_rate": self.acceptance_rate, "message": str(self)}


class CorruptDatasetError(SodganError):
    exit_code = 5
    kind = "corrupt-dataset"
