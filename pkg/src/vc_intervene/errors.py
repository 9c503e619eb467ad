"""Exception hierarchy shared by every module."""


class VCError(Exception):
    """Base class; the CLI maps subclasses onto exit codes."""

    exit_code = 2


# annotation ingest
class MalformedJson(VCError):
    pass


class MissingField(VCError):
    def __init__(self, field, array, index):
        super().__init__(f"missing field {field!r} in {array}[{index}]")
        self.field = field
        self.array = array
        self.index = index


class DanglingReference(VCError):
    pass


class MalformedLine(VCError):
    def __init__(self, lineno, reason):
        super().__init__(f"line {lineno}: {reason}")
        self.lineno = lineno


# statistics
class SetTooSmall(VCError):
    pass


class RowUnsupported(VCError):
    pass


# simulator
class InvalidWorld(VCError):
    pass


class UnreachableCondition(VCError):
    pass


# dictionary / head
class EmptyCategory(VCError):
    def __init__(self, category):
        super().__init__(f"category {category} has no feature rows")
        self.category = category


class NonFiniteInput(VCError):
    pass


class DivergedLoss(VCError):
    exit_code = 3

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class UntrainedModel(VCError):
    pass


# feature store
class BadMagic(VCError):
    pass


class TruncatedFile(VCError):
    pass


class IndexMismatch(VCError):
    pass
