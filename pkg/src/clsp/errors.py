"""Exception types raised across the package."""


class ClspError(Exception):
    pass


class MalformedLf(ClspError):
    def __init__(self, message, position):
        super().__init__(f"{message} at position {position}")
        self.position = position


class GrammarError(ClspError):
    pass


class NotDerivable(ClspError):
    def __init__(self, message, index=None, task=None):
        super().__init__(message)
        self.index = index
        self.task = task


class AmbiguousDerivation(ClspError):
    pass


class InvalidAction(ClspError):
    def __init__(self, step, message=""):
        super().__init__(f"invalid action at step {step}" + (f": {message}" if message else ""))
        self.step = step


class IncompleteTree(ClspError):
    pass


class EmptyUtterance(ClspError):
    pass


class NoApplicableActions(ClspError):
    pass


class ParseTimeout(ClspError):
    pass


class InsufficientPoints(ClspError):
    pass


class EmptyMemory(ClspError):
    pass


class MalformedRecord(ClspError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line
