"""Exception hierarchy. Each class carries the CLI exit code it maps to."""
from __future__ import annotations


class GSGraphError(Exception):
    exit_code = 1


class ConfigError(GSGraphError):
    exit_code = 2


class ParseError(GSGraphError):
    exit_code = 3


class ValidationError(GSGraphError):
    exit_code = 4

    def __init__(self, message: str, violations: list[str] | None = None):
        super().__init__(message)
        self.violations = list(violations or [])


class EmptyMask(GSGraphError):
    exit_code = 5


class NoOverlap(GSGraphError):
    exit_code = 5


class DivergenceError(GSGraphError):
    exit_code = 6


class TooFewPoints(GSGraphError):
    exit_code = 7


class DegenerateNeighborhood(GSGraphError):
    exit_code = 7


class UnmatchedCluster(GSGraphError):
    exit_code = 8


class EmbedderUnavailable(GSGraphError):
    exit_code = 9


class UnknownPredicateAxis(GSGraphError):
    exit_code = 9


class CategoryAbsent(GSGraphError):
    exit_code = 10


class NoCandidate(GSGraphError):
    exit_code = 10


class EndpointTimeout(GSGraphError):
    exit_code = 11


class MalformedResponse(GSGraphError):
    exit_code = 12


class InvalidClusterId(GSGraphError):
    exit_code = 13


class SpecError(GSGraphError):
    exit_code = 14
