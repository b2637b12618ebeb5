"""Exception types shared across the package.

The CLI maps each family onto an exit status: ``ConfigError`` -> 1,
``DataError`` -> 2, ``DivergenceError`` -> 3.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


class DataError(ValueError):
    """Input data that cannot be parsed or violates the dataset contract."""


class FormatError(DataError):
    pass


class ConsistencyError(DataError):
    pass


class UndefinedDistanceError(ValueError):
    """Cosine distance requested for a zero vector."""


class SelectionBudgetError(RuntimeError):
    """Exhaustive selection would enumerate too many subsets."""

    def __init__(self, subset_count: int, budget: int):
        super().__init__(
            f"exhaustive selection needs {subset_count} subsets, budget is {budget}"
        )
        self.subset_count = subset_count
        self.budget = budget


class DivergenceError(FloatingPointError):
    """Non-finite parameters produced by an SGD step."""

    def __init__(self, message: str = "non-finite parameters after SGD step",
                 round_index: int | None = None, client_id: int | None = None):
        self.base_message = message
        self.round_index = round_index
        self.client_id = client_id
        super().__init__(self._render())

    def _render(self) -> str:
        ctx = []
        if self.round_index is not None:
            ctx.append(f"round={self.round_index}")
        if self.client_id is not None:
            ctx.append(f"client={self.client_id}")
        return self.base_message + (f" ({', '.join(ctx)})" if ctx else "")

    def with_context(self, round_index: int | None = None,
                     client_id: int | None = None) -> "DivergenceError":
        return DivergenceError(
            self.base_message,
            round_index=self.round_index if round_index is None else round_index,
            client_id=self.client_id if client_id is None else client_id,
        )
