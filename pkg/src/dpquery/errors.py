"""Exception hierarchy shared across the engine.

Every error that crosses a module boundary derives from DpQueryError and
carries a short machine-readable ``code`` so the service layer can map it
onto an HTTP status without string matching.
"""


class DpQueryError(Exception):
    code = "error"

    def __init__(self, message: str, detail: str | None = None):
        super().__init__(message)
        self.message = message
        self.detail = detail


class UnknownRelation(DpQueryError):
    code = "unknown_relation"


class UnknownAttribute(DpQueryError):
    code = "unknown_attribute"


class UnknownRole(DpQueryError):
    code = "unknown_role"


class UnknownPlan(DpQueryError):
    code = "unknown_plan"


class InsufficientBudget(DpQueryError):
    code = "insufficient_budget"


class QuerySyntaxError(DpQueryError):
    """Raised by the tokenizer/parser; pinpoints the offending position."""

    code = "syntax_error"

    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} at line {line}:{col}")
        self.line = line
        self.col = col


class SemanticError(DpQueryError):
    code = "semantic_error"


class LoweringError(DpQueryError):
    code = "lowering_error"


class SignatureMismatch(DpQueryError):
    code = "signature_mismatch"


class NoFeasiblePlan(DpQueryError):
    code = "no_feasible_plan"


class InvalidParameter(DpQueryError):
    code = "invalid_parameter"


class NonFiniteGradient(DpQueryError):
    code = "non_finite_gradient"


class ShapeMismatch(DpQueryError):
    code = "shape_mismatch"


class EmptyData(DpQueryError):
    code = "empty_data"


class EmptyStore(DpQueryError):
    code = "empty_store"


class ModelMissing(DpQueryError):
    code = "model_missing"


class WorkflowStateError(DpQueryError):
    """Out-of-order workflow call (session state machine violation)."""

    code = "workflow_order"


class VersionConflict(DpQueryError):
    code = "version_conflict"
