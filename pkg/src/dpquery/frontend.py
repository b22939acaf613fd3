"""SQL frontend: tokenizer, recursive-descent parser, printer, and binder.

Supported grammar (conjunctive WHERE, equi-joins, one GROUP BY level,
model calls with attribute-only arguments):

    query       := "SELECT" select_list "FROM" rel_ref {"JOIN" rel_ref "ON" eq}
                   ["WHERE" pred {"AND" pred}] ["GROUP BY" attr_list]
    select_list := "*" | item {"," item}
    item        := [agg "("] expr [")"]
    pred        := operand cmp operand
    operand     := attr | literal | ident "(" attr {"," attr} ")"
    cmp         := "=" | "<" | ">" | "<=" | ">=" | "<>"

Literals are single-quoted strings or decimal numbers; a bare identifier in
operand position stays a BareToken until binding decides whether it names an
attribute or is an enum-like string constant.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

from .errors import QuerySyntaxError, SemanticError

KEYWORDS = {"SELECT", "FROM", "JOIN", "ON", "WHERE", "AND", "GROUP", "BY"}
AGG_FUNCS = {"COUNT", "SUM", "AVG"}
CMP_OPS = {"=", "<", ">", "<=", ">=", "<>"}


# --- AST nodes -------------------------------------------------------------

@dataclass(frozen=True)
class Star:
    pass


@dataclass(frozen=True)
class AttrRef:
    qualifier: Optional[str]
    name: str

    def sql(self) -> str:
        return f"{self.qualifier}.{self.name}" if self.qualifier else self.name


@dataclass(frozen=True)
class Literal:
    value: Union[str, int, float]
    quoted: bool = True  # False for numbers

    def sql(self) -> str:
        if isinstance(self.value, str):
            return f"'{self.value}'" if self.quoted else self.value
        return repr(self.value)


@dataclass(frozen=True)
class BareToken:
    """Unbound identifier in operand position: attribute or enum string."""

    name: str

    def sql(self) -> str:
        return self.name


@dataclass(frozen=True)
class ModelCall:
    name: str
    args: tuple[AttrRef, ...]

    def sql(self) -> str:
        return f"{self.name}({', '.join(a.sql() for a in self.args)})"


Operand = Union[AttrRef, Literal, BareToken, ModelCall]


@dataclass(frozen=True)
class Comparison:
    lhs: Operand
    op: str
    rhs: Operand

    def sql(self) -> str:
        return f"{self.lhs.sql()} {self.op} {self.rhs.sql()}"


@dataclass(frozen=True)
class SelectItem:
    agg: str  # COUNT | SUM | AVG | NONE
    expr: Union[Star, AttrRef, ModelCall, Literal, BareToken]

    def sql(self) -> str:
        inner = "*" if isinstance(self.expr, Star) else self.expr.sql()
        return inner if self.agg == "NONE" else f"{self.agg}({inner})"


@dataclass(frozen=True)
class RelRef:
    name: str
    alias: Optional[str] = None

    def sql(self) -> str:
        return f"{self.name} {self.alias}" if self.alias else self.name


@dataclass(frozen=True)
class JoinClause:
    relation: RelRef
    left: AttrRef
    right: AttrRef

    def sql(self) -> str:
        return f"JOIN {self.relation.sql()} ON {self.left.sql()} = {self.right.sql()}"


@dataclass(frozen=True)
class QueryAst:
    select: tuple[SelectItem, ...]
    relation: RelRef
    joins: tuple[JoinClause, ...] = ()
    where: tuple[Comparison, ...] = ()
    group_by: tuple[AttrRef, ...] = ()

    @property
    def select_star(self) -> bool:
        return (
            len(self.select) == 1
            and self.select[0].agg == "NONE"
            and isinstance(self.select[0].expr, Star)
        )

    def model_calls(self) -> list[ModelCall]:
        calls = []
        for item in self.select:
            if isinstance(item.expr, ModelCall):
                calls.append(item.expr)
        for cmp_ in self.where:
            for side in (cmp_.lhs, cmp_.rhs):
                if isinstance(side, ModelCall):
                    calls.append(side)
        return calls


# --- tokenizer --------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    kind: str  # IDENT NUMBER STRING PUNCT OP EOF
    value: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, col, i, n = 1, 1, 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch.isspace():
            i += 1
            col += 1
            continue
        start_line, start_col = line, col
        if ch == "'":
            j = text.find("'", i + 1)
            if j < 0:
                raise QuerySyntaxError("unterminated string literal", start_line, start_col)
            tokens.append(Token("STRING", text[i + 1 : j], start_line, start_col))
            col += j - i + 1
            i = j + 1
            continue
        if ch.isdigit() or (ch == "-" and i + 1 < n and text[i + 1].isdigit()):
            j = i + 1
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            tokens.append(Token("NUMBER", text[i:j], start_line, start_col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(Token("IDENT", text[i:j], start_line, start_col))
            col += j - i
            i = j
            continue
        if ch in "<>=":
            two = text[i : i + 2]
            if two in ("<=", ">=", "<>"):
                tokens.append(Token("OP", two, start_line, start_col))
                i += 2
                col += 2
            else:
                tokens.append(Token("OP", ch, start_line, start_col))
                i += 1
                col += 1
            continue
        if ch in "(),.*":
            tokens.append(Token("PUNCT", ch, start_line, start_col))
            i += 1
            col += 1
            continue
        raise QuerySyntaxError(f"unexpected character {ch!r}", start_line, start_col)
    tokens.append(Token("EOF", "", line, col))
    return tokens


# --- parser -----------------------------------------------------------------

class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self, ahead: int = 0) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def fail(self, message: str) -> None:
        tok = self.peek()
        raise QuerySyntaxError(message, tok.line, tok.col)

    def at_keyword(self, word: str) -> bool:
        tok = self.peek()
        return tok.kind == "IDENT" and tok.value.upper() == word

    def expect_keyword(self, word: str) -> None:
        if not self.at_keyword(word):
            self.fail(f"expected {word}")
        self.advance()

    def expect_punct(self, value: str) -> None:
        tok = self.peek()
        if tok.kind != "PUNCT" or tok.value != value:
            self.fail(f"expected {value!r}")
        self.advance()

    def ident(self, what: str = "identifier") -> str:
        tok = self.peek()
        if tok.kind != "IDENT" or tok.value.upper() in KEYWORDS:
            self.fail(f"expected {what}")
        return self.advance().value

    # grammar productions

    def query(self) -> QueryAst:
        self.expect_keyword("SELECT")
        select = self.select_list()
        self.expect_keyword("FROM")
        relation = self.rel_ref()
        joins = []
        while self.at_keyword("JOIN"):
            self.advance()
            rel = self.rel_ref()
            self.expect_keyword("ON")
            left = self.attr()
            tok = self.peek()
            if not (tok.kind == "OP" and tok.value == "="):
                self.fail("expected = in join condition")
            self.advance()
            right = self.attr()
            joins.append(JoinClause(rel, left, right))
        where = []
        if self.at_keyword("WHERE"):
            self.advance()
            where.append(self.predicate())
            while self.at_keyword("AND"):
                self.advance()
                where.append(self.predicate())
        group_by = []
        if self.at_keyword("GROUP"):
            self.advance()
            self.expect_keyword("BY")
            group_by.append(self.attr())
            while self.peek().kind == "PUNCT" and self.peek().value == ",":
                self.advance()
                group_by.append(self.attr())
        if self.peek().kind != "EOF":
            self.fail("unexpected trailing input")
        return QueryAst(tuple(select), relation, tuple(joins), tuple(where), tuple(group_by))

    def select_list(self) -> list[SelectItem]:
        if self.peek().kind == "PUNCT" and self.peek().value == "*":
            self.advance()
            return [SelectItem("NONE", Star())]
        items = [self.select_item()]
        while self.peek().kind == "PUNCT" and self.peek().value == ",":
            self.advance()
            items.append(self.select_item())
        return items

    def select_item(self) -> SelectItem:
        tok = self.peek()
        if tok.kind == "IDENT" and tok.value.upper() in AGG_FUNCS:
            nxt = self.peek(1)
            if nxt.kind == "PUNCT" and nxt.value == "(":
                agg = self.advance().value.upper()
                self.expect_punct("(")
                if self.peek().kind == "PUNCT" and self.peek().value == "*":
                    self.advance()
                    expr: Union[Star, AttrRef, ModelCall] = Star()
                else:
                    expr = self.operand()  # type: ignore[assignment]
                self.expect_punct(")")
                return SelectItem(agg, expr)
        expr = self.operand()  # type: ignore[assignment]
        return SelectItem("NONE", expr)

    def rel_ref(self) -> RelRef:
        name = self.ident("relation name")
        tok = self.peek()
        if tok.kind == "IDENT" and tok.value.upper() not in KEYWORDS:
            return RelRef(name, self.advance().value)
        return RelRef(name)

    def attr(self) -> AttrRef:
        first = self.ident("attribute")
        if self.peek().kind == "PUNCT" and self.peek().value == ".":
            self.advance()
            return AttrRef(first, self.ident("attribute"))
        return AttrRef(None, first)

    def predicate(self) -> Comparison:
        lhs = self.operand()
        tok = self.peek()
        if tok.kind != "OP" or tok.value not in CMP_OPS:
            self.fail("expected comparison operator")
        op = self.advance().value
        rhs = self.operand()
        return Comparison(lhs, op, rhs)

    def operand(self) -> Operand:
        tok = self.peek()
        if tok.kind == "STRING":
            self.advance()
            return Literal(tok.value, quoted=True)
        if tok.kind == "NUMBER":
            self.advance()
            text = tok.value
            value = float(text) if "." in text else int(text)
            return Literal(value, quoted=False)
        if tok.kind == "IDENT":
            if tok.value.upper() in KEYWORDS:
                self.fail("expected operand")
            nxt = self.peek(1)
            if nxt.kind == "PUNCT" and nxt.value == "(":
                name = self.advance().value
                self.expect_punct("(")
                args = [self.attr()]
                while self.peek().kind == "PUNCT" and self.peek().value == ",":
                    self.advance()
                    args.append(self.attr())
                self.expect_punct(")")
                return ModelCall(name, tuple(args))
            if nxt.kind == "PUNCT" and nxt.value == ".":
                return self.attr()
            # bare identifier: attribute or enum literal, resolved at binding
            self.advance()
            return BareToken(tok.value)
        self.fail("expected operand")
        raise AssertionError  # unreachable


def parse(query_text: str) -> QueryAst:
    """Parse a query string into an (unbound) AST."""
    return _Parser(tokenize(query_text)).query()


def to_sql(ast: QueryAst) -> str:
    """Print the AST back to canonical SQL; parse(to_sql(parse(q))) == parse(q)."""
    parts = ["SELECT", ", ".join(item.sql() for item in ast.select)]
    parts += ["FROM", ast.relation.sql()]
    for join in ast.joins:
        parts.append(join.sql())
    if ast.where:
        parts += ["WHERE", " AND ".join(c.sql() for c in ast.where)]
    if ast.group_by:
        parts += ["GROUP BY", ", ".join(a.sql() for a in ast.group_by)]
    return " ".join(parts)


# --- semantic binding -------------------------------------------------------

def parse_predicate(text: str) -> Comparison:
    """Parse a single comparison (used for policy filters and tuple-taint
    predicates). Without a catalog, a bare LHS identifier is an attribute and
    a bare RHS identifier an enum-like string constant."""
    parser = _Parser(tokenize(text))
    pred = parser.predicate()
    if parser.peek().kind != "EOF":
        parser.fail("unexpected trailing input in predicate")
    lhs, rhs = pred.lhs, pred.rhs
    if isinstance(lhs, BareToken):
        lhs = AttrRef(None, lhs.name)
    if isinstance(rhs, BareToken):
        rhs = Literal(rhs.name, quoted=False)
    return Comparison(lhs, pred.op, rhs)


class Scope:
    """Alias/relation -> attribute resolution for one query."""

    def __init__(self, catalog, ast: QueryAst):
        self.catalog = catalog
        self.rels: dict[str, str] = {}  # alias or relation name -> relation name
        for ref in (ast.relation, *[j.relation for j in ast.joins]):
            if ref.name not in catalog.relations:
                raise SemanticError(f"unknown relation {ref.name}")
            self.rels[ref.alias or ref.name] = ref.name
            self.rels.setdefault(ref.name, ref.name)

    def resolve(self, ref: AttrRef) -> tuple[str, str]:
        """Return (relation, attribute) for an attribute reference."""
        if ref.qualifier is not None:
            rel = self.rels.get(ref.qualifier)
            if rel is None:
                raise SemanticError(f"unknown relation or alias {ref.qualifier}")
            if not self.catalog.relations[rel].has_attribute(ref.name):
                raise SemanticError(f"unknown attribute {ref.qualifier}.{ref.name}")
            return rel, ref.name
        matches = [
            rel
            for rel in dict.fromkeys(self.rels.values())
            if self.catalog.relations[rel].has_attribute(ref.name)
        ]
        if not matches:
            raise SemanticError(f"unknown attribute {ref.name}")
        if len(matches) > 1:
            raise SemanticError(f"ambiguous attribute {ref.name}")
        return matches[0], ref.name

    def try_resolve(self, name: str) -> Optional[tuple[str, str]]:
        try:
            return self.resolve(AttrRef(None, name))
        except SemanticError:
            return None


def bind(ast: QueryAst, catalog) -> QueryAst:
    """Resolve attribute references against the catalog.

    BareTokens become AttrRefs when they name a visible attribute, otherwise
    unquoted string literals (enum-like constants). Raises SemanticError for
    unknown relations/attributes.
    """
    scope = Scope(catalog, ast)

    def bind_operand(op: Operand) -> Operand:
        if isinstance(op, AttrRef):
            scope.resolve(op)
            return op
        if isinstance(op, BareToken):
            if scope.try_resolve(op.name) is not None:
                return AttrRef(None, op.name)
            return Literal(op.name, quoted=False)
        if isinstance(op, ModelCall):
            for arg in op.args:
                scope.resolve(arg)
            return op
        return op

    select = []
    for item in ast.select:
        if isinstance(item.expr, Star):
            select.append(item)
        elif isinstance(item.expr, BareToken):
            # the select list names attributes, never enum constants
            ref = AttrRef(None, item.expr.name)
            scope.resolve(ref)
            select.append(SelectItem(item.agg, ref))
        else:
            select.append(SelectItem(item.agg, bind_operand(item.expr)))  # type: ignore[arg-type]
    where = tuple(
        Comparison(bind_operand(c.lhs), c.op, bind_operand(c.rhs)) for c in ast.where
    )
    for join in ast.joins:
        scope.resolve(join.left)
        scope.resolve(join.right)
    for attr in ast.group_by:
        scope.resolve(attr)
    return replace(ast, select=tuple(select), where=where)
