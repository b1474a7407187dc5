"""RPT group patterns: small typed graphs whose instances drive the model.

The five bundled patterns are chains of person/company/item roles joined by
investment, transaction, and item-trade relations; each designates one company
role as the anchor whose embedding the matched instances feed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .errors import PatternTypeUnknown
from .hetgraph import Schema


@dataclass(frozen=True)
class RptPattern:
    pattern_id: str
    roles: tuple[tuple[str, str], ...]        # (role name, node type), canonical order
    edges: tuple[tuple[str, str, str], ...]   # (source role, target role, edge type)
    anchor: str                               # company role fed by instances

    def __post_init__(self):
        names = [r for r, _ in self.roles]
        if len(set(names)) != len(names):
            raise PatternTypeUnknown(f"pattern {self.pattern_id!r}: duplicate role names")
        if self.anchor not in names:
            raise PatternTypeUnknown(
                f"pattern {self.pattern_id!r}: anchor {self.anchor!r} is not a role"
            )
        for s, t, _ in self.edges:
            if s not in names or t not in names:
                raise PatternTypeUnknown(
                    f"pattern {self.pattern_id!r}: edge ({s!r}, {t!r}) uses unknown roles"
                )
        if not self._connected():
            raise PatternTypeUnknown(f"pattern {self.pattern_id!r}: roles must be connected")

    def _connected(self) -> bool:
        if len(self.roles) <= 1:
            return True
        adj: dict[str, set[str]] = {r: set() for r, _ in self.roles}
        for s, t, _ in self.edges:
            adj[s].add(t)
            adj[t].add(s)
        seen = {self.roles[0][0]}
        frontier = [self.roles[0][0]]
        while frontier:
            cur = frontier.pop()
            for nxt in adj[cur]:
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        return len(seen) == len(self.roles)

    @property
    def role_names(self) -> tuple[str, ...]:
        return tuple(r for r, _ in self.roles)

    def role_type(self, role: str) -> str:
        for r, t in self.roles:
            if r == role:
                return t
        raise KeyError(role)

    def anchor_first_roles(self) -> tuple[tuple[str, str], ...]:
        """Roles with the anchor moved to the front, remainder in canonical order."""
        rest = tuple(rt for rt in self.roles if rt[0] != self.anchor)
        return ((self.anchor, self.role_type(self.anchor)),) + rest


def validate_pattern(pattern: RptPattern, schema: Schema) -> None:
    """Check that every role and edge type exists and the anchor is a company role."""
    for role, rtype in pattern.roles:
        if rtype not in schema.node_types:
            raise PatternTypeUnknown(
                f"pattern {pattern.pattern_id!r}: role {role!r} has unknown type {rtype!r}"
            )
    for s, t, etype in pattern.edges:
        if etype not in schema.edge_types:
            raise PatternTypeUnknown(
                f"pattern {pattern.pattern_id!r}: unknown edge type {etype!r}"
            )
        et = schema.edge_types[etype]
        st, tt = pattern.role_type(s), pattern.role_type(t)
        if (st, tt) != (et.source, et.target):
            raise PatternTypeUnknown(
                f"pattern {pattern.pattern_id!r}: edge type {etype!r} expects "
                f"({et.source} -> {et.target}), got ({st} -> {tt})"
            )
    if pattern.role_type(pattern.anchor) != schema.company_type:
        raise PatternTypeUnknown(
            f"pattern {pattern.pattern_id!r}: anchor must be of type "
            f"{schema.company_type!r}"
        )


def pattern_applies(pattern: RptPattern, schema: Schema) -> bool:
    try:
        validate_pattern(pattern, schema)
    except PatternTypeUnknown:
        return False
    return True


def applicable_patterns(patterns, schema: Schema) -> list[RptPattern]:
    """Keep patterns whose node/edge types exist in the schema; skip the rest."""
    return [p for p in patterns if pattern_applies(p, schema)]


def bundled_patterns() -> list[RptPattern]:
    """The five default company-relationship patterns shipped with the package."""
    return [
        RptPattern(
            "PCCP",
            roles=(("p1", "person"), ("c1", "company"), ("c2", "company"), ("p2", "person")),
            edges=(("p1", "c1", "invest"), ("c1", "c2", "transaction"), ("p2", "c2", "invest")),
            anchor="c1",
        ),
        RptPattern(
            "PCCCP",
            roles=(("p1", "person"), ("c1", "company"), ("c2", "company"),
                   ("c3", "company"), ("p2", "person")),
            edges=(("p1", "c1", "invest"), ("c1", "c2", "transaction"),
                   ("c2", "c3", "transaction"), ("p2", "c3", "invest")),
            anchor="c1",
        ),
        RptPattern(
            "PCICP",
            roles=(("p1", "person"), ("c1", "company"), ("i1", "item"),
                   ("c2", "company"), ("p2", "person")),
            edges=(("p1", "c1", "invest"), ("c1", "i1", "sell"),
                   ("c2", "i1", "buy"), ("p2", "c2", "invest")),
            anchor="c1",
        ),
        RptPattern(
            "PCPCP",
            roles=(("p1", "person"), ("c1", "company"), ("p2", "person"),
                   ("c2", "company"), ("p3", "person")),
            edges=(("p1", "c1", "invest"), ("p2", "c1", "invest"),
                   ("p2", "c2", "invest"), ("p3", "c2", "invest")),
            anchor="c1",
        ),
        RptPattern(
            "PCPCCP",
            roles=(("p1", "person"), ("c1", "company"), ("p2", "person"),
                   ("c2", "company"), ("c3", "company"), ("p3", "person")),
            edges=(("p1", "c1", "invest"), ("p2", "c1", "invest"),
                   ("p2", "c2", "invest"), ("c2", "c3", "transaction"),
                   ("p3", "c3", "invest")),
            anchor="c1",
        ),
    ]


BUNDLED_METAPATHS: dict[str, list[str]] = {
    "CC": ["company", "transaction", "company"],
    "CPC": ["company", "invest", "person", "invest", "company"],
    "CIC": ["company", "sell", "item", "buy", "company"],
}


def load_patterns(path: str | os.PathLike) -> list[RptPattern]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    out = []
    for spec in raw["patterns"]:
        out.append(RptPattern(
            pattern_id=spec["id"],
            roles=tuple((r, t) for r, t in spec["roles"]),
            edges=tuple((s, t, e) for s, t, e in spec["edges"]),
            anchor=spec["anchor"],
        ))
    return out


def save_patterns(patterns, path: str | os.PathLike) -> None:
    raw = {"patterns": [
        {
            "id": p.pattern_id,
            "anchor": p.anchor,
            "roles": [list(rt) for rt in p.roles],
            "edges": [list(e) for e in p.edges],
        }
        for p in patterns
    ]}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(raw, fh, indent=2)
        fh.write("\n")
