"""The 27-element strategy space, the pruning principles and the recommendation matrix."""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass

from .core import Regime, ShardLevel, Strategy, parse_strategy


def enumerate_all() -> list[Strategy]:
    """All P/G/OS combinations in lexicographic N < I < G order."""
    return [Strategy(p, g, os) for p, g, os in itertools.product(ShardLevel, repeat=3)]


def passes_principle1(s: Strategy) -> bool:
    # optimizer state is sharded at least as finely as P and G
    return s.os >= s.p and s.os >= s.g


def passes_principle2(s: Strategy) -> bool:
    # coarse-to-fine chain P, G, OS; meaningful when trainable >= total/6
    return s.p <= s.g <= s.os


def passes_principle3(s: Strategy) -> bool:
    # gradients stay unsharded for PEFT
    return s.g == ShardLevel.NoShard


def filter_principle1(strategies):
    return [s for s in strategies if passes_principle1(s)]


def filter_principle2(strategies):
    return [s for s in strategies if passes_principle2(s)]


def filter_principle3(strategies):
    return [s for s in strategies if passes_principle3(s)]


_REGIME_ORDER = (Regime.Full, Regime.PartialLarge, Regime.PartialSmall, Regime.PEFT)

# Recommendation matrix, one flag per regime column in _REGIME_ORDER.  Kept
# verbatim: some cells follow dominance arguments the principles don't cover.
RECOMMENDATION_MATRIX: dict[str, tuple[bool, bool, bool, bool]] = {
    "NNN": (True, True, True, True),
    "NNI": (True, True, True, True),
    "NNG": (True, True, True, False),
    "NII": (True, True, True, False),
    "NIG": (True, True, True, False),
    "NGG": (True, True, True, False),
    "INI": (False, False, False, True),
    "ING": (False, True, True, False),
    "III": (False, False, True, False),
    "IIG": (True, True, False, False),
    "IGG": (True, True, True, False),
    "GNG": (False, True, True, True),
    "GIG": (False, True, True, False),
    "GGG": (True, True, True, False),
}

ALIASES = {"NNN": "DDP", "NNG": "ZeRO-1", "NGG": "ZeRO-2", "III": "MiCS", "GGG": "ZeRO-3"}


def parse_regime(name: str | Regime) -> Regime:
    if isinstance(name, Regime):
        return name
    key = name.strip().lower().replace("_", "-")
    aliases = {"partial": "partial-large", "small": "partial-small", "large": "partial-large"}
    key = aliases.get(key, key)
    try:
        return Regime(key)
    except ValueError:
        valid = ", ".join(r.value for r in Regime)
        raise ValueError(f"invalid regime {name!r}; expected one of: {valid}") from None


@dataclass(frozen=True)
class Recommendation:
    strategy: Strategy
    regime: Regime
    recommended: bool
    source: str = "matrix"

    @property
    def passes_p1(self) -> bool:
        return passes_principle1(self.strategy)

    @property
    def passes_p2(self) -> bool:
        return passes_principle2(self.strategy)

    @property
    def passes_p3(self) -> bool:
        return passes_principle3(self.strategy)

    def explanation(self) -> str:
        """Why the cell says what it says, and where the principles disagree."""
        s, regime = self.strategy, self.regime
        if regime is Regime.PEFT:
            predicted, rule = self.passes_p3, "principle 3 (G unsharded)"
        elif regime in (Regime.Full, Regime.PartialLarge):
            predicted, rule = self.passes_p2, "principle 2 (P >= G >= OS granularity)"
        else:
            predicted, rule = True, "principle 1 only"
        verdict = "recommended" if self.recommended else "not recommended"
        if predicted == self.recommended:
            return f"{verdict}; consistent with {rule}"
        if self.recommended:
            return f"{verdict} by the matrix although {rule} rejects {s.code}"
        return f"{verdict}: pruned by a dominance argument beyond {rule}"

    def to_row(self) -> dict:
        return {
            "code": self.strategy.code,
            "regime": self.regime.value,
            "recommended": self.recommended,
            "passes_p1": self.passes_p1,
            "passes_p2": self.passes_p2,
            "passes_p3": self.passes_p3,
        }


def recommend(regime: Regime | str) -> list[Recommendation]:
    regime = parse_regime(regime)
    col = _REGIME_ORDER.index(regime)
    return [
        Recommendation(parse_strategy(code), regime, flags[col])
        for code, flags in RECOMMENDATION_MATRIX.items()
    ]


def recommendation_rows(regimes=None) -> list[dict]:
    regimes = [parse_regime(r) for r in (regimes or _REGIME_ORDER)]
    return [rec.to_row() for regime in regimes for rec in recommend(regime)]


def export_json(regimes=None) -> str:
    return json.dumps(recommendation_rows(regimes), indent=2)


def export_csv(regimes=None) -> str:
    rows = recommendation_rows(regimes)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
