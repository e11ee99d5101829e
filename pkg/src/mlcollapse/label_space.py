"""Multi-label count tables grouped by label-set size (multiplicity).

A :class:`LabelDistribution` stores the integer count ``r[m, S]`` of training
samples whose label set is ``S`` (with ``|S| = m``).  Everything the theory
needs from the data, group totals ``N_m``, per-class group counts ``N_m^k``,
empirical label-set probabilities and the worst-set rarity term, is derived
from that table.  Counts stay integers so the counting identities are exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DegenerateDistributionError, UnknownMultiplicityError

LabelSet = tuple[int, ...]


def make_label_set(classes: Iterable[int], K: int) -> LabelSet:
    """Validate and normalise a label set to a sorted tuple.

    Duplicated class indices are rejected rather than silently dropped.
    """
    items = [int(c) for c in classes]
    s = tuple(sorted(items))
    if not s:
        raise ConfigError("label set must be nonempty")
    if len(set(s)) != len(s):
        raise ConfigError(f"label set {items} contains repeated classes")
    if s[0] < 0 or s[-1] >= K:
        raise ConfigError(f"label set {items} has indices outside [0, {K})")
    if len(s) > K - 1:
        raise ConfigError(f"label set {items} has size {len(s)} > K-1 = {K - 1}")
    return s


@dataclass(frozen=True)
class LabelDistribution:
    """Immutable table ``{(m, S): r_{m,S}}`` over ``K`` classes."""

    K: int
    counts: Mapping[tuple[int, LabelSet], int]
    _by_m: dict[int, dict[LabelSet, int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if int(self.K) != self.K or self.K < 2:
            raise ConfigError(f"K must be an integer >= 2, got {self.K!r}")
        by_m: dict[int, dict[LabelSet, int]] = {}
        clean: dict[tuple[int, LabelSet], int] = {}
        for key, r in self.counts.items():
            m, S = key
            S_norm = make_label_set(S, self.K)
            if len(S_norm) != m:
                raise ConfigError(f"label set {list(S)} keyed under m={m} has size {len(S_norm)}")
            if isinstance(r, bool) or int(r) != r or r < 0:
                raise ConfigError(f"count for {list(S)} must be a nonnegative integer, got {r!r}")
            if (m, S_norm) in clean:
                raise ConfigError(f"duplicate label set {list(S_norm)} at m={m}")
            clean[(m, S_norm)] = int(r)
            by_m.setdefault(m, {})[S_norm] = int(r)
        if not clean:
            raise ConfigError("count table is empty")
        for m, table in by_m.items():
            if sum(table.values()) <= 0:
                raise ConfigError(f"multiplicity group m={m} has zero total count")
        ordered = {k: clean[k] for k in sorted(clean)}
        object.__setattr__(self, "counts", ordered)
        object.__setattr__(self, "_by_m", {m: dict(sorted(by_m[m].items())) for m in sorted(by_m)})

    # -- basic accessors -------------------------------------------------

    @property
    def multiplicities(self) -> list[int]:
        return list(self._by_m)

    @property
    def M(self) -> int:
        return max(self._by_m)

    @property
    def N(self) -> int:
        return sum(self.counts.values())

    def group(self, m: int) -> dict[LabelSet, int]:
        """Label sets of multiplicity ``m`` with their counts (sorted by set)."""
        try:
            return self._by_m[m]
        except KeyError:
            raise UnknownMultiplicityError(
                f"multiplicity m={m} not present (have {self.multiplicities})"
            ) from None

    def count(self, m: int, S: Iterable[int]) -> int:
        return self.group(m).get(tuple(sorted(S)), 0)

    def probabilities(self, m: int) -> dict[LabelSet, float]:
        """Empirical ``p_{m,S} = r_{m,S} / N_m``."""
        table = self.group(m)
        total = sum(table.values())
        return {S: r / total for S, r in table.items()}

    def is_nondegenerate(self, m: int | None = None) -> bool:
        ms = self.multiplicities if m is None else [m]
        return all(np.all(class_counts(self, mm) > 0) for mm in ms)

    def missing_classes(self, m: int) -> list[int]:
        return [int(k) for k in np.flatnonzero(class_counts(self, m) == 0)]

    def permuted(self, perm: Sequence[int]) -> "LabelDistribution":
        """Relabel class ``k`` as ``perm[k]``."""
        if sorted(perm) != list(range(self.K)):
            raise ConfigError("perm must be a permutation of range(K)")
        return LabelDistribution(
            self.K, {(m, tuple(sorted(perm[k] for k in S))): r for (m, S), r in self.counts.items()}
        )

    # -- serialisation ---------------------------------------------------

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "K": self.K,
            "groups": [
                {"m": m, "sets": [{"classes": list(S), "count": r} for S, r in table.items()]}
                for m, table in self._by_m.items()
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping[str, Any], *, where: str = "table") -> "LabelDistribution":
        """Parse the ``{"K", "groups": [{"m", "sets": [{"classes", "count"}]}]}`` document."""
        if not isinstance(doc, Mapping):
            raise ConfigError(f"{where}: expected an object")
        if "K" not in doc or "groups" not in doc:
            raise ConfigError(f"{where}: requires keys 'K' and 'groups'")
        K = doc["K"]
        if isinstance(K, bool) or not isinstance(K, int):
            raise ConfigError(f"{where}.K: expected an integer, got {K!r}")
        counts: dict[tuple[int, LabelSet], int] = {}
        for gi, grp in enumerate(doc["groups"]):
            gwhere = f"{where}.groups[{gi}]"
            try:
                m = grp["m"]
                sets = grp["sets"]
            except (KeyError, TypeError):
                raise ConfigError(f"{gwhere}: requires keys 'm' and 'sets'") from None
            if isinstance(m, bool) or not isinstance(m, int) or m < 1:
                raise ConfigError(f"{gwhere}.m: expected a positive integer, got {m!r}")
            for si, entry in enumerate(sets):
                swhere = f"{gwhere}.sets[{si}]"
                try:
                    S = make_label_set(entry["classes"], K)
                    r = entry["count"]
                except (KeyError, TypeError):
                    raise ConfigError(f"{swhere}: requires keys 'classes' and 'count'") from None
                except ConfigError as exc:
                    raise ConfigError(f"{swhere}: {exc}") from None
                if len(S) != m:
                    raise ConfigError(f"{swhere}: set {list(S)} has size {len(S)}, group m={m}")
                if (m, S) in counts:
                    raise ConfigError(f"{swhere}: duplicate label set {list(S)}")
                if isinstance(r, bool) or not isinstance(r, int) or r < 0:
                    raise ConfigError(f"{swhere}.count: expected a nonnegative integer, got {r!r}")
                counts[(m, S)] = r
        try:
            return cls(K, counts)
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "LabelDistribution":
        text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
        return cls.from_json_dict(doc, where=str(path))


def group_total(dist: LabelDistribution, m: int) -> int:
    """``N_m``: number of samples with a label set of size ``m``."""
    return sum(dist.group(m).values())


def class_counts(dist: LabelDistribution, m: int) -> np.ndarray:
    """``N_m^k`` for every class ``k``, as an integer vector of length ``K``."""
    out = np.zeros(dist.K, dtype=np.int64)
    for S, r in dist.group(m).items():
        out[list(S)] += r
    return out


def worst_set_term(dist: LabelDistribution, m: int) -> float:
    """Max over all size-``m`` subsets of ``sum_{j in S} 1/N_m^j``.

    The max ranges over every subset, present in the data or not, so it is
    just the sum of the ``m`` largest reciprocal class counts.
    """
    Nk = class_counts(dist, m)
    if np.any(Nk == 0):
        raise DegenerateDistributionError(
            f"classes {dist.missing_classes(m)} never occur at multiplicity m={m}"
        )
    recip = np.sort(1.0 / Nk.astype(np.float64))[::-1]
    return float(math.fsum(recip[:m]))


# -- scenario generators ---------------------------------------------------


def _check_int(name: str, v: Any, lo: int) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < lo:
        raise ConfigError(f"scenario.{name}: expected an integer >= {lo}, got {v!r}")
    return int(v)


def _pairs_table(K: int, n2: int) -> dict[tuple[int, LabelSet], int]:
    return {(2, S): n2 for S in combinations(range(K), 2)} if n2 > 0 else {}


def balanced(K: int, n1: int, n2: int = 0) -> LabelDistribution:
    """``n1`` samples per singleton and ``n2`` per unordered class pair."""
    K = _check_int("K", K, 2)
    n1 = _check_int("n1", n1, 1)
    n2 = _check_int("n2", n2, 0)
    if n2 > 0 and K < 3:
        raise ConfigError("scenario: pairs require K >= 3 so that m=2 <= K-1")
    counts = {(1, (k,)): n1 for k in range(K)}
    counts.update(_pairs_table(K, n2))
    return LabelDistribution(K, counts)


def multiplicity_one_imbalance(
    K: int,
    n1: int,
    n2: int = 0,
    ratio: float = 0.1,
    subset: Sequence[int] | None = None,
) -> LabelDistribution:
    """Downsample the singleton counts of ``subset`` to ``floor(ratio * n1)``.

    Pair counts are untouched.  ``subset`` defaults to the upper half of the
    classes, ``K//2 .. K-1``.
    """
    base = balanced(K, n1, n2)
    if not (0.0 < float(ratio) <= 1.0):
        raise ConfigError(f"scenario.ratio must lie in (0, 1], got {ratio!r}")
    chosen = list(range(K // 2, K)) if subset is None else [int(k) for k in subset]
    if not chosen:
        raise ConfigError("scenario.subset must be nonempty")
    if any(k < 0 or k >= K for k in chosen) or len(set(chosen)) != len(chosen):
        raise ConfigError(f"scenario.subset {chosen} must hold distinct classes in [0, {K})")
    # decimal ratios such as 0.2 must hit 3100 * 0.2 = 620 exactly
    frac = Fraction(str(ratio)) if isinstance(ratio, float) else Fraction(ratio)
    reduced = math.floor(frac * n1)
    counts = dict(base.counts)
    for k in chosen:
        counts[(1, (k,))] = reduced
    return LabelDistribution(K, counts)


def scenario(kind: str, params: Mapping[str, Any]) -> LabelDistribution:
    """Build a distribution from a named scenario.

    ``balanced``: ``K, n1, n2``.  ``multiplicity_one_imbalance``: additionally
    ``ratio`` and optional ``subset``.  ``custom``: ``table`` holding the JSON
    count-table document (or ``path`` pointing at one).
    """
    p = dict(params)
    try:
        if kind == "balanced":
            return balanced(p["K"], p["n1"], p.get("n2", 0))
        if kind == "multiplicity_one_imbalance":
            return multiplicity_one_imbalance(
                p["K"], p["n1"], p.get("n2", 0), p.get("ratio", 0.1), p.get("subset")
            )
        if kind == "custom":
            if "table" in p:
                return LabelDistribution.from_json_dict(p["table"], where="scenario.table")
            if "path" in p:
                return LabelDistribution.load(p["path"])
            raise ConfigError("scenario: custom kind requires 'table' or 'path'")
    except KeyError as exc:
        raise ConfigError(f"scenario: missing parameter {exc.args[0]!r} for kind {kind!r}") from None
    raise ConfigError(
        f"scenario.kind: unknown kind {kind!r} (expected balanced, multiplicity_one_imbalance, custom)"
    )


def random_distribution(
    rng: np.random.Generator,
    K: int,
    ms: Sequence[int],
    *,
    max_count: int = 20,
    density: float = 0.7,
) -> LabelDistribution:
    """Random sparse count table, used by property tests and the verify suite.

    Every class is guaranteed to appear in each requested multiplicity group.
    """
    counts: dict[tuple[int, LabelSet], int] = {}
    for m in ms:
        sets = list(combinations(range(K), m))
        keep = rng.random(len(sets)) < density
        for S, k in zip(sets, keep):
            if k:
                counts[(m, S)] = int(rng.integers(1, max_count + 1))
        covered = set().union(*[set(S) for (mm, S) in counts if mm == m])
        for c in range(K):
            if c not in covered:
                others = [j for j in range(K) if j != c]
                extra = rng.choice(others, size=m - 1, replace=False) if m > 1 else []
                S = tuple(sorted([c, *map(int, extra)]))
                counts[(m, S)] = counts.get((m, S), 0) + int(rng.integers(1, max_count + 1))
                covered.update(S)
    return LabelDistribution(K, counts)
