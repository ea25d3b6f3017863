"""Sparse stochastic multi-indices, level-block indices and their weights.

A `ParamIndex` nu labels a product Legendre polynomial L_nu over the
expansion parameters; only nonzero entries are stored.  A `LevelBlockIndex`
k records, per (colored) expansion level, the total polynomial-degree change
of a stochastic interaction; the reference weights a_k (size) and b_k (cost)
drive the greedy selection of interaction blocks for operator compression.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from math import comb
from typing import NamedTuple


class ExpansionLabel(NamedTuple):
    """Identifies one expansion function theta_mu.

    level: raw level |mu|; position: index within the level;
    qlevel: colored level |mu|_Q assigned by the field's coloring.
    """
    level: int
    position: int
    qlevel: int

    def __repr__(self):
        return f"mu({self.level},{self.position};q{self.qlevel})"


def _label_key(label):
    return (label.qlevel, label.level, label.position)


class ParamIndex:
    """Finitely supported multi-index nu: labels -> positive integers."""

    __slots__ = ("entries", "_hash")

    def __init__(self, entries=()):
        items = [(lab, int(v)) for lab, v in entries if v != 0]
        for lab, v in items:
            if v < 0:
                raise ValueError(f"negative entry {v} for {lab}")
        items.sort(key=lambda e: _label_key(e[0]))
        self.entries = tuple(items)
        self._hash = hash(self.entries)

    def get(self, label):
        for lab, v in self.entries:
            if lab == label:
                return v
        return 0

    def add(self, label, delta):
        """New index with entry at `label` shifted by `delta` (may raise)."""
        d = dict(self.entries)
        d[label] = d.get(label, 0) + delta
        return ParamIndex(d.items())

    @property
    def support(self):
        return tuple(lab for lab, _ in self.entries)

    @property
    def order(self):
        """|nu|_1, the total polynomial degree."""
        return sum(v for _, v in self.entries)

    def max_level(self):
        """Largest raw level in the support (-1 if empty)."""
        return max((lab.level for lab, _ in self.entries), default=-1)

    def sort_key(self):
        return tuple((_label_key(lab), v) for lab, v in self.entries)

    def __eq__(self, other):
        return isinstance(other, ParamIndex) and self.entries == other.entries

    def __hash__(self):
        return self._hash

    def __lt__(self, other):
        return self.sort_key() < other.sort_key()

    def __repr__(self):
        if not self.entries:
            return "nu(0)"
        return "nu(" + ",".join(f"{lab}:{v}" for lab, v in self.entries) + ")"


ZERO_INDEX = ParamIndex()


class LevelBlockIndex:
    """Finitely supported k: qlevels -> positive integers."""

    __slots__ = ("entries", "_hash")

    def __init__(self, entries=()):
        items = sorted((int(l), int(v)) for l, v in entries if v != 0)
        for l, v in items:
            if l < 0 or v < 0:
                raise ValueError("invalid block entry")
        self.entries = tuple(items)
        self._hash = hash(self.entries)

    def get(self, qlevel):
        for l, v in self.entries:
            if l == qlevel:
                return v
        return 0

    @property
    def active_levels(self):
        return tuple(l for l, _ in self.entries)

    @property
    def num_active(self):
        return len(self.entries)

    @property
    def max_active(self):
        """L_k = max{l: k_l > 0}, with the empty-block convention L_0 = 0."""
        return self.entries[-1][0] if self.entries else 0

    @property
    def order(self):
        return sum(v for _, v in self.entries)

    def add(self, qlevel, delta=1):
        d = dict(self.entries)
        d[qlevel] = d.get(qlevel, 0) + delta
        return LevelBlockIndex(d.items())

    def __le__(self, other):
        return all(v <= other.get(l) for l, v in self.entries)

    def __eq__(self, other):
        return (isinstance(other, LevelBlockIndex)
                and self.entries == other.entries)

    def __hash__(self):
        return self._hash

    def __repr__(self):
        if not self.entries:
            return "k(0)"
        return "k(" + ",".join(f"{l}:{v}" for l, v in self.entries) + ")"


ZERO_BLOCK = LevelBlockIndex()


@dataclass(frozen=True)
class InteractionWeights:
    """Parameters of the reference sequences a_k, b_k.

    alpha_prime is the per-qlevel decay exponent (alpha'/Q once colored),
    rho > 1 the ellipse parameter, dim_over_q = d/Q, and t the binomial
    exponent of the polynomial-degree variant (t = 0 recovers the plain
    cost weight).
    """
    alpha_prime: float
    rho: float
    dim_over_q: float
    t: int = 0

    def __post_init__(self):
        if self.rho <= 1:
            raise ValueError("rho must be > 1")
        if self.alpha_prime <= 0:
            raise ValueError("alpha_prime must be > 0")


def weight_a(k: LevelBlockIndex, w: InteractionWeights) -> float:
    """a_k = 2^{-(d/Q) L_k} prod_l (rho 2^{alpha' l})^{-k_l}."""
    val = 2.0 ** (-w.dim_over_q * k.max_active)
    for l, v in k.entries:
        val *= (w.rho * 2.0 ** (w.alpha_prime * l)) ** (-v)
    return val


def weight_b(k: LevelBlockIndex, w: InteractionWeights) -> float:
    """b_k = 2^{#active} 2^{(d/Q) L_k}, times binom(k_l + t, t) factors."""
    val = 2.0 ** k.num_active * 2.0 ** (w.dim_over_q * k.max_active)
    if w.t > 0:
        for _, v in k.entries:
            val *= comb(v + w.t, w.t)
    return val


def _successors(k: LevelBlockIndex):
    """Frontier successors: k + e_l for l <= L_k + 1, plus the level shift
    e_{L+1} for pure unit blocks e_L (needed so every block is reachable)."""
    succ = [k.add(l) for l in range(k.max_active + 2)]
    if len(k.entries) == 1 and k.entries[0][1] == 1:
        L = k.entries[0][0]
        succ.append(LevelBlockIndex([(L + 1, 1)]))
    return succ


def greedy_block_sequence(w: InteractionWeights, budget: float,
                          max_qlevel: int | None = None):
    """Blocks ordered by nonincreasing a_k (ties: lexicographic, smallest
    first), downward closed, truncated at cumulative b-cost <= budget.

    `max_qlevel` optionally restricts blocks to levels of a finite field.
    """
    if budget < 1:
        raise ValueError("empty budget")
    heap = [(-weight_a(ZERO_BLOCK, w), ZERO_BLOCK.entries, ZERO_BLOCK)]
    seen = {ZERO_BLOCK}
    out = []
    total = 0.0
    while heap:
        neg_a, _, k = heapq.heappop(heap)
        total += weight_b(k, w)
        if total > budget:
            break
        out.append(k)
        for s in _successors(k):
            if max_qlevel is not None and s.max_active > max_qlevel:
                continue
            if s not in seen:
                seen.add(s)
                heapq.heappush(heap, (-weight_a(s, w), s.entries, s))
    return out


def enumerate_interaction_set(nu: ParamIndex, k: LevelBlockIndex, field):
    """The interaction set S_k(nu): all nu' with per-qlevel degree change
    k_l concentrated on a single function per level (disjoint same-qlevel
    supports) whose supports jointly overlap.

    `field` must provide support_chains(qlevels) yielding, per maximal
    spatial region, the tuple of active labels (one per requested qlevel).
    """
    if not k.entries:
        return [nu]
    qlevels = k.active_levels
    found = set()
    for chain in field.support_chains(qlevels):
        # chain: tuple of labels, aligned with qlevels; None if no function
        # of that qlevel is active on the region (product vanishes).
        if any(lab is None for lab in chain):
            continue
        candidates = [nu]
        for lab, l in zip(chain, qlevels):
            kl = k.get(l)
            nxt = []
            for cand in candidates:
                cur = cand.get(lab)
                nxt.append(cand.add(lab, kl))
                if cur - kl >= 0 and kl > 0:
                    nxt.append(cand.add(lab, -kl))
            candidates = nxt
        found.update(candidates)
    return sorted(found)
